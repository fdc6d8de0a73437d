//! Fast (within-pool) and slow (held-out) attention predictors, and the
//! per-item rewards they feed.

use crate::diff::{lstm_cell, Tape, Tensor, UnaryOp, Var, COSINE_EPS};
use crate::episodes::Label;
use crate::error::{Error, Result};
use crate::model::{Ablation, LabelSpace, Model};
use crate::policy::{argmax, SupportPartition};

/// Log-probabilities are clipped below at ln(1e-12).
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct FastVars {
    /// `|unknown| × C` predictions, ordered like `partition.unknown`.
    pub pred: Var,
    /// `|unknown| × |known|` attention weights.
    pub attn: Var,
    /// `|unknown| × 1` sharpening scores γ.
    pub gamma: Var,
}

/// For each unlabeled item, attention over labeled items by
/// softmax(γᵢ · cos(x″ᵢ, x″ⱼ)) with γᵢ = exp(x″ᵢᵀ W_γ h), and a convex
/// combination of their label rows. `targets` holds one row per known item
/// in `partition.known` order.
pub fn fast_predict(
    tape: &mut Tape,
    model: &Model,
    x2: Var,
    sim: Var,
    partition: &SupportPartition,
    targets: Var,
    h: Var,
    ablation: &Ablation,
) -> Result<FastVars> {
    if partition.known.is_empty() {
        return Err(Error::NoEvidence);
    }
    if partition.unknown.is_empty() {
        return Err(Error::PoolExhausted);
    }
    let rows = tape.gather_rows(sim, &partition.unknown);
    let cos = tape.gather_cols(rows, &partition.known);
    let gamma = if ablation.fixed_gamma {
        tape.constant(Tensor::filled(&[partition.unknown.len(), 1], 1.0))
    } else {
        let xu = tape.gather_rows(x2, &partition.unknown);
        let q = model.layout.w_gamma.forward(tape, h);
        let s = tape.matmul_t(xu, q);
        tape.exp(s)
    };
    let logits = tape.mul(cos, gamma);
    let attn = tape.softmax(logits);
    let pred = tape.matmul(attn, targets);
    Ok(FastVars { pred, attn, gamma })
}

#[derive(Clone, Copy, Debug)]
pub struct SlowVars {
    /// `m × C` predictions ỹ_K.
    pub pred: Var,
    /// Final-step attention ã_K over known items, `m × |known|`.
    pub attn: Var,
}

/// Iterative matching for held-out items:
/// m_k = LSTM(m_{k−1}, [x̃_{k−1}; x̂′; h]), x̂″ = x̂′ + W_m m_k,
/// ã_k = softmax(cos(x̂″, x″_known)), (x̃_k, ỹ_k) = ã_k·(x″_known, labels).
/// m₀ and x̃₀ are zero.
pub fn slow_predict(
    tape: &mut Tape,
    model: &Model,
    xe: Var,
    x2: Var,
    partition: &SupportPartition,
    targets: Var,
    h: Var,
    steps: usize,
) -> Result<SlowVars> {
    if partition.known.is_empty() {
        return Err(Error::NoEvidence);
    }
    if steps == 0 {
        return Err(Error::contract("slow prediction needs at least one matching step"));
    }
    let lay = &model.layout;
    let (m, d) = {
        let t = tape.value(xe);
        (t.rows(), t.cols())
    };
    let hd = model.config.hidden_dim;
    let xk = tape.gather_rows(x2, &partition.known);
    let hr = tape.repeat_rows(h, m);
    let mut state = tape.constant(Tensor::zeros(&[m, hd]));
    let mut cell = state;
    let mut x_tilde = tape.constant(Tensor::zeros(&[m, d]));
    let scale = lay.slow_log_scale.map(|p| {
        let s = tape.param(p);
        tape.exp(s)
    });
    let mut out = None;
    for _ in 0..steps {
        let inp = tape.concat_cols(&[x_tilde, xe, hr]);
        (state, cell) = lstm_cell(tape, state, cell, inp, &lay.matcher)?;
        let delta = lay.w_m.forward(tape, state);
        let xm = tape.add(xe, delta);
        let mut cos = tape.cosine(xm, xk, COSINE_EPS);
        if let Some(s) = scale {
            cos = tape.mul(cos, s);
        }
        let attn = tape.softmax(cos);
        x_tilde = tape.matmul(attn, xk);
        let pred = tape.matmul(attn, targets);
        out = Some(SlowVars { pred, attn });
    }
    Ok(out.expect("steps ≥ 1"))
}

/// Mean reward over prediction rows as a scalar tape node: mean log-probability
/// of the true class (clipped) or mean negative squared error.
pub fn reward_graph(tape: &mut Tape, pred: Var, truths: &[Label], labels: &LabelSpace) -> Result<Var> {
    let rows = tape.value(pred).rows();
    if rows != truths.len() {
        return Err(Error::contract(format!(
            "{rows} predictions for {} truths",
            truths.len()
        )));
    }
    match labels {
        LabelSpace::Classes(n) => {
            let idx = class_indices(truths, *n)?;
            let p = tape.pick_per_row(pred, &idx);
            let lp = tape.unary(UnaryOp::LogClamp(PROB_FLOOR), p);
            Ok(tape.mean(lp))
        }
        LabelSpace::Ratings(_) => {
            let y = tape.constant(Tensor::column(truths.iter().map(Label::value).collect()));
            let e = tape.sub(pred, y);
            let e2 = tape.square(e);
            let m = tape.mean(e2);
            Ok(tape.neg(m))
        }
    }
}

fn class_indices(truths: &[Label], n: usize) -> Result<Vec<usize>> {
    truths
        .iter()
        .map(|t| match t {
            Label::Class(c) if *c < n => Ok(*c),
            other => Err(Error::contract(format!("truth {other:?} is not a class below {n}"))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardRecord {
    pub terms: Vec<f64>,
    pub mean: f64,
    /// Root mean squared error, for rating tasks.
    pub rmse: Option<f64>,
}

/// Value-level rewards matching [`reward_graph`].
pub fn reward(pred: &Tensor, truths: &[Label], labels: &LabelSpace) -> Result<RewardRecord> {
    if pred.rows() != truths.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} truths",
            pred.rows(),
            truths.len()
        )));
    }
    let (terms, rmse): (Vec<f64>, _) = match labels {
        LabelSpace::Classes(n) => {
            if pred.cols() != *n {
                return Err(Error::contract(format!(
                    "prediction width {} for {n} classes",
                    pred.cols()
                )));
            }
            let idx = class_indices(truths, *n)?;
            let terms = idx
                .iter()
                .enumerate()
                .map(|(r, &c)| pred.get(r, c).max(PROB_FLOOR).ln())
                .collect();
            (terms, None)
        }
        LabelSpace::Ratings(_) => {
            let terms: Vec<f64> = truths
                .iter()
                .enumerate()
                .map(|(r, t)| -(pred.get(r, 0) - t.value()).powi(2))
                .collect();
            let mse = -terms.iter().sum::<f64>() / terms.len().max(1) as f64;
            (terms, Some(mse.sqrt()))
        }
    };
    let mean = terms.iter().sum::<f64>() / terms.len().max(1) as f64;
    Ok(RewardRecord { terms, mean, rmse })
}

/// Fraction of rows whose argmax (lowest index on ties) is the true class.
pub fn accuracy(pred: &Tensor, truths: &[Label]) -> f64 {
    if truths.is_empty() {
        return 0.0;
    }
    let hits = truths
        .iter()
        .enumerate()
        .filter(|(r, t)| t.class() == Some(argmax(pred.row_slice(*r))))
        .count();
    hits as f64 / truths.len() as f64
}

/// Task metric on a prediction block: accuracy for classes, RMSE for ratings.
pub fn task_metric(pred: &Tensor, truths: &[Label], labels: &LabelSpace) -> Result<f64> {
    match labels {
        LabelSpace::Classes(_) => Ok(accuracy(pred, truths)),
        LabelSpace::Ratings(_) => Ok(reward(pred, truths, labels)?.rmse.unwrap_or(0.0)),
    }
}
