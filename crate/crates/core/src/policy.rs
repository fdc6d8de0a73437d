//! Reading a revealed item, the controller update, and the selection module.

use crate::diff::{lstm_cell, sim_row_features, softmax_into, Tape, Tensor, Var};
use crate::episodes::Label;
use crate::error::{Error, Result};
use crate::model::{Model, SIM_FEATURES};
use rand::Rng;

/// Labeled and unlabeled support indices at one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportPartition {
    /// Revealed indices in the order they were queried.
    pub known: Vec<usize>,
    /// Remaining indices, ascending.
    pub unknown: Vec<usize>,
}

impl SupportPartition {
    pub fn new(n: usize) -> Self {
        Self {
            known: Vec::new(),
            unknown: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.known.len() + self.unknown.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self) -> usize {
        self.known.len()
    }

    pub fn is_known(&self, i: usize) -> bool {
        self.known.contains(&i)
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for &k in &self.known {
            m[k] = true;
        }
        m
    }

    /// Moves `i` from unknown to known.
    pub fn reveal(&mut self, i: usize) -> Result<()> {
        let pos = self
            .unknown
            .iter()
            .position(|&u| u == i)
            .ok_or_else(|| Error::contract(format!("item {i} is not in the unlabeled pool")))?;
        self.unknown.remove(pos);
        self.known.push(i);
        Ok(())
    }
}

/// Controller state as plain values, for stepping outside a training tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ControlState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[1, hidden]),
            c: Tensor::zeros(&[1, hidden]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    /// Highest probability, lowest index on ties.
    Argmax,
}

/// r_t = W[x″ᵢ; enc(yᵢ)] + b. `label` is `None` while the item is still hidden.
pub fn read(tape: &mut Tape, model: &Model, x2_row: Var, label: Option<&Label>) -> Result<Var> {
    let label = label.ok_or_else(|| Error::contract("cannot read an item whose label is hidden"))?;
    let enc = model.config.labels.read_encoding(label)?;
    let y = tape.constant(Tensor::row(enc));
    let inp = tape.concat_cols(&[x2_row, y]);
    Ok(model.layout.read.forward(tape, inp))
}

/// hₜ = LSTM(hₜ₋₁, rₜ) with layer-normalized pre-activations.
pub fn controller_update(tape: &mut Tape, model: &Model, h: Var, c: Var, r: Var) -> Result<(Var, Var)> {
    lstm_cell(tape, h, c, r, &model.layout.controller)
}

/// Value head V(hₜ).
pub fn value_estimate(tape: &mut Tape, model: &Model, h: Var) -> Var {
    model.layout.value.forward(tape, h)
}

/// `[max, mean, min]` cosine of item `i` to labeled items, then to unlabeled
/// items other than `i`. Empty groups give zeros.
pub fn item_item_features(i: usize, partition: &SupportPartition, sim: &Tensor) -> [f64; 6] {
    sim_row_features(sim.row_slice(i), i, &partition.mask())
}

/// Tape handles for one selection step.
#[derive(Clone, Copy, Debug)]
pub struct SelectionVars {
    /// `1 × |unknown|` logits, ordered like `partition.unknown`.
    pub logits: Var,
    pub log_probs: Var,
    /// `1 × (d + 6)` gate σ(W_g h).
    pub gate: Var,
    /// `n × (d + 6)` feature rows dⁱ for every support item.
    pub features: Var,
}

/// pⁱ = (g ⊙ dⁱ)ᵀ w_p with dⁱ = [x″ᵢ ⊙ W_b h; item-item features],
/// normalized over the unlabeled items only.
pub fn selection_graph(
    tape: &mut Tape,
    model: &Model,
    x2: Var,
    sim: Var,
    partition: &SupportPartition,
    h: Var,
) -> Result<SelectionVars> {
    if partition.unknown.is_empty() {
        return Err(Error::PoolExhausted);
    }
    let lay = &model.layout;
    let wb = lay.w_b.forward(tape, h);
    let b = tape.mul(x2, wb);
    let f = tape.sim_features(sim, &partition.mask());
    let features = tape.concat_cols(&[b, f]);
    let g = lay.w_g.forward(tape, h);
    let gate = tape.sigmoid(g);
    let wp = tape.param(lay.w_p);
    let gw = tape.mul(gate, wp);
    let all = tape.matmul_t(gw, features);
    let logits = tape.gather_cols(all, &partition.unknown);
    let log_probs = tape.log_softmax(logits);
    Ok(SelectionVars {
        logits,
        log_probs,
        gate,
        features,
    })
}

/// Position (into the probability vector) chosen by `mode`.
pub fn choose<R: Rng + ?Sized>(probs: &[f64], mode: SelectMode, rng: &mut R) -> usize {
    match mode {
        SelectMode::Argmax => argmax(probs),
        SelectMode::Sample => sample_index(probs, rng),
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a normalized weight vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave u just above the total; fall back to the last
    // index with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Normalized selection probabilities over `partition.unknown`, plus the
/// inputs that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionDistribution {
    pub items: Vec<usize>,
    pub probs: Vec<f64>,
    pub gate: Vec<f64>,
    /// Feature rows for `items`, each of width d + 6.
    pub features: Vec<Vec<f64>>,
}

/// Value-level selection: returns the chosen support index, the distribution
/// and the log-probability of the choice.
#[allow(clippy::too_many_arguments)]
pub fn select<R: Rng + ?Sized>(
    model: &Model,
    x2: &Tensor,
    sim: &Tensor,
    partition: &SupportPartition,
    h: &Tensor,
    mode: SelectMode,
    rng: &mut R,
) -> Result<(usize, SelectionDistribution, f64)> {
    let mut tape = Tape::new(&model.params);
    let (xv, sv, hv) = (
        tape.constant(x2.clone()),
        tape.constant(sim.clone()),
        tape.constant(h.clone()),
    );
    let sel = selection_graph(&mut tape, model, xv, sv, partition, hv)?;
    tape.check()?;
    let logits = tape.value(sel.logits).data().to_vec();
    let mut probs = vec![0.0; logits.len()];
    softmax_into(&logits, &mut probs);
    let pos = choose(&probs, mode, rng);
    let log_prob = tape.value(sel.log_probs).data()[pos];
    let feats = tape.value(sel.features);
    let features = partition.unknown.iter().map(|&i| feats.row_slice(i).to_vec()).collect();
    let dist = SelectionDistribution {
        items: partition.unknown.clone(),
        probs,
        gate: tape.value(sel.gate).data().to_vec(),
        features,
    };
    debug_assert_eq!(dist.gate.len(), model.config.embed_dim + SIM_FEATURES);
    Ok((partition.unknown[pos], dist, log_prob))
}
