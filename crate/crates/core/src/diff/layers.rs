//! Weight-normalized linear maps, layer normalization and the LSTM cell.

use super::params::{ParamId, ParamStore};
use super::tape::{norm, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

pub const COSINE_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Weight-normalized matrix: effective rows are `g_i · v_i / ‖v_i‖`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WnWeight {
    pub v: ParamId,
    pub g: ParamId,
}

impl WnWeight {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let v = Tensor::randn(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), rng);
        let norms: Vec<f64> = (0..out_dim).map(|r| norm(v.row_slice(r))).collect();
        let v = store.add(format!("{name}.v"), v);
        let g = store.add(format!("{name}.g"), Tensor::column(norms));
        Self { v, g }
    }

    /// Effective weight matrix, built once per tape.
    pub fn weight(&self, tape: &mut Tape) -> Var {
        let (v, g) = (self.v, self.g);
        tape.memoized((v, 0), |t| {
            let v = t.param(v);
            let g = t.param(g);
            let n = t.row_norm(v);
            let dir = t.div(v, n);
            t.mul(dir, g)
        })
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.v).rows()
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.v).cols()
    }
}

/// Weight-normalized affine map with gain and bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WnLinear {
    pub w: WnWeight,
    pub b: ParamId,
}

impl WnLinear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = WnWeight::new(store, name, in_dim, out_dim, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, out_dim]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = self.w.weight(tape);
        let b = tape.param(self.b);
        let y = tape.matmul_t(x, w);
        tape.add(y, b)
    }
}

/// `(g ⊙ (v·x)/‖v_row‖) + b` for each row of `x`.
///
/// Fails with a numeric fault when any row of `v` has norm below 1e-12.
pub fn wn_linear(tape: &mut Tape, x: Var, v: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.row_norm(v);
    if let Some(i) = tape.value(n).data().iter().position(|&r| r < 1e-12) {
        return Err(Error::numeric(
            "wn_linear",
            format!("row {i} of v has norm below 1e-12"),
        ));
    }
    let dir = tape.div(v, n);
    let w = tape.mul(dir, g);
    let y = tape.matmul_t(x, w);
    Ok(tape.add(y, b))
}

/// Row-wise layer normalization with gain and bias.
pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
    let z = tape.normalize(x, eps);
    let z = tape.mul(z, gain);
    tape.add(z, bias)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        layer_norm(tape, x, g, b, LAYER_NORM_EPS)
    }
}

/// LSTM cell whose input-to-hidden and hidden-to-hidden pre-activations are
/// layer-normalized separately before the shared bias and gating.
/// Gate layout along the 4H axis: input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input: WnWeight,
    pub recurrent: WnWeight,
    pub bias: ParamId,
    pub ln: Option<(LayerNormParams, LayerNormParams)>,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let input = WnWeight::new(store, &format!("{name}.wx"), in_dim, 4 * hidden, rng);
        let recurrent = WnWeight::new(store, &format!("{name}.wh"), hidden, 4 * hidden, rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.b"), Tensor::row(b));
        let ln = layer_norm.then(|| {
            (
                LayerNormParams::new(store, &format!("{name}.ln_x"), 4 * hidden),
                LayerNormParams::new(store, &format!("{name}.ln_h"), 4 * hidden),
            )
        });
        Self {
            input,
            recurrent,
            bias,
            ln,
            hidden,
        }
    }
}

/// One LSTM step over a batch of rows. Returns `(h, c)`.
pub fn lstm_cell(tape: &mut Tape, h_prev: Var, c_prev: Var, input: Var, cell: &LstmCell) -> Result<(Var, Var)> {
    let hd = cell.hidden;
    let (rows, in_cols) = {
        let t = tape.value(input);
        (t.rows(), t.cols())
    };
    let expected_in = tape.params().get(cell.input.v).cols();
    if in_cols != expected_in {
        return Err(Error::contract(format!(
            "lstm input width {in_cols}, expected {expected_in}"
        )));
    }
    for (what, v) in [("hidden", h_prev), ("memory", c_prev)] {
        let t = tape.value(v);
        if t.cols() != hd || (t.rows() != rows && t.rows() != 1) {
            return Err(Error::contract(format!(
                "lstm {what} state shape {:?} incompatible with hidden {hd}, batch {rows}",
                t.shape()
            )));
        }
    }
    let wx = cell.input.weight(tape);
    let wh = cell.recurrent.weight(tape);
    let mut ax = tape.matmul_t(input, wx);
    let mut ah = tape.matmul_t(h_prev, wh);
    if let Some((lx, lh)) = &cell.ln {
        ax = lx.forward(tape, ax);
        ah = lh.forward(tape, ah);
    }
    let b = tape.param(cell.bias);
    let pre = tape.add(ax, ah);
    let pre = tape.add(pre, b);
    let gi = tape.slice_cols(pre, 0, hd);
    let gf = tape.slice_cols(pre, hd, hd);
    let go = tape.slice_cols(pre, 2 * hd, hd);
    let gc = tape.slice_cols(pre, 3 * hd, hd);
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let o = tape.sigmoid(go);
    let cand = tape.tanh(gc);
    let keep = tape.mul(f, c_prev);
    let write = tape.mul(i, cand);
    let c = tape.add(keep, write);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    Ok((h, c))
}

/// Cosine similarity with both norms floored at `eps`.
pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_sim dimension");
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (norm(a).max(eps) * norm(b).max(eps))
}
