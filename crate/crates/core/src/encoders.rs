//! Context-free item embeddings x′ and the bidirectional context pass that
//! turns support embeddings into x″.

use crate::diff::{lstm_cell, ConvGeom, Tape, Tensor, UnaryOp, Var, LEAKY_SLOPE};
use crate::episodes::Features;
use crate::error::{Error, Result};
use crate::model::{conv_out_side, Ablation, EncoderParams, Model};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn leaky(tape: &mut Tape, x: Var) -> Var {
    tape.unary(UnaryOp::LeakyRelu(LEAKY_SLOPE), x)
}

/// Embeds raw items row by row into an `n × d` matrix.
pub fn encode_context_free(tape: &mut Tape, model: &Model, items: &[&Features]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::contract("no items to encode"));
    }
    match &model.layout.encoder {
        EncoderParams::Mlp { l1, l2 } => {
            let width = tape.params().get(l1.w.v).cols();
            let mut data = Vec::with_capacity(items.len() * width);
            for f in items {
                match f {
                    Features::Dense(v) if v.len() == width => data.extend_from_slice(v),
                    other => {
                        return Err(Error::contract(format!(
                            "mlp encoder expects dense[{width}], got {other:?}"
                        )))
                    }
                }
            }
            let x = tape.constant(Tensor::matrix(items.len(), width, data));
            let a = l1.forward(tape, x);
            let a = leaky(tape, a);
            let b = l2.forward(tape, a);
            Ok(leaky(tape, b))
        }
        EncoderParams::Lookup { table } => {
            let rows = tape.params().get(*table).rows();
            let ids = items
                .iter()
                .map(|f| match f {
                    Features::Id(i) if *i < rows => Ok(*i),
                    Features::Id(i) => Err(Error::MissingEmbedding(*i as u64)),
                    other => Err(Error::contract(format!("lookup encoder expects ids, got {other:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let t = tape.param(*table);
            Ok(tape.gather_rows(t, &ids))
        }
        EncoderParams::Conv {
            convs,
            fc,
            side,
            filters,
        } => {
            let len = side * side;
            let mut data = Vec::with_capacity(items.len() * len);
            for f in items {
                match f {
                    Features::Image { side: s, pixels } if s == side && pixels.len() == len => {
                        data.extend_from_slice(pixels)
                    }
                    Features::Image { side: s, .. } => {
                        return Err(Error::contract(format!(
                            "conv encoder expects {side}×{side} images, got side {s}"
                        )))
                    }
                    other => return Err(Error::contract(format!("conv encoder expects images, got {other:?}"))),
                }
            }
            let mut x = tape.constant(Tensor::matrix(items.len(), len, data));
            for (k, geom) in conv_geometries(*side, *filters).into_iter().enumerate() {
                let (w, b) = &convs[k];
                let wv = w.weight(tape);
                let bv = tape.param(*b);
                let y = tape.conv2d(x, wv, bv, geom);
                x = leaky(tape, y);
            }
            let y = fc.forward(tape, x);
            Ok(leaky(tape, y))
        }
    }
}

/// Geometries of the three convolution layers for a `side × side` input.
pub fn conv_geometries(side: usize, filters: usize) -> [ConvGeom; 3] {
    let s1 = (side + 4 - 5) / 2 + 1;
    let s2 = conv_out_side(side);
    [
        ConvGeom {
            in_ch: 1,
            height: side,
            width: side,
            out_ch: filters,
            kernel: 5,
            stride: 2,
            pad: 2,
        },
        ConvGeom {
            in_ch: filters,
            height: s1,
            width: s1,
            out_ch: filters,
            kernel: 5,
            stride: 2,
            pad: 2,
        },
        ConvGeom {
            in_ch: filters,
            height: s2,
            width: s2,
            out_ch: filters,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
    ]
}

/// Random visitation order for the context pass, fixed by the episode seed.
pub fn visit_order(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0C0D_E0_0DE5);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// x″ᵢ = x′ᵢ + W_e[h⃗ᵢ; h⃖ᵢ], with the forward LSTM visiting items in `order`
/// and the backward LSTM reading `[x′ᵢ; h⃗ᵢ]` in reverse. Also returns the
/// backward LSTM's final hidden state (`1 × H`).
pub fn encode_context_sensitive(
    tape: &mut Tape,
    model: &Model,
    x1: Var,
    order: &[usize],
    ablation: &Ablation,
) -> Result<(Var, Var)> {
    let n = tape.value(x1).rows();
    if n == 0 {
        return Err(Error::contract("context encoder needs a nonempty support set"));
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(Error::contract("visitation order is not a permutation of the support"));
    }
    let hd = model.config.hidden_dim;
    if ablation.no_context {
        let back = tape.constant(Tensor::zeros(&[1, hd]));
        return Ok((x1, back));
    }
    let lay = &model.layout;
    let zero = tape.constant(Tensor::zeros(&[1, hd]));
    let (mut h, mut c) = (zero, zero);
    let mut fwd = Vec::with_capacity(n);
    for &i in order {
        let x = tape.gather_rows(x1, &[i]);
        (h, c) = lstm_cell(tape, h, c, x, &lay.ctx_fwd)?;
        fwd.push(h);
    }
    let (mut hb, mut cb) = (zero, zero);
    let mut bwd = vec![zero; n];
    for k in (0..n).rev() {
        let x = tape.gather_rows(x1, &[order[k]]);
        let inp = tape.concat_cols(&[x, fwd[k]]);
        (hb, cb) = lstm_cell(tape, hb, cb, inp, &lay.ctx_bwd)?;
        bwd[k] = hb;
    }
    let f = tape.concat_rows(&fwd);
    let b = tape.concat_rows(&bwd);
    let states = tape.concat_cols(&[f, b]);
    // Row k of `states` belongs to item order[k]; gather back to storage order.
    let mut pos = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        pos[i] = k;
    }
    let states = tape.gather_rows(states, &pos);
    let delta = lay.w_e.forward(tape, states);
    Ok((tape.add(x1, delta), hb))
}

/// Controller start state: h₀ = W·h⃖_final, c₀ = 0.
pub fn initial_state(tape: &mut Tape, model: &Model, back_final: Var) -> (Var, Var) {
    let h = model.layout.h0.forward(tape, back_final);
    let c = tape.constant(Tensor::zeros(&[1, model.config.hidden_dim]));
    (h, c)
}
