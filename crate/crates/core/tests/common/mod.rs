#![allow(dead_code)]

use activemn::diff::{Tape, Tensor, Var};
use activemn::episodes::{ClassificationSpec, RatingsSpec, TaskSpec};
use activemn::model::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn class_task(n: usize, k: usize, dim: usize, budget: usize) -> TaskSpec {
    TaskSpec::classification(
        ClassificationSpec {
            num_classes: n,
            support_per_class: k,
            eval_per_class: 1,
            feature_dim: dim,
            cluster_sigma: 0.2,
        },
        budget,
    )
}

pub fn ratings_task(support: usize, eval: usize, movies: usize, budget: usize) -> TaskSpec {
    TaskSpec::ratings(
        RatingsSpec {
            support_size: support,
            eval_size: eval,
            num_movies: movies,
            ..RatingsSpec::default()
        },
        budget,
    )
}

pub fn small_config(spec: &TaskSpec, d: usize, h: usize) -> ModelConfig {
    ModelConfig::for_task(spec, d, h)
}

pub fn set(model: &mut Model, name: &str, value: Tensor) {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    assert_eq!(model.params.get(id).shape(), value.shape(), "shape of `{name}`");
    model.params.set(id, value);
}

pub fn get(model: &Model, name: &str) -> Tensor {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    model.params.get(id).clone()
}

/// Zeroes the gain of a weight-normalized map, so its effective weight is 0.
pub fn zero_gain(model: &mut Model, name: &str) {
    let g = get(model, &format!("{name}.g"));
    set(model, &format!("{name}.g"), Tensor::zeros(g.shape()));
}

pub fn zero_lstm(model: &mut Model, name: &str) {
    zero_gain(model, &format!("{name}.wx"));
    zero_gain(model, &format!("{name}.wh"));
}

pub fn randomize(model: &mut Model, name: &str, scale: f64, seed: u64) {
    let shape = get(model, name).shape().to_vec();
    set(model, name, Tensor::randn(&shape, scale, &mut rng(seed)));
}

/// Effective weight-normalized matrix `g ⊙ v / ‖v_row‖`, computed directly.
pub fn wn_weight(model: &Model, name: &str) -> Vec<Vec<f64>> {
    let v = get(model, &format!("{name}.v"));
    let g = get(model, &format!("{name}.g"));
    (0..v.rows())
        .map(|r| {
            let row = v.row_slice(r);
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            row.iter().map(|a| g.data()[r] * a / n).collect()
        })
        .collect()
}

/// `W x + b` for a weight-normalized linear map, computed directly.
pub fn wn_apply(model: &Model, name: &str, x: &[f64]) -> Vec<f64> {
    let w = wn_weight(model, name);
    let b = get(model, &format!("{name}.b"));
    w.iter()
        .zip(b.data())
        .map(|(row, bi)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bi)
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weighted sum of every element with fixed pseudo-random coefficients.
pub fn probe(t: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let m = t.mul(x, w);
    t.sum(m)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y} (tol {tol})");
    }
}
