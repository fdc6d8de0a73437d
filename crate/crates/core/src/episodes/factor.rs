use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorHyper {
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for FactorHyper {
    fn default() -> Self {
        Self {
            lr: 0.02,
            l2: 0.02,
            epochs: 30,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// r̂(u, m) = x_uᵀ x_m + b_u + b_m + β
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    pub rank: usize,
    pub user_vecs: Vec<Vec<f64>>,
    pub item_vecs: Vec<Vec<f64>>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global: f64,
}

impl FactorModel {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        let dot: f64 = self.user_vecs[user]
            .iter()
            .zip(&self.item_vecs[item])
            .map(|(a, b)| a * b)
            .sum();
        dot + self.user_bias[user] + self.item_bias[item] + self.global
    }

    pub fn mse(&self, rows: &[(usize, usize, f64)]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter()
            .map(|&(u, m, r)| (r - self.predict(u, m)).powi(2))
            .sum::<f64>()
            / rows.len() as f64
    }

    /// Item vectors for the lookup encoder, padded or truncated to `dim`.
    pub fn item_table(&self, dim: usize) -> Vec<Vec<f64>> {
        self.item_vecs
            .iter()
            .map(|v| (0..dim).map(|k| v.get(k).copied().unwrap_or(0.0)).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorReport {
    /// Training-set MSE after each epoch.
    pub mse_history: Vec<f64>,
}

/// SGD on squared error plus L2 on factors and per-user/per-item biases.
/// `rows` holds dense `(user, item, rating)` triples.
pub fn factorize_ratings(
    rows: &[(usize, usize, f64)],
    num_users: usize,
    num_items: usize,
    rank: usize,
    hyper: &FactorHyper,
) -> Result<(FactorModel, FactorReport)> {
    if rows.is_empty() {
        return Err(Error::EmptyStore("no ratings to factorize".into()));
    }
    if let Some(&(u, m, _)) = rows.iter().find(|&&(u, m, _)| u >= num_users || m >= num_items) {
        return Err(Error::contract(format!(
            "rating ({u}, {m}) outside {num_users}×{num_items} table"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let init = Normal::new(0.0, hyper.init_scale.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut vecs = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..rank).map(|_| init.sample(&mut rng)).collect())
            .collect()
    };
    let user_vecs = vecs(num_users);
    let item_vecs = vecs(num_items);
    let mut model = FactorModel {
        rank,
        user_vecs,
        item_vecs,
        user_bias: vec![0.0; num_users],
        item_bias: vec![0.0; num_items],
        global: rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64,
    };
    let (lr, l2) = (hyper.lr, hyper.l2);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut mse_history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (u, m, r) = rows[i];
            let e = r - model.predict(u, m);
            model.global += lr * e;
            model.user_bias[u] += lr * (e - l2 * model.user_bias[u]);
            model.item_bias[m] += lr * (e - l2 * model.item_bias[m]);
            for k in 0..rank {
                let (xu, xm) = (model.user_vecs[u][k], model.item_vecs[m][k]);
                model.user_vecs[u][k] += lr * (e * xm - l2 * xu);
                model.item_vecs[m][k] += lr * (e * xu - l2 * xm);
            }
        }
        let mse = model.mse(rows);
        if !mse.is_finite() || mse > 1e12 {
            return Err(Error::TrainingFault(format!(
                "factorization diverged at epoch {epoch} (mse {mse}); lower the learning rate"
            )));
        }
        mse_history.push(mse);
    }
    Ok((model, FactorReport { mse_history }))
}
