//! Heuristic selection policies and the ridge-regression rating baseline.
//! All of them pick only from the unlabeled pool.

use crate::episodes::Label;
use crate::error::{Error, Result};
use crate::policy::{sample_index, SupportPartition};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Active,
    Random,
    Balanced,
    MinMaxCos,
    Entropy,
    PopularEntropy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Active,
        PolicyKind::Random,
        PolicyKind::Balanced,
        PolicyKind::MinMaxCos,
        PolicyKind::Entropy,
        PolicyKind::PopularEntropy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Active => "active",
            PolicyKind::Random => "random",
            PolicyKind::Balanced => "balanced",
            PolicyKind::MinMaxCos => "min_max_cos",
            PolicyKind::Entropy => "entropy",
            PolicyKind::PopularEntropy => "popular_entropy",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

fn nonempty(partition: &SupportPartition) -> Result<()> {
    if partition.unknown.is_empty() {
        Err(Error::PoolExhausted)
    } else {
        Ok(())
    }
}

/// Uniform over the unlabeled pool.
pub fn select_random<R: Rng + ?Sized>(partition: &SupportPartition, rng: &mut R) -> Result<usize> {
    nonempty(partition)?;
    Ok(partition.unknown[rng.random_range(0..partition.unknown.len())])
}

/// A uniformly chosen class among those with the fewest revealed labels,
/// then a uniform unlabeled item of that class. Uses the hidden labels, so
/// only a harness may call it.
pub fn select_balanced_oracle<R: Rng + ?Sized>(
    partition: &SupportPartition,
    labels: &[Label],
    rng: &mut R,
) -> Result<usize> {
    let eligible = balanced_candidates(partition, labels)?;
    let mut classes: Vec<Option<usize>> = eligible.iter().map(|&i| labels[i].class()).collect();
    classes.sort_unstable();
    classes.dedup();
    let class = classes[rng.random_range(0..classes.len())];
    let items: Vec<usize> = eligible.into_iter().filter(|&i| labels[i].class() == class).collect();
    Ok(items[rng.random_range(0..items.len())])
}

/// Unlabeled items belonging to the least-revealed classes that still have
/// unlabeled items.
pub fn balanced_candidates(partition: &SupportPartition, labels: &[Label]) -> Result<Vec<usize>> {
    nonempty(partition)?;
    let class = |i: usize| {
        labels[i]
            .class()
            .ok_or_else(|| Error::Config("balanced oracle needs class labels".into()))
    };
    let mut revealed: HashMap<usize, usize> = HashMap::new();
    for &u in &partition.unknown {
        revealed.entry(class(u)?).or_insert(0);
    }
    for &k in &partition.known {
        if let Some(c) = revealed.get_mut(&class(k)?) {
            *c += 1;
        }
    }
    let least = *revealed.values().min().expect("nonempty pool");
    partition
        .unknown
        .iter()
        .map(|&u| Ok((u, class(u)?)))
        .filter_map(|r: Result<(usize, usize)>| match r {
            Ok((u, c)) if revealed[&c] == least => Some(Ok(u)),
            Ok(_) => None,
            Err(e) => Some(Err(e)),
        })
        .collect()
}

/// Which set the max-cosine is taken against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinMaxVariant {
    /// Against revealed items; falls back to the unlabeled pool at t = 0.
    #[default]
    Known,
    /// Against the other unlabeled items.
    Unlabeled,
}

/// argmin over unlabeled i of max_j cos(x″ᵢ, x″ⱼ); lowest index on ties.
pub fn select_min_max_cos(
    partition: &SupportPartition,
    sim: &crate::diff::Tensor,
    variant: MinMaxVariant,
) -> Result<usize> {
    nonempty(partition)?;
    let against_known = match variant {
        MinMaxVariant::Known => !partition.known.is_empty(),
        MinMaxVariant::Unlabeled => partition.unknown.len() == 1 && !partition.known.is_empty(),
    };
    let mut best = (f64::INFINITY, partition.unknown[0]);
    for &i in &partition.unknown {
        let row = sim.row_slice(i);
        let peers: Box<dyn Iterator<Item = &usize>> = if against_known {
            Box::new(partition.known.iter())
        } else {
            Box::new(partition.unknown.iter().filter(move |&&j| j != i))
        };
        let m = peers.map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let m = if m.is_finite() { m } else { 0.0 };
        if m < best.0 {
            best = (m, i);
        }
    }
    Ok(best.1)
}

/// Shannon entropy (nats) of a nonnegative weight vector.
pub fn entropy(p: &[f64]) -> f64 {
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let q = v / total;
            q * q.ln()
        })
        .sum::<f64>()
}

/// Samples an unlabeled item in proportion to the entropy of its row in
/// `distributions` (rows ordered like `partition.unknown`). Rows are class
/// distributions for classification or attention weights for ratings.
/// Without predictions, or when every entropy is zero, sampling is uniform.
pub fn select_entropy<R: Rng + ?Sized>(
    partition: &SupportPartition,
    distributions: Option<&crate::diff::Tensor>,
    rng: &mut R,
) -> Result<usize> {
    nonempty(partition)?;
    let Some(d) = distributions else {
        return select_random(partition, rng);
    };
    if d.rows() != partition.unknown.len() {
        return Err(Error::contract("one prediction row per unlabeled item expected"));
    }
    let weights: Vec<f64> = (0..d.rows()).map(|r| entropy(d.row_slice(r))).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return select_random(partition, rng);
    }
    Ok(partition.unknown[sample_index(&weights, rng)])
}

/// A-priori item scores ln(count) · H(rating histogram), from existing users.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PopularityScores {
    pub scores: HashMap<u64, f64>,
}

impl PopularityScores {
    pub fn from_ratings(rows: impl IntoIterator<Item = (u64, f64)>) -> Self {
        let mut hist: HashMap<u64, HashMap<u64, usize>> = HashMap::new();
        for (item, r) in rows {
            *hist.entry(item).or_default().entry(r.to_bits()).or_default() += 1;
        }
        let scores = hist
            .into_iter()
            .map(|(item, h)| {
                let counts: Vec<f64> = h.values().map(|&c| c as f64).collect();
                let n: f64 = counts.iter().sum();
                (item, n.ln() * entropy(&counts))
            })
            .collect();
        Self { scores }
    }

    pub fn get(&self, id: u64) -> Result<f64> {
        self.scores.get(&id).copied().ok_or(Error::MissingScore(id))
    }

    /// `movieId,score` rows with a header, sorted by id.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut rows: Vec<_> = self.scores.iter().collect();
        rows.sort_by_key(|r| r.0);
        writeln!(out, "movieId,score")?;
        for (id, s) in rows {
            writeln!(out, "{id},{s}")?;
        }
        Ok(())
    }
}

/// Highest a-priori score among unlabeled items; lowest index on ties.
/// `item_ids[i]` is the catalogue id of support item `i`.
pub fn select_popular_entropy(
    partition: &SupportPartition,
    item_ids: &[u64],
    scores: &PopularityScores,
) -> Result<usize> {
    nonempty(partition)?;
    let mut best: Option<(f64, usize)> = None;
    for &i in &partition.unknown {
        let s = scores.get(item_ids[i])?;
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, i));
        }
    }
    Ok(best.expect("nonempty pool").1)
}

/// Solves `a·x = b` for square `a` (row-major) by Gaussian elimination with
/// partial pivoting.
pub fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::contract("solve_linear expects an n×n system"));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("nonempty range");
        if a[piv * n + col].abs() <= 1e-13 * scale {
            return Err(Error::numeric("solve_linear", "singular system"));
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Ok(x)
}

/// Linear model with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl Ridge {
    /// Minimizes Σ(y − wᵀx − b)² + λ‖w‖² by centering and solving the
    /// normal equations.
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::contract("ridge needs matching, nonempty inputs"));
        }
        let (n, d) = (xs.len() as f64, xs[0].len());
        let xm: Vec<f64> = (0..d).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n).collect();
        let ym = ys.iter().sum::<f64>() / n;
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        for (x, &y) in xs.iter().zip(ys) {
            for i in 0..d {
                let xi = x[i] - xm[i];
                b[i] += xi * (y - ym);
                for j in 0..d {
                    a[i * d + j] += xi * (x[j] - xm[j]);
                }
            }
        }
        for i in 0..d {
            a[i * d + i] += lambda;
        }
        let weights = if d == 0 { Vec::new() } else { solve_linear(a, b)? };
        let intercept = ym - weights.iter().zip(&xm).map(|(w, m)| w * m).sum::<f64>();
        Ok(Self { weights, intercept })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Default regularization grid for per-count tuning.
pub const RIDGE_GRID: [f64; 9] = [1e-3, 1e-2, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0];

/// Ridge on item feature vectors with λ chosen separately for every
/// revealed-count by validation RMSE.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeBaseline {
    /// `lambdas[t - 1]` is used once `t` ratings are revealed.
    pub lambdas: Vec<f64>,
}

/// One validation/evaluation case: revealed order of (item, rating) and
/// held-out (item, rating) pairs.
pub struct RidgeCase<'a> {
    pub order: &'a [(usize, f64)],
    pub held_out: &'a [(usize, f64)],
}

impl RidgeBaseline {
    pub fn tune(features: &[Vec<f64>], cases: &[RidgeCase<'_>], budget: usize, grid: &[f64]) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Config("empty ridge grid".into()));
        }
        let mut lambdas = Vec::with_capacity(budget);
        for t in 1..=budget {
            let mut best = (f64::INFINITY, grid[0]);
            for &lambda in grid {
                let mut sq = 0.0;
                let mut count = 0usize;
                for case in cases {
                    let preds = predict_case(features, &case.order[..t.min(case.order.len())], case.held_out, lambda)?;
                    for (p, (_, y)) in preds.iter().zip(case.held_out) {
                        sq += (p - y).powi(2);
                        count += 1;
                    }
                }
                let rmse = (sq / count.max(1) as f64).sqrt();
                if rmse < best.0 {
                    best = (rmse, lambda);
                }
            }
            lambdas.push(best.1);
        }
        Ok(Self { lambdas })
    }

    pub fn lambda_at(&self, t: usize) -> f64 {
        self.lambdas[t.clamp(1, self.lambdas.len()) - 1]
    }

    pub fn predict(&self, features: &[Vec<f64>], revealed: &[(usize, f64)], held_out: &[usize]) -> Result<Vec<f64>> {
        let pairs: Vec<(usize, f64)> = held_out.iter().map(|&i| (i, 0.0)).collect();
        predict_case(features, revealed, &pairs, self.lambda_at(revealed.len()))
    }
}

fn predict_case(
    features: &[Vec<f64>],
    revealed: &[(usize, f64)],
    held_out: &[(usize, f64)],
    lambda: f64,
) -> Result<Vec<f64>> {
    if revealed.is_empty() {
        return Err(Error::NoEvidence);
    }
    let get = |i: usize| features.get(i).ok_or(Error::MissingEmbedding(i as u64));
    let xs = revealed
        .iter()
        .map(|&(i, _)| get(i).cloned())
        .collect::<Result<Vec<_>>>()?;
    let ys: Vec<f64> = revealed.iter().map(|r| r.1).collect();
    let model = Ridge::fit(&xs, &ys, lambda)?;
    held_out.iter().map(|&(i, _)| Ok(model.predict(get(i)?))).collect()
}

/// Step-time inputs available to a heuristic.
pub struct HeuristicView<'a> {
    pub partition: &'a SupportPartition,
    /// Cosine similarities between support items' x″.
    pub sim: &'a crate::diff::Tensor,
    /// Per-unlabeled-item distributions for entropy sampling: fast class
    /// predictions, or fast attention rows for ratings. `None` at t = 0.
    pub fast: Option<&'a crate::diff::Tensor>,
    /// Hidden support labels; only the balanced oracle reads them.
    pub labels: &'a [Label],
    pub item_ids: &'a [u64],
}

/// A non-learned selection policy with any precomputed state it needs.
#[derive(Clone, Debug)]
pub struct HeuristicPolicy {
    pub kind: PolicyKind,
    pub min_max: MinMaxVariant,
    pub scores: Option<std::sync::Arc<PopularityScores>>,
}

impl HeuristicPolicy {
    pub fn new(kind: PolicyKind) -> Result<Self> {
        if kind == PolicyKind::Active {
            return Err(Error::Config("the active policy is not a heuristic".into()));
        }
        Ok(Self {
            kind,
            min_max: MinMaxVariant::Known,
            scores: None,
        })
    }

    pub fn with_scores(mut self, scores: std::sync::Arc<PopularityScores>) -> Self {
        self.scores = Some(scores);
        self
    }

    pub fn choose<R: Rng + ?Sized>(&self, view: &HeuristicView<'_>, rng: &mut R) -> Result<usize> {
        match self.kind {
            PolicyKind::Random => select_random(view.partition, rng),
            PolicyKind::Balanced => select_balanced_oracle(view.partition, view.labels, rng),
            PolicyKind::MinMaxCos => select_min_max_cos(view.partition, view.sim, self.min_max),
            PolicyKind::Entropy => select_entropy(view.partition, view.fast, rng),
            PolicyKind::PopularEntropy => {
                let scores = self
                    .scores
                    .as_deref()
                    .ok_or_else(|| Error::Config("popular_entropy needs a score table".into()))?;
                select_popular_entropy(view.partition, view.item_ids, scores)
            }
            PolicyKind::Active => Err(Error::Config("the active policy is not a heuristic".into())),
        }
    }
}
