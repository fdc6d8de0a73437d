use super::inference::InferenceEpisode;
use super::TaskEnv;
use crate::baselines::{HeuristicPolicy, PolicyKind, RidgeBaseline, RidgeCase, RIDGE_GRID};
use crate::episodes::{episode_seed, Episode, Label};
use crate::error::{Error, Result};
use crate::model::{Ablation, LabelSpace, Model};
use crate::policy::SelectMode;
use crate::predictors::task_metric;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::sync::Arc;

const EVAL_SALT: u64 = 0xE7A1_5EED_0000_0003;

/// The selection strategy driving an episode.
#[derive(Clone, Debug)]
pub enum Selector {
    /// The learned policy (argmax at evaluation, sampling in training).
    Active,
    Heuristic(HeuristicPolicy),
}

impl Selector {
    /// Builds a selector by policy kind, attaching the environment's
    /// popularity table where needed.
    pub fn for_kind(kind: PolicyKind, env: &TaskEnv) -> Result<Self> {
        if kind == PolicyKind::Active {
            return Ok(Selector::Active);
        }
        let mut policy = HeuristicPolicy::new(kind)?;
        if kind == PolicyKind::PopularEntropy {
            let scores = env
                .popularity()
                .ok_or_else(|| Error::Config("popular_entropy needs a ratings task".into()))?;
            policy = policy.with_scores(scores);
        }
        if kind == PolicyKind::Balanced && !env.spec.is_classification() {
            return Err(Error::Config("the balanced oracle needs a classification task".into()));
        }
        Ok(Selector::Heuristic(policy))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Selector::Active => PolicyKind::Active.name(),
            Selector::Heuristic(p) => p.kind.name(),
        }
    }
}

/// Per-step curves of one episode; index t−1 holds the value after t labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCurve {
    pub seed: u64,
    pub chosen: Vec<usize>,
    /// Slow-prediction metric on the evaluation set.
    pub slow: Vec<f64>,
    /// Fast-prediction metric on the remaining pool; `None` once it is empty.
    pub fast: Vec<Option<f64>>,
    /// Distinct classes among revealed labels (classification only).
    pub unique: Vec<usize>,
}

/// Mean and standard error per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Number of episodes contributing to each step.
    pub count: Vec<usize>,
}

impl Curve {
    /// Aggregates per-episode series of equal length, skipping missing entries.
    pub fn from_series<'a>(series: impl IntoIterator<Item = &'a [Option<f64>]>) -> Self {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for s in series {
            if cols.len() < s.len() {
                cols.resize(s.len(), Vec::new());
            }
            for (t, v) in s.iter().enumerate() {
                if let Some(v) = v {
                    cols[t].push(*v);
                }
            }
        }
        let mut out = Curve::default();
        for c in cols {
            let (mean, se) = mean_se(&c);
            out.mean.push(mean);
            out.se.push(se);
            out.count.push(c.len());
        }
        out
    }
}

/// Sample mean and standard error (n − 1 denominator); NaN mean when empty.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    /// `accuracy` or `rmse`.
    pub metric: String,
    pub episodes: usize,
    pub budget: usize,
    pub slow: Curve,
    pub fast: Curve,
    pub unique: Option<Curve>,
    pub per_episode: Vec<EpisodeCurve>,
}

impl EvalReport {
    fn build(policy: &str, labels: &LabelSpace, budget: usize, per_episode: Vec<EpisodeCurve>) -> Self {
        let slow: Vec<Vec<Option<f64>>> = per_episode
            .iter()
            .map(|e| e.slow.iter().map(|&v| Some(v)).collect())
            .collect();
        let unique: Vec<Vec<Option<f64>>> = per_episode
            .iter()
            .map(|e| e.unique.iter().map(|&u| Some(u as f64)).collect())
            .collect();
        let classes = matches!(labels, LabelSpace::Classes(_));
        Self {
            policy: policy.to_string(),
            metric: if classes { "accuracy" } else { "rmse" }.into(),
            episodes: per_episode.len(),
            budget,
            slow: Curve::from_series(slow.iter().map(Vec::as_slice)),
            fast: Curve::from_series(per_episode.iter().map(|e| e.fast.as_slice())),
            unique: classes.then(|| Curve::from_series(unique.iter().map(Vec::as_slice))),
            per_episode,
        }
    }

    /// Mean slow metric after the final query.
    pub fn final_slow(&self) -> f64 {
        self.slow.mean.last().copied().unwrap_or(f64::NAN)
    }
}

/// Steps one episode to its budget under `selector`, scoring the slow
/// predictor after every query.
pub fn run_episode(
    model: &Arc<Model>,
    episode: Episode,
    selector: &Selector,
    ablation: &Ablation,
) -> Result<EpisodeCurve> {
    let labels = episode.support_labels();
    let eval_labels = episode.eval_labels();
    let seed = episode.seed;
    let space = model.config.labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
    let mut run = InferenceEpisode::new(model.clone(), episode, *ablation)?;
    let mut curve = EpisodeCurve {
        seed,
        chosen: Vec::new(),
        slow: Vec::new(),
        fast: Vec::new(),
        unique: Vec::new(),
    };
    let mut seen = HashSet::new();
    while !run.budget_exhausted() {
        let i = match selector {
            Selector::Active => run.active_choice(SelectMode::Argmax, &mut rng)?.0,
            Selector::Heuristic(p) => run.heuristic_choice(p, &labels, &mut rng)?,
        };
        run.reveal(i, labels[i])?;
        curve.chosen.push(i);
        curve
            .slow
            .push(task_metric(&run.slow_predictions()?, &eval_labels, &space)?);
        curve.fast.push(if run.partition().unknown.is_empty() {
            None
        } else {
            let fast = run.fast_predictions()?;
            let truths: Vec<Label> = fast.items.iter().map(|&u| labels[u]).collect();
            Some(task_metric(&fast.pred, &truths, &space)?)
        });
        if let Some(c) = labels[i].class() {
            seen.insert(c);
        }
        curve.unique.push(seen.len());
    }
    Ok(curve)
}

/// Anytime curves over `episodes` episodes with seeds
/// `episode_seed(base_seed, 0..episodes)`.
pub fn evaluate(
    model: &Arc<Model>,
    env: &TaskEnv,
    selector: &Selector,
    episodes: usize,
    base_seed: u64,
    ablation: &Ablation,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    model.config.compatible_with(&env.spec)?;
    let per_episode = (0..episodes as u64)
        .map(|e| run_episode(model, env.episode(episode_seed(base_seed, e))?, selector, ablation))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::build(
        selector.name(),
        &model.config.labels,
        env.spec.budget,
        per_episode,
    ))
}

/// Support indices in random order, paired with their catalogue ids and ratings.
fn ridge_order(ep: &Episode) -> (Vec<usize>, Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let mut order: Vec<usize> = (0..ep.support.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(ep.seed ^ EVAL_SALT));
    let revealed = order
        .iter()
        .map(|&i| (ep.support[i].id as usize, ep.support[i].label.value()))
        .collect();
    let held = ep.eval.iter().map(|it| (it.id as usize, it.label.value())).collect();
    (order, revealed, held)
}

/// Per-count λ tuning on validation episodes `episode_seed(base_seed, ·)`.
pub fn tune_ridge(env: &TaskEnv, episodes: usize, base_seed: u64) -> Result<RidgeBaseline> {
    let features = env
        .item_vectors()
        .ok_or_else(|| Error::Config("ridge baseline needs a ratings task".into()))?;
    let eps = (0..episodes as u64)
        .map(|e| env.episode(episode_seed(base_seed, e)))
        .collect::<Result<Vec<_>>>()?;
    let prepared: Vec<_> = eps.iter().map(ridge_order).collect();
    let cases: Vec<RidgeCase<'_>> = prepared
        .iter()
        .map(|(_, order, held)| RidgeCase { order, held_out: held })
        .collect();
    RidgeBaseline::tune(features, &cases, env.spec.budget, &RIDGE_GRID)
}

/// RMSE curves of ridge regression on item vectors with labels revealed in
/// random order.
pub fn evaluate_ridge(env: &TaskEnv, ridge: &RidgeBaseline, episodes: usize, base_seed: u64) -> Result<EvalReport> {
    let features = env
        .item_vectors()
        .ok_or_else(|| Error::Config("ridge baseline needs a ratings task".into()))?;
    let scale = env
        .spec
        .rating_scale()
        .ok_or_else(|| Error::Config("ridge baseline needs a ratings task".into()))?;
    let mut per_episode = Vec::with_capacity(episodes);
    for e in 0..episodes as u64 {
        let ep = env.episode(episode_seed(base_seed, e))?;
        let (order, revealed, held) = ridge_order(&ep);
        let ids: Vec<usize> = held.iter().map(|h| h.0).collect();
        let mut slow = Vec::new();
        for t in 1..=env.spec.budget {
            let pred = ridge.predict(features, &revealed[..t], &ids)?;
            let mse = pred.iter().zip(&held).map(|(p, (_, y))| (p - y).powi(2)).sum::<f64>() / held.len() as f64;
            slow.push(mse.sqrt());
        }
        per_episode.push(EpisodeCurve {
            seed: ep.seed,
            chosen: order[..env.spec.budget].to_vec(),
            fast: vec![None; slow.len()],
            unique: Vec::new(),
            slow,
        });
    }
    Ok(EvalReport::build(
        "ridge",
        &LabelSpace::Ratings(scale),
        env.spec.budget,
        per_episode,
    ))
}
