//! Episode construction: task specs, items, synthetic and dataset-backed
//! generators, and latent-factor pretraining for rating embeddings.

mod dataset;
mod factor;
mod synthetic;

pub use dataset::{
    load_dataset, load_embedding_table, DatasetFormat, ImageClass, ImageStore, ItemStore, RatingRow, RatingsTable,
};
pub use factor::{factorize_ratings, FactorHyper, FactorModel, FactorReport};
pub use synthetic::{
    gen_classification_episode, gen_ratings_episode, quantize_rating, ClassSource, RatingsSource, RatingsWorld,
};

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Ordinal rating scale, e.g. 0.5..=5 in 0.5 steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for RatingScale {
    fn default() -> Self {
        Self {
            min: 0.5,
            max: 5.0,
            step: 0.5,
        }
    }
}

impl RatingScale {
    pub fn contains(&self, r: f64) -> bool {
        r.is_finite() && r >= self.min - 1e-9 && r <= self.max + 1e-9
    }

    /// True for values on the grid `min + k·step`.
    pub fn on_grid(&self, r: f64) -> bool {
        let k = (r - self.min) / self.step;
        self.contains(r) && (k - k.round()).abs() < 1e-9
    }

    /// Affine map of the scale onto `[-1, 1]`.
    pub fn to_unit(&self, r: f64) -> f64 {
        2.0 * (r - self.min) / (self.max - self.min) - 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Rating(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Rating(_) => None,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Label::Class(c) => *c as f64,
            Label::Rating(r) => *r,
        }
    }
}

/// Raw item input as seen by the context-free encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    Dense(Vec<f64>),
    /// Square grayscale image in `[0, 1]`, row-major.
    Image {
        side: usize,
        pixels: Vec<f64>,
    },
    /// Row of an embedding lookup table.
    Id(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: u64,
    pub features: Features,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSpec {
    pub num_classes: usize,
    pub support_per_class: usize,
    pub eval_per_class: usize,
    pub feature_dim: usize,
    pub cluster_sigma: f64,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            support_per_class: 5,
            eval_per_class: 1,
            feature_dim: 16,
            cluster_sigma: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingsSpec {
    pub support_size: usize,
    pub eval_size: usize,
    pub scale: RatingScale,
    pub rank: usize,
    pub noise: f64,
    pub num_movies: usize,
    pub world_seed: u64,
}

impl Default for RatingsSpec {
    fn default() -> Self {
        Self {
            support_size: 50,
            eval_size: 10,
            scale: RatingScale::default(),
            rank: 4,
            noise: 0.3,
            num_movies: 200,
            world_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification(ClassificationSpec),
    Ratings(RatingsSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Label budget T.
    pub budget: usize,
}

impl TaskSpec {
    pub fn classification(spec: ClassificationSpec, budget: usize) -> Self {
        Self {
            task: TaskKind::Classification(spec),
            budget,
        }
    }

    pub fn ratings(spec: RatingsSpec, budget: usize) -> Self {
        Self {
            task: TaskKind::Ratings(spec),
            budget,
        }
    }

    pub fn support_size(&self) -> usize {
        match &self.task {
            TaskKind::Classification(c) => c.num_classes * c.support_per_class,
            TaskKind::Ratings(r) => r.support_size,
        }
    }

    pub fn eval_size(&self) -> usize {
        match &self.task {
            TaskKind::Classification(c) => c.num_classes * c.eval_per_class,
            TaskKind::Ratings(r) => r.eval_size,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.task, TaskKind::Classification(_))
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.task {
            TaskKind::Classification(c) => Some(c.num_classes),
            TaskKind::Ratings(_) => None,
        }
    }

    pub fn rating_scale(&self) -> Option<RatingScale> {
        match &self.task {
            TaskKind::Classification(_) => None,
            TaskKind::Ratings(r) => Some(r.scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.budget > self.support_size() {
            return Err(Error::Config(format!(
                "budget {} exceeds support size {}",
                self.budget,
                self.support_size()
            )));
        }
        match &self.task {
            TaskKind::Classification(c) => {
                if c.num_classes < 2 || c.support_per_class == 0 || c.eval_per_class == 0 || c.feature_dim == 0 {
                    return Err(Error::Config(
                        "classification spec needs ≥2 classes and positive sizes".into(),
                    ));
                }
                if !(c.cluster_sigma >= 0.0) {
                    return Err(Error::Config("cluster_sigma must be non-negative".into()));
                }
            }
            TaskKind::Ratings(r) => {
                if r.support_size == 0 || r.eval_size == 0 {
                    return Err(Error::Config(
                        "ratings spec needs positive support and eval sizes".into(),
                    ));
                }
                if r.support_size + r.eval_size > r.num_movies {
                    return Err(Error::Config("support + eval exceeds the movie catalogue".into()));
                }
                if !(r.scale.max > r.scale.min && r.scale.step > 0.0) {
                    return Err(Error::Config("invalid rating scale".into()));
                }
            }
        }
        Ok(())
    }
}

/// Support pool (labels stored but hidden from the policy until queried)
/// and held-out evaluation items.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: TaskSpec,
    pub seed: u64,
    pub support: Vec<Item>,
    pub eval: Vec<Item>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<Label> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn eval_labels(&self) -> Vec<Label> {
        self.eval.iter().map(|i| i.label).collect()
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let support: std::collections::HashSet<u64> = self.support.iter().map(|i| i.id).collect();
        if support.len() != self.support.len() || self.eval.iter().any(|i| support.contains(&i.id)) {
            return Err(Error::Generation("support and eval items overlap".into()));
        }
        Ok(())
    }
}

/// Replay record for one episode: spec, seed, item ids and hidden labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub spec: TaskSpec,
    pub seed: u64,
    pub support: Vec<(u64, Label)>,
    pub eval: Vec<(u64, Label)>,
}

impl From<&Episode> for EpisodeRecord {
    fn from(e: &Episode) -> Self {
        Self {
            spec: e.spec.clone(),
            seed: e.seed,
            support: e.support.iter().map(|i| (i.id, i.label)).collect(),
            eval: e.eval.iter().map(|i| (i.id, i.label)).collect(),
        }
    }
}

/// Writes one JSON record per line.
pub fn dump_episodes<W: Write>(mut out: W, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        let line = serde_json::to_string(&EpisodeRecord::from(e)).map_err(|e| Error::contract(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_episode_records<R: BufRead>(input: R) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Seed of the `index`-th episode in a stream rooted at `base` (SplitMix64).
pub fn episode_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
