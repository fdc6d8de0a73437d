use crate::baselines::PopularityScores;
use crate::episodes::{
    factorize_ratings, gen_classification_episode, gen_ratings_episode, ClassSource, Episode, FactorHyper, FactorModel,
    ImageStore, RatingRow, RatingsSource, RatingsTable, RatingsWorld, TaskKind, TaskSpec,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Synthetic ratings world and latent-factor pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub factor_scale: f64,
    pub bias_sd: f64,
    pub global: f64,
    /// Simulated existing users whose ratings feed pretraining and the
    /// popularity scores.
    pub train_users: usize,
    pub ratings_per_user: usize,
    pub factor_rank: usize,
    pub factor: FactorHyper,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            factor_scale: RatingsWorld::FACTOR_SCALE,
            bias_sd: RatingsWorld::BIAS_SD,
            global: RatingsWorld::GLOBAL_MEAN,
            train_users: 600,
            ratings_per_user: 60,
            factor_rank: 8,
            factor: FactorHyper::default(),
        }
    }
}

/// Everything a ratings task needs besides the episode sampler.
#[derive(Clone, Debug)]
pub struct RatingsEnv {
    /// Pretrained item vectors, indexed by catalogue position.
    pub item_vectors: Vec<Vec<f64>>,
    pub factors: FactorModel,
    pub popularity: Arc<PopularityScores>,
    source: RatingsData,
}

#[derive(Clone, Debug)]
enum RatingsData {
    World(RatingsWorld),
    Table {
        table: Arc<RatingsTable>,
        episode_users: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
enum Source {
    Synthetic,
    Images {
        store: Arc<ImageStore>,
        classes: Vec<usize>,
    },
    Ratings(Box<RatingsEnv>),
}

/// A task specification bound to its data: samples episodes by seed.
#[derive(Clone, Debug)]
pub struct TaskEnv {
    pub spec: TaskSpec,
    source: Source,
}

fn pretrain(
    rows: &[RatingRow],
    num_users: usize,
    num_items: usize,
    params: &WorldParams,
) -> Result<(FactorModel, Arc<PopularityScores>)> {
    let triples: Vec<(usize, usize, f64)> = rows
        .iter()
        .map(|r| (r.user as usize, r.movie as usize, r.rating))
        .collect();
    let (model, _) = factorize_ratings(&triples, num_users, num_items, params.factor_rank, &params.factor)?;
    let popularity = Arc::new(PopularityScores::from_ratings(rows.iter().map(|r| (r.movie, r.rating))));
    Ok((model, popularity))
}

impl TaskEnv {
    /// Synthetic clusters for classification; a synthetic latent-factor world
    /// plus pretraining on simulated existing users for ratings.
    pub fn synthetic(spec: TaskSpec, params: &WorldParams) -> Result<Self> {
        spec.validate()?;
        let source = match &spec.task {
            TaskKind::Classification(_) => Source::Synthetic,
            TaskKind::Ratings(rs) => {
                let world = RatingsWorld::with_params(rs, params.factor_scale, params.bias_sd, params.global);
                let rows = world.training_ratings(params.train_users, params.ratings_per_user, rs.world_seed ^ 0x7EA1);
                let (factors, popularity) = pretrain(&rows, params.train_users, world.num_movies(), params)?;
                Source::Ratings(Box::new(RatingsEnv {
                    item_vectors: factors.item_vecs.clone(),
                    factors,
                    popularity,
                    source: RatingsData::World(world),
                }))
            }
        };
        Ok(Self { spec, source })
    }

    /// Classification episodes drawn from the listed classes of an image store.
    pub fn images(spec: TaskSpec, store: Arc<ImageStore>, classes: Vec<usize>) -> Result<Self> {
        spec.validate()?;
        if !spec.is_classification() {
            return Err(Error::Config("image data needs a classification task".into()));
        }
        Ok(Self {
            spec,
            source: Source::Images { store, classes },
        })
    }

    /// Ratings episodes from a loaded table. Users with index ≡ 0 (mod 5) are
    /// held out for episodes; the rest feed pretraining and popularity.
    pub fn ratings_table(spec: TaskSpec, table: Arc<RatingsTable>, params: &WorldParams) -> Result<Self> {
        spec.validate()?;
        if spec.is_classification() {
            return Err(Error::Config("a ratings table needs a ratings task".into()));
        }
        let (mut rows, mut episode_users) = (Vec::new(), Vec::new());
        let mut train_index = 0u64;
        for (u, (_, history)) in table.users.iter().enumerate() {
            if u % 5 == 0 {
                episode_users.push(u);
                continue;
            }
            rows.extend(history.iter().map(|&(m, r)| RatingRow {
                user: train_index,
                movie: m as u64,
                rating: r,
            }));
            train_index += 1;
        }
        if rows.is_empty() || episode_users.is_empty() {
            return Err(Error::Config("ratings table too small to split users".into()));
        }
        let (factors, popularity) = pretrain(&rows, train_index as usize, table.num_movies(), params)?;
        Ok(Self {
            spec,
            source: Source::Ratings(Box::new(RatingsEnv {
                item_vectors: factors.item_vecs.clone(),
                factors,
                popularity,
                source: RatingsData::Table { table, episode_users },
            })),
        })
    }

    pub fn episode(&self, seed: u64) -> Result<Episode> {
        match &self.source {
            Source::Synthetic => gen_classification_episode(&self.spec, ClassSource::Synthetic, seed),
            Source::Images { store, classes } => {
                gen_classification_episode(&self.spec, ClassSource::Images { store, classes }, seed)
            }
            Source::Ratings(env) => match &env.source {
                RatingsData::World(world) => gen_ratings_episode(&self.spec, RatingsSource::Synthetic(world), seed),
                RatingsData::Table { table, episode_users } => gen_ratings_episode(
                    &self.spec,
                    RatingsSource::Dataset {
                        table,
                        users: episode_users,
                    },
                    seed,
                ),
            },
        }
    }

    pub fn ratings(&self) -> Option<&RatingsEnv> {
        match &self.source {
            Source::Ratings(env) => Some(env),
            _ => None,
        }
    }

    pub fn world(&self) -> Option<&RatingsWorld> {
        match self.ratings()?.source {
            RatingsData::World(ref w) => Some(w),
            RatingsData::Table { .. } => None,
        }
    }

    pub fn popularity(&self) -> Option<Arc<PopularityScores>> {
        self.ratings().map(|r| r.popularity.clone())
    }

    /// Replaces the pretrained item vectors with an `(id, vector)` table keyed
    /// by original movie id. Catalogue items missing from the table keep
    /// their pretrained vectors.
    pub fn apply_embedding_table(&mut self, table: &[(u64, Vec<f64>)]) -> Result<usize> {
        let Source::Ratings(env) = &mut self.source else {
            return Err(Error::Config("item vectors need a ratings task".into()));
        };
        let position: HashMap<u64, usize> = match &env.source {
            RatingsData::World(w) => (0..w.num_movies()).map(|i| (i as u64, i)).collect(),
            RatingsData::Table { table, .. } => table.movie_ids.iter().enumerate().map(|(i, &m)| (m, i)).collect(),
        };
        let mut hits = 0;
        for (id, v) in table {
            if let Some(&i) = position.get(id) {
                env.item_vectors[i] = v.clone();
                hits += 1;
            }
        }
        Ok(hits)
    }

    pub fn item_vectors(&self) -> Option<&[Vec<f64>]> {
        self.ratings().map(|r| r.item_vectors.as_slice())
    }
}
