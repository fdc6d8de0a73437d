use super::dataset::{ImageStore, RatingRow, RatingsTable};
use super::{ClassificationSpec, Episode, Features, Item, Label, RatingScale, RatingsSpec, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Where classification items come from.
#[derive(Clone, Copy, Debug)]
pub enum ClassSource<'a> {
    /// Fresh Gaussian clusters per episode.
    Synthetic,
    /// Images from a loaded store, restricted to the listed class indices.
    Images {
        store: &'a ImageStore,
        classes: &'a [usize],
    },
}

/// Where rating episodes come from.
#[derive(Clone, Copy, Debug)]
pub enum RatingsSource<'a> {
    Synthetic(&'a RatingsWorld),
    Dataset {
        table: &'a RatingsTable,
        users: &'a [usize],
    },
}

/// Nearest step on the scale with ties rounding up, clipped to the scale.
pub fn quantize_rating(raw: f64, scale: &RatingScale) -> f64 {
    let k = ((raw - scale.min) / scale.step + 0.5).floor();
    (scale.min + k * scale.step).clamp(scale.min, scale.max)
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn gen_classification_episode(spec: &TaskSpec, source: ClassSource<'_>, seed: u64) -> Result<Episode> {
    let TaskKind::Classification(cs) = &spec.task else {
        return Err(Error::Config(
            "classification generator needs a classification spec".into(),
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cs.num_classes;
    // Episode-local class indices, randomly permuted against the source.
    let mut local: Vec<usize> = (0..n).collect();
    local.shuffle(&mut rng);
    let per_class = cs.support_per_class + cs.eval_per_class;
    let mut pools: Vec<Vec<Features>> = Vec::with_capacity(n);
    match source {
        ClassSource::Synthetic => {
            for _ in 0..n {
                pools.push(synthetic_cluster(cs, per_class, &mut rng));
            }
        }
        ClassSource::Images { store, classes } => {
            if classes.len() < n {
                return Err(Error::Generation(format!(
                    "split has {} classes, need {n}",
                    classes.len()
                )));
            }
            let chosen: Vec<usize> = classes.choose_multiple(&mut rng, n).copied().collect();
            for c in chosen {
                let class = store
                    .classes
                    .get(c)
                    .ok_or_else(|| Error::Generation(format!("class index {c} not in store")))?;
                if class.images.len() < per_class {
                    return Err(Error::Generation(format!(
                        "class `{}` has {} images, need {per_class}",
                        class.name,
                        class.images.len()
                    )));
                }
                let picks = rand::seq::index::sample(&mut rng, class.images.len(), per_class);
                pools.push(
                    picks
                        .iter()
                        .map(|i| Features::Image {
                            side: store.side,
                            pixels: class.images[i].clone(),
                        })
                        .collect(),
                );
            }
        }
    }
    let mut support = Vec::with_capacity(n * cs.support_per_class);
    let mut eval = Vec::with_capacity(n * cs.eval_per_class);
    for (k, pool) in pools.into_iter().enumerate() {
        let label = Label::Class(local[k]);
        for (j, f) in pool.into_iter().enumerate() {
            let item = Item {
                id: 0,
                features: f,
                label,
            };
            if j < cs.support_per_class {
                support.push(item);
            } else {
                eval.push(item);
            }
        }
    }
    support.shuffle(&mut rng);
    eval.shuffle(&mut rng);
    for (i, item) in support.iter_mut().chain(eval.iter_mut()).enumerate() {
        item.id = i as u64;
    }
    let ep = Episode {
        spec: spec.clone(),
        seed,
        support,
        eval,
    };
    ep.check_disjoint()?;
    Ok(ep)
}

fn synthetic_cluster<R: Rng + ?Sized>(cs: &ClassificationSpec, count: usize, rng: &mut R) -> Vec<Features> {
    let center = unit_vector(cs.feature_dim, rng);
    (0..count)
        .map(|_| {
            Features::Dense(
                center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(rng);
                        c + cs.cluster_sigma * z
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Fixed synthetic movie catalogue: latent factors, biases and popularity.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingsWorld {
    pub rank: usize,
    pub movie_factors: Vec<Vec<f64>>,
    pub movie_bias: Vec<f64>,
    pub popularity: Vec<f64>,
    pub global: f64,
    pub user_scale: f64,
    pub noise: f64,
    pub scale: RatingScale,
}

impl RatingsWorld {
    pub const FACTOR_SCALE: f64 = 0.6;
    pub const BIAS_SD: f64 = 0.5;
    pub const GLOBAL_MEAN: f64 = 3.25;

    pub fn new(spec: &RatingsSpec) -> Self {
        Self::with_params(spec, Self::FACTOR_SCALE, Self::BIAS_SD, Self::GLOBAL_MEAN)
    }

    pub fn with_params(spec: &RatingsSpec, factor_scale: f64, bias_sd: f64, global: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
        let normal = |sd: f64| Normal::new(0.0, sd).expect("valid sd");
        let fac = normal(factor_scale);
        let bias = normal(bias_sd.max(0.0));
        let movie_factors = (0..spec.num_movies)
            .map(|_| (0..spec.rank).map(|_| fac.sample(&mut rng)).collect())
            .collect();
        let movie_bias = (0..spec.num_movies).map(|_| bias.sample(&mut rng)).collect();
        let popularity = (0..spec.num_movies)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.exp()
            })
            .collect();
        Self {
            rank: spec.rank,
            movie_factors,
            movie_bias,
            popularity,
            global,
            user_scale: factor_scale,
            noise: spec.noise,
            scale: spec.scale,
        }
    }

    pub fn num_movies(&self) -> usize {
        self.movie_factors.len()
    }

    pub fn sample_user<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = Normal::new(0.0, self.user_scale).expect("valid sd");
        (0..self.rank).map(|_| d.sample(rng)).collect()
    }

    pub fn raw_rating(&self, user: &[f64], movie: usize) -> f64 {
        let dot: f64 = user.iter().zip(&self.movie_factors[movie]).map(|(a, b)| a * b).sum();
        dot + self.movie_bias[movie] + self.global
    }

    pub fn rate<R: Rng + ?Sized>(&self, user: &[f64], movie: usize, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        quantize_rating(self.raw_rating(user, movie) + self.noise * z, &self.scale)
    }

    /// Ratings from `num_users` simulated existing users, each rating
    /// `per_user` movies drawn in proportion to popularity.
    pub fn training_ratings(&self, num_users: usize, per_user: usize, seed: u64) -> Vec<RatingRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let movies: Vec<usize> = (0..self.num_movies()).collect();
        let per_user = per_user.min(self.num_movies());
        let mut rows = Vec::with_capacity(num_users * per_user);
        for u in 0..num_users {
            let user = self.sample_user(&mut rng);
            let picks: Vec<usize> = movies
                .choose_multiple_weighted(&mut rng, per_user, |&m| self.popularity[m])
                .expect("positive weights")
                .copied()
                .collect();
            for m in picks {
                rows.push(RatingRow {
                    user: u as u64,
                    movie: m as u64,
                    rating: self.rate(&user, m, &mut rng),
                });
            }
        }
        rows
    }
}

pub fn gen_ratings_episode(spec: &TaskSpec, source: RatingsSource<'_>, seed: u64) -> Result<Episode> {
    let TaskKind::Ratings(rs) = &spec.task else {
        return Err(Error::Config("ratings generator needs a ratings spec".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = rs.support_size + rs.eval_size;
    let rated: Vec<(usize, f64)> = match source {
        RatingsSource::Synthetic(world) => {
            if world.num_movies() < need {
                return Err(Error::Generation(format!(
                    "catalogue has {} movies, need {need}",
                    world.num_movies()
                )));
            }
            let user = world.sample_user(&mut rng);
            let picks = rand::seq::index::sample(&mut rng, world.num_movies(), need);
            picks.iter().map(|m| (m, world.rate(&user, m, &mut rng))).collect()
        }
        RatingsSource::Dataset { table, users } => {
            let &u = users
                .choose(&mut rng)
                .ok_or_else(|| Error::Generation("no users available".into()))?;
            let history = &table.users[u].1;
            if history.len() < need {
                return Err(Error::Generation(format!(
                    "user has {} ratings, need {need}",
                    history.len()
                )));
            }
            let picks = rand::seq::index::sample(&mut rng, history.len(), need);
            picks.iter().map(|i| history[i]).collect()
        }
    };
    let items: Vec<Item> = rated
        .into_iter()
        .map(|(m, r)| Item {
            id: m as u64,
            features: Features::Id(m),
            label: Label::Rating(r),
        })
        .collect();
    let (support, eval) = items.split_at(rs.support_size);
    let ep = Episode {
        spec: spec.clone(),
        seed,
        support: support.to_vec(),
        eval: eval.to_vec(),
    };
    ep.check_disjoint()?;
    Ok(ep)
}
