//! Flat `key = value` run configuration with `#` comments.

use crate::baselines::PolicyKind;
use crate::episodes::{ClassificationSpec, DatasetFormat, RatingScale, RatingsSpec, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelConfig};
use crate::training::{TrainConfig, WorldParams};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Parsed entries keyed by name, remembering line numbers for messages.
#[derive(Debug, Default)]
pub struct KvDoc {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {line}: invalid key `{k}`")));
            }
            if entries.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {line}: duplicate key `{k}`")));
            }
        }
        Ok(Self { entries })
    }

    /// `key=value` pairs separated by commas, as given on a command line.
    pub fn parse_inline(spec: &str) -> Result<Self> {
        Self::parse(&spec.split(',').collect::<Vec<_>>().join("\n"))
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: key `{key}`: expected {what}, got `{v}`"))),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.take(key, "a nonnegative integer")?.unwrap_or(default))
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        Ok(self.take(key, "a nonnegative integer")?.unwrap_or(default))
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.take(key, "a number")?.unwrap_or(default);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Config(format!("key `{key}`: expected a finite number")))
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        Ok(self.take(key, "true or false")?.unwrap_or(default))
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.take_raw(key).map(|(_, v)| v)
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }

    /// Consumes the task keys and builds a validated spec.
    pub fn task_spec(&mut self) -> Result<TaskSpec> {
        let kind = self.string("task").unwrap_or_else(|| "classification".into());
        let spec = match kind.as_str() {
            "classification" => {
                let d = ClassificationSpec::default();
                let c = ClassificationSpec {
                    num_classes: self.usize("num_classes", d.num_classes)?,
                    support_per_class: self.usize("support_per_class", d.support_per_class)?,
                    eval_per_class: self.usize("eval_per_class", d.eval_per_class)?,
                    feature_dim: self.usize("feature_dim", d.feature_dim)?,
                    cluster_sigma: self.f64("cluster_sigma", d.cluster_sigma)?,
                };
                let budget = self.usize("budget", c.num_classes)?;
                TaskSpec::classification(c, budget)
            }
            "ratings" => {
                let d = RatingsSpec::default();
                let s = RatingScale::default();
                let r = RatingsSpec {
                    support_size: self.usize("support_size", d.support_size)?,
                    eval_size: self.usize("eval_size", d.eval_size)?,
                    scale: RatingScale {
                        min: self.f64("rating_min", s.min)?,
                        max: self.f64("rating_max", s.max)?,
                        step: self.f64("rating_step", s.step)?,
                    },
                    rank: self.usize("rank", d.rank)?,
                    noise: self.f64("noise", d.noise)?,
                    num_movies: self.usize("num_movies", d.num_movies)?,
                    world_seed: self.u64("world_seed", d.world_seed)?,
                };
                let budget = self.usize("budget", 10)?;
                TaskSpec::ratings(r, budget)
            }
            other => {
                return Err(Error::Config(format!(
                    "key `task`: expected classification or ratings, got `{other}`"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A task spec from `key=value,...` text (same keys as a config file).
pub fn parse_task_spec(spec: &str) -> Result<TaskSpec> {
    let mut doc = KvDoc::parse_inline(spec)?;
    let t = doc.task_spec()?;
    doc.finish()?;
    Ok(t)
}

/// External data replacing the synthetic generators.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub format: DatasetFormat,
    pub path: PathBuf,
    /// Class names (one per line) forming the training split of an image tree.
    pub class_list: Option<PathBuf>,
    /// `id,v1,…,vd` table of pretrained item vectors.
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub world: WorldParams,
    pub data: Option<DataConfig>,
    /// Selection used while training; heuristics train the predictors only.
    pub train_policy: PolicyKind,
    pub out_dir: PathBuf,
    /// Checkpoint period in updates; 0 keeps only the initial and final ones.
    pub checkpoint_every: usize,
    /// Evaluation period in updates; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Consecutive skipped updates tolerated before giving up.
    pub max_faults: usize,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        text.parse()
    }

    /// Canonical text form; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.task.task {
            TaskKind::Classification(c) => {
                kv("task", "classification".into());
                kv("num_classes", c.num_classes.to_string());
                kv("support_per_class", c.support_per_class.to_string());
                kv("eval_per_class", c.eval_per_class.to_string());
                kv("feature_dim", c.feature_dim.to_string());
                kv("cluster_sigma", c.cluster_sigma.to_string());
            }
            TaskKind::Ratings(r) => {
                kv("task", "ratings".into());
                kv("support_size", r.support_size.to_string());
                kv("eval_size", r.eval_size.to_string());
                kv("rating_min", r.scale.min.to_string());
                kv("rating_max", r.scale.max.to_string());
                kv("rating_step", r.scale.step.to_string());
                kv("rank", r.rank.to_string());
                kv("noise", r.noise.to_string());
                kv("num_movies", r.num_movies.to_string());
                kv("world_seed", r.world_seed.to_string());
            }
        }
        kv("budget", self.task.budget.to_string());
        let m = &self.model;
        kv("embed_dim", m.embed_dim.to_string());
        kv("hidden_dim", m.hidden_dim.to_string());
        match m.encoder {
            EncoderConfig::Mlp { .. } => kv("encoder", "mlp".into()),
            EncoderConfig::Lookup { .. } => kv("encoder", "lookup".into()),
            EncoderConfig::Conv { filters, .. } => {
                kv("encoder", "conv".into());
                kv("conv_filters", filters.to_string());
            }
        }
        kv("matching_steps", m.matching_steps.to_string());
        kv("layer_norm", m.layer_norm.to_string());
        kv("slow_sharpen", m.slow_sharpen.to_string());
        kv("init_seed", m.init_seed.to_string());
        let t = &self.train;
        kv("lr", t.lr.to_string());
        kv("gae_gamma", t.gae_gamma.to_string());
        kv("gae_lambda", t.gae_lambda.to_string());
        kv("value_weight", t.value_weight.to_string());
        kv("entropy_weight", t.entropy_weight.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_updates", t.max_updates.to_string());
        kv("seed", t.seed.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("imitation_steps", t.imitation_steps.to_string());
        kv("normalize_advantages", t.normalize_advantages.to_string());
        kv("return_scale", t.return_scale.to_string());
        let w = &self.world;
        kv("factor_scale", w.factor_scale.to_string());
        kv("bias_sd", w.bias_sd.to_string());
        kv("global_mean", w.global.to_string());
        kv("train_users", w.train_users.to_string());
        kv("ratings_per_user", w.ratings_per_user.to_string());
        kv("factor_rank", w.factor_rank.to_string());
        kv("factor_lr", w.factor.lr.to_string());
        kv("factor_l2", w.factor.l2.to_string());
        kv("factor_epochs", w.factor.epochs.to_string());
        kv("factor_seed", w.factor.seed.to_string());
        if let Some(d) = &self.data {
            match d.format {
                DatasetFormat::ImageTree => kv("dataset_format", "images".into()),
                DatasetFormat::RatingsCsv { top_movies, top_users } => {
                    kv("dataset_format", "ratings_csv".into());
                    kv("top_movies", top_movies.to_string());
                    kv("top_users", top_users.to_string());
                }
            }
            kv("dataset_path", d.path.display().to_string());
            if let Some(p) = &d.class_list {
                kv("class_list", p.display().to_string());
            }
            if let Some(p) = &d.embeddings {
                kv("embeddings", p.display().to_string());
            }
        }
        kv("train_policy", self.train_policy.name().into());
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("eval_seed", self.eval_seed.to_string());
        kv("max_faults", self.max_faults.to_string());
        s
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let task = doc.task_spec()?;

        let mut model = ModelConfig::for_task(&task, doc.usize("embed_dim", 32)?, doc.usize("hidden_dim", 32)?);
        let filters = doc.usize("conv_filters", 64)?;
        match doc.string("encoder").as_deref() {
            None => {}
            Some("mlp") => {
                let TaskKind::Classification(c) = &task.task else {
                    return Err(Error::Config("key `encoder`: mlp needs a classification task".into()));
                };
                model.encoder = EncoderConfig::Mlp {
                    input_dim: c.feature_dim,
                };
            }
            Some("lookup") => {
                let TaskKind::Ratings(r) = &task.task else {
                    return Err(Error::Config("key `encoder`: lookup needs a ratings task".into()));
                };
                model.encoder = EncoderConfig::Lookup { num_ids: r.num_movies };
            }
            // The image side is fixed once the image store is loaded.
            Some("conv") => model.encoder = EncoderConfig::Conv { side: 28, filters },
            Some(other) => return Err(Error::Config(format!("key `encoder`: unknown encoder `{other}`"))),
        }
        model.matching_steps = doc.usize("matching_steps", model.matching_steps)?;
        model.layer_norm = doc.bool("layer_norm", model.layer_norm)?;
        model.slow_sharpen = doc.bool("slow_sharpen", model.slow_sharpen)?;
        model.init_seed = doc.u64("init_seed", model.init_seed)?;

        let d = TrainConfig::default();
        let train = TrainConfig {
            lr: doc.f64("lr", d.lr)?,
            gae_gamma: doc.f64("gae_gamma", d.gae_gamma)?,
            gae_lambda: doc.f64("gae_lambda", d.gae_lambda)?,
            value_weight: doc.f64("value_weight", d.value_weight)?,
            entropy_weight: doc.f64("entropy_weight", d.entropy_weight)?,
            batch_size: doc.usize("batch_size", d.batch_size)?,
            max_updates: doc.usize("max_updates", d.max_updates)?,
            seed: doc.u64("seed", d.seed)?,
            grad_clip: doc.f64("grad_clip", d.grad_clip)?,
            imitation_steps: doc.usize("imitation_steps", d.imitation_steps)?,
            normalize_advantages: doc.bool("normalize_advantages", d.normalize_advantages)?,
            return_scale: doc.f64("return_scale", d.return_scale)?,
        };
        train.validate()?;

        let w = WorldParams::default();
        let mut world = WorldParams {
            factor_scale: doc.f64("factor_scale", w.factor_scale)?,
            bias_sd: doc.f64("bias_sd", w.bias_sd)?,
            global: doc.f64("global_mean", w.global)?,
            train_users: doc.usize("train_users", w.train_users)?,
            ratings_per_user: doc.usize("ratings_per_user", w.ratings_per_user)?,
            factor_rank: doc.usize("factor_rank", w.factor_rank)?,
            factor: w.factor.clone(),
        };
        world.factor.lr = doc.f64("factor_lr", w.factor.lr)?;
        world.factor.l2 = doc.f64("factor_l2", w.factor.l2)?;
        world.factor.epochs = doc.usize("factor_epochs", w.factor.epochs)?;
        world.factor.seed = doc.u64("factor_seed", w.factor.seed)?;

        let top_movies = doc.usize("top_movies", 1000)?;
        let top_users = doc.usize("top_users", 2000)?;
        let data = match doc.string("dataset_format") {
            None => None,
            Some(tag) => Some(DataConfig {
                format: DatasetFormat::from_tag(&tag, top_movies, top_users)
                    .map_err(|e| Error::Config(format!("key `dataset_format`: {e}")))?,
                path: doc
                    .string("dataset_path")
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Config("key `dataset_path` is required with `dataset_format`".into()))?,
                class_list: doc.string("class_list").map(PathBuf::from),
                embeddings: doc.string("embeddings").map(PathBuf::from),
            }),
        };

        let train_policy = match doc.string("train_policy") {
            None => PolicyKind::Active,
            Some(p) => p
                .parse()
                .map_err(|e| Error::Config(format!("key `train_policy`: {e}")))?,
        };
        let cfg = RunConfig {
            out_dir: doc
                .string("out_dir")
                .map_or_else(|| PathBuf::from("runs"), PathBuf::from),
            checkpoint_every: doc.usize("checkpoint_every", 100)?,
            eval_every: doc.usize("eval_every", 0)?,
            eval_episodes: doc.usize("eval_episodes", 100)?,
            eval_seed: doc.u64("eval_seed", 0xE7A1)?,
            max_faults: doc.usize("max_faults", 5)?,
            task,
            model,
            train,
            world,
            data,
            train_policy,
        };
        doc.finish()?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}
