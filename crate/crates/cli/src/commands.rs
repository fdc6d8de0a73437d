//! `train`, `eval` and `ablate`.

use crate::{CliError, CliResult, EXIT_NUMERIC};
use activemn::baselines::PolicyKind;
use activemn::checkpoint::Checkpoint;
use activemn::config::{parse_task_spec, DataConfig, RunConfig};
use activemn::episodes::{load_dataset, load_embedding_table, ItemStore, TaskSpec};
use activemn::model::{Ablation, EncoderConfig, Model, ModelConfig};
use activemn::training::{
    evaluate, evaluate_ridge, tune_ridge, Curve, EvalReport, Selector, TaskEnv, TrainEvent, Trainer, WorldParams,
};
use serde::Serialize;
use serde_json::json;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Directory that relative dataset paths are resolved against.
pub const DATA_DIR_VAR: &str = "MAL_DATA_DIR";

/// Seed used for ridge λ tuning; disjoint from evaluation seeds by salting.
const RIDGE_TUNE_SALT: u64 = 0x41D6_E000_0000_0001;
const RIDGE_TUNE_EPISODES: usize = 300;

fn resolve(path: &Path, data_dir: Option<&Path>) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_VAR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// Binds a task to its data and fixes the encoder to match: image side for
/// image trees, catalogue size for rating tables.
pub fn build_env(
    task: &TaskSpec,
    model: &mut ModelConfig,
    world: &WorldParams,
    data: Option<&DataConfig>,
    data_dir: Option<&Path>,
) -> CliResult<TaskEnv> {
    let Some(d) = data else {
        return Ok(TaskEnv::synthetic(task.clone(), world)?);
    };
    let mut env = match load_dataset(&resolve(&d.path, data_dir), d.format)? {
        ItemStore::Images(store) => {
            let classes = match &d.class_list {
                Some(p) => store.split_from_list(&resolve(p, data_dir))?,
                None => (0..store.classes.len()).collect(),
            };
            let filters = match model.encoder {
                EncoderConfig::Conv { filters, .. } => filters,
                _ => 64,
            };
            model.encoder = EncoderConfig::Conv {
                side: store.side,
                filters,
            };
            TaskEnv::images(task.clone(), Arc::new(store), classes)?
        }
        ItemStore::Ratings(table) => {
            let n = table.num_movies();
            if let EncoderConfig::Lookup { num_ids } = &mut model.encoder {
                *num_ids = (*num_ids).max(n);
            }
            TaskEnv::ratings_table(task.clone(), Arc::new(table), world)?
        }
    };
    if let Some(p) = &d.embeddings {
        let table = load_embedding_table(&resolve(p, data_dir))?;
        let hits = env.apply_embedding_table(&table)?;
        if hits == 0 {
            return Err(CliError::config("embedding table matches no catalogue item"));
        }
    }
    Ok(env)
}

/// Fresh model for a task; lookup encoders start from the pretrained item
/// vectors.
pub fn init_model(config: ModelConfig, env: &TaskEnv) -> CliResult<Model> {
    config.validate()?;
    config.compatible_with(&env.spec)?;
    let mut model = Model::new(config)?;
    if let (EncoderConfig::Lookup { .. }, Some(vectors)) = (&model.config.encoder, env.item_vectors()) {
        model.load_item_vectors(vectors)?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub updates: u64,
    pub faults: u64,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
}

struct MetricsLog {
    out: BufWriter<File>,
    start: Instant,
}

impl MetricsLog {
    fn write(&mut self, mut value: serde_json::Value) -> CliResult<()> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("elapsed_ms".into(), json!(self.start.elapsed().as_millis() as u64));
        }
        writeln!(self.out, "{value}")?;
        self.out.flush()?;
        Ok(())
    }
}

fn eval_event(model: &Model, env: &TaskEnv, cfg: &RunConfig, update: u64) -> CliResult<serde_json::Value> {
    let model = Arc::new(model.clone());
    let report = evaluate(
        &model,
        env,
        &Selector::Active,
        cfg.eval_episodes,
        cfg.eval_seed,
        &Ablation::default(),
    )?;
    Ok(json!({
        "event": "eval",
        "update": update,
        "metric": report.metric,
        "slow": report.slow.mean,
        "slow_se": report.slow.se,
        "fast": report.fast.mean,
    }))
}

fn save_checkpoint(trainer: &Trainer, cfg: &RunConfig, dir: &Path, done: u64) -> CliResult<PathBuf> {
    let mut ckpt = Checkpoint::new(&trainer.model, Some(cfg.task.clone()), Some(&trainer.adam), done);
    ckpt.meta.world = Some(cfg.world.clone());
    let path = dir.join(format!("ckpt_{done:06}.bin"));
    ckpt.save(&path)?;
    Ok(path)
}

/// Meta-trains from a config file. Writes `config.txt`, `metrics.jsonl` and
/// `ckpt_NNNNNN.bin` files (named by completed updates) under `out_dir`.
pub fn cmd_train(config_path: &Path, data_dir: Option<&Path>) -> CliResult<TrainSummary> {
    let cfg = RunConfig::from_path(config_path)?;
    let mut model_cfg = cfg.model.clone();
    let env = build_env(&cfg.task, &mut model_cfg, &cfg.world, cfg.data.as_ref(), data_dir)?;
    let model = init_model(model_cfg, &env)?;
    let selector = Selector::for_kind(cfg.train_policy, &env)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), selector)?;

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let metrics = cfg.out_dir.join("metrics.jsonl");
    let mut log = MetricsLog {
        out: BufWriter::new(File::create(&metrics)?),
        start: Instant::now(),
    };
    let mut checkpoints = vec![save_checkpoint(&trainer, &cfg, &cfg.out_dir, 0)?];
    let max = cfg.train.max_updates as u64;
    if max == 0 {
        return Ok(TrainSummary {
            updates: 0,
            faults: 0,
            checkpoints,
            metrics,
        });
    }

    if cfg.train.imitation_steps > 0 {
        let losses = trainer.pretrain(&env)?;
        log.write(json!({
            "event": "imitation",
            "steps": losses.len(),
            "first_loss": losses.first(),
            "last_loss": losses.last(),
        }))?;
    }
    if cfg.eval_every > 0 {
        log.write(eval_event(&trainer.model, &env, &cfg, 0)?)?;
    }

    let (mut faults, mut streak) = (0u64, 0usize);
    while trainer.update < max {
        let event = trainer.step(&env)?;
        let done = trainer.update;
        match &event {
            TrainEvent::Update(_) => streak = 0,
            TrainEvent::Fault { .. } => {
                faults += 1;
                streak += 1;
            }
        }
        log.write(serde_json::to_value(&event).map_err(|e| CliError::config(e.to_string()))?)?;
        if streak > cfg.max_faults {
            return Err(CliError {
                code: EXIT_NUMERIC,
                message: format!("{streak} consecutive numeric faults at update {done}; giving up"),
            });
        }
        if cfg.eval_every > 0 && (done % cfg.eval_every as u64 == 0 || done == max) {
            log.write(eval_event(&trainer.model, &env, &cfg, done)?)?;
        }
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0) || done == max {
            checkpoints.push(save_checkpoint(&trainer, &cfg, &cfg.out_dir, done)?);
        }
    }
    Ok(TrainSummary {
        updates: trainer.update,
        faults,
        checkpoints,
        metrics,
    })
}

/// A checkpointed model with the task and environment it is evaluated on.
pub struct Loaded {
    pub model: Arc<Model>,
    pub env: TaskEnv,
    pub world: WorldParams,
}

/// Loads a checkpoint and binds it to a task: `--task` if given, else the
/// run config's task if given, else the task recorded in the checkpoint.
pub fn load_for_eval(
    ckpt: &Path,
    task: Option<&str>,
    run_config: Option<&Path>,
    data_dir: Option<&Path>,
) -> CliResult<Loaded> {
    let ckpt = Checkpoint::load(ckpt)?;
    let run = run_config.map(RunConfig::from_path).transpose()?;
    let world = match &run {
        Some(r) => r.world.clone(),
        None => ckpt.meta.world.clone().unwrap_or_default(),
    };
    let spec = match (task, &run, &ckpt.meta.task) {
        (Some(s), _, _) => parse_task_spec(s)?,
        (None, Some(r), _) => r.task.clone(),
        (None, None, Some(t)) => t.clone(),
        (None, None, None) => return Err(CliError::config("no --task given and the checkpoint records none")),
    };
    let model = ckpt.model()?;
    let mut probe = model.config.clone();
    let env = build_env(
        &spec,
        &mut probe,
        &world,
        run.as_ref().and_then(|r| r.data.as_ref()),
        data_dir,
    )?;
    if probe != model.config {
        return Err(CliError::config(format!(
            "checkpoint encoder {:?} does not fit the data ({:?})",
            model.config.encoder, probe.encoder
        )));
    }
    model.config.compatible_with(&env.spec)?;
    Ok(Loaded {
        model: Arc::new(model),
        env,
        world,
    })
}

/// `active`, any heuristic, or `ridge` (ratings only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPolicy {
    Kind(PolicyKind),
    Ridge,
}

impl std::str::FromStr for EvalPolicy {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s == "ridge" {
            return Ok(EvalPolicy::Ridge);
        }
        s.parse::<PolicyKind>().map(EvalPolicy::Kind).map_err(|_| {
            let names: Vec<&str> = PolicyKind::ALL.iter().map(|k| k.name()).collect();
            CliError::config(format!(
                "unknown policy `{s}`; expected one of {}, ridge",
                names.join(", ")
            ))
        })
    }
}

/// One evaluation run per seed plus the pooled summary.
#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub policy: String,
    pub metric: String,
    pub budget: usize,
    pub episodes_per_seed: usize,
    pub seeds: Vec<u64>,
    /// Anytime curves pooled over every episode of every seed.
    pub pooled: CurveSummary,
    /// Final metric of each seed's run, then their mean ± SE across runs.
    pub per_seed_final: Vec<f64>,
    pub across_seeds: (f64, f64),
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<EvalReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveSummary {
    pub slow: Curve,
    pub fast: Curve,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unique: Option<Curve>,
}

fn pool(reports: &[EvalReport]) -> CurveSummary {
    let eps: Vec<_> = reports.iter().flat_map(|r| &r.per_episode).collect();
    let slow: Vec<Vec<Option<f64>>> = eps.iter().map(|e| e.slow.iter().map(|&v| Some(v)).collect()).collect();
    let unique: Vec<Vec<Option<f64>>> = eps
        .iter()
        .map(|e| e.unique.iter().map(|&u| Some(u as f64)).collect())
        .collect();
    CurveSummary {
        slow: Curve::from_series(slow.iter().map(Vec::as_slice)),
        fast: Curve::from_series(eps.iter().map(|e| e.fast.as_slice())),
        unique: reports
            .first()
            .and_then(|r| r.unique.as_ref())
            .map(|_| Curve::from_series(unique.iter().map(Vec::as_slice))),
    }
}

pub fn run_eval(
    loaded: &Loaded,
    policy: EvalPolicy,
    episodes: usize,
    seeds: &[u64],
    ablation: &Ablation,
    keep_episodes: bool,
) -> CliResult<EvalOutput> {
    if seeds.is_empty() {
        return Err(CliError::config("--seeds needs at least one seed"));
    }
    if episodes == 0 {
        return Err(CliError::config("--episodes must be positive"));
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let report = match policy {
            EvalPolicy::Kind(kind) => {
                let selector = Selector::for_kind(kind, &loaded.env)?;
                evaluate(&loaded.model, &loaded.env, &selector, episodes, seed, ablation)?
            }
            EvalPolicy::Ridge => {
                let ridge = tune_ridge(&loaded.env, RIDGE_TUNE_EPISODES, seed ^ RIDGE_TUNE_SALT)?;
                let mut r = evaluate_ridge(&loaded.env, &ridge, episodes, seed)?;
                r.policy = "ridge".into();
                r
            }
        };
        reports.push(report);
    }
    let finals: Vec<f64> = reports.iter().map(EvalReport::final_slow).collect();
    let mut out = EvalOutput {
        policy: reports[0].policy.clone(),
        metric: reports[0].metric.clone(),
        budget: reports[0].budget,
        episodes_per_seed: episodes,
        seeds: seeds.to_vec(),
        pooled: pool(&reports),
        across_seeds: activemn::training::mean_se(&finals),
        per_seed_final: finals,
        runs: Vec::new(),
    };
    if keep_episodes {
        out.runs = reports;
    }
    Ok(out)
}

/// What an ablation switches off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Gamma,
    CtxEncoder,
    MatchingSteps,
}

impl std::str::FromStr for Component {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "gamma" => Ok(Component::Gamma),
            "ctx_encoder" => Ok(Component::CtxEncoder),
            "matching_steps" => Ok(Component::MatchingSteps),
            _ => Err(CliError::config(format!(
                "unknown component `{s}`; expected gamma, ctx_encoder or matching_steps"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationVariant {
    pub name: String,
    pub ablation: Ablation,
    pub slow_final: (f64, f64),
    pub fast_final: (f64, f64),
    pub curves: CurveSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationOutput {
    pub component: String,
    pub metric: String,
    pub policy: String,
    pub variants: Vec<AblationVariant>,
}

fn last(c: &Curve) -> (f64, f64) {
    (
        c.mean.last().copied().unwrap_or(f64::NAN),
        c.se.last().copied().unwrap_or(f64::NAN),
    )
}

/// Evaluates the unchanged model and the ablated variants on the same
/// episodes. `matching_steps` sweeps `steps`.
pub fn run_ablate(
    loaded: &Loaded,
    component: Component,
    policy: PolicyKind,
    episodes: usize,
    seeds: &[u64],
    steps: &[usize],
) -> CliResult<AblationOutput> {
    let mut variants = vec![("full".to_string(), Ablation::default())];
    match component {
        Component::Gamma => variants.push((
            "fixed_gamma".into(),
            Ablation {
                fixed_gamma: true,
                ..Ablation::default()
            },
        )),
        Component::CtxEncoder => variants.push((
            "no_context".into(),
            Ablation {
                no_context: true,
                ..Ablation::default()
            },
        )),
        Component::MatchingSteps => {
            if steps.contains(&0) {
                return Err(CliError::config("matching steps must be at least 1"));
            }
            for &k in steps {
                variants.push((
                    format!("matching_steps={k}"),
                    Ablation {
                        matching_steps: Some(k),
                        ..Ablation::default()
                    },
                ));
            }
        }
    }
    let mut out_variants = Vec::new();
    let mut metric = String::new();
    for (name, ablation) in variants {
        let eval = run_eval(loaded, EvalPolicy::Kind(policy), episodes, seeds, &ablation, false)?;
        metric = eval.metric.clone();
        out_variants.push(AblationVariant {
            name,
            ablation,
            slow_final: last(&eval.pooled.slow),
            fast_final: last(&eval.pooled.fast),
            curves: eval.pooled,
        });
    }
    Ok(AblationOutput {
        component: match component {
            Component::Gamma => "gamma",
            Component::CtxEncoder => "ctx_encoder",
            Component::MatchingSteps => "matching_steps",
        }
        .into(),
        metric,
        policy: policy.name().into(),
        variants: out_variants,
    })
}

/// Comma-separated list of integers, e.g. `1,2,3`.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| CliError::config(format!("{what}: `{p}` is not a number")))
        })
        .collect()
}
