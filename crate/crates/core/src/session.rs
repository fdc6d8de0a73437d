//! Interactive episodes stepped by an external oracle. Support labels stay
//! server-side until the oracle submits them.

use crate::config::parse_task_spec;
use crate::episodes::{episode_seed, Features, Label, RatingScale, TaskSpec};
use crate::error::Error;
use crate::model::{Ablation, Model};
use crate::policy::SelectMode;
use crate::predictors::task_metric;
use crate::training::{InferenceEpisode, TaskEnv, WorldParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SessionError {
    NotFound(String),
    /// Call out of order for the session's state.
    Conflict(String),
    /// Request rejected by validation.
    Invalid(String),
    Internal(String),
}

impl SessionError {
    pub fn status(&self) -> u16 {
        match self {
            SessionError::NotFound(_) => 404,
            SessionError::Conflict(_) => 409,
            SessionError::Invalid(_) => 422,
            SessionError::Internal(_) => 500,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            SessionError::NotFound(m)
            | SessionError::Conflict(m)
            | SessionError::Invalid(m)
            | SessionError::Internal(m) => m,
        }
    }
}

impl From<Error> for SessionError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Contract(_) | Error::Generation(_) => SessionError::Invalid(e.to_string()),
            Error::PoolExhausted => SessionError::Conflict(e.to_string()),
            other => SessionError::Internal(other.to_string()),
        }
    }
}

pub type SessionResult<T> = std::result::Result<T, SessionError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Submitted labels are taken as ground truth.
    Human,
    /// Submitted labels must match the stored ones.
    #[default]
    StoredLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// Inline task spec (`key=value,...`); defaults to the checkpoint's task.
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Episode index under `seed`, as in evaluation.
    #[serde(default)]
    pub episode: u64,
    #[serde(default)]
    pub mode: OracleMode,
}

/// An item as shown to the oracle: public features only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublicItem {
    pub index: usize,
    pub id: u64,
    /// Dense features or row-major pixels; empty for catalogue ids.
    pub features: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
}

impl PublicItem {
    fn new(index: usize, id: u64, f: &Features) -> Self {
        let (features, side) = match f {
            Features::Dense(v) => (v.clone(), None),
            Features::Image { side, pixels } => (pixels.clone(), Some(*side)),
            Features::Id(_) => (Vec::new(), None),
        };
        Self {
            index,
            id,
            features,
            side,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: String,
    /// `classification` or `ratings`.
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rating_scale: Option<RatingScale>,
    pub mode: OracleMode,
    pub budget: usize,
    pub step: usize,
    pub support: Vec<PublicItem>,
    pub eval: Vec<PublicItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Query,
    BudgetExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub status: QueryStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item_id: Option<u64>,
    pub step: usize,
    pub budget: usize,
}

/// Exactly one of the fields, matching the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    #[serde(default)]
    pub class: Option<usize>,
    #[serde(default)]
    pub rating: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub step: usize,
    pub budget: usize,
    pub budget_exhausted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionStatus {
    Ok,
    NoEvidence,
    PoolEmpty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBlock {
    pub status: PredictionStatus,
    /// Item indices (eval indices for slow, support indices for fast).
    pub items: Vec<usize>,
    /// One row per item: class probabilities or a single rating.
    pub values: Vec<Vec<f64>>,
}

impl PredictionBlock {
    fn empty(status: PredictionStatus) -> Self {
        Self {
            status,
            items: Vec::new(),
            values: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsResponse {
    pub step: usize,
    pub budget: usize,
    pub slow: PredictionBlock,
    pub fast: PredictionBlock,
    /// Slow-prediction metric on the evaluation set, in stored-label mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
}

struct Session {
    run: InferenceEpisode,
    mode: OracleMode,
    pending: Option<usize>,
    /// Stored support labels; never serialized.
    hidden: Vec<Label>,
}

/// Concurrent sessions over one immutable model.
pub struct SessionStore {
    model: Arc<Model>,
    default_task: Option<TaskSpec>,
    world: WorldParams,
    envs: Mutex<HashMap<String, Arc<TaskEnv>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next: AtomicU64,
}

impl SessionStore {
    pub fn new(model: Arc<Model>, default_task: Option<TaskSpec>, world: WorldParams) -> Self {
        Self {
            model,
            default_task,
            world,
            envs: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next: AtomicU64::new(1),
        }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    /// Registers a prebuilt environment (e.g. one backed by a dataset).
    pub fn insert_env(&self, env: Arc<TaskEnv>) {
        let key = serde_json::to_string(&env.spec).expect("task spec serializes");
        self.envs.lock().expect("env lock").insert(key, env);
    }

    fn env_for(&self, spec: &TaskSpec) -> SessionResult<Arc<TaskEnv>> {
        let key = serde_json::to_string(spec).map_err(|e| SessionError::Internal(e.to_string()))?;
        let mut envs = self.envs.lock().expect("env lock");
        if let Some(env) = envs.get(&key) {
            return Ok(env.clone());
        }
        let env = Arc::new(TaskEnv::synthetic(spec.clone(), &self.world)?);
        envs.insert(key, env.clone());
        Ok(env)
    }

    fn get(&self, id: &str) -> SessionResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("no session `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn create(&self, req: &CreateRequest) -> SessionResult<CreateResponse> {
        let spec = match &req.task {
            Some(s) => parse_task_spec(s)?,
            None => self
                .default_task
                .clone()
                .ok_or_else(|| SessionError::Invalid("no task given and the checkpoint records none".into()))?,
        };
        self.model.config.compatible_with(&spec)?;
        let env = self.env_for(&spec)?;
        let episode = env.episode(episode_seed(req.seed, req.episode))?;
        let hidden = episode.support_labels();
        let support = episode
            .support
            .iter()
            .enumerate()
            .map(|(i, it)| PublicItem::new(i, it.id, &it.features))
            .collect();
        let eval = episode
            .eval
            .iter()
            .enumerate()
            .map(|(i, it)| PublicItem::new(i, it.id, &it.features))
            .collect();
        let run = InferenceEpisode::new(self.model.clone(), episode, Ablation::default())?;
        let id = format!("s{:06}", self.next.fetch_add(1, Ordering::Relaxed));
        let resp = CreateResponse {
            id: id.clone(),
            task: if spec.is_classification() {
                "classification"
            } else {
                "ratings"
            }
            .into(),
            num_classes: spec.num_classes(),
            rating_scale: spec.rating_scale(),
            mode: req.mode,
            budget: spec.budget,
            step: 0,
            support,
            eval,
        };
        let session = Session {
            run,
            mode: req.mode,
            pending: None,
            hidden,
        };
        self.sessions
            .lock()
            .expect("session lock")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(resp)
    }

    /// The item the policy wants labeled next (argmax). Repeated calls
    /// before a label is submitted return the same item.
    pub fn query(&self, id: &str) -> SessionResult<QueryResponse> {
        let s = self.get(id)?;
        let mut s = s.lock().expect("session lock");
        let (step, budget) = (s.run.step(), s.run.budget());
        if s.run.budget_exhausted() {
            return Ok(QueryResponse {
                status: QueryStatus::BudgetExhausted,
                index: None,
                item_id: None,
                step,
                budget,
            });
        }
        let index = match s.pending {
            Some(i) => i,
            None => {
                // Argmax never draws from the stream.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (i, _, _) = s.run.active_choice(SelectMode::Argmax, &mut rng)?;
                s.pending = Some(i);
                i
            }
        };
        Ok(QueryResponse {
            status: QueryStatus::Query,
            index: Some(index),
            item_id: Some(s.run.episode().support[index].id),
            step,
            budget,
        })
    }

    pub fn label(&self, id: &str, req: &LabelRequest) -> SessionResult<LabelResponse> {
        let s = self.get(id)?;
        let mut s = s.lock().expect("session lock");
        let index = s
            .pending
            .ok_or_else(|| SessionError::Conflict("no pending query; call query first".into()))?;
        let label = match (req.class, req.rating) {
            (Some(c), None) => Label::Class(c),
            (None, Some(r)) => Label::Rating(r),
            _ => return Err(SessionError::Invalid("give exactly one of `class` or `rating`".into())),
        };
        s.run
            .model()
            .config
            .labels
            .check(&label)
            .map_err(|e| SessionError::Invalid(e.to_string()))?;
        if s.mode == OracleMode::StoredLabel && !same_label(&label, &s.hidden[index]) {
            return Err(SessionError::Invalid("label disagrees with the stored label".into()));
        }
        s.run.reveal(index, label)?;
        s.pending = None;
        Ok(LabelResponse {
            step: s.run.step(),
            budget: s.run.budget(),
            budget_exhausted: s.run.budget_exhausted(),
        })
    }

    pub fn predictions(&self, id: &str) -> SessionResult<PredictionsResponse> {
        let s = self.get(id)?;
        let s = s.lock().expect("session lock");
        let rows = |t: &crate::diff::Tensor| (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect();
        let (slow, metric) = match s.run.slow_predictions() {
            Ok(pred) => {
                let metric = if s.mode == OracleMode::StoredLabel {
                    let truths = s.run.episode().eval_labels();
                    Some(task_metric(&pred, &truths, &s.run.model().config.labels)?)
                } else {
                    None
                };
                let block = PredictionBlock {
                    status: PredictionStatus::Ok,
                    items: (0..pred.rows()).collect(),
                    values: rows(&pred),
                };
                (block, metric)
            }
            Err(Error::NoEvidence) => (PredictionBlock::empty(PredictionStatus::NoEvidence), None),
            Err(e) => return Err(e.into()),
        };
        let fast = match s.run.fast_predictions() {
            Ok(out) => PredictionBlock {
                status: PredictionStatus::Ok,
                items: out.items,
                values: rows(&out.pred),
            },
            Err(Error::NoEvidence) => PredictionBlock::empty(PredictionStatus::NoEvidence),
            Err(Error::PoolExhausted) => PredictionBlock::empty(PredictionStatus::PoolEmpty),
            Err(e) => return Err(e.into()),
        };
        Ok(PredictionsResponse {
            step: s.run.step(),
            budget: s.run.budget(),
            slow,
            fast,
            metric,
        })
    }

    pub fn delete(&self, id: &str) -> SessionResult<()> {
        self.sessions
            .lock()
            .expect("session lock")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| SessionError::NotFound(format!("no session `{id}`")))
    }
}

fn same_label(a: &Label, b: &Label) -> bool {
    match (a, b) {
        (Label::Class(x), Label::Class(y)) => x == y,
        (Label::Rating(x), Label::Rating(y)) => (x - y).abs() < 1e-9,
        _ => false,
    }
}
