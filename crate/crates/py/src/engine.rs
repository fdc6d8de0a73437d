//! Plain-Rust facade behind the Python module: one model on a synthetic
//! task, with training, evaluation, checkpoints and interactive sessions.

use activemn::baselines::PolicyKind;
use activemn::checkpoint::Checkpoint;
use activemn::config::parse_task_spec;
use activemn::episodes::TaskSpec;
use activemn::model::{Ablation, Model, ModelConfig};
use activemn::session::{
    CreateRequest, CreateResponse, LabelRequest, LabelResponse, OracleMode, PredictionsResponse, QueryResponse,
    SessionError, SessionStore,
};
use activemn::training::{
    evaluate, EvalReport, Selector, StepMetrics, TaskEnv, TrainConfig, TrainEvent, Trainer, WorldParams,
};
use activemn::{Error, Result};
use std::path::Path;
use std::sync::Arc;

pub struct Engine {
    trainer: Trainer,
    task: TaskSpec,
    world: WorldParams,
    env: Arc<TaskEnv>,
    /// Rebuilt lazily after the weights change.
    sessions: Option<SessionStore>,
}

fn session_err(e: SessionError) -> Error {
    Error::Config(format!("{} ({})", e.message(), e.status()))
}

impl Engine {
    /// Fresh model for an inline task spec such as
    /// `task=classification,num_classes=5,budget=5`.
    pub fn new(task: &str, embed_dim: usize, hidden_dim: usize, seed: u64, train: TrainConfig) -> Result<Self> {
        let task = parse_task_spec(task)?;
        let mut config = ModelConfig::for_task(&task, embed_dim, hidden_dim);
        config.init_seed = seed;
        let world = WorldParams::default();
        let env = Arc::new(TaskEnv::synthetic(task.clone(), &world)?);
        let mut model = Model::new(config)?;
        if let Some(rows) = env.item_vectors() {
            model.load_item_vectors(rows)?;
        }
        Self::assemble(model, None, task, world, env, train)
    }

    pub fn load(path: &Path, train: TrainConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let task = ck
            .meta
            .task
            .clone()
            .ok_or_else(|| Error::Config("checkpoint records no task".into()))?;
        let world = ck.meta.world.clone().unwrap_or_default();
        let env = Arc::new(TaskEnv::synthetic(task.clone(), &world)?);
        let mut engine = Self::assemble(ck.model()?, ck.adam.clone(), task, world, env, train)?;
        engine.trainer.update = ck.meta.update;
        Ok(engine)
    }

    fn assemble(
        model: Model,
        adam: Option<activemn::diff::AdamState>,
        task: TaskSpec,
        world: WorldParams,
        env: Arc<TaskEnv>,
        train: TrainConfig,
    ) -> Result<Self> {
        model.config.compatible_with(&task)?;
        let mut trainer = Trainer::new(model, train, Selector::Active)?;
        if let Some(a) = adam {
            trainer.adam = a;
        }
        Ok(Self {
            trainer,
            task,
            world,
            env,
            sessions: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.trainer.model
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn updates(&self) -> u64 {
        self.trainer.update
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(
            &self.trainer.model,
            Some(self.task.clone()),
            Some(&self.trainer.adam),
            self.trainer.update,
        );
        ck.meta.world = Some(self.world.clone());
        ck.save(path)
    }

    /// Runs `updates` optimizer steps with the given selector; skipped
    /// (faulted) updates are omitted from the returned metrics.
    pub fn train(&mut self, updates: usize, policy: &str) -> Result<Vec<StepMetrics>> {
        self.trainer.selector = Selector::for_kind(policy.parse()?, &self.env)?;
        self.sessions = None;
        let mut out = Vec::with_capacity(updates);
        for _ in 0..updates {
            if let TrainEvent::Update(m) = self.trainer.step(&self.env)? {
                out.push(m);
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, policy: &str, episodes: usize, seed: u64, fixed_gamma: bool) -> Result<EvalReport> {
        let kind: PolicyKind = policy.parse()?;
        let selector = Selector::for_kind(kind, &self.env)?;
        let ablation = Ablation {
            fixed_gamma,
            ..Ablation::default()
        };
        let model = Arc::new(self.trainer.model.clone());
        evaluate(&model, &self.env, &selector, episodes, seed, &ablation)
    }

    fn store(&mut self) -> &SessionStore {
        if self.sessions.is_none() {
            let store = SessionStore::new(
                Arc::new(self.trainer.model.clone()),
                Some(self.task.clone()),
                self.world.clone(),
            );
            store.insert_env(self.env.clone());
            self.sessions = Some(store);
        }
        self.sessions.as_ref().expect("store just built")
    }

    pub fn create_session(&mut self, seed: u64, episode: u64, human: bool) -> Result<CreateResponse> {
        let req = CreateRequest {
            task: None,
            seed,
            episode,
            mode: if human {
                OracleMode::Human
            } else {
                OracleMode::StoredLabel
            },
        };
        self.store().create(&req).map_err(session_err)
    }

    pub fn query(&mut self, id: &str) -> Result<QueryResponse> {
        self.store().query(id).map_err(session_err)
    }

    pub fn label(&mut self, id: &str, class: Option<usize>, rating: Option<f64>) -> Result<LabelResponse> {
        self.store()
            .label(id, &LabelRequest { class, rating })
            .map_err(session_err)
    }

    pub fn predictions(&mut self, id: &str) -> Result<PredictionsResponse> {
        self.store().predictions(id).map_err(session_err)
    }
}
