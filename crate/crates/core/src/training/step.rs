use super::eval::Selector;
use super::rollout::{build_episode, episode_loss, rollout_of, ActionSource};
use super::{compute_gae, TaskEnv, TrainConfig};
use crate::baselines::balanced_candidates;
use crate::diff::{adam_step, AdamConfig, AdamState, Gradients, Tape, Var, COSINE_EPS};
use crate::encoders::{encode_context_free, encode_context_sensitive, initial_state, visit_order};
use crate::episodes::{episode_seed, Episode, Features};
use crate::error::{Error, Result};
use crate::model::{Ablation, LabelSpace, Model};
use crate::policy::{choose, controller_update, read, selection_graph, SelectMode, SupportPartition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const SAMPLE_SALT: u64 = 0xAC71_0E5A_3B1E_0001;
const IMITATION_SALT: u64 = 0x1A17_A710_0000_0002;

/// Per-update summary; every field is deterministic given the seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub update: u64,
    pub loss: f64,
    /// Mean terminal slow reward.
    pub slow_reward: f64,
    /// Mean per-step fast reward.
    pub fast_reward: f64,
    /// Mean Σₜ R̃ₜ + R per episode.
    pub total_reward: f64,
    /// Mean per-step policy entropy.
    pub entropy: f64,
    pub value_loss: f64,
    /// Mean final slow metric (accuracy or RMSE).
    pub slow_metric: f64,
    pub grad_norm: f64,
}

fn action_rng(episode: &Episode, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(episode_seed(episode.seed ^ SAMPLE_SALT, salt))
}

/// One optimizer update from a batch of episodes. Actions are sampled from
/// the current policy (or chosen by a heuristic selector), each episode with
/// its own stream derived from its seed and `salt`. A numeric fault anywhere
/// leaves parameters and optimizer state untouched.
pub fn training_step(
    model: &mut Model,
    adam: &mut AdamState,
    episodes: &[Episode],
    cfg: &TrainConfig,
    selector: &Selector,
    ablation: &Ablation,
    salt: u64,
) -> Result<StepMetrics> {
    if episodes.is_empty() {
        return Err(Error::contract("training_step needs a nonempty batch"));
    }
    let scale = 1.0 / episodes.len() as f64;
    let mut total = Gradients::zeros_like(&model.params);
    let mut m = StepMetrics {
        update: adam.step,
        loss: 0.0,
        slow_reward: 0.0,
        fast_reward: 0.0,
        total_reward: 0.0,
        entropy: 0.0,
        value_loss: 0.0,
        slow_metric: 0.0,
        grad_norm: 0.0,
    };
    let mut runs = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let mut rng = action_rng(ep, salt);
        let mut tape = Tape::new(&model.params);
        let actions = match selector {
            Selector::Active => ActionSource::Policy {
                mode: SelectMode::Sample,
                rng: &mut rng,
            },
            Selector::Heuristic(policy) => ActionSource::Heuristic { policy, rng: &mut rng },
        };
        let graph = build_episode(&mut tape, model, ep, actions, ablation)?;
        let rollout = rollout_of(&tape, &graph, ep, &model.config.labels)?;
        let rewards: Vec<f64> = rollout.rewards().iter().map(|r| r * cfg.return_scale).collect();
        let (adv, targets) = compute_gae(&rewards, &rollout.values(), cfg.gae_gamma, cfg.gae_lambda)?;
        runs.push((tape, graph, rollout, adv, targets));
    }
    if cfg.normalize_advantages {
        let all: Vec<f64> = runs.iter().flat_map(|r| r.3.iter().copied()).collect();
        let n = all.len().max(1) as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        for r in &mut runs {
            for a in &mut r.3 {
                *a = (*a - mean) / (sd + 1e-8);
            }
        }
    }
    for (mut tape, graph, rollout, adv, targets) in runs {
        let loss = episode_loss(&mut tape, &graph, &adv, &targets, cfg)?;
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::numeric(
                "training_step",
                format!("non-finite loss for episode seed {}", rollout.seed),
            ));
        }
        total.add_scaled(&tape.backward(loss)?, scale);

        let steps = rollout.steps.len().max(1) as f64;
        m.loss += scale * lv;
        m.slow_reward += scale * rollout.slow_reward;
        m.fast_reward += scale * rollout.steps.iter().map(|s| s.fast_reward).sum::<f64>() / steps;
        m.total_reward += scale * rollout.total_reward();
        m.entropy += scale * rollout.steps.iter().map(|s| s.entropy).sum::<f64>() / steps;
        if matches!(selector, Selector::Active) {
            m.value_loss += scale
                * rollout
                    .steps
                    .iter()
                    .zip(&targets)
                    .map(|(s, t)| (s.value - t).powi(2))
                    .sum::<f64>();
        }
        m.slow_metric += scale * rollout.slow_metric;
    }
    m.grad_norm = total.global_norm();
    if !m.grad_norm.is_finite() {
        return Err(Error::numeric("training_step", "non-finite gradient"));
    }
    if cfg.grad_clip > 0.0 && m.grad_norm > cfg.grad_clip {
        total.scale(cfg.grad_clip / m.grad_norm);
    }
    adam.config.lr = cfg.lr;
    adam_step(&mut model.params, &total, adam)?;
    Ok(m)
}

/// −mean over `positions` of the log-probabilities at those positions: the
/// cross-entropy against an oracle spread uniformly over them.
pub fn imitation_loss(tape: &mut Tape, log_probs: Var, positions: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::contract("oracle distribution has no support"));
    }
    let picked = tape.gather_cols(log_probs, positions);
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

fn imitation_episode(tape: &mut Tape, model: &Model, ep: &Episode, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n = ep.support.len();
    let labels = ep.support_labels();
    let sf: Vec<&Features> = ep.support.iter().map(|i| &i.features).collect();
    let x1 = encode_context_free(tape, model, &sf)?;
    let (x2, back) = encode_context_sensitive(tape, model, x1, &visit_order(n, ep.seed), &Ablation::default())?;
    let (mut h, mut c) = initial_state(tape, model, back);
    let sim = tape.cosine(x2, x2, COSINE_EPS);
    let mut part = SupportPartition::new(n);
    let mut terms = Vec::with_capacity(ep.spec.budget);
    for _ in 0..ep.spec.budget {
        let sel = selection_graph(tape, model, x2, sim, &part, h)?;
        let eligible = balanced_candidates(&part, &labels)?;
        let positions: Vec<usize> = eligible
            .iter()
            .map(|e| {
                part.unknown
                    .iter()
                    .position(|u| u == e)
                    .expect("candidate is unlabeled")
            })
            .collect();
        terms.push(imitation_loss(tape, sel.log_probs, &positions)?);
        let probs: Vec<f64> = tape.value(sel.log_probs).data().iter().map(|v| v.exp()).collect();
        let i = part.unknown[choose(&probs, SelectMode::Sample, rng)];
        let row = tape.gather_rows(x2, &[i]);
        let r = read(tape, model, row, Some(&labels[i]))?;
        (h, c) = controller_update(tape, model, h, c, r)?;
        part.reveal(i)?;
    }
    let all = tape.concat_cols(&terms);
    Ok(tape.sum(all))
}

/// Pushes the selection distribution towards the balanced oracle (uniform
/// over unlabeled items of the least-revealed classes) along trajectories
/// sampled from the current policy. Returns the mean loss per update.
pub fn imitation_pretrain(
    model: &mut Model,
    adam: &mut AdamState,
    env: &TaskEnv,
    steps: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if !matches!(model.config.labels, LabelSpace::Classes(_)) {
        return Err(Error::Config("imitation needs a class-labeled task".into()));
    }
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let scale = 1.0 / cfg.batch_size as f64;
        let mut total = Gradients::zeros_like(&model.params);
        let mut loss = 0.0;
        for b in 0..cfg.batch_size {
            let ep = env.episode(episode_seed(cfg.seed ^ IMITATION_SALT, (k * cfg.batch_size + b) as u64))?;
            let mut rng = action_rng(&ep, IMITATION_SALT ^ k as u64);
            let mut tape = Tape::new(&model.params);
            let l = imitation_episode(&mut tape, model, &ep, &mut rng)?;
            loss += scale * tape.scalar(l);
            total.add_scaled(&tape.backward(l)?, scale);
        }
        adam.config.lr = cfg.lr;
        adam_step(&mut model.params, &total, adam)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Emitted once per attempted update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Update(StepMetrics),
    /// A numeric fault skipped the update.
    Fault {
        update: u64,
        detail: String,
    },
}

/// The meta-training loop's state.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub selector: Selector,
    pub ablation: Ablation,
    /// Updates attempted so far, including skipped ones.
    pub update: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, selector: Selector) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            model,
            adam,
            cfg,
            selector,
            ablation: Ablation::default(),
            update: 0,
        })
    }

    /// Training episodes for the next update.
    pub fn batch(&self, env: &TaskEnv) -> Result<Vec<Episode>> {
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|i| env.episode(episode_seed(self.cfg.seed, self.update * b + i)))
            .collect()
    }

    pub fn pretrain(&mut self, env: &TaskEnv) -> Result<Vec<f64>> {
        let steps = self.cfg.imitation_steps;
        imitation_pretrain(&mut self.model, &mut self.adam, env, steps, &self.cfg)
    }

    /// Runs one update. Numeric faults are reported as events rather than
    /// errors; the update index advances either way.
    pub fn step(&mut self, env: &TaskEnv) -> Result<TrainEvent> {
        let batch = self.batch(env)?;
        let salt = episode_seed(self.cfg.seed, self.update);
        let out = training_step(
            &mut self.model,
            &mut self.adam,
            &batch,
            &self.cfg,
            &self.selector,
            &self.ablation,
            salt,
        );
        let update = self.update;
        self.update += 1;
        match out {
            Ok(mut m) => {
                m.update = update;
                Ok(TrainEvent::Update(m))
            }
            Err(Error::NumericFault { op, detail }) => Ok(TrainEvent::Fault {
                update,
                detail: format!("{op}: {detail}"),
            }),
            Err(e) => Err(e),
        }
    }
}
