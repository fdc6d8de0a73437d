use super::{Rollout, StepRecord, TrainConfig};
use crate::baselines::{HeuristicPolicy, HeuristicView};
use crate::diff::{softmax_into, Tape, Tensor, Var, COSINE_EPS};
use crate::encoders::{encode_context_free, encode_context_sensitive, initial_state, visit_order};
use crate::episodes::{Episode, Features, Label};
use crate::error::{Error, Result};
use crate::model::{Ablation, LabelSpace, Model};
use crate::policy::{choose, controller_update, read, selection_graph, value_estimate, SelectMode, SupportPartition};
use crate::predictors::{fast_predict, reward_graph, slow_predict, task_metric};
use rand_chacha::ChaCha8Rng;

/// Who picks the item at each step.
pub enum ActionSource<'a> {
    /// The learned selection module.
    Policy { mode: SelectMode, rng: &'a mut ChaCha8Rng },
    /// A fixed sequence of support indices; the policy's log-probabilities
    /// are still recorded.
    Scripted(&'a [usize]),
    /// A heuristic; no policy terms are recorded.
    Heuristic {
        policy: &'a HeuristicPolicy,
        rng: &'a mut ChaCha8Rng,
    },
}

#[derive(Clone, Debug)]
pub struct StepGraph {
    pub known: Vec<usize>,
    pub chosen: usize,
    pub log_prob: Option<Var>,
    pub entropy: Option<Var>,
    pub value: Var,
    pub fast_reward: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct EpisodeGraph {
    pub steps: Vec<StepGraph>,
    pub slow_pred: Var,
    pub slow_reward: Var,
    pub partition: SupportPartition,
}

fn target_block(tape: &mut Tape, labels: &LabelSpace, all: &[Label], idx: &[usize]) -> Result<Var> {
    let picked: Vec<Label> = idx.iter().map(|&i| all[i]).collect();
    Ok(tape.constant(labels.target_rows(&picked)?))
}

/// Records one full episode on `tape`: context encoding, T select/read/update
/// steps with fast rewards on the remaining pool, and the terminal slow
/// prediction over the evaluation set.
pub fn build_episode(
    tape: &mut Tape,
    model: &Model,
    episode: &Episode,
    mut actions: ActionSource<'_>,
    ablation: &Ablation,
) -> Result<EpisodeGraph> {
    let budget = episode.spec.budget;
    let n = episode.support.len();
    if budget > n {
        return Err(Error::contract(format!("budget {budget} exceeds support size {n}")));
    }
    if let ActionSource::Scripted(list) = &actions {
        if list.len() < budget {
            return Err(Error::contract("scripted actions shorter than the budget"));
        }
    }
    let labels = &model.config.labels;
    let support_labels = episode.support_labels();
    let eval_labels = episode.eval_labels();
    let item_ids: Vec<u64> = episode.support.iter().map(|i| i.id).collect();

    let sf: Vec<&Features> = episode.support.iter().map(|i| &i.features).collect();
    let ef: Vec<&Features> = episode.eval.iter().map(|i| &i.features).collect();
    let x1 = encode_context_free(tape, model, &sf)?;
    let xe = encode_context_free(tape, model, &ef)?;
    let order = visit_order(n, episode.seed);
    let (x2, back) = encode_context_sensitive(tape, model, x1, &order, ablation)?;
    let (mut h, mut c) = initial_state(tape, model, back);
    let sim = tape.cosine(x2, x2, COSINE_EPS);
    let sim_value = matches!(actions, ActionSource::Heuristic { .. }).then(|| tape.value(sim).clone());

    let mut part = SupportPartition::new(n);
    let mut steps = Vec::with_capacity(budget);
    let mut fast_dist: Option<Tensor> = None;
    for t in 0..budget {
        let known = part.known.clone();
        let value = value_estimate(tape, model, h);
        let (chosen, log_prob, entropy) = match &mut actions {
            ActionSource::Heuristic { policy, rng } => {
                let view = HeuristicView {
                    partition: &part,
                    sim: sim_value.as_ref().expect("computed for heuristics"),
                    fast: fast_dist.as_ref(),
                    labels: &support_labels,
                    item_ids: &item_ids,
                };
                (policy.choose(&view, &mut **rng)?, None, None)
            }
            other => {
                let sel = selection_graph(tape, model, x2, sim, &part, h)?;
                let logits = tape.value(sel.logits).data().to_vec();
                let pos = match other {
                    ActionSource::Policy { mode, rng } => {
                        let mut probs = vec![0.0; logits.len()];
                        softmax_into(&logits, &mut probs);
                        choose(&probs, *mode, &mut **rng)
                    }
                    ActionSource::Scripted(list) => part
                        .unknown
                        .iter()
                        .position(|&u| u == list[t])
                        .ok_or_else(|| Error::contract(format!("scripted item {} is not unlabeled", list[t])))?,
                    ActionSource::Heuristic { .. } => unreachable!(),
                };
                let lp = tape.gather_cols(sel.log_probs, &[pos]);
                let p = tape.exp(sel.log_probs);
                let plp = tape.mul(p, sel.log_probs);
                let s = tape.sum(plp);
                let ent = tape.neg(s);
                (part.unknown[pos], Some(lp), Some(ent))
            }
        };
        let row = tape.gather_rows(x2, &[chosen]);
        let r = read(tape, model, row, Some(&support_labels[chosen]))?;
        (h, c) = controller_update(tape, model, h, c, r)?;
        part.reveal(chosen)?;
        let fast_reward = if part.unknown.is_empty() {
            fast_dist = None;
            None
        } else {
            let targets = target_block(tape, labels, &support_labels, &part.known)?;
            let fv = fast_predict(tape, model, x2, sim, &part, targets, h, ablation)?;
            let truths: Vec<Label> = part.unknown.iter().map(|&i| support_labels[i]).collect();
            if sim_value.is_some() {
                let shown = match labels {
                    LabelSpace::Classes(_) => fv.pred,
                    LabelSpace::Ratings(_) => fv.attn,
                };
                fast_dist = Some(tape.value(shown).clone());
            }
            Some(reward_graph(tape, fv.pred, &truths, labels)?)
        };
        steps.push(StepGraph {
            known,
            chosen,
            log_prob,
            entropy,
            value,
            fast_reward,
        });
    }
    let targets = target_block(tape, labels, &support_labels, &part.known)?;
    let sv = slow_predict(tape, model, xe, x2, &part, targets, h, model.matching_steps(ablation))?;
    let slow_reward = reward_graph(tape, sv.pred, &eval_labels, labels)?;
    Ok(EpisodeGraph {
        steps,
        slow_pred: sv.pred,
        slow_reward,
        partition: part,
    })
}

/// Value-level summary of a recorded episode.
pub(crate) fn rollout_of(tape: &Tape, graph: &EpisodeGraph, episode: &Episode, labels: &LabelSpace) -> Result<Rollout> {
    tape.check()?;
    let scalar = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let steps = graph
        .steps
        .iter()
        .map(|s| StepRecord {
            known: s.known.clone(),
            chosen: s.chosen,
            log_prob: scalar(s.log_prob),
            fast_reward: scalar(s.fast_reward),
            value: tape.scalar(s.value),
            entropy: scalar(s.entropy),
        })
        .collect();
    Ok(Rollout {
        seed: episode.seed,
        steps,
        slow_reward: tape.scalar(graph.slow_reward),
        slow_metric: task_metric(tape.value(graph.slow_pred), &episode.eval_labels(), labels)?,
    })
}

/// Runs one episode without keeping the graph.
pub fn unroll(model: &Model, episode: &Episode, actions: ActionSource<'_>, ablation: &Ablation) -> Result<Rollout> {
    let mut tape = Tape::new(&model.params);
    let graph = build_episode(&mut tape, model, episode, actions, ablation)?;
    rollout_of(&tape, &graph, episode, &model.config.labels)
}

/// −Σ log πₜ·Aₜ − (Σ R̃ₜ + R) + c_v Σ (Vₜ − targetₜ)² − c_e Σ Hₜ, with
/// advantages and targets as constants. Steps without policy terms (heuristic
/// actions) contribute only the pathwise rewards.
pub fn episode_loss(
    tape: &mut Tape,
    graph: &EpisodeGraph,
    advantages: &[f64],
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<Var> {
    if advantages.len() != graph.steps.len() || targets.len() != graph.steps.len() {
        return Err(Error::contract("one advantage and target per step expected"));
    }
    let mut terms = vec![tape.neg(graph.slow_reward)];
    for (t, s) in graph.steps.iter().enumerate() {
        if let Some(r) = s.fast_reward {
            terms.push(tape.neg(r));
        }
        let (Some(lp), Some(ent)) = (s.log_prob, s.entropy) else {
            continue;
        };
        terms.push(tape.scale(lp, -advantages[t]));
        let tv = tape.constant(Tensor::scalar(targets[t]));
        let e = tape.sub(s.value, tv);
        let e2 = tape.square(e);
        terms.push(tape.scale(e2, cfg.value_weight));
        terms.push(tape.scale(ent, -cfg.entropy_weight));
    }
    let all = tape.concat_cols(&terms);
    Ok(tape.sum(all))
}
