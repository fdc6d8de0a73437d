use crate::baselines::{HeuristicPolicy, HeuristicView};
use crate::diff::{Tape, Tensor, COSINE_EPS};
use crate::encoders::{encode_context_free, encode_context_sensitive, initial_state, visit_order};
use crate::episodes::{Episode, Features, Label};
use crate::error::{Error, Result};
use crate::model::{Ablation, LabelSpace, Model};
use crate::policy::{
    controller_update, read, select, ControlState, SelectMode, SelectionDistribution, SupportPartition,
};
use crate::predictors::{fast_predict, slow_predict};
use rand::Rng;
use std::sync::Arc;

/// Steps one episode outside a training graph. Every call records a short
/// fresh tape over stored values, with the same operations the training
/// unroll uses, so results agree bit-for-bit with a rollout on the same
/// choices.
#[derive(Clone, Debug)]
pub struct InferenceEpisode {
    model: Arc<Model>,
    episode: Episode,
    ablation: Ablation,
    x2: Tensor,
    xe: Tensor,
    sim: Tensor,
    state: ControlState,
    partition: SupportPartition,
    /// Labels revealed so far, by support index.
    revealed: Vec<Option<Label>>,
}

/// Fast predictions and attention rows for the unlabeled pool.
#[derive(Clone, Debug, PartialEq)]
pub struct FastOutput {
    pub items: Vec<usize>,
    pub pred: Tensor,
    pub attn: Tensor,
}

impl InferenceEpisode {
    pub fn new(model: Arc<Model>, episode: Episode, ablation: Ablation) -> Result<Self> {
        model.config.compatible_with(&episode.spec)?;
        let n = episode.support.len();
        if episode.spec.budget > n {
            return Err(Error::contract("budget exceeds support size"));
        }
        let (x2, xe, sim, state) = {
            let mut tape = Tape::new(&model.params);
            let sf: Vec<&Features> = episode.support.iter().map(|i| &i.features).collect();
            let ef: Vec<&Features> = episode.eval.iter().map(|i| &i.features).collect();
            let x1 = encode_context_free(&mut tape, &model, &sf)?;
            let xe = encode_context_free(&mut tape, &model, &ef)?;
            let (x2, back) = encode_context_sensitive(&mut tape, &model, x1, &visit_order(n, episode.seed), &ablation)?;
            let (h, c) = initial_state(&mut tape, &model, back);
            let sim = tape.cosine(x2, x2, COSINE_EPS);
            tape.check()?;
            let v = |x| tape.value(x).clone();
            (v(x2), v(xe), v(sim), ControlState { h: v(h), c: v(c) })
        };
        Ok(Self {
            model,
            ablation,
            x2,
            xe,
            sim,
            state,
            partition: SupportPartition::new(n),
            revealed: vec![None; n],
            episode,
        })
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn partition(&self) -> &SupportPartition {
        &self.partition
    }

    pub fn state(&self) -> &ControlState {
        &self.state
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.x2
    }

    pub fn similarities(&self) -> &Tensor {
        &self.sim
    }

    pub fn step(&self) -> usize {
        self.partition.step()
    }

    pub fn budget(&self) -> usize {
        self.episode.spec.budget
    }

    pub fn budget_exhausted(&self) -> bool {
        self.step() >= self.budget() || self.partition.unknown.is_empty()
    }

    /// Labels revealed so far, in query order.
    pub fn known_labels(&self) -> Vec<Label> {
        self.partition
            .known
            .iter()
            .map(|&i| self.revealed[i].expect("known items have labels"))
            .collect()
    }

    /// The learned policy's choice and distribution.
    pub fn active_choice<R: Rng + ?Sized>(
        &self,
        mode: SelectMode,
        rng: &mut R,
    ) -> Result<(usize, SelectionDistribution, f64)> {
        select(
            &self.model,
            &self.x2,
            &self.sim,
            &self.partition,
            &self.state.h,
            mode,
            rng,
        )
    }

    /// A heuristic's choice. `labels` are the hidden support labels, read only
    /// by the balanced oracle.
    pub fn heuristic_choice<R: Rng + ?Sized>(
        &self,
        policy: &HeuristicPolicy,
        labels: &[Label],
        rng: &mut R,
    ) -> Result<usize> {
        let fast = if self.partition.known.is_empty() || self.partition.unknown.is_empty() {
            None
        } else {
            let out = self.fast_predictions()?;
            Some(match self.model.config.labels {
                LabelSpace::Classes(_) => out.pred,
                LabelSpace::Ratings(_) => out.attn,
            })
        };
        let ids: Vec<u64> = self.episode.support.iter().map(|i| i.id).collect();
        let view = HeuristicView {
            partition: &self.partition,
            sim: &self.sim,
            fast: fast.as_ref(),
            labels,
            item_ids: &ids,
        };
        policy.choose(&view, rng)
    }

    /// Reads the label of unlabeled item `i`, updates the controller and the
    /// partition.
    pub fn reveal(&mut self, i: usize, label: Label) -> Result<()> {
        if self.budget_exhausted() {
            return Err(Error::PoolExhausted);
        }
        if !self.partition.unknown.contains(&i) {
            return Err(Error::contract(format!("item {i} is not in the unlabeled pool")));
        }
        self.model.config.labels.check(&label)?;
        let state = {
            let mut tape = Tape::new(&self.model.params);
            let x2 = tape.constant(self.x2.clone());
            let h = tape.constant(self.state.h.clone());
            let c = tape.constant(self.state.c.clone());
            let row = tape.gather_rows(x2, &[i]);
            let r = read(&mut tape, &self.model, row, Some(&label))?;
            let (h, c) = controller_update(&mut tape, &self.model, h, c, r)?;
            tape.check()?;
            ControlState {
                h: tape.value(h).clone(),
                c: tape.value(c).clone(),
            }
        };
        self.state = state;
        self.partition.reveal(i)?;
        self.revealed[i] = Some(label);
        Ok(())
    }

    fn targets(&self) -> Result<Tensor> {
        self.model.config.labels.target_rows(&self.known_labels())
    }

    /// Slow predictions for the evaluation set (`m × C`).
    pub fn slow_predictions(&self) -> Result<Tensor> {
        if self.partition.known.is_empty() {
            return Err(Error::NoEvidence);
        }
        let mut tape = Tape::new(&self.model.params);
        let xe = tape.constant(self.xe.clone());
        let x2 = tape.constant(self.x2.clone());
        let targets = tape.constant(self.targets()?);
        let h = tape.constant(self.state.h.clone());
        let steps = self.model.matching_steps(&self.ablation);
        let sv = slow_predict(&mut tape, &self.model, xe, x2, &self.partition, targets, h, steps)?;
        tape.check()?;
        Ok(tape.value(sv.pred).clone())
    }

    /// Fast predictions for the unlabeled pool.
    pub fn fast_predictions(&self) -> Result<FastOutput> {
        let mut tape = Tape::new(&self.model.params);
        let x2 = tape.constant(self.x2.clone());
        let sim = tape.constant(self.sim.clone());
        let targets = if self.partition.known.is_empty() {
            return Err(Error::NoEvidence);
        } else {
            tape.constant(self.targets()?)
        };
        let h = tape.constant(self.state.h.clone());
        let fv = fast_predict(
            &mut tape,
            &self.model,
            x2,
            sim,
            &self.partition,
            targets,
            h,
            &self.ablation,
        )?;
        tape.check()?;
        Ok(FastOutput {
            items: self.partition.unknown.clone(),
            pred: tape.value(fv.pred).clone(),
            attn: tape.value(fv.attn).clone(),
        })
    }
}
