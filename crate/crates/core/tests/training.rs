mod common;

use activemn::baselines::{HeuristicPolicy, PolicyKind};
use activemn::diff::gradcheck::check_gradients;
use activemn::diff::{AdamConfig, AdamState, Tape};
use activemn::episodes::{episode_seed, ClassificationSpec, Episode, TaskSpec};
use activemn::model::{Ablation, Model};
use activemn::policy::SelectMode;
use activemn::training::{
    build_episode, compute_gae, episode_loss, evaluate, imitation_loss, imitation_pretrain, run_episode, training_step,
    unroll, ActionSource, Selector, TaskEnv, TrainConfig, TrainEvent, Trainer, WorldParams,
};
use common::*;
use std::sync::Arc;

fn env(spec: TaskSpec) -> TaskEnv {
    TaskEnv::synthetic(spec, &WorldParams::default()).unwrap()
}

fn tiny(n: usize, k: usize, budget: usize, sigma: f64) -> TaskSpec {
    TaskSpec::classification(
        ClassificationSpec {
            num_classes: n,
            support_per_class: k,
            eval_per_class: 2,
            feature_dim: 4,
            cluster_sigma: sigma,
        },
        budget,
    )
}

fn model_for(spec: &TaskSpec, d: usize, h: usize) -> Model {
    Model::new(small_config(spec, d, h)).unwrap()
}

fn episode(env: &TaskEnv, i: u64) -> Episode {
    env.episode(episode_seed(77, i)).unwrap()
}

#[test]
fn gae_hand_example() {
    // δ₁ = 2 + 0 − 0.5 = 1.5, δ₀ = 1 + 0.5 − 0.5 = 1.0, A₀ = δ₀ + 0.5·A₁.
    let (adv, targets) = compute_gae(&[1.0, 2.0], &[0.5, 0.5], 1.0, 0.5).unwrap();
    assert_close(&adv, &[1.75, 1.5], 1e-15);
    assert_close(&targets, &[2.25, 2.0], 1e-15);
    assert!(compute_gae(&[1.0], &[0.0, 0.0], 1.0, 0.5).is_err());
}

#[test]
fn gae_limits() {
    let mut r = rng(1);
    let rewards: Vec<f64> = Tensor::randn(&[1, 6], 1.0, &mut r).into_data();
    let values: Vec<f64> = Tensor::randn(&[1, 6], 1.0, &mut r).into_data();
    let gamma = 0.9;

    let (adv, _) = compute_gae(&rewards, &values, gamma, 0.0).unwrap();
    for t in 0..6 {
        let next = if t + 1 < 6 { values[t + 1] } else { 0.0 };
        assert!((adv[t] - (rewards[t] + gamma * next - values[t])).abs() < 1e-12);
    }

    // λ = 1: discounted return minus the baseline.
    let (adv, targets) = compute_gae(&rewards, &values, gamma, 1.0).unwrap();
    for t in 0..6 {
        let ret: f64 = (t..6).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
        assert!((adv[t] - (ret - values[t])).abs() < 1e-9);
        assert!((targets[t] - ret).abs() < 1e-9);
    }

    let (adv, _) = compute_gae(&rewards, &[0.0; 6], 1.0, 1.0).unwrap();
    for t in 0..6 {
        assert!((adv[t] - rewards[t..].iter().sum::<f64>()).abs() < 1e-12);
    }
}

use activemn::diff::Tensor;

#[test]
fn unroll_counts() {
    let spec = tiny(2, 1, 1, 0.2);
    let env = env(spec.clone());
    let m = model_for(&spec, 4, 4);
    let ep = episode(&env, 0);
    assert_eq!((ep.support.len(), ep.eval.len()), (2, 4));
    let mut r = rng(2);
    let ro = unroll(
        &m,
        &ep,
        ActionSource::Policy {
            mode: SelectMode::Sample,
            rng: &mut r,
        },
        &Ablation::default(),
    )
    .unwrap();
    assert_eq!(ro.steps.len(), 1);
    let s = &ro.steps[0];
    assert!(s.known.is_empty());
    assert!(s.log_prob <= 0.0);
    // Fast reward over the single remaining item: log-probability, never above 0.
    assert!(s.fast_reward <= 0.0 && s.fast_reward.is_finite());
    assert!(ro.slow_reward <= 0.0);
    let sum = ro.steps.iter().map(|s| s.fast_reward).sum::<f64>() + ro.slow_reward;
    assert!((ro.total_reward() - sum).abs() < 1e-12);

    let over = Episode {
        spec: tiny(2, 1, 3, 0.2),
        ..ep
    };
    assert!(unroll(&m, &over, ActionSource::Scripted(&[0, 1, 0]), &Ablation::default()).is_err());
}

#[test]
fn argmax_unroll_is_bit_identical() {
    let spec = tiny(3, 3, 5, 0.2);
    let env = env(spec.clone());
    let mut m = model_for(&spec, 6, 5);
    randomize(&mut m, "sel.w_p", 1.0, 3);
    let ep = episode(&env, 1);
    let run = |seed: u64| {
        let mut r = rng(seed);
        unroll(
            &m,
            &ep,
            ActionSource::Policy {
                mode: SelectMode::Argmax,
                rng: &mut r,
            },
            &Ablation::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(5), run(6));
    assert_eq!(a, b);
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(x.log_prob.to_bits(), y.log_prob.to_bits());
    }
}

#[test]
fn zero_weight_model_on_exact_clusters_predicts_revealed_classes() {
    let spec = tiny(3, 2, 3, 0.0);
    let env = env(spec.clone());
    let mut m = model_for(&spec, 6, 5);
    zero_gain(&mut m, "ctx.w_e");
    zero_gain(&mut m, "slow.w_m");
    let ep = episode(&env, 2);
    let labels = ep.support_labels();

    // One label: singleton attention predicts that class everywhere.
    let first = Episode {
        spec: tiny(3, 2, 1, 0.0),
        ..ep.clone()
    };
    let mut tape = Tape::new(&m.params);
    let g = build_episode(
        &mut tape,
        &m,
        &first,
        ActionSource::Scripted(&[0]),
        &Ablation::default(),
    )
    .unwrap();
    let pred = tape.value(g.slow_pred);
    let c = labels[0].class().unwrap();
    for r in 0..pred.rows() {
        let mut want = vec![0.0; 3];
        want[c] = 1.0;
        assert_eq!(pred.row_slice(r), want.as_slice());
    }

    // One label per class: every evaluation item is classified correctly.
    let mut script = Vec::new();
    for class in 0..3 {
        script.push(labels.iter().position(|l| l.class() == Some(class)).unwrap());
    }
    let ro = unroll(&m, &ep, ActionSource::Scripted(&script), &Ablation::default()).unwrap();
    assert_eq!(ro.slow_metric, 1.0);
}

#[test]
fn zero_advantage_gives_no_selection_gradient() {
    let spec = tiny(3, 2, 3, 0.2);
    let env = env(spec.clone());
    let mut m = model_for(&spec, 5, 4);
    randomize(&mut m, "sel.w_p", 1.0, 4);
    let ep = episode(&env, 3);
    let cfg = TrainConfig {
        entropy_weight: 0.0,
        ..TrainConfig::default()
    };
    let mut tape = Tape::new(&m.params);
    let g = build_episode(
        &mut tape,
        &m,
        &ep,
        ActionSource::Scripted(&[4, 0, 2]),
        &Ablation::default(),
    )
    .unwrap();
    let targets: Vec<f64> = g.steps.iter().map(|s| tape.scalar(s.value) + 0.3).collect();
    let loss = episode_loss(&mut tape, &g, &[0.0; 3], &targets, &cfg).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut selection = 0;
    for (id, name, _) in m.params.iter() {
        if name.starts_with("sel.") {
            selection += 1;
            assert!(grads.get(id).data().iter().all(|&v| v == 0.0), "{name} has gradient");
        }
    }
    assert_eq!(selection, 7);
    // The value head still learns from the nonzero value error.
    let v = m.params.id("value.b").unwrap();
    assert!(grads.get(v).data()[0] != 0.0);
}

#[test]
fn encoders_receive_gradient_from_both_rewards() {
    let spec = tiny(3, 2, 2, 0.2);
    let env = env(spec.clone());
    let m = model_for(&spec, 5, 4);
    let ep = episode(&env, 4);
    for which in ["fast", "slow"] {
        let mut tape = Tape::new(&m.params);
        let g = build_episode(
            &mut tape,
            &m,
            &ep,
            ActionSource::Scripted(&[0, 3]),
            &Ablation::default(),
        )
        .unwrap();
        let target = if which == "slow" {
            g.slow_reward
        } else {
            g.steps[1].fast_reward.unwrap()
        };
        let grads = tape.backward(target).unwrap();
        for name in ["enc.l1.v", "enc.l2.b"] {
            let id = m.params.id(name).unwrap();
            assert!(
                grads.get(id).sq_norm() > 0.0,
                "{which} reward gives no gradient to {name}"
            );
        }
    }
}

#[test]
fn full_loss_matches_finite_differences_with_frozen_actions() {
    let spec = tiny(2, 2, 1, 0.3);
    let env = env(spec.clone());
    let mut m = model_for(&spec, 4, 4);
    randomize(&mut m, "sel.w_p", 1.0, 5);
    let ep = episode(&env, 5);
    let mut r = rng(6);
    let ro = unroll(
        &m,
        &ep,
        ActionSource::Policy {
            mode: SelectMode::Sample,
            rng: &mut r,
        },
        &Ablation::default(),
    )
    .unwrap();
    let actions: Vec<usize> = ro.steps.iter().map(|s| s.chosen).collect();
    let (adv, targets) = compute_gae(&ro.rewards(), &ro.values(), 1.0, 0.95).unwrap();
    let cfg = TrainConfig::default();
    let report = check_gradients(&m.params, None, 6, |tape| {
        let g = build_episode(tape, &m, &ep, ActionSource::Scripted(&actions), &Ablation::default())?;
        episode_loss(tape, &g, &adv, &targets, &cfg)
    })
    .unwrap();
    assert!(report.checked > 100);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn identical_batch_equals_single_episode() {
    let spec = tiny(3, 2, 3, 0.2);
    let env = env(spec.clone());
    let ep = episode(&env, 6);
    let cfg = TrainConfig::default();
    let run = |batch: Vec<Episode>| {
        let mut m = model_for(&spec, 5, 4);
        let mut adam = AdamState::new(&m.params, AdamConfig::default());
        let metrics = training_step(
            &mut m,
            &mut adam,
            &batch,
            &cfg,
            &Selector::Active,
            &Ablation::default(),
            9,
        )
        .unwrap();
        (m.params, metrics)
    };
    let (one, m1) = run(vec![ep.clone()]);
    let (two, m2) = run(vec![ep.clone(), ep]);
    assert_eq!(one, two);
    assert_eq!(m1.grad_norm, m2.grad_norm);
    assert_eq!(m1.slow_reward, m2.slow_reward);
}

#[test]
fn heuristic_training_leaves_policy_untouched() {
    let spec = tiny(3, 2, 3, 0.2);
    let env = env(spec.clone());
    let before = model_for(&spec, 5, 4);
    let mut m = before.clone();
    let mut adam = AdamState::new(&m.params, AdamConfig::default());
    let batch = vec![episode(&env, 7), episode(&env, 8)];
    let sel = Selector::Heuristic(HeuristicPolicy::new(PolicyKind::Random).unwrap());
    training_step(
        &mut m,
        &mut adam,
        &batch,
        &TrainConfig::default(),
        &sel,
        &Ablation::default(),
        1,
    )
    .unwrap();
    for (id, name, t) in before.params.iter() {
        let unchanged = m.params.get(id) == t;
        let policy_only = name.starts_with("sel.") || name.starts_with("value");
        if policy_only {
            assert!(unchanged, "{name} moved under a heuristic selector");
        }
    }
    assert_ne!(m.params, before.params);
}

#[test]
fn trainer_is_deterministic_and_reports_faults() {
    let spec = tiny(3, 2, 3, 0.2);
    let env = env(spec.clone());
    let cfg = TrainConfig {
        batch_size: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::new(model_for(&spec, 5, 4), cfg.clone(), Selector::Active).unwrap();
        let events: Vec<TrainEvent> = (0..3).map(|_| t.step(&env).unwrap()).collect();
        (events, t.model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(matches!(a[2], TrainEvent::Update(ref m) if m.update == 2));

    let mut bad = Trainer::new(
        model_for(&spec, 5, 4),
        TrainConfig {
            lr: 1e300,
            batch_size: 2,
            ..TrainConfig::default()
        },
        Selector::Active,
    )
    .unwrap();
    let mut faults = 0;
    for _ in 0..4 {
        if let TrainEvent::Fault { .. } = bad.step(&env).unwrap() {
            faults += 1;
        }
    }
    assert!(faults > 0);
    assert_eq!(bad.update, 4);

    let invalid = TrainConfig {
        gae_lambda: 1.5,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(model_for(&spec, 5, 4), invalid, Selector::Active).is_err());
}

#[test]
fn imitation_zero_steps_and_one_hot_loss() {
    let spec = tiny(3, 2, 3, 0.05);
    let env = env(spec.clone());
    let mut m = model_for(&spec, 5, 4);
    let before = m.params.clone();
    let mut adam = AdamState::new(&m.params, AdamConfig::default());
    let losses = imitation_pretrain(&mut m, &mut adam, &env, 0, &TrainConfig::default()).unwrap();
    assert!(losses.is_empty());
    assert_eq!(m.params, before);

    let mut tape = Tape::new(&m.params);
    let lp = tape.constant(Tensor::row(vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()]));
    let l = imitation_loss(&mut tape, lp, &[0]).unwrap();
    assert!((tape.scalar(l) + 0.5f64.ln()).abs() < 1e-15);
    assert!(tape.scalar(l) > 0.0);
    let certain = tape.constant(Tensor::row(vec![0.0, f64::NEG_INFINITY]));
    let l = imitation_loss(&mut tape, certain, &[0]).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    let cfg = TrainConfig {
        batch_size: 2,
        lr: 0.01,
        ..TrainConfig::default()
    };
    let losses = imitation_pretrain(&mut m, &mut adam, &env, 2, &cfg).unwrap();
    assert_eq!(losses.len(), 2);
    assert_ne!(m.params, before);

    let rspec = ratings_task(8, 3, 20, 4);
    let renv = env_ratings(&rspec);
    let mut rm = model_for(&rspec, 4, 4);
    let mut radam = AdamState::new(&rm.params, AdamConfig::default());
    assert!(imitation_pretrain(&mut rm, &mut radam, &renv, 1, &cfg).is_err());
}

fn env_ratings(spec: &TaskSpec) -> TaskEnv {
    let params = WorldParams {
        train_users: 60,
        ratings_per_user: 15,
        ..WorldParams::default()
    };
    TaskEnv::synthetic(spec.clone(), &params).unwrap()
}

#[test]
fn evaluate_single_step_curve() {
    let spec = tiny(3, 2, 1, 0.2);
    let env = env(spec.clone());
    let m = Arc::new(model_for(&spec, 5, 4));
    let rep = evaluate(&m, &env, &Selector::Active, 5, 0, &Ablation::default()).unwrap();
    assert_eq!(rep.slow.mean.len(), 1);
    assert_eq!(rep.fast.count, vec![5]);
    assert_eq!(rep.unique.as_ref().unwrap().mean, vec![1.0]);
    assert!(evaluate(&m, &env, &Selector::Active, 0, 0, &Ablation::default()).is_err());
}

#[test]
fn inference_matches_training_unroll() {
    let spec = tiny(3, 3, 5, 0.2);
    let env = env(spec.clone());
    let mut m = model_for(&spec, 6, 5);
    randomize(&mut m, "sel.w_p", 1.0, 7);
    let m = Arc::new(m);
    for i in 0..5 {
        let ep = episode(&env, 10 + i);
        let curve = run_episode(&m, ep.clone(), &Selector::Active, &Ablation::default()).unwrap();
        let mut r = rng(0);
        let ro = unroll(
            &m,
            &ep,
            ActionSource::Policy {
                mode: SelectMode::Argmax,
                rng: &mut r,
            },
            &Ablation::default(),
        )
        .unwrap();
        let chosen: Vec<usize> = ro.steps.iter().map(|s| s.chosen).collect();
        assert_eq!(curve.chosen, chosen);
        assert_eq!(curve.slow.last().unwrap().to_bits(), ro.slow_metric.to_bits());
    }
}

fn binom(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[test]
fn random_unique_classes_match_exact_expectation() {
    let (n, k, t) = (10u64, 5u64, 10u64);
    let spec = TaskSpec::classification(
        ClassificationSpec {
            num_classes: n as usize,
            support_per_class: k as usize,
            eval_per_class: 1,
            feature_dim: 4,
            cluster_sigma: 0.2,
        },
        t as usize,
    );
    let env = env(spec.clone());
    let m = Arc::new(model_for(&spec, 4, 4));
    let sel = Selector::for_kind(PolicyKind::Random, &env).unwrap();
    let rep = evaluate(&m, &env, &sel, 1500, 3, &Ablation::default()).unwrap();
    let unique = rep.unique.unwrap();
    let s = n * k;
    let expect = n as f64 * (1.0 - binom(s - k, t) / binom(s, t));
    let (mean, se) = (unique.mean[9], unique.se[9]);
    assert!((mean - expect).abs() < 3.0 * se, "{mean} ± {se} vs {expect}");
    // Unique counts never decrease and never exceed the step.
    for w in unique.mean.windows(2) {
        assert!(w[1] >= w[0]);
    }
}
