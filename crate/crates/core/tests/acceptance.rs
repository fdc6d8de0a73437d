//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Learning criteria train small models (d = H = 32) from scratch, so the
//! whole run takes tens of minutes on one core. Set `ACCEPTANCE_ONLY=1,2,8`
//! to run a subset and `ACCEPTANCE_STRICT=1` to exit nonzero on any FAIL.

use activemn::baselines::{HeuristicPolicy, PolicyKind};
use activemn::checkpoint::Checkpoint;
use activemn::diff::gradcheck::check_gradients;
use activemn::diff::{lstm_cell, LayerNormParams, LstmCell, ParamId, ParamStore, Tape, Tensor, Var, WnLinear};
use activemn::encoders::{encode_context_free, encode_context_sensitive, initial_state, visit_order};
use activemn::episodes::{episode_seed, ClassificationSpec, Features, Label, RatingsSpec, TaskSpec};
use activemn::model::{Ablation, EncoderConfig, Model, ModelConfig};
use activemn::policy::{controller_update, read, selection_graph, value_estimate, SelectMode, SupportPartition};
use activemn::predictors::{fast_predict, slow_predict};
use activemn::session::{CreateRequest, LabelRequest, OracleMode, QueryStatus, SessionStore};
use activemn::training::{
    build_episode, compute_gae, episode_loss, evaluate, evaluate_ridge, tune_ridge, unroll, ActionSource, EvalReport,
    InferenceEpisode, Selector, TaskEnv, TrainConfig, TrainEvent, Trainer, WorldParams,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

const DIM: usize = 32;
const EVAL_SEED: u64 = 90_001;
const EVAL_EPISODES: usize = 1000;
const UPDATES_5WAY: usize = 1500;
const UPDATES_10WAY: usize = 1500;
const UPDATES_RATINGS: usize = 1500;
const RATINGS_EPISODES: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn probe(t: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let m = t.mul(x, w);
    t.sum(m)
}

fn ids_with(model: &Model, prefixes: &[&str]) -> Vec<ParamId> {
    model
        .params
        .iter()
        .filter(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .map(|(id, _, _)| id)
        .collect()
}

fn class_spec(n: usize, k: usize, dim: usize, sigma: f64, budget: usize) -> TaskSpec {
    TaskSpec::classification(
        ClassificationSpec {
            num_classes: n,
            support_per_class: k,
            eval_per_class: 1,
            feature_dim: dim,
            cluster_sigma: sigma,
        },
        budget,
    )
}

fn env(spec: &TaskSpec) -> TaskEnv {
    TaskEnv::synthetic(spec.clone(), &WorldParams::default()).expect("synthetic world")
}

/// Randomizes every parameter a little so gates and attention are not at
/// their symmetric starting points.
fn jitter(model: &mut Model, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let t = model.params.get_mut(id);
        for v in t.data_mut() {
            *v += 0.3 * r.random_range(-1.0..1.0);
        }
    }
}

fn train(spec: &TaskSpec, env: &TaskEnv, selector: Selector, updates: usize, seed: u64, item_vectors: bool) -> Model {
    let mut cfg = ModelConfig::for_task(spec, DIM, DIM);
    cfg.init_seed = seed;
    let mut model = Model::new(cfg).expect("model");
    if item_vectors {
        model
            .load_item_vectors(env.item_vectors().expect("ratings env"))
            .expect("item vectors");
    }
    let cfg = TrainConfig {
        max_updates: updates,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg, selector).expect("trainer");
    let mut faults = 0;
    for _ in 0..updates {
        if let TrainEvent::Fault { .. } = trainer.step(env).expect("update") {
            faults += 1;
        }
    }
    if faults > 0 {
        println!("  ({faults} updates skipped on numeric faults)");
    }
    trainer.model
}

fn at(report: &EvalReport, t: usize) -> (f64, f64) {
    (report.slow.mean[t - 1], report.slow.se[t - 1])
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let mut worst: Vec<(String, f64, f64)> = Vec::new();
    let mut record = |name: &str, tol: f64, r: activemn::Result<activemn::diff::gradcheck::GradCheckReport>| match r {
        Ok(rep) => worst.push((format!("{name} ({})", rep.worst), rep.max_rel_error, tol)),
        Err(e) => worst.push((format!("{name}: {e}"), f64::INFINITY, tol)),
    };

    // Building blocks on their own stores.
    let mut store = ParamStore::new();
    let lin = WnLinear::new(&mut store, "lin", 5, 4, &mut rng(1));
    let ln = LayerNormParams::new(&mut store, "ln", 6);
    let cell = LstmCell::new(&mut store, "cell", 3, 4, true, &mut rng(2));
    let jittered = {
        let mut s = store.clone();
        let ids: Vec<ParamId> = s.ids().collect();
        let mut r = rng(3);
        for id in ids {
            for v in s.get_mut(id).data_mut() {
                *v += 0.2 * r.random_range(-1.0..1.0);
            }
        }
        s
    };
    let only = |prefix: &str| -> Vec<ParamId> {
        jittered
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    };
    record(
        "wn_linear",
        1e-4,
        check_gradients(&jittered, Some(&only("lin")), 50, |t| {
            let x = t.constant(Tensor::randn(&[3, 5], 1.0, &mut rng(4)));
            let y = lin.forward(t, x);
            Ok(probe(t, y, 5))
        }),
    );
    record(
        "layer_norm",
        1e-4,
        check_gradients(&jittered, Some(&only("ln")), 50, |t| {
            let x = t.constant(Tensor::randn(&[2, 6], 1.0, &mut rng(6)));
            let y = ln.forward(t, x);
            Ok(probe(t, y, 7))
        }),
    );
    record(
        "lstm_cell",
        1e-4,
        check_gradients(&jittered, Some(&only("cell")), 30, |t| {
            let x = t.constant(Tensor::randn(&[2, 3], 1.0, &mut rng(8)));
            let h = t.constant(Tensor::randn(&[2, 4], 0.5, &mut rng(9)));
            let c = t.constant(Tensor::randn(&[2, 4], 0.5, &mut rng(10)));
            let (h1, c1) = lstm_cell(t, h, c, x, &cell)?;
            let (h2, c2) = lstm_cell(t, h1, c1, x, &cell)?;
            let a = probe(t, h2, 11);
            let b = probe(t, c2, 12);
            Ok(t.add(a, b))
        }),
    );

    // Model modules, d = 6, H = 5, on a 3-way task with 2 items per class.
    let spec = class_spec(3, 2, 4, 0.3, 3);
    let mut m = Model::new(ModelConfig::for_task(&spec, 6, 5)).expect("model");
    jitter(&mut m, 13);
    let ep = env(&spec).episode(77).expect("episode");
    let feats: Vec<&Features> = ep.support.iter().map(|it| &it.features).collect();
    let eval_feats: Vec<&Features> = ep.eval.iter().map(|it| &it.features).collect();
    let labels = ep.support_labels();
    let order = visit_order(feats.len(), ep.seed);
    let mut partition = SupportPartition::new(feats.len());
    partition.reveal(order[0]).unwrap();
    partition.reveal(order[3]).unwrap();
    let known_labels: Vec<Label> = partition.known.iter().map(|&i| labels[i]).collect();
    let targets = m.config.labels.target_rows(&known_labels).unwrap();
    let ab = Ablation::default();

    record(
        "mlp + context encoder",
        1e-4,
        check_gradients(&m.params, Some(&ids_with(&m, &["enc.", "ctx."])), 12, |t| {
            let x1 = encode_context_free(t, &m, &feats)?;
            let (x2, back) = encode_context_sensitive(t, &m, x1, &order, &ab)?;
            let a = probe(t, x2, 14);
            let b = probe(t, back, 15);
            Ok(t.add(a, b))
        }),
    );

    let rspec = TaskSpec::ratings(
        RatingsSpec {
            support_size: 5,
            eval_size: 2,
            num_movies: 12,
            ..RatingsSpec::default()
        },
        3,
    );
    let mut rm = Model::new(ModelConfig::for_task(&rspec, 6, 5)).expect("model");
    jitter(&mut rm, 16);
    let ids_feats: Vec<Features> = [3usize, 7, 1].iter().map(|&i| Features::Id(i)).collect();
    let id_refs: Vec<&Features> = ids_feats.iter().collect();
    record(
        "lookup encoder",
        1e-4,
        check_gradients(&rm.params, Some(&ids_with(&rm, &["enc."])), 40, |t| {
            let x = encode_context_free(t, &rm, &id_refs)?;
            Ok(probe(t, x, 17))
        }),
    );

    let mut ccfg = ModelConfig::for_task(&spec, 6, 5);
    ccfg.encoder = EncoderConfig::Conv { side: 8, filters: 3 };
    let mut cm = Model::new(ccfg).expect("model");
    jitter(&mut cm, 18);
    let imgs: Vec<Features> = (0..2)
        .map(|s| Features::Image {
            side: 8,
            pixels: Tensor::randn(&[1, 64], 1.0, &mut rng(19 + s)).data().to_vec(),
        })
        .collect();
    let img_refs: Vec<&Features> = imgs.iter().collect();
    record(
        "conv encoder",
        1e-4,
        check_gradients(&cm.params, Some(&ids_with(&cm, &["enc."])), 25, |t| {
            let x = encode_context_free(t, &cm, &img_refs)?;
            Ok(probe(t, x, 21))
        }),
    );

    // Shared trunk: x″, similarities and a controller state after one read.
    let trunk = |t: &mut Tape| -> activemn::Result<(Var, Var, Var, Var)> {
        let x1 = encode_context_free(t, &m, &feats)?;
        let (x2, back) = encode_context_sensitive(t, &m, x1, &order, &ab)?;
        let sim = t.cosine(x2, x2, 1e-8);
        let (h, c) = initial_state(t, &m, back);
        let row = t.gather_rows(x2, &[order[0]]);
        let r = read(t, &m, row, Some(&labels[order[0]]))?;
        let (h, _) = controller_update(t, &m, h, c, r)?;
        Ok((x2, sim, h, back))
    };
    record(
        "read + controller",
        1e-4,
        check_gradients(&m.params, Some(&ids_with(&m, &["read", "ctl."])), 12, |t| {
            let (_, _, h, _) = trunk(t)?;
            Ok(probe(t, h, 22))
        }),
    );
    record(
        "selection logits",
        1e-4,
        check_gradients(&m.params, Some(&ids_with(&m, &["sel."])), 12, |t| {
            let (x2, sim, h, _) = trunk(t)?;
            let s = selection_graph(t, &m, x2, sim, &partition, h)?;
            let a = probe(t, s.logits, 23);
            let b = probe(t, s.log_probs, 24);
            Ok(t.add(a, b))
        }),
    );
    record(
        "fast predictor",
        1e-4,
        check_gradients(&m.params, Some(&ids_with(&m, &["fast.", "enc.l2"])), 12, |t| {
            let (x2, sim, h, _) = trunk(t)?;
            let y = t.constant(targets.clone());
            let f = fast_predict(t, &m, x2, sim, &partition, y, h, &ab)?;
            Ok(probe(t, f.pred, 25))
        }),
    );
    record(
        "slow predictor",
        1e-4,
        check_gradients(&m.params, Some(&ids_with(&m, &["slow.", "ctx.w_e"])), 12, |t| {
            let (x2, _, h, _) = trunk(t)?;
            let xe = encode_context_free(t, &m, &eval_feats)?;
            let y = t.constant(targets.clone());
            let s = slow_predict(t, &m, xe, x2, &partition, y, h, 3)?;
            Ok(probe(t, s.pred, 26))
        }),
    );
    record(
        "value head",
        1e-4,
        check_gradients(&m.params, Some(&ids_with(&m, &["value"])), 12, |t| {
            let (_, _, h, _) = trunk(t)?;
            let v = value_estimate(t, &m, h);
            Ok(probe(t, v, 27))
        }),
    );

    // Whole episode loss with frozen sampled actions, dims ≤ 8.
    let fspec = class_spec(2, 2, 4, 0.3, 2);
    let mut fm = Model::new(ModelConfig::for_task(&fspec, 6, 5)).expect("model");
    jitter(&mut fm, 28);
    let fep = env(&fspec).episode(5).expect("episode");
    let mut r = rng(29);
    let ro = unroll(
        &fm,
        &fep,
        ActionSource::Policy {
            mode: SelectMode::Sample,
            rng: &mut r,
        },
        &ab,
    );
    match ro {
        Ok(ro) => {
            let actions: Vec<usize> = ro.steps.iter().map(|s| s.chosen).collect();
            let (adv, targets) = compute_gae(&ro.rewards(), &ro.values(), 1.0, 0.95).unwrap();
            let cfg = TrainConfig::default();
            record(
                "full episode loss",
                1e-3,
                check_gradients(&fm.params, None, 6, |t| {
                    let g = build_episode(t, &fm, &fep, ActionSource::Scripted(&actions), &ab)?;
                    episode_loss(t, &g, &adv, &targets, &cfg)
                }),
            );
        }
        Err(e) => record("full episode loss", 1e-3, Err(e)),
    }

    let failed: Vec<String> = worst
        .iter()
        .filter(|(_, e, tol)| !(e < tol))
        .map(|(n, e, _)| format!("{n}: {e:.2e}"))
        .collect();
    let max = worst
        .iter()
        .map(|(n, e, _)| (n.split(" (").next().unwrap_or("").to_string(), *e))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if failed.is_empty() {
        outcome(
            true,
            format!("{} modules, max relative error {:.1e} ({})", worst.len(), max.1, max.0),
        )
    } else {
        outcome(false, failed.join("; "))
    }
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    const INSTANCES: usize = 10_000;
    let tol = 1e-9;
    let mut r = rng(2024);
    let mut models: Vec<(Arc<Model>, TaskEnv)> = Vec::new();
    for s in 0..4u64 {
        let n = 2 + s as usize;
        let spec = class_spec(n, 3, 6, 0.3, n * 3 - 1);
        let mut m = Model::new(ModelConfig::for_task(&spec, 8, 6)).unwrap();
        jitter(&mut m, 300 + s);
        models.push((Arc::new(m), env(&spec)));
    }
    for s in 0..2u64 {
        let spec = TaskSpec::ratings(
            RatingsSpec {
                support_size: 8,
                eval_size: 4,
                num_movies: 40,
                world_seed: 11 + s,
                ..RatingsSpec::default()
            },
            7,
        );
        let e = env(&spec);
        let mut m = Model::new(ModelConfig::for_task(&spec, 8, 6)).unwrap();
        m.load_item_vectors(e.item_vectors().unwrap()).unwrap();
        jitter(&mut m, 400 + s);
        models.push((Arc::new(m), e));
    }
    let mut violations = Vec::new();
    let mut checked = 0;
    let mut ep_index = 0u64;
    while checked < INSTANCES {
        let (m, e) = &models[r.random_range(0..models.len())];
        let ep = e.episode(episode_seed(5150, ep_index)).unwrap();
        ep_index += 1;
        let labels = ep.support_labels();
        let mut run = InferenceEpisode::new(m.clone(), ep, Ablation::default()).unwrap();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut r);
        for &i in order.iter().take(labels.len() - 1) {
            run.reveal(i, labels[i]).unwrap();
            let known: Vec<f64> = run.known_labels().iter().map(Label::value).collect();
            let (lo, hi) = known
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let in_range = |row: &[f64]| -> bool {
                match row.len() {
                    1 => row[0] >= lo - tol && row[0] <= hi + tol,
                    _ => row.iter().all(|&p| p >= -tol) && (row.iter().sum::<f64>() - 1.0).abs() <= tol,
                }
            };
            let (_, dist, _) = run.active_choice(SelectMode::Sample, &mut r).unwrap();
            let unknown: HashSet<usize> = run.partition().unknown.iter().copied().collect();
            let items: HashSet<usize> = dist.items.iter().copied().collect();
            if (dist.probs.iter().sum::<f64>() - 1.0).abs() > tol
                || items != unknown
                || dist.probs.iter().any(|&p| !(p > 0.0))
            {
                violations.push(format!("selection at episode {ep_index}"));
            }
            let fast = run.fast_predictions().unwrap();
            if (0..fast.pred.rows()).any(|k| !in_range(fast.pred.row_slice(k))) {
                violations.push(format!("fast prediction at episode {ep_index}"));
            }
            let slow = run.slow_predictions().unwrap();
            if (0..slow.rows()).any(|k| !in_range(slow.row_slice(k))) {
                violations.push(format!("slow prediction at episode {ep_index}"));
            }
            checked += 1;
            if checked == INSTANCES {
                break;
            }
        }
    }
    if violations.is_empty() {
        outcome(
            true,
            format!("{checked} instances over {ep_index} episodes, no violations"),
        )
    } else {
        let n = violations.len();
        violations.truncate(3);
        outcome(false, format!("{n} violations, e.g. {}", violations.join(", ")))
    }
}

// ------------------------------------------------------- criteria 3 and 4

struct FiveWay {
    random: (f64, f64),
    balanced: (f64, f64),
}

fn criterion_3(ctx: &mut Option<FiveWay>) -> Outcome {
    let n = 5;
    let spec = class_spec(n, 5, 16, 0.2, n);
    let e = env(&spec);
    let t0 = Instant::now();
    let mn = Arc::new(train(
        &spec,
        &e,
        Selector::Heuristic(HeuristicPolicy::new(PolicyKind::Random).unwrap()),
        UPDATES_5WAY,
        31,
        false,
    ));
    let train_s = t0.elapsed().as_secs_f64();
    let ab = Ablation::default();
    let random = evaluate(
        &mn,
        &e,
        &Selector::for_kind(PolicyKind::Random, &e).unwrap(),
        EVAL_EPISODES,
        EVAL_SEED,
        &ab,
    )
    .unwrap();
    let balanced = evaluate(
        &mn,
        &e,
        &Selector::for_kind(PolicyKind::Balanced, &e).unwrap(),
        EVAL_EPISODES,
        EVAL_SEED,
        &ab,
    )
    .unwrap();
    let (r, b) = (at(&random, n), at(&balanced, n));
    *ctx = Some(FiveWay { random: r, balanced: b });
    let gap = 100.0 * (b.0 - r.0);
    outcome(
        gap >= 15.0,
        format!(
            "balanced-MN {:.1}% vs random-MN {:.1}% at t=N (gap {gap:.1} points, need ≥ 15; {UPDATES_5WAY} updates, {train_s:.0}s)",
            100.0 * b.0,
            100.0 * r.0
        ),
    )
}

fn criterion_4(ctx: &Option<FiveWay>) -> Outcome {
    let n = 5;
    let spec = class_spec(n, 5, 16, 0.2, n);
    let e = env(&spec);
    let t0 = Instant::now();
    let model = Arc::new(train(&spec, &e, Selector::Active, UPDATES_5WAY, 41, false));
    let train_s = t0.elapsed().as_secs_f64();
    let ab = Ablation::default();
    let active = evaluate(&model, &e, &Selector::Active, EVAL_EPISODES, EVAL_SEED, &ab).unwrap();
    let a = at(&active, n).0;
    let FiveWay { random, balanced } = match ctx {
        Some(c) => FiveWay {
            random: c.random,
            balanced: c.balanced,
        },
        None => return outcome(false, "needs the criterion 3 baselines"),
    };
    let pass = a >= random.0 + 0.10 && a >= balanced.0 - 0.05;
    outcome(
        pass,
        format!(
            "active {:.1}% vs random-MN {:.1}% (need ≥ +10) and balanced-MN {:.1}% (need ≥ −5) at t=N ({UPDATES_5WAY} updates, {train_s:.0}s)",
            100.0 * a,
            100.0 * random.0,
            100.0 * balanced.0
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn criterion_5() -> Outcome {
    let (n, k) = (5usize, 5usize);
    let spec = class_spec(n, k, 16, 0.05, n);
    let e = env(&spec);
    let model = Arc::new(train(&spec, &e, Selector::Active, UPDATES_5WAY, 51, false));
    let active = evaluate(
        &model,
        &e,
        &Selector::Active,
        EVAL_EPISODES,
        EVAL_SEED,
        &Ablation::default(),
    )
    .unwrap();
    let unique = active.unique.as_ref().expect("classification").mean[n - 1];
    let s = (n * k) as u64;
    let expected = n as f64 * (1.0 - binomial(s - k as u64, n as u64) / binomial(s, n as u64));
    let pass = unique >= 0.9 * n as f64 && unique > expected;
    outcome(
        pass,
        format!(
            "mean unique classes at t=N: {unique:.3} (need ≥ {:.1} and > random expectation {expected:.3})",
            0.9 * n as f64
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let n = 10;
    let spec = class_spec(n, 5, 16, 0.2, n);
    let e = env(&spec);
    let model = Arc::new(train(&spec, &e, Selector::Active, UPDATES_10WAY, 61, false));
    let full = evaluate(
        &model,
        &e,
        &Selector::Active,
        EVAL_EPISODES,
        EVAL_SEED,
        &Ablation::default(),
    )
    .unwrap();
    let fixed = Ablation {
        fixed_gamma: true,
        ..Ablation::default()
    };
    let ablated = evaluate(&model, &e, &Selector::Active, EVAL_EPISODES, EVAL_SEED, &fixed).unwrap();
    let mean = |r: &EvalReport| r.fast.mean.iter().sum::<f64>() / r.fast.mean.len() as f64;
    let (a, b) = (mean(&full), mean(&ablated));
    let drop = 100.0 * (a - b);
    outcome(
        drop >= 2.0,
        format!(
            "fast accuracy {:.1}% learned γ vs {:.1}% γ≡1 (drop {drop:.1} points, need ≥ 2)",
            100.0 * a,
            100.0 * b
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let spec = TaskSpec::ratings(RatingsSpec::default(), 10);
    let e = env(&spec);
    let ridge = tune_ridge(&e, 300, 4242).unwrap();
    let ridge_eval = evaluate_ridge(&e, &ridge, RATINGS_EPISODES, EVAL_SEED).unwrap();
    let model = Arc::new(train(&spec, &e, Selector::Active, UPDATES_RATINGS, 71, true));
    let active = evaluate(
        &model,
        &e,
        &Selector::Active,
        RATINGS_EPISODES,
        EVAL_SEED,
        &Ablation::default(),
    )
    .unwrap();
    let (a5, r5) = (at(&active, 5).0, at(&ridge_eval, 5).0);
    let rises: Vec<String> = (1..active.slow.mean.len())
        .filter(|&t| active.slow.mean[t] > active.slow.mean[t - 1] + active.slow.se[t])
        .map(|t| format!("t={}", t + 1))
        .collect();
    let pass = a5 <= r5 && rises.is_empty();
    let curve: Vec<String> = active.slow.mean.iter().map(|v| format!("{v:.3}")).collect();
    outcome(
        pass,
        format!(
            "RMSE@5 active {a5:.4} vs ridge {r5:.4}; curve [{}]{}",
            curve.join(", "),
            if rises.is_empty() {
                String::new()
            } else {
                format!("; rises beyond 1 SE at {}", rises.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

/// Advantages written as explicit discounted sums of TD errors.
fn gae_direct(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let t = r.len();
    let next = |i: usize| if i + 1 < t { v[i + 1] } else { 0.0 };
    let delta: Vec<f64> = (0..t).map(|i| r[i] + gamma * next(i) - v[i]).collect();
    (0..t)
        .map(|i| (i..t).map(|l| (gamma * lambda).powi((l - i) as i32) * delta[l]).sum())
        .collect()
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = r.random_range(1..12);
        let rw: Vec<f64> = (0..t).map(|_| r.random_range(-3.0..3.0)).collect();
        let vs: Vec<f64> = (0..t).map(|_| r.random_range(-3.0..3.0)).collect();
        let (gamma, lambda) = (r.random_range(0.5..1.0), r.random_range(0.0..1.0));
        for (g, l) in [(gamma, lambda), (gamma, 0.0), (1.0, 1.0)] {
            let (adv, targets) = compute_gae(&rw, &vs, g, l).unwrap();
            let direct = gae_direct(&rw, &vs, g, l);
            for i in 0..t {
                worst = worst.max((adv[i] - direct[i]).abs());
                worst = worst.max((targets[i] - (adv[i] + vs[i])).abs());
            }
            if l == 0.0 {
                for i in 0..t {
                    let next = if i + 1 < t { vs[i + 1] } else { 0.0 };
                    worst = worst.max((adv[i] - (rw[i] + g * next - vs[i])).abs());
                }
            }
            if g == 1.0 && l == 1.0 {
                for i in 0..t {
                    let ret: f64 = rw[i..].iter().sum();
                    worst = worst.max((adv[i] - (ret - vs[i])).abs());
                }
            }
        }
    }
    // Two-step hand example: δ = (1 + 0.5 − 0.5, 2 − 0.5) = (1.0, 1.5),
    // A₁ = 1.5, A₀ = 1.0 + 0.5·1.5 = 1.75.
    let (adv, targets) = compute_gae(&[1.0, 2.0], &[0.5, 0.5], 1.0, 0.5).unwrap();
    let hand = (adv[0] - 1.75)
        .abs()
        .max((adv[1] - 1.5).abs())
        .max((targets[0] - 2.25).abs())
        .max((targets[1] - 2.0).abs());
    let pass = worst < 1e-9 && hand < 1e-12;
    outcome(
        pass,
        format!(
            "3000 random streams, max deviation {worst:.1e}; hand example A = ({:.4}, {:.4})",
            adv[0], adv[1]
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Outcome {
    let mut problems = Vec::new();
    let spec = class_spec(4, 3, 8, 0.2, 4);
    let e = env(&spec);
    let cfg = TrainConfig {
        batch_size: 4,
        seed: 99,
        ..TrainConfig::default()
    };
    let run = || {
        let model = Model::new(ModelConfig::for_task(&spec, 8, 8)).unwrap();
        let mut t = Trainer::new(model, cfg.clone(), Selector::Active).unwrap();
        let events: Vec<TrainEvent> = (0..3).map(|_| t.step(&e).unwrap()).collect();
        (events, t)
    };
    let (ea, ta) = run();
    let (eb, tb) = run();
    if ea != eb || ta.model.params != tb.model.params {
        problems.push("training is not reproducible".to_string());
    }

    let model = Arc::new(ta.model.clone());
    let ab = Ablation::default();
    let r1 = evaluate(&model, &e, &Selector::Active, 20, 5, &ab).unwrap();
    let r2 = evaluate(&model, &e, &Selector::Active, 20, 5, &ab).unwrap();
    if r1 != r2 {
        problems.push("argmax rollouts differ".into());
    }

    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::new(&ta.model, Some(spec.clone()), Some(&ta.adam), ta.update);
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    ck.save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    if b1 != b2 {
        problems.push("checkpoint round trip is not byte-identical".into());
    }
    let reloaded = Arc::new(Checkpoint::load(&p2).unwrap().model().unwrap());
    if evaluate(&reloaded, &e, &Selector::Active, 20, 5, &ab).unwrap() != r1 {
        problems.push("reloaded model evaluates differently".into());
    }

    let store = SessionStore::new(model.clone(), Some(spec.clone()), WorldParams::default());
    for (k, curve) in r1.per_episode.iter().enumerate().take(5) {
        let created = store
            .create(&CreateRequest {
                task: None,
                seed: 5,
                episode: k as u64,
                mode: OracleMode::StoredLabel,
            })
            .unwrap();
        let ep = e.episode(episode_seed(5, k as u64)).unwrap();
        let labels = ep.support_labels();
        let mut chosen = Vec::new();
        let mut metrics = Vec::new();
        loop {
            let q = store.query(&created.id).unwrap();
            if q.status == QueryStatus::BudgetExhausted {
                break;
            }
            let i = q.index.unwrap();
            let class = labels[i].class();
            store.label(&created.id, &LabelRequest { class, rating: None }).unwrap();
            chosen.push(i);
            metrics.push(store.predictions(&created.id).unwrap().metric.unwrap());
        }
        if chosen != curve.chosen || metrics != curve.slow {
            problems.push(format!("session {k} diverges from evaluation"));
        }
    }
    if problems.is_empty() {
        outcome(
            true,
            format!(
                "training, rollouts, checkpoint ({} bytes) and 5 sessions reproduce exactly",
                b1.len()
            ),
        )
    } else {
        outcome(false, problems.join("; "))
    }
}

fn main() {
    // Integration targets receive libtest flags; only the filters matter.
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let wanted = |c: usize| only.as_ref().is_none_or(|s| s.contains(&c));
    let mut five = None;
    let mut results = Vec::new();
    for c in 1..=9 {
        if !wanted(c) && !(c == 3 && wanted(4)) {
            continue;
        }
        let t0 = Instant::now();
        let out = match c {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(&mut five),
            4 => criterion_4(&five),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            _ => criterion_9(),
        };
        if !wanted(c) {
            continue;
        }
        println!(
            "{} criterion {c}: {} [{:.0}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t0.elapsed().as_secs_f64()
        );
        results.push(out.pass);
    }
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
