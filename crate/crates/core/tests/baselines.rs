mod common;

use activemn::baselines::{
    balanced_candidates, entropy, select_balanced_oracle, select_entropy, select_min_max_cos, select_popular_entropy,
    select_random, HeuristicPolicy, HeuristicView, MinMaxVariant, PolicyKind, PopularityScores, Ridge, RidgeBaseline,
    RidgeCase, RIDGE_GRID,
};
use activemn::diff::Tensor;
use activemn::episodes::Label;
use activemn::policy::SupportPartition;
use activemn::Error;
use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn partition(n: usize, known: &[usize]) -> SupportPartition {
    let mut p = SupportPartition::new(n);
    for &k in known {
        p.reveal(k).unwrap();
    }
    p
}

fn sim_of(x: &[Vec<f64>]) -> Tensor {
    let rows: Vec<Vec<f64>> = x.iter().map(|a| x.iter().map(|b| cosine(a, b)).collect()).collect();
    Tensor::from_rows(&rows)
}

fn within_3_sigma(counts: &[usize], probs: &[f64], draws: usize) {
    for (c, &p) in counts.iter().zip(probs) {
        let freq = *c as f64 / draws as f64;
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * sd, "{freq} vs {p}");
    }
}

#[test]
fn random_is_uniform_over_unknown() {
    let mut r = rng(1);
    assert_eq!(select_random(&partition(3, &[0, 2]), &mut r).unwrap(), 1);

    let part = partition(6, &[1, 4]);
    let draws = 100_000;
    let mut counts = [0usize; 6];
    for _ in 0..draws {
        counts[select_random(&part, &mut r).unwrap()] += 1;
    }
    assert_eq!((counts[1], counts[4]), (0, 0));
    let unknown: Vec<usize> = part.unknown.iter().map(|&i| counts[i]).collect();
    within_3_sigma(&unknown, &[0.25; 4], draws);
    assert!(matches!(
        select_random(&partition(2, &[0, 1]), &mut r),
        Err(Error::PoolExhausted)
    ));
}

#[test]
fn balanced_picks_least_revealed_classes() {
    let labels: Vec<Label> = [0, 0, 1, 1, 2, 2].iter().map(|&c| Label::Class(c)).collect();
    // Class 0 has one revealed label, classes 1 and 2 none.
    let cands = balanced_candidates(&partition(6, &[0]), &labels).unwrap();
    assert_eq!(cands, vec![2, 3, 4, 5]);
    assert_eq!(
        balanced_candidates(&partition(6, &[]), &labels).unwrap(),
        vec![0, 1, 2, 3, 4, 5]
    );

    let mut r = rng(2);
    for _ in 0..1000 {
        let i = select_balanced_oracle(&partition(6, &[0]), &labels, &mut r).unwrap();
        assert!(labels[i].class() != Some(0));
    }
    let ratings = vec![Label::Rating(3.0); 3];
    assert!(matches!(
        select_balanced_oracle(&partition(3, &[]), &ratings, &mut r),
        Err(Error::Config(_))
    ));
}

#[test]
fn balanced_ties_are_uniform_over_classes() {
    // Class 0 has three unlabeled items, class 1 one; both are tied at zero.
    let labels: Vec<Label> = [0, 0, 0, 1].iter().map(|&c| Label::Class(c)).collect();
    let part = partition(4, &[]);
    let draws = 100_000;
    let mut class1 = 0;
    let mut r = rng(3);
    for _ in 0..draws {
        if select_balanced_oracle(&part, &labels, &mut r).unwrap() == 3 {
            class1 += 1;
        }
    }
    within_3_sigma(&[class1], &[0.5], draws);
}

#[test]
fn balanced_counts_differ_by_at_most_one() {
    let mut r = rng(4);
    for trial in 0..200 {
        let n = 2 + trial % 5;
        let k = 1 + trial % 4;
        let mut labels: Vec<Label> = (0..n * k).map(|i| Label::Class(i % n)).collect();
        // Shuffle storage order.
        for i in (1..labels.len()).rev() {
            labels.swap(i, r.random_range(0..=i));
        }
        let mut part = SupportPartition::new(n * k);
        for _ in 0..n * k {
            let i = select_balanced_oracle(&part, &labels, &mut r).unwrap();
            part.reveal(i).unwrap();
            let mut counts = vec![0; n];
            for &j in &part.known {
                counts[labels[j].class().unwrap()] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }
}

#[test]
fn min_max_cos_examples() {
    let e1 = vec![1.0, 0.0];
    let near = vec![0.9, (1.0f64 - 0.81).sqrt()];
    let e2 = vec![0.0, 1.0];
    let sim = sim_of(&[e1, near, e2]);
    assert_eq!(
        select_min_max_cos(&partition(3, &[0]), &sim, MinMaxVariant::Known).unwrap(),
        2
    );

    let same = sim_of(&vec![vec![0.3, -1.0, 2.0]; 4]);
    assert_eq!(
        select_min_max_cos(&partition(4, &[2]), &same, MinMaxVariant::Known).unwrap(),
        0
    );
    assert_eq!(
        select_min_max_cos(&partition(4, &[]), &same, MinMaxVariant::Known).unwrap(),
        0
    );
}

#[test]
fn min_max_cos_matches_brute_force() {
    let mut r = rng(5);
    for trial in 0..50 {
        let x: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let sim = sim_of(&x);
        let known: Vec<usize> = (0..5).filter(|i| (trial >> i) & 1 == 1).take(3).collect();
        let part = partition(5, &known);
        if part.unknown.is_empty() {
            continue;
        }
        let score = |i: usize, peers: &[usize]| {
            peers
                .iter()
                .map(|&j| cosine(&x[i], &x[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let brute = |peers_of: &dyn Fn(usize) -> Vec<usize>| {
            let mut best: Option<(f64, usize)> = None;
            for &i in &part.unknown {
                let peers = peers_of(i);
                let s = if peers.is_empty() { 0.0 } else { score(i, &peers) };
                if best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, i));
                }
            }
            best.unwrap().1
        };
        let others = |i: usize| part.unknown.iter().copied().filter(|&j| j != i).collect::<Vec<_>>();
        let want = if known.is_empty() {
            brute(&others)
        } else {
            brute(&|_| known.clone())
        };
        let got = select_min_max_cos(&part, &sim, MinMaxVariant::Known).unwrap();
        assert_eq!(got, want, "trial {trial}");
        assert_eq!(select_min_max_cos(&part, &sim, MinMaxVariant::Known).unwrap(), got);
        if part.unknown.len() > 1 {
            assert_eq!(
                select_min_max_cos(&part, &sim, MinMaxVariant::Unlabeled).unwrap(),
                brute(&others)
            );
        }
    }
}

#[test]
fn entropy_sampling_examples() {
    let part = partition(3, &[1]);
    let mut r = rng(6);
    let preds = Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]);
    for _ in 0..1000 {
        assert_eq!(select_entropy(&part, Some(&preds), &mut r).unwrap(), 0);
    }

    let part = partition(3, &[]);
    let preds = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.0, 1.0], vec![0.5, 0.5]]);
    assert!((entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
    let draws = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[select_entropy(&part, Some(&preds), &mut r).unwrap()] += 1;
    }
    assert_eq!(counts[1], 0);
    within_3_sigma(&counts, &[0.5, 0.0, 0.5], draws);

    // Equal entropies, or no predictions at all: uniform.
    let flat = Tensor::filled(&[3, 4], 0.25);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[select_entropy(&part, Some(&flat), &mut r).unwrap()] += 1;
    }
    within_3_sigma(&counts, &[1.0 / 3.0; 3], draws);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[select_entropy(&part, None, &mut r).unwrap()] += 1;
    }
    within_3_sigma(&counts, &[1.0 / 3.0; 3], draws);
}

#[test]
fn popular_entropy_scores() {
    let mut rows = Vec::new();
    // Movie 1: 4 ratings, all 4.0. Movie 2: ratings 1,2,3,4. Movie 3: 3.0 ×2 and 5.0 ×2.
    // Movie 4: 8 ratings, 1.0 ×4 and 5.0 ×4.
    rows.extend([(1, 4.0); 4]);
    rows.extend([(2, 1.0), (2, 2.0), (2, 3.0), (2, 4.0)]);
    rows.extend([(3, 3.0), (3, 3.0), (3, 5.0), (3, 5.0)]);
    rows.extend([(4, 1.0); 4]);
    rows.extend([(4, 5.0); 4]);
    let scores = PopularityScores::from_ratings(rows);
    let oracle = |n: f64, hist: &[f64]| {
        let total: f64 = hist.iter().sum();
        n.ln() * -hist.iter().map(|c| c / total * (c / total).ln()).sum::<f64>()
    };
    assert_eq!(scores.get(1).unwrap(), 0.0);
    assert!((scores.get(2).unwrap() - oracle(4.0, &[1.0; 4])).abs() < 1e-12);
    assert!((scores.get(3).unwrap() - oracle(4.0, &[2.0, 2.0])).abs() < 1e-12);
    assert!((scores.get(4).unwrap() - oracle(8.0, &[4.0, 4.0])).abs() < 1e-12);
    assert!(matches!(scores.get(9), Err(Error::MissingScore(9))));

    // Ranking 2 > 4 > 3 > 1 by the oracle.
    let ids = [1, 3, 4, 2];
    let mut part = SupportPartition::new(4);
    let mut picks = Vec::new();
    while !part.unknown.is_empty() {
        let i = select_popular_entropy(&part, &ids, &scores).unwrap();
        picks.push(ids[i]);
        part.reveal(i).unwrap();
    }
    assert_eq!(picks, vec![2, 4, 3, 1]);

    let mut csv = Vec::new();
    scores.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "movieId,score");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,"));
    let parsed: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(parsed, scores.get(2).unwrap());
}

#[test]
fn popular_entropy_prefers_the_more_popular_of_equal_entropy() {
    let mut rows = Vec::new();
    for k in 0..100 {
        rows.push((7, if k % 2 == 0 { 2.0 } else { 4.0 }));
    }
    for k in 0..10 {
        rows.push((8, if k % 2 == 0 { 2.0 } else { 4.0 }));
    }
    let scores = PopularityScores::from_ratings(rows);
    assert_eq!(select_popular_entropy(&partition(2, &[]), &[8, 7], &scores).unwrap(), 1);
    assert!(select_popular_entropy(&partition(2, &[]), &[8, 99], &scores).is_err());
}

#[test]
fn ridge_shrinks_to_the_mean() {
    let xs = vec![vec![0.4, -1.0], vec![2.0, 0.3], vec![-0.5, 0.5]];
    let ys = [1.0, 4.0, 2.5];
    let m = Ridge::fit(&xs, &ys, 1e12).unwrap();
    assert!((m.predict(&[10.0, -7.0]) - 2.5).abs() < 1e-9);
    let single = Ridge::fit(&xs[..1], &ys[..1], 1e12).unwrap();
    assert!((single.predict(&[3.0, 3.0]) - 1.0).abs() < 1e-12);
}

#[test]
fn ridge_fits_a_line_exactly() {
    let m = Ridge::fit(&[vec![1.0], vec![3.0]], &[2.0, 6.0], 0.0).unwrap();
    assert!((m.weights[0] - 2.0).abs() < 1e-12);
    assert!(m.intercept.abs() < 1e-12);
    assert!((m.predict(&[5.0]) - 10.0).abs() < 1e-12);
}

#[test]
fn ridge_matches_normal_equations() {
    let mut r = rng(7);
    for _ in 0..20 {
        let (n, d) = (5, 3);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| r.random_range(0.5..5.0)).collect();
        let lambda = r.random_range(0.01..3.0);
        let m = Ridge::fit(&xs, &ys, lambda).unwrap();

        // Augmented design [X 1] with the penalty on the weights only.
        let a = DMatrix::from_fn(n, d + 1, |i, j| if j < d { xs[i][j] } else { 1.0 });
        let mut p = DMatrix::<f64>::identity(d + 1, d + 1) * lambda;
        p[(d, d)] = 0.0;
        let lhs = a.transpose() * &a + p;
        let rhs = a.transpose() * DVector::from_vec(ys.clone());
        let sol = lhs.lu().solve(&rhs).unwrap();
        for k in 0..d {
            assert!((m.weights[k] - sol[k]).abs() < 1e-8, "{} vs {}", m.weights[k], sol[k]);
        }
        assert!((m.intercept - sol[d]).abs() < 1e-8);
    }
}

#[test]
fn ridge_tuning_picks_per_count_lambdas() {
    let mut r = rng(8);
    let features: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let truth = |x: &[f64]| 3.0 + 1.5 * x[0] - 0.5 * x[1];
    let cases: Vec<(Vec<(usize, f64)>, Vec<(usize, f64)>)> = (0..10)
        .map(|c| {
            let ids: Vec<usize> = (0..8).map(|k| (c * 3 + k * 7) % 30).collect();
            let pairs: Vec<(usize, f64)> = ids.iter().map(|&i| (i, truth(&features[i]))).collect();
            (pairs[..5].to_vec(), pairs[5..].to_vec())
        })
        .collect();
    let refs: Vec<RidgeCase<'_>> = cases.iter().map(|(o, h)| RidgeCase { order: o, held_out: h }).collect();
    let tuned = RidgeBaseline::tune(&features, &refs, 5, &RIDGE_GRID).unwrap();
    assert_eq!(tuned.lambdas.len(), 5);
    // Noise-free linear data: once enough points are known the least
    // regularization wins.
    assert_eq!(tuned.lambda_at(5), RIDGE_GRID[0]);
    assert_eq!(tuned.lambda_at(99), tuned.lambda_at(5));
    let preds = tuned.predict(&features, &cases[0].0, &[cases[0].1[0].0]).unwrap();
    assert!((preds[0] - cases[0].1[0].1).abs() < 0.05);
    assert!(matches!(tuned.predict(&features, &[], &[0]), Err(Error::NoEvidence)));
}

#[test]
fn heuristics_only_return_unknown_indices() {
    let mut r = rng(9);
    let x: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let sim = sim_of(&x);
    let labels: Vec<Label> = (0..8).map(|i| Label::Class(i % 4)).collect();
    let ids: Vec<u64> = (0..8).collect();
    let scores = std::sync::Arc::new(PopularityScores::from_ratings(
        (0..8u64).flat_map(|i| [(i, 1.0), (i, (i % 3) as f64)]),
    ));
    for kind in PolicyKind::ALL {
        if kind == PolicyKind::Active {
            assert!(HeuristicPolicy::new(kind).is_err());
            continue;
        }
        let policy = HeuristicPolicy::new(kind).unwrap().with_scores(scores.clone());
        let mut part = SupportPartition::new(8);
        while !part.unknown.is_empty() {
            let view = HeuristicView {
                partition: &part,
                sim: &sim,
                fast: None,
                labels: &labels,
                item_ids: &ids,
            };
            let i = policy.choose(&view, &mut r).unwrap();
            assert!(!part.is_known(i), "{kind} returned a known index");
            part.reveal(i).unwrap();
        }
    }
    assert_eq!("min_max_cos".parse::<PolicyKind>().unwrap(), PolicyKind::MinMaxCos);
    assert!("greedy".parse::<PolicyKind>().is_err());
}
