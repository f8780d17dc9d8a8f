//! Implementations checked against brute-force or independently computed
//! references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use updateleak_core::assignment::hungarian_match;
use updateleak_core::checkin::{synthesize_checkin_dataset, CheckinParams};
use updateleak_core::cluster::{cluster_reconstruct, detect_cardinality, KMeansParams};
use updateleak_core::dataset::split_train_pool;
use updateleak_core::loss::{best_match_gradient, best_match_loss, discriminator_objective, kl_divergence};
use updateleak_core::SampleSet;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn hungarian_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in 2..=6 {
        for _ in 0..200 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
            let a = hungarian_match(&cost, n).unwrap();
            assert_eq!(a.total_cost, brute_force_assignment(&cost, n), "n = {n}");
            let mut cols = a.pairs.clone();
            cols.sort_unstable();
            assert_eq!(cols, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn hungarian_with_integer_ties_is_lexicographically_smallest() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(2..=5);
        let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0..3) as f64).collect();
        let best = brute_force_assignment(&cost, n);
        let lex = permutations(n)
            .into_iter()
            .filter(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() == best)
            .min()
            .unwrap();
        let a = hungarian_match(&cost, n).unwrap();
        assert_eq!(a.pairs, lex, "{cost:?}");
    }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> SampleSet {
    SampleSet::new((0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(), dim).unwrap()
}

#[test]
fn best_match_equals_per_truth_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let truth = random_set(&mut rng, 5, 3);
        let generated = random_set(&mut rng, 8, 3);
        let mut expected = 0f64;
        for t in truth.rows() {
            let mut best = f64::INFINITY;
            for g in generated.rows() {
                let d: f64 = t.iter().zip(g).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                best = best.min(d);
            }
            expected += best;
        }
        let bm = best_match_loss(&generated, &truth, &[0.5; 8], 1.0).unwrap();
        assert!((bm.reconstruction - expected).abs() < 1e-9);
    }
}

#[test]
fn best_match_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-3f32;
    for _ in 0..20 {
        let truth = random_set(&mut rng, 5, 6);
        let generated = random_set(&mut rng, 8, 6);
        let grad = best_match_gradient(&generated, &truth).unwrap();
        let recon = |g: &SampleSet| best_match_loss(g, &truth, &vec![0.5; 8], 0.0).unwrap().reconstruction;
        for k in 0..generated.as_slice().len() {
            let mut plus = generated.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (recon(&SampleSet::new(plus, 6).unwrap()) - recon(&SampleSet::new(minus, 6).unwrap()))
                / (2.0 * h as f64);
            let an = grad.as_slice()[k] as f64;
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn discriminator_objective_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let real: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..0.99)).collect();
        let fake: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut direct = 0.0;
        for r in &real {
            direct += r.ln() / real.len() as f64;
        }
        for f in &fake {
            direct += (1.0 - f).ln() / fake.len() as f64;
        }
        assert!((discriminator_objective(&real, &fake).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn kl_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let mut p: Vec<f64> = (0..10).map(|_| rng.random_range(0.01..1.0)).collect();
        let mut q: Vec<f64> = (0..10).map(|_| rng.random_range(0.01..1.0)).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|v| *v /= sp);
        q.iter_mut().for_each(|v| *v /= sq);
        let direct: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - direct).abs() < 1e-12);
        assert!(kl >= 0.0);
    }
}

fn blobs(centers: &[[f32; 2]], per_blob: usize, spread: f32, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SampleSet::empty(2);
    for _ in 0..per_blob {
        for c in centers {
            out.push(&[c[0] + rng.random_range(-spread..spread), c[1] + rng.random_range(-spread..spread)])
                .unwrap();
        }
    }
    out
}

#[test]
fn cluster_reconstruct_finds_one_final_per_blob() {
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let pts = blobs(&centers, 50, 1.0, 1);
    let r = cluster_reconstruct(&pts, &KMeansParams::new(3, 4)).unwrap();
    let mut hit = [false; 3];
    for f in r.finals.rows() {
        let b = centers
            .iter()
            .position(|c| (f[0] - c[0]).abs() <= 1.0 && (f[1] - c[1]).abs() <= 1.0)
            .expect("final lies in a blob");
        hit[b] = true;
    }
    assert_eq!(hit, [true; 3]);
    for (&i, f) in r.indices.iter().zip(r.finals.rows()) {
        assert_eq!(pts.row(i), f);
    }
}

#[test]
fn silhouette_prefers_true_blob_count() {
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0], [5.0, 20.0]];
    for seed in 0..5 {
        let pts = blobs(&centers, 40, 1.0, seed);
        let choice = detect_cardinality(&pts, &[5, 20], 3, 2000, seed).unwrap();
        assert_eq!(choice.k, 5, "{:?}", choice.scores);
        assert!(choice.scores[0].1 > choice.scores[1].1);
    }
}

#[test]
fn surrogate_classes_are_linearly_separable() {
    let ds = synthesize_checkin_dataset(&CheckinParams::new(1000, 8, 21)).unwrap();
    let (train, test) = split_train_pool(&ds, 800).unwrap();
    // Multinomial logistic regression by full-batch gradient descent.
    let (d, c) = (ds.feature_len(), 8);
    let mut w = vec![0f64; c * (d + 1)];
    for _ in 0..300 {
        let mut grad = vec![0f64; w.len()];
        for i in 0..train.len() {
            let x = train.sample(i);
            let logits: Vec<f64> = (0..c)
                .map(|k| w[k * (d + 1) + d] + x.iter().enumerate().map(|(j, &v)| w[k * (d + 1) + j] * v as f64).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for k in 0..c {
                let p = (logits[k] - m).exp() / z - f64::from(train.label(i) == k as u32);
                for (j, &v) in x.iter().enumerate() {
                    grad[k * (d + 1) + j] += p * v as f64;
                }
                grad[k * (d + 1) + d] += p;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * g / train.len() as f64;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.sample(i);
            let pred = (0..c)
                .max_by(|&a, &b| {
                    let s = |k: usize| w[k * (d + 1) + d] + x.iter().enumerate().map(|(j, &v)| w[k * (d + 1) + j] * v as f64).sum::<f64>();
                    s(a).total_cmp(&s(b))
                })
                .unwrap();
            pred as u32 == test.label(i)
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 1.0 / 8.0, "held-out accuracy {acc}");
}
