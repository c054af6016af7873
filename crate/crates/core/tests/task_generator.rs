//! Contextual retrieval generator: exact agreement with an exhaustive
//! nearest-neighbour scan, feature statistics, symmetries, the OoD split
//! and JSONL round trips.

use std::collections::HashSet;

use comp_attn::task::{
    enumerate_combinations, read_jsonl, sample_batch, sample_instance, write_jsonl, OodConfig, OodSplit, TaskConfig,
    TaskInstance, TaskSpec,
};
use comp_attn::Rng;

/// `y_i = Σ_s α_s · z̃[j*][r_is]` with `j* = argmin_{j≠i} |z_is − z_js|`,
/// ties to the lowest index; a direct O(N²) scan per search.
fn brute_force(inst: &TaskInstance) -> Vec<f64> {
    let n = inst.z.len();
    (0..n)
        .map(|i| {
            let mut y = 0.0;
            for (s, a) in inst.alpha.iter().enumerate() {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dist = (inst.z[i][s] - inst.z[j][s]).abs();
                    if best.is_none_or(|(bd, _)| dist < bd) {
                        best = Some((dist, j));
                    }
                }
                let (_, j) = best.expect("at least two objects");
                y += a * inst.z_tilde[j][inst.prefs[i][s]];
            }
            y
        })
        .collect()
}

#[test]
fn generator_matches_exhaustive_scan_bit_for_bit() {
    for (k, (s, r)) in [(2, 4), (4, 8), (4, 16)].into_iter().enumerate() {
        let mut rng = Rng::new(100 + k as u64);
        let spec = TaskSpec::new(s, r, 8, &mut rng).unwrap();
        for i in 0..10_000 {
            let inst = sample_instance(&spec, &mut rng, None).unwrap();
            let expected = brute_force(&inst);
            for (a, b) in inst.y.iter().zip(&expected) {
                assert_eq!(a.to_bits(), b.to_bits(), "{s}S{r}R instance {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn feature_moments_are_standard_normal() {
    let mut rng = Rng::new(11);
    let spec = TaskSpec::new(2, 4, 8, &mut rng).unwrap();
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for _ in 0..2_000 {
        let inst = sample_instance(&spec, &mut rng, None).unwrap();
        for v in inst.z.iter().chain(&inst.z_tilde).flatten() {
            sum += v;
            sq += v * v;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    // 96k draws: standard errors ~0.003 (mean) and ~0.005 (variance).
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.03, "variance {var}");
}

#[test]
fn preferences_are_uniform_over_the_pool() {
    let mut rng = Rng::new(12);
    let spec = TaskSpec::new(2, 4, 8, &mut rng).unwrap();
    let mut counts = [0usize; 16];
    for _ in 0..2_000 {
        for p in sample_instance(&spec, &mut rng, None).unwrap().prefs {
            counts[p[0] * 4 + p[1]] += 1;
        }
    }
    // 16k draws over 16 cells: expectation 1000, sd ~31.
    assert!(counts.iter().all(|&c| (850..1150).contains(&c)), "{counts:?}");
}

#[test]
fn targets_are_linear_in_alpha_and_equivariant_to_object_order() {
    let mut rng = Rng::new(13);
    let spec = TaskSpec::new(2, 4, 8, &mut rng).unwrap();
    for _ in 0..100 {
        let inst = sample_instance(&spec, &mut rng, None).unwrap();
        // Negating α negates every target.
        let mut flipped = inst.clone();
        flipped.alpha = inst.alpha.iter().map(|a| -a).collect();
        for (a, b) in brute_force(&flipped).iter().zip(&inst.y) {
            assert!((a + b).abs() < 1e-15);
        }
        // Reversing the objects reverses the targets.
        let mut rev = inst.clone();
        rev.z.reverse();
        rev.z_tilde.reverse();
        rev.prefs.reverse();
        let mut y = inst.y.clone();
        y.reverse();
        for (a, b) in brute_force(&rev).iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn input_layout_is_features_then_one_hots() {
    let mut rng = Rng::new(14);
    let spec = TaskSpec::new(2, 3, 4, &mut rng).unwrap();
    let inst = sample_instance(&spec, &mut rng, None).unwrap();
    let x = inst.input();
    let w = spec.input_width();
    assert_eq!(w, 2 + 3 + 2 * 3);
    assert_eq!(x.len(), 4 * w);
    for (t, row) in x.chunks(w).enumerate() {
        assert_eq!(&row[..2], inst.z[t].as_slice());
        assert_eq!(&row[2..5], inst.z_tilde[t].as_slice());
        for s in 0..2 {
            let hot = &row[5 + 3 * s..8 + 3 * s];
            assert_eq!(hot.iter().sum::<f64>(), 1.0);
            assert_eq!(hot[inst.prefs[t][s]], 1.0);
        }
    }
}

#[test]
fn combinations_enumerate_in_lexicographic_order() {
    let all = enumerate_combinations(2, 4).unwrap();
    assert_eq!(all.len(), 16);
    assert_eq!(all[0], vec![0, 0]);
    assert_eq!(all[1], vec![0, 1]);
    assert_eq!(all[15], vec![3, 3]);
    assert_eq!(enumerate_combinations(4, 16).unwrap().len(), 65_536);
    assert!(enumerate_combinations(64, 64).is_err());
}

#[test]
fn explicit_split_leaves_the_twelve_training_tuples() {
    let test: Vec<Vec<usize>> = vec![vec![2, 1], vec![2, 3], vec![3, 1], vec![3, 3]];
    let train: Vec<Vec<usize>> = enumerate_combinations(2, 4)
        .unwrap()
        .into_iter()
        .filter(|c| !test.contains(c))
        .collect();
    assert_eq!(train.len(), 12);
    let split = OodSplit::explicit(2, 4, train.clone(), test.clone()).unwrap();
    let mut overlapping = train.clone();
    overlapping.push(vec![2, 1]);
    assert!(OodSplit::explicit(2, 4, overlapping, test).is_err());
    assert_eq!(split.train.len(), 12);
}

#[test]
fn fraction_split_is_disjoint_and_covering() {
    let mut rng = Rng::new(15);
    let split = OodSplit::from_fraction(2, 4, 0.25, &mut rng).unwrap();
    assert_eq!(split.test.len(), 4);
    assert_eq!(split.train.len(), 12);
    let train: HashSet<_> = split.train.iter().collect();
    assert!(split.test.iter().all(|c| !train.contains(c)));
    assert!(OodSplit::from_fraction(2, 4, 0.0, &mut rng).is_err());
    assert!(OodSplit::from_fraction(2, 4, 1.0, &mut rng).is_err());
}

#[test]
fn pooled_batches_only_contain_pool_combinations() {
    let cfg = TaskConfig {
        searches: 2,
        retrievals: 4,
        objects: 8,
        ood: Some(OodConfig::HoldOutFraction(0.25)),
        alpha: None,
    };
    let spec = cfg.build(&mut Rng::new(16)).unwrap();
    let mut rng = Rng::new(17);
    let split = spec.ood.clone().unwrap();
    for (pool, other) in [(&split.train, &split.test), (&split.test, &split.train)] {
        let batch = sample_batch(&spec, &mut rng, 64, Some(pool)).unwrap();
        assert_eq!(batch.inputs.shape(), &[64, 8, spec.input_width()]);
        assert!(batch.combos().all(|c| pool.contains(c) && !other.contains(c)));
    }
}

#[test]
fn jsonl_round_trip_is_exact() {
    let mut rng = Rng::new(18);
    let spec = TaskSpec::new(4, 8, 6, &mut rng).unwrap();
    let instances: Vec<_> = (0..50)
        .map(|_| sample_instance(&spec, &mut rng, None).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("instances.jsonl");
    write_jsonl(&path, &instances).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), instances);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 50);
    assert!(text.lines().next().unwrap().contains("\"ztilde\""));
}

#[test]
fn same_seed_same_instances() {
    let spec = TaskSpec::with_alpha(2, 4, 8, vec![0.3, -0.7]).unwrap();
    let a: Vec<_> = {
        let mut rng = Rng::new(19);
        (0..20)
            .map(|_| sample_instance(&spec, &mut rng, None).unwrap())
            .collect()
    };
    let b: Vec<_> = {
        let mut rng = Rng::new(19);
        (0..20)
            .map(|_| sample_instance(&spec, &mut rng, None).unwrap())
            .collect()
    };
    assert_eq!(a, b);
}
