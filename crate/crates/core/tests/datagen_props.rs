mod common;

use balancelab::datagen::{
    batches, from_text, generate, load, save, split, split_indices, to_text, SamplingWeights,
    SyntheticSpec,
};
use balancelab::Error;
use proptest::prelude::*;

fn spec(samples: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        dims: vec![5, 3],
        signal: vec![3.0, 1.0],
        noise: 1.0,
        samples,
        seed,
    }
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    assert_eq!(
        generate(&spec(200, 7)).unwrap(),
        generate(&spec(200, 7)).unwrap()
    );
    assert_ne!(
        generate(&spec(200, 7)).unwrap(),
        generate(&spec(200, 8)).unwrap()
    );
}

#[test]
fn every_class_appears_even_when_n_equals_h() {
    for seed in 0..50 {
        let data = generate(&spec(4, seed)).unwrap();
        assert!(data.class_counts().iter().all(|&c| c == 1), "seed {seed}");
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec(100, 0);
    s.dims = vec![4];
    s.signal = vec![1.0];
    assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
    let mut s = spec(100, 0);
    s.noise = 0.0;
    assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
    assert!(matches!(generate(&spec(3, 0)), Err(Error::InvalidSpec(_))));
}

/// Class-conditional sample moments against `signal · μ_y` and `noise²`.
#[test]
fn class_conditional_moments_match_the_generating_model() {
    let s = SyntheticSpec {
        num_classes: 3,
        dims: vec![4, 2],
        signal: vec![2.0, 0.5],
        noise: 1.5,
        samples: 30_000,
        seed: 3,
    };
    let data = generate(&s).unwrap();
    let means = s.class_means().unwrap();
    for (i, &d) in s.dims.iter().enumerate() {
        for y in 0..3 {
            let rows: Vec<usize> = (0..data.len()).filter(|&k| data.labels()[k] == y).collect();
            let n = rows.len() as f64;
            for c in 0..d {
                let xs: Vec<f64> = rows.iter().map(|&k| data.features(i).get(k, c)).collect();
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let target = s.signal[i] * means[i][y][c];
                // 5 standard errors
                assert!(
                    (mean - target).abs() < 5.0 * s.noise / n.sqrt(),
                    "mean {mean} vs {target}"
                );
                assert!(
                    (var / (s.noise * s.noise) - 1.0).abs() < 5.0 * (2.0 / n).sqrt(),
                    "var {var}"
                );
            }
        }
    }
    for per_mod in &means {
        for mu in per_mod {
            let norm: f64 = mu.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn split_rejects_empty_parts() {
    let data = generate(&spec(100, 1)).unwrap();
    assert!(matches!(
        split(&data, [1.0, 0.0, 0.0], 0),
        Err(Error::InvalidSplit(_))
    ));
    assert!(matches!(
        split(&data, [0.5, 0.2, 0.2], 0),
        Err(Error::InvalidSplit(_))
    ));
    let tiny = generate(&spec(4, 1)).unwrap();
    assert!(split(&tiny, [0.9, 0.05, 0.05], 0).is_err());
}

#[test]
fn weighted_batches_follow_the_weights() {
    let w = vec![1.0, 2.0, 0.0, 5.0, 2.0];
    let total: f64 = w.iter().sum();
    let weights = SamplingWeights::new(w.clone()).unwrap();
    let mut counts = [0usize; 5];
    let epochs = 4000;
    for e in 0..epochs {
        for b in batches(5, 2, e, Some(&weights)).unwrap() {
            for k in b {
                counts[k] += 1;
            }
        }
    }
    assert_eq!(counts[2], 0);
    let draws = (epochs * 5) as f64;
    let chi2: f64 = (0..5)
        .filter(|&k| w[k] > 0.0)
        .map(|k| {
            let expected = draws * w[k] / total;
            (counts[k] as f64 - expected).powi(2) / expected
        })
        .sum();
    // 3 degrees of freedom; 0.1% critical value is 16.27
    assert!(chi2 < 16.27, "chi2 = {chi2}");
}

#[test]
fn degenerate_weights_pin_every_draw() {
    let weights = SamplingWeights::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    for b in batches(4, 3, 9, Some(&weights)).unwrap() {
        assert!(b.iter().all(|&k| k == 2));
    }
    assert!(SamplingWeights::new(vec![0.0, 0.0]).is_err());
    assert!(SamplingWeights::new(vec![1.0, -1.0]).is_err());
    assert!(batches(3, 2, 0, Some(&SamplingWeights::new(vec![1.0; 4]).unwrap())).is_err());
}

#[test]
fn malformed_files_report_the_line() {
    let data = generate(&spec(6, 2)).unwrap();
    let text = to_text(&data);
    let mut lines: Vec<&str> = text.lines().collect();
    lines[4] = "9|1 2 3 4 5|1 2 3";
    let bad = lines.join("\n");
    match from_text(&bad, "x") {
        Err(Error::Format { line, .. }) => assert_eq!(line, 5),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        from_text("MMDS v2\n", "x"),
        Err(Error::Format { line: 1, .. })
    ));
    let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
    assert!(matches!(
        from_text(&truncated, "x"),
        Err(Error::Format { .. })
    ));
}

#[test]
fn file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mmds");
    let data = generate(&spec(120, 4)).unwrap();
    save(&data, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back, data);
    for i in 0..2 {
        let a: Vec<u64> = data
            .features(i)
            .as_slice()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u64> = back
            .features(i)
            .as_slice()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b);
    }
    assert_eq!(to_text(&back), to_text(&data));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_partition_and_stratify(n in 40usize..400, seed in any::<u64>(), data_seed in 0u64..1000) {
        let data = generate(&spec(n, data_seed)).unwrap();
        let parts = split_indices(&data, [0.6, 0.2, 0.2], seed).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for p in &parts {
            prop_assert!(!p.is_empty());
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
        let counts = data.class_counts();
        for (p, f) in parts.iter().zip([0.6, 0.2, 0.2]) {
            for (y, &total) in counts.iter().enumerate() {
                let got = p.iter().filter(|&&k| data.labels()[k] == y).count() as f64;
                prop_assert!((got - f * total as f64).abs() <= 2.0, "class {} got {} of {}", y, got, total);
            }
        }
        prop_assert_eq!(split_indices(&data, [0.6, 0.2, 0.2], seed).unwrap(), parts);
    }

    #[test]
    fn unweighted_batches_cover_each_index_once(n in 1usize..200, bs in 1usize..50, seed in any::<u64>()) {
        let bs_list = batches(n, bs, seed, None).unwrap();
        let mut all: Vec<usize> = bs_list.iter().flatten().copied().collect();
        prop_assert!(bs_list.iter().rev().skip(1).all(|b| b.len() == bs));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn weighted_batches_never_draw_zero_weight(w in proptest::collection::vec(prop_oneof![Just(0.0), 0.1f64..3.0], 2..30), seed in any::<u64>()) {
        prop_assume!(w.iter().any(|&x| x > 0.0));
        let weights = SamplingWeights::new(w.clone()).unwrap();
        let drawn = batches(w.len(), 4, seed, Some(&weights)).unwrap();
        prop_assert_eq!(drawn.iter().map(Vec::len).sum::<usize>(), w.len());
        prop_assert!(drawn.iter().flatten().all(|&k| w[k] > 0.0));
    }

    #[test]
    fn text_round_trip(n in 4usize..40, seed in any::<u64>()) {
        let data = generate(&spec(n, seed)).unwrap();
        let back = from_text(&to_text(&data), "rt").unwrap();
        prop_assert_eq!(back, data);
    }
}

#[test]
fn batch_sizes_for_ten_by_four() {
    let b = batches(10, 4, 0, None).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
}
