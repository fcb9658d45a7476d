//! Hand-derived expectations checked against independent scalar oracles.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use qfilters_core::analysis::{average_attention, mean_abs_cosine, spectrum_report, theorem_check, SpectrumOptions};
use qfilters_core::calibration::{
    compute_qfilters, single_head_samples, FilterOptions, HeadFilter, HeadSamples, QFilterSet,
};
use qfilters_core::kvcache::{score_knorm, score_qfilters, select_keep, KvCache, Policy};
use qfilters_core::linalg::{dot, spearman_rho, Matrix, UnitVector};
use qfilters_core::model::{
    mha_forward, planted_qk_sample, synth_model, AttentionMap, HeadLayout, Model, ModelConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, independent of the library's sampler.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        n_kv_heads: 2,
        d_model: 4,
        d_head: 2,
        vocab_size: 8,
        max_seq_len: 8,
    }
}

#[test]
fn attention_matches_scalar_loops() {
    let config = tiny_config();
    let weights = synth_model(&config, 11).unwrap();
    let attn = &weights.layers[0].attention;
    let x = Matrix::from_rows(&[[0.5, -1.0, 0.25, 2.0], [1.5, 0.0, -0.5, 1.0], [-1.0, 0.75, 1.0, 0.0]]).unwrap();
    let (out, acts) = mha_forward(&x, attn, &config, true).unwrap();

    let proj = |w: &Matrix, i: usize, c: usize| (0..4).map(|k| x.get(i, k) * w.get(k, c)).sum::<f64>();
    let mut concat = [[0.0f64; 4]; 3];
    for h in 0..2 {
        let map = acts.maps.as_ref().unwrap()[h].matrix();
        for i in 0..3 {
            let mut logits = [0.0f64; 3];
            for (j, l) in logits.iter_mut().enumerate().take(i + 1) {
                let mut s = 0.0;
                for c in 0..2 {
                    s += proj(&attn.w_q, i, 2 * h + c) * proj(&attn.w_k, j, 2 * h + c);
                }
                *l = s / 2f64.sqrt();
            }
            let m = logits[..=i].iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits[..=i].iter().map(|l| (l - m).exp()).sum();
            for j in 0..3 {
                let a = if j <= i { (logits[j] - m).exp() / z } else { 0.0 };
                assert!((map.get(i, j) - a).abs() < 1e-10, "head {h} ({i},{j})");
                if j <= i {
                    for c in 0..2 {
                        concat[i][2 * h + c] += a * proj(&attn.w_v, j, 2 * h + c);
                    }
                }
            }
        }
    }
    for i in 0..3 {
        for c in 0..4 {
            let o: f64 = (0..4).map(|k| concat[i][k] * attn.w_o.get(k, c)).sum();
            assert!((out.get(i, c) - o).abs() < 1e-10);
        }
    }
}

#[test]
fn budget_four_over_ten_tokens() {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: 1,
        d_model: 8,
        d_head: 4,
        vocab_size: 16,
        max_seq_len: 16,
    };
    let model = Model::new(config, synth_model(&config, 3).unwrap()).unwrap();
    let mut cache = KvCache::new(config.layout()).with_budget(4);
    for (step, t) in (0..10u32).enumerate() {
        model.decode_step(t, &mut cache, false).unwrap();
        cache.enforce_budget(&Policy::KNorm, None, step).unwrap();
        assert!(cache.max_len() <= 4);
    }
    for l in 0..2 {
        assert_eq!(cache.head(l, 0).len(), 4);
    }
}

#[test]
fn average_attention_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l = 12;
    let mut m = Matrix::zeros(l, l);
    for i in 0..l {
        let w: Vec<f64> = (0..=i).map(|_| rng.random::<f64>() + 0.01).collect();
        let s: f64 = w.iter().sum();
        for (j, v) in w.iter().enumerate() {
            m.set(i, j, v / s);
        }
    }
    let s = average_attention(&AttentionMap::new(m.clone()).unwrap()).unwrap();
    for t in 0..l {
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..l {
            if i >= t {
                acc += m.get(i, t);
                n += 1;
            }
        }
        assert!((s[t] - acc / n as f64).abs() < 1e-12);
    }
}

#[test]
fn selection_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scores: Vec<f64> = (0..1000).map(|_| (rng.random_range(0..200) as f64) / 7.0).collect();
    let positions: Vec<usize> = (0..1000).collect();
    let (keep, _) = select_keep(&positions, &scores, 100, &BTreeSet::new()).unwrap();
    let mut order: Vec<usize> = (0..1000).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(b.cmp(&a)));
    let expected: BTreeSet<usize> = order[..100].iter().copied().collect();
    let got: BTreeSet<usize> = (0..1000).filter(|&i| keep[i]).collect();
    assert_eq!(got, expected);
}

#[test]
fn planted_orthogonal_mean_is_noise_level() {
    let d = 16;
    let u = UnitVector::basis(d, 0);
    let n = 4000;
    let (q, _) = planted_qk_sample(d, n, 1, u.as_slice(), 2.0, &[0.0], 0.5, 21).unwrap();
    let means = q.column_means();
    assert!((means[0] - 2.0).abs() <= 3.0 * 0.5 / (n as f64).sqrt());
    for m in &means[1..] {
        // Five standard errors keeps the 15-way family-wise false-alarm rate tiny.
        assert!(m.abs() <= 5.0 * 0.5 / (n as f64).sqrt());
    }
}

#[test]
fn noiseless_offsets_rank_by_projection() {
    let u = UnitVector::random(8, 5);
    let (_, k) = planted_qk_sample(8, 1, 3, u.as_slice(), 1.0, &[-3.0, -1.0, -2.0], 0.0, 0).unwrap();
    let s = score_qfilters(&k, &u).unwrap();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    assert_eq!(order, [1, 2, 0]);
}

#[test]
fn knorm_agrees_only_for_one_signed_offsets() {
    let u = UnitVector::random(32, 8);
    let neg: Vec<f64> = (0..40).map(|i| -0.5 - i as f64 * 0.1).collect();
    let (_, k) = planted_qk_sample(32, 1, 40, u.as_slice(), 1.0, &neg, 0.01, 1).unwrap();
    let rho = spearman_rho(&score_knorm(&k), &score_qfilters(&k, &u).unwrap()).unwrap();
    assert!(rho > 0.95, "{rho}");

    let mixed: Vec<f64> = (0..40).map(|i| -2.0 + i as f64 * 0.1).collect();
    let (_, k) = planted_qk_sample(32, 1, 40, u.as_slice(), 1.0, &mixed, 0.01, 1).unwrap();
    let rho = spearman_rho(&score_knorm(&k), &score_qfilters(&k, &u).unwrap()).unwrap();
    assert!(rho < 0.5, "{rho}");
}

#[test]
fn calibration_recovers_planted_direction() {
    let d = 32;
    let u = UnitVector::random(d, 13);
    let (q, _) = planted_qk_sample(d, 3000, 0, u.as_slice(), 2.0, &[], 0.1, 2).unwrap();
    let set = compute_qfilters(&single_head_samples(q), None, &FilterOptions::default(), [0; 32]).unwrap();
    let h = set.head(0, 0).unwrap();
    assert!(dot(h.filter.as_slice(), u.as_slice()) >= 0.95);
    assert!((h.kappa - 2.0).abs() <= 0.2);
}

#[test]
fn negative_drift_yields_negated_filter() {
    let d = 8;
    let u = UnitVector::random(d, 3);
    let (q, _) = planted_qk_sample(d, 500, 0, u.negated().as_slice(), 1.5, &[], 0.1, 2).unwrap();
    let set = compute_qfilters(&single_head_samples(q), None, &FilterOptions::default(), [0; 32]).unwrap();
    assert!(dot(set.filter(0, 0).unwrap().as_slice(), u.as_slice()) <= -0.99);
}

#[test]
fn identical_group_members_give_shared_direction() {
    let d = 8;
    let u = UnitVector::random(d, 6);
    let (q, _) = planted_qk_sample(d, 500, 0, u.as_slice(), 1.0, &[], 0.1, 7).unwrap();
    let samples = HeadSamples {
        layout: HeadLayout { n_layers: 1, n_heads: 2, n_kv_heads: 1, d_head: d },
        per_head: vec![q.clone(), q],
    };
    let set = compute_qfilters(&samples, None, &FilterOptions::default(), [0; 32]).unwrap();
    assert!(dot(set.filter(0, 0).unwrap().as_slice(), u.as_slice()) >= 0.99);
}

#[test]
fn random_scores_are_uncorrelated_with_attention() {
    let mut total = 0.0;
    let heads = 64;
    for h in 0..heads {
        let r = qfilters_core::kvcache::score_random(256, 5, 0, h, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + h as u64);
        let target: Vec<f64> = (0..256).map(|_| gaussian(&mut rng)).collect();
        total += spearman_rho(&r, &target).unwrap();
    }
    assert!((total / heads as f64).abs() <= 0.1);
}

#[test]
fn isotropic_spectrum_has_small_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, d) = (4000, 6);
    let q = Matrix::from_fn(n, d, |_, _| gaussian(&mut rng));
    let row = spectrum_report(&q, &SpectrumOptions::default()).unwrap();
    for p in row.mean_projections {
        assert!(p <= 5.0 / (n as f64).sqrt(), "{p}");
    }
}

#[test]
fn theorem_holds_for_planted_but_not_random_direction() {
    let d = 32;
    let u = UnitVector::random(d, 40);
    let offsets: Vec<f64> = (0..64).map(|i| -3.0 + 6.0 * i as f64 / 63.0).collect();
    let (q, k) = planted_qk_sample(d, 3000, 64, u.as_slice(), 2.0, &offsets, 0.2, 41).unwrap();
    assert!(theorem_check(&q, &k, &u, 2.0).unwrap().pearson >= 0.99);

    let mut total = 0.0;
    let trials = 16;
    for s in 0..trials {
        let r = UnitVector::random(d, 500 + s);
        // Remove the planted component so the direction is orthogonal to u.
        let c = dot(r.as_slice(), u.as_slice());
        let w: Vec<f64> = r.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a - c * b).collect();
        let w = UnitVector::normalize(w).unwrap();
        total += theorem_check(&q, &k, &w, 2.0).unwrap().pearson.abs();
    }
    assert!(total / trials as f64 <= 0.2);
}

#[test]
fn independent_random_filters_are_dissimilar() {
    let make = |seed: u64| {
        let heads = (0..16)
            .map(|i| HeadFilter { filter: UnitVector::random(64, seed * 100 + i), kappa: 1.0, epsilon: 0 })
            .collect();
        QFilterSet::new(4, 4, 64, seed, [0; 32], heads).unwrap()
    };
    assert!(mean_abs_cosine(&make(1), &make(2)).unwrap() <= 0.3);
    assert!((mean_abs_cosine(&make(1), &make(1)).unwrap() - 1.0).abs() < 1e-12);
}
