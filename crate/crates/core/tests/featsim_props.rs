//! Property tests for the similarity kernels, checked against a naive
//! double-loop oracle that never touches the production code paths.

use ndarray::Array2;
use proptest::prelude::*;
use segattack_core::featsim::{
    build_mask, external_similarity_grad, gram, internal_similarity, internal_similarity_detailed,
    internal_similarity_grad, normalize_pixels, FeatureMap, SimilarityParams, DEFAULT_EPS_NORM,
};

/// Reference cosine, written independently of the kernel implementation.
fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(DEFAULT_EPS_NORM);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(DEFAULT_EPS_NORM);
    dot / (na * nb)
}

fn column(values: &Array2<f64>, i: usize) -> Vec<f64> {
    values.column(i).to_vec()
}

/// O(N²·C) oracle for the masked internal similarity.
fn naive_internal_similarity(fx: &Array2<f64>, fa: &Array2<f64>, tau: f64) -> (f64, usize) {
    let n = fx.ncols();
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        for q in 0..n {
            let mask = naive_cosine(&column(fx, p), &column(fx, q)) > tau;
            if mask {
                sum += naive_cosine(&column(fa, p), &column(fa, q));
                count += 1;
            }
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (0.5 * sum / count as f64, count)
    }
}

fn feature_pair(max_c: usize, max_n: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1..=max_c, 1..=max_n).prop_flat_map(|(c, n)| {
        let elems = c * n;
        (
            proptest::collection::vec(-2.0f64..2.0, elems),
            proptest::collection::vec(-2.0f64..2.0, elems),
            Just((c, n)),
        )
            .prop_map(|(a, b, (c, n))| {
                (
                    Array2::from_shape_vec((c, n), a).unwrap(),
                    Array2::from_shape_vec((c, n), b).unwrap(),
                )
            })
    })
}

fn fmap(values: Array2<f64>) -> FeatureMap {
    FeatureMap::flat(values).unwrap()
}

proptest! {
    #[test]
    fn gram_is_symmetric_and_bounded((fx, _) in feature_pair(8, 48)) {
        let g = gram(&fmap(fx)).unwrap();
        let n = g.size();
        for p in 0..n {
            for q in 0..n {
                let delta = (g.values()[(p, q)] - g.values()[(q, p)]).abs();
                prop_assert!(delta <= 1e-12, "asymmetry {delta}");
                let v = g.values()[(p, q)];
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v), "out of range {v}");
            }
        }
    }

    #[test]
    fn mask_is_symmetric_with_consistent_count((fx, _) in feature_pair(6, 40), tau in -1.2f64..0.99) {
        let mask = build_mask(&fmap(fx), tau).unwrap();
        let n = mask.size();
        let mut ones = 0usize;
        for p in 0..n {
            for q in 0..n {
                prop_assert_eq!(mask.values()[(p, q)], mask.values()[(q, p)]);
                ones += usize::from(mask.values()[(p, q)]);
            }
        }
        prop_assert_eq!(ones, mask.count());
    }

    #[test]
    fn mask_shrinks_as_tau_grows((fx, _) in feature_pair(6, 32), lo in -1.0f64..0.5, delta in 0.01f64..0.5) {
        let f = fmap(fx);
        let loose = build_mask(&f, lo).unwrap();
        let tight = build_mask(&f, lo + delta).unwrap();
        prop_assert!(loose.count() >= tight.count());
        for (a, b) in loose.values().iter().zip(tight.values().iter()) {
            prop_assert!(a >= b, "tighter mask selected a pair the looser one dropped");
        }
    }

    #[test]
    fn internal_similarity_matches_naive_oracle((fx, fa) in feature_pair(8, 64), tau in -0.5f64..0.9) {
        let value = internal_similarity(&fmap(fx.clone()), &fmap(fa.clone()), tau).unwrap();
        let (expected, _) = naive_internal_similarity(&fx, &fa, tau);
        let scale = expected.abs().max(1e-12);
        prop_assert!(((value - expected) / scale).abs() < 1e-9, "{value} vs oracle {expected}");
    }

    #[test]
    fn tiled_equals_dense((fx, fa) in feature_pair(6, 48), tau in -0.5f64..0.9) {
        let dense = SimilarityParams::default();
        let tiled = SimilarityParams { dense_limit: 0, tile_width: 5, ..Default::default() };
        let fx = fmap(fx);
        let fa = fmap(fa);
        let (vd, kd) = internal_similarity_detailed(&fx, &fa, tau, &dense).unwrap();
        let (vt, kt) = internal_similarity_detailed(&fx, &fa, tau, &tiled).unwrap();
        prop_assert_eq!(kd, kt);
        prop_assert!((vd - vt).abs() <= 1e-12);
    }

    #[test]
    fn normalized_columns_have_unit_norm((fx, _) in feature_pair(8, 32)) {
        let normalized = normalize_pixels(&fmap(fx), DEFAULT_EPS_NORM).unwrap();
        for col in normalized.values().columns() {
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= 1.0 + 1e-12);
            if norm > 1e-9 {
                prop_assert!((norm - 1.0).abs() <= 1e-12, "norm {norm}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn external_gradient_matches_central_differences((fx, fa) in feature_pair(4, 12)) {
        let params = SimilarityParams::default();
        let fx = fmap(fx);
        let fa_map = fmap(fa.clone());
        let (_, grad) = external_similarity_grad(&fx, &fa_map, &params).unwrap();
        let rel = max_rel_gap_fd(&fx, &fa, None, &grad);
        prop_assert!(rel < 1e-4, "relative gap {rel}");
    }

    #[test]
    fn internal_gradient_matches_central_differences((fx, fa) in feature_pair(4, 10), tau in -0.2f64..0.7) {
        let params = SimilarityParams::default();
        let fx = fmap(fx);
        let fa_map = fmap(fa.clone());
        let (_, _, grad) = internal_similarity_grad(&fx, &fa_map, tau, &params).unwrap();
        let rel = max_rel_gap_fd(&fx, &fa, Some(tau), &grad);
        prop_assert!(rel < 1e-4, "relative gap {rel}");
    }
}

/// Central-difference check (h = 1e-4) of a similarity gradient; relative to
/// the largest finite-difference magnitude.
fn max_rel_gap_fd(fx: &FeatureMap, fa: &Array2<f64>, tau: Option<f64>, grad: &Array2<f64>) -> f64 {
    let h = 1e-4;
    let eval = |values: Array2<f64>| -> f64 {
        let fa_map = fmap(values);
        match tau {
            Some(t) => internal_similarity(fx, &fa_map, t).unwrap(),
            None => segattack_core::featsim::external_similarity(fx, &fa_map).unwrap(),
        }
    };
    let mut fd = Array2::zeros(fa.dim());
    for idx in 0..fa.len() {
        let (c, n) = (idx / fa.ncols(), idx % fa.ncols());
        let mut plus = fa.clone();
        plus[(c, n)] += h;
        let mut minus = fa.clone();
        minus[(c, n)] -= h;
        fd[(c, n)] = (eval(plus) - eval(minus)) / (2.0 * h);
    }
    // Floor the scale above the FD noise floor (ulp(1)/2h ≈ 5e-13): when
    // the true gradient is this small there is nothing to compare.
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    grad.iter()
        .zip(fd.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        / scale
}

/// The internal similarity's diagonal terms carry no gradient: with a mask
/// that selects only self-pairs, the gradient is exactly zero.
#[test]
fn diagonal_contribution_to_gradient_is_null() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
    for _ in 0..20 {
        let n = rng.gen_range(2..10);
        // Orthogonal one-hot clean features: mask = identity at tau 0.5.
        let mut fx = Array2::zeros((n, n));
        for i in 0..n {
            fx[(i, i)] = rng.gen_range(0.5..2.0);
        }
        let fa = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0f64));
        let (value, k, grad) = internal_similarity_grad(
            &fmap(fx),
            &fmap(fa),
            0.5,
            &SimilarityParams::default(),
        )
        .unwrap();
        assert_eq!(k, n);
        assert!((value - 0.5).abs() < 1e-12);
        assert!(grad.iter().all(|&g| g.abs() < 1e-9));
    }
}

/// Gradient behind the mask: the mask is a constant of the clean features,
/// so perturbing the adversarial features never changes which pairs count.
#[test]
fn mask_count_is_invariant_to_adversarial_features() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let fx = Array2::from_shape_fn((4, 12), |_| rng.gen_range(-1.0..1.0f64));
    let fx = fmap(fx);
    let params = SimilarityParams::default();
    let mut last_k = None;
    for _ in 0..5 {
        let fa = Array2::from_shape_fn((4, 12), |_| rng.gen_range(-1.0..1.0f64));
        let (_, k) = internal_similarity_detailed(&fx, &fmap(fa), 0.3, &params).unwrap();
        if let Some(prev) = last_k {
            assert_eq!(prev, k);
        }
        last_k = Some(k);
    }
}
