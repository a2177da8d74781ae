//! Analytic gradients of the similarity losses with respect to the
//! adversarial feature map.
//!
//! The mask is a function of the clean features only, so no gradient flows
//! through the thresholding. Diagonal Gram entries are self-cosines and
//! carry zero gradient; they are excluded from the gradient accumulation
//! (but still counted in the loss value, as defined).

use ndarray::{s, Array1, Array2};

use super::{
    check_same_shape, check_tau, lambda_schedule, normalized_columns, LossBreakdown, LossWeights,
    SimilarityParams,
};
use crate::error::Result;

/// Loss value under an explicit `(w_ex, w_in)` blend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedLoss {
    pub l_ex: f64,
    pub l_in: f64,
    pub combined: f64,
    pub mask_count: usize,
}

/// Value and gradient (w.r.t. `fa`) of the external similarity loss.
pub fn external_similarity_grad(
    fx: &super::FeatureMap,
    fa: &super::FeatureMap,
    params: &SimilarityParams,
) -> Result<(f64, Array2<f64>)> {
    params.validate()?;
    check_same_shape(fx, fa, "external_similarity_grad")?;
    let eps = params.eps_norm;
    let (ux, _) = normalized_columns(fx.values().view(), eps);
    let (ua, na) = normalized_columns(fa.values().view(), eps);
    let n = fx.pixels();
    let c = fx.channels();
    let inv_n = 1.0 / n as f64;

    let mut grad = Array2::<f64>::zeros((c, n));
    let mut value = 0.0;
    for i in 0..n {
        let u = ux.column(i);
        let v = ua.column(i);
        let cos = u.dot(&v);
        value += cos;
        let mut g = grad.column_mut(i);
        if na[i] >= eps {
            // d cos / d fa(i) = (u − cos·v) / ‖fa(i)‖
            for ch in 0..c {
                g[ch] = inv_n * (u[ch] - cos * v[ch]) / na[i];
            }
        } else {
            // Below the clamp the normalization is linear: v = fa(i)/eps.
            for ch in 0..c {
                g[ch] = inv_n * u[ch] / eps;
            }
        }
    }
    Ok((value * inv_n, grad))
}

/// Value, mask count and gradient (w.r.t. `fa`) of the internal similarity
/// loss. The gradient is zero when the mask is empty.
pub fn internal_similarity_grad(
    fx: &super::FeatureMap,
    fa: &super::FeatureMap,
    tau: f64,
    params: &SimilarityParams,
) -> Result<(f64, usize, Array2<f64>)> {
    params.validate()?;
    check_same_shape(fx, fa, "internal_similarity_grad")?;
    check_tau(tau)?;
    let eps = params.eps_norm;
    let (ux, _) = normalized_columns(fx.values().view(), eps);
    let (ua, na) = normalized_columns(fa.values().view(), eps);
    let n = fx.pixels();
    let c = fx.channels();

    // Accumulate, per column r:
    //   acc[:, r] = Σ_{q≠r} M_B(r,q) · v̂_q
    //   diag_sim[r] = Σ_{q≠r} M_B(r,q) · S(r,q)
    // plus the loss sum and count over all pairs including the diagonal.
    let tile = if n <= params.dense_limit {
        n.max(1)
    } else {
        params.tile_width
    };
    let mut acc = Array2::<f64>::zeros((c, n));
    let mut diag_sim = Array1::<f64>::zeros(n);
    let mut sum = 0.0;
    let mut count = 0usize;

    let mut start = 0;
    while start < n {
        let end = (start + tile).min(n);
        let len = end - start;
        let ux_block = ux.slice(s![.., start..end]);
        let ua_block = ua.slice(s![.., start..end]);
        let m_slab = ux_block.t().dot(&ux); // (len × N)
        let s_slab = ua_block.t().dot(&ua); // (len × N)

        let mut w_slab = Array2::<f64>::zeros((len, n));
        for lq in 0..len {
            let q = start + lq;
            for p in 0..n {
                if m_slab[(lq, p)] > tau {
                    sum += s_slab[(lq, p)];
                    count += 1;
                    if p != q {
                        w_slab[(lq, p)] = 1.0;
                        diag_sim[p] += s_slab[(lq, p)];
                    }
                }
            }
        }
        // acc[:, p] += Σ_{q in block} v̂_q · W0(q, p)
        acc = acc + ua_block.dot(&w_slab);
        start = end;
    }

    if count == 0 {
        return Ok((0.0, 0, Array2::zeros((c, n))));
    }
    let value = 0.5 * sum / count as f64;
    let inv_k = 1.0 / count as f64;

    let mut grad = Array2::<f64>::zeros((c, n));
    for r in 0..n {
        let v = ua.column(r);
        let a = acc.column(r);
        let b = diag_sim[r];
        let mut g = grad.column_mut(r);
        if na[r] >= eps {
            for ch in 0..c {
                g[ch] = inv_k * (a[ch] - b * v[ch]) / na[r];
            }
        } else {
            for ch in 0..c {
                g[ch] = inv_k * a[ch] / eps;
            }
        }
    }
    Ok((value, count, grad))
}

/// Value and gradient of `w_ex·L_ex + w_in·L_in`.
pub fn weighted_similarity_grad(
    fx: &super::FeatureMap,
    fa: &super::FeatureMap,
    weights: LossWeights,
    tau: f64,
    params: &SimilarityParams,
) -> Result<(WeightedLoss, Array2<f64>)> {
    let (l_ex, g_ex) = external_similarity_grad(fx, fa, params)?;
    let (l_in, mask_count, g_in) = internal_similarity_grad(fx, fa, tau, params)?;
    let combined = weights.external * l_ex + weights.internal * l_in;
    let grad = weights.external * &g_ex + weights.internal * &g_in;
    Ok((
        WeightedLoss {
            l_ex,
            l_in,
            combined,
            mask_count,
        },
        grad,
    ))
}

/// Value and gradient of the scheduled blend `λ_t·L_ex + (1−λ_t)·L_in`.
pub fn combined_loss_grad(
    fx: &super::FeatureMap,
    fa: &super::FeatureMap,
    t: usize,
    total_iters: usize,
    tau: f64,
    params: &SimilarityParams,
) -> Result<(LossBreakdown, Array2<f64>)> {
    let lambda = lambda_schedule(t, total_iters)?;
    let weights = LossWeights {
        external: lambda,
        internal: 1.0 - lambda,
    };
    let (loss, grad) = weighted_similarity_grad(fx, fa, weights, tau, params)?;
    Ok((
        LossBreakdown {
            l_ex: loss.l_ex,
            l_in: loss.l_in,
            lambda_t: lambda,
            combined: lambda * loss.l_ex + (1.0 - lambda) * loss.l_in,
            mask_count: loss.mask_count,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featsim::{external_similarity, internal_similarity, FeatureMap, DEFAULT_TAU};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, n: usize) -> FeatureMap {
        FeatureMap::flat(Array2::from_shape_fn((c, n), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    /// max_i |analytic − fd| relative to the largest finite-difference entry.
    fn max_relative_gap(analytic: &Array2<f64>, fd: &Array2<f64>) -> f64 {
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        analytic
            .iter()
            .zip(fd.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / scale
    }

    fn finite_difference<F: Fn(&FeatureMap) -> f64>(fa: &FeatureMap, f: F, h: f64) -> Array2<f64> {
        let (height, width) = fa.spatial();
        let mut fd = Array2::zeros(fa.values().dim());
        for idx in 0..fa.values().len() {
            let (c, n) = (idx / fa.pixels(), idx % fa.pixels());
            let mut plus = fa.values().clone();
            plus[(c, n)] += h;
            let mut minus = fa.values().clone();
            minus[(c, n)] -= h;
            let fp = f(&FeatureMap::new(plus, height, width).unwrap());
            let fm = f(&FeatureMap::new(minus, height, width).unwrap());
            fd[(c, n)] = (fp - fm) / (2.0 * h);
        }
        fd
    }

    #[test]
    fn external_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = SimilarityParams::default();
        for _ in 0..5 {
            let fx = random_map(&mut rng, 4, 9);
            let fa = random_map(&mut rng, 4, 9);
            let (_, g) = external_similarity_grad(&fx, &fa, &params).unwrap();
            let fd = finite_difference(&fa, |m| external_similarity(&fx, m).unwrap(), 1e-4);
            assert!(max_relative_gap(&g, &fd) < 1e-4);
        }
    }

    #[test]
    fn internal_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SimilarityParams::default();
        for _ in 0..5 {
            let fx = random_map(&mut rng, 4, 8);
            let fa = random_map(&mut rng, 4, 8);
            let (_, _, g) = internal_similarity_grad(&fx, &fa, 0.2, &params).unwrap();
            let fd = finite_difference(&fa, |m| internal_similarity(&fx, m, 0.2).unwrap(), 1e-4);
            assert!(max_relative_gap(&g, &fd) < 1e-4);
        }
    }

    #[test]
    fn tiled_grad_matches_dense_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fx = random_map(&mut rng, 5, 23);
        let fa = random_map(&mut rng, 5, 23);
        let dense = SimilarityParams::default();
        let tiled = SimilarityParams {
            dense_limit: 0,
            tile_width: 6,
            ..Default::default()
        };
        let (vd, kd, gd) = internal_similarity_grad(&fx, &fa, 0.1, &dense).unwrap();
        let (vt, kt, gt) = internal_similarity_grad(&fx, &fa, 0.1, &tiled).unwrap();
        assert_eq!(kd, kt);
        assert!((vd - vt).abs() < 1e-12);
        for (a, b) in gd.iter().zip(gt.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_only_mask_has_zero_gradient() {
        // Orthonormal clean features at tau 0.5 select only self-pairs, whose
        // cosine is constant: the internal gradient must vanish.
        let fx = FeatureMap::flat(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let fa = FeatureMap::flat(array![[0.4, -0.9], [1.3, 0.2]]).unwrap();
        let (v, k, g) =
            internal_similarity_grad(&fx, &fa, DEFAULT_TAU, &SimilarityParams::default()).unwrap();
        assert_eq!(k, 2);
        assert!((v - 0.5).abs() < 1e-12);
        assert!(g.iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn empty_mask_has_zero_value_and_gradient() {
        let fx = FeatureMap::flat(Array2::zeros((2, 3))).unwrap();
        let fa = FeatureMap::flat(array![[1.0, 0.5, 0.2], [0.0, 0.1, 0.9]]).unwrap();
        let (v, k, g) =
            internal_similarity_grad(&fx, &fa, DEFAULT_TAU, &SimilarityParams::default()).unwrap();
        assert_eq!(k, 0);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn combined_grad_blends_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fx = random_map(&mut rng, 3, 6);
        let fa = random_map(&mut rng, 3, 6);
        let params = SimilarityParams::default();
        let (b, g) = combined_loss_grad(&fx, &fa, 5, 20, 0.2, &params).unwrap();
        assert_eq!(b.lambda_t, 0.25);
        let (_, gex) = external_similarity_grad(&fx, &fa, &params).unwrap();
        let (_, _, gin) = internal_similarity_grad(&fx, &fa, 0.2, &params).unwrap();
        let expect = 0.25 * &gex + 0.75 * &gin;
        for (a, e) in g.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((b.combined - (0.25 * b.l_ex + 0.75 * b.l_in)).abs() < 1e-15);
    }
}
