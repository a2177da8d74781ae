//! Feature-similarity kernels.
//!
//! Everything in this module is a pure function of its inputs. The kernels
//! return similarities exactly as defined (higher = more similar); the
//! attack engine owns the sign convention and descends them.
//!
//! Feature maps are stored channels-first: a `C×N` matrix whose column `i`
//! is the feature vector of flattened spatial pixel `i` (row-major over
//! the `h×w` feature grid).

mod grad;

pub use grad::{
    combined_loss_grad, external_similarity_grad, internal_similarity_grad,
    weighted_similarity_grad, WeightedLoss,
};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Norm clamp used when normalizing pixel feature vectors; columns with a
/// smaller L2 norm are divided by this value instead, so zero columns stay
/// zero rather than producing NaN.
pub const DEFAULT_EPS_NORM: f64 = 1e-12;

/// Default mask threshold, cos(π/3).
pub const DEFAULT_TAU: f64 = 0.5;

/// Largest pixel count for which the dense N×N Gram matrix is materialized;
/// beyond this the masked reduction runs in row tiles.
pub const DEFAULT_DENSE_LIMIT: usize = 16384;

/// Row-tile width for the tiled evaluation path.
pub const DEFAULT_TILE_WIDTH: usize = 1024;

/// Tuning knobs for the similarity kernels.
#[derive(Debug, Clone)]
pub struct SimilarityParams {
    pub eps_norm: f64,
    pub dense_limit: usize,
    pub tile_width: usize,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self {
            eps_norm: DEFAULT_EPS_NORM,
            dense_limit: DEFAULT_DENSE_LIMIT,
            tile_width: DEFAULT_TILE_WIDTH,
        }
    }
}

impl SimilarityParams {
    fn validate(&self) -> Result<()> {
        if !(self.eps_norm.is_finite() && self.eps_norm > 0.0) {
            return Err(Error::Config(format!(
                "eps_norm must be positive and finite, got {}",
                self.eps_norm
            )));
        }
        if self.tile_width == 0 {
            return Err(Error::Config("tile_width must be nonzero".into()));
        }
        Ok(())
    }
}

/// A `C×N` intermediate-layer activation with its spatial extent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array2<f64>,
    height: usize,
    width: usize,
}

impl FeatureMap {
    /// Builds a feature map, checking finiteness and `height·width = N`.
    pub fn new(values: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidInput(
                "feature map must have at least one channel and one pixel".into(),
            ));
        }
        if height * width != values.ncols() {
            return Err(Error::shape(
                "feature map spatial extent",
                &[height * width],
                &[values.ncols()],
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            values,
            height,
            width,
        })
    }

    /// Builds a feature map with a 1×N spatial layout.
    pub fn flat(values: Array2<f64>) -> Result<Self> {
        let n = values.ncols();
        Self::new(values, 1, n)
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.values.ncols()
    }

    /// Spatial extent `(h, w)` of the feature grid.
    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Flattened pixel index of grid position `(row, col)`.
    pub fn pixel_index(&self, row: usize, col: usize) -> Option<usize> {
        (row < self.height && col < self.width).then_some(row * self.width + col)
    }
}

/// N×N all-pairs cosine similarity of per-pixel feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: Array2<f64>,
}

impl GramMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

/// Binarized similarity mask selecting spatially related pixel pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityMask {
    values: Array2<u8>,
    count: usize,
}

impl SimilarityMask {
    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    /// Number of ones in the mask (the K of the masked mean).
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

/// Per-step loss decomposition of the blended similarity objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_ex: f64,
    pub l_in: f64,
    pub lambda_t: f64,
    pub combined: f64,
    /// Ones in the similarity mask; 0 means the internal term was degenerate
    /// and contributed nothing.
    pub mask_count: usize,
}

/// Blend weights applied to the external/internal similarity terms.
///
/// The iteration schedule uses `(λ_t, 1−λ_t)`; ablation modes use other
/// combinations such as `(1, c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub external: f64,
    pub internal: f64,
}

fn check_same_shape(fx: &FeatureMap, fa: &FeatureMap, context: &str) -> Result<()> {
    if fx.channels() != fa.channels()
        || fx.pixels() != fa.pixels()
        || fx.spatial() != fa.spatial()
    {
        return Err(Error::shape(
            context,
            &[fx.channels(), fx.pixels()],
            &[fa.channels(), fa.pixels()],
        ));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau >= 1.0 {
        return Err(Error::Config(format!(
            "tau must be finite and < 1 (the mask would be empty), got {tau}"
        )));
    }
    Ok(())
}

/// Column-normalized copy of a `C×N` matrix plus the original column norms.
/// Columns whose norm falls below `eps_norm` are divided by `eps_norm`.
pub(crate) fn normalized_columns(values: ArrayView2<'_, f64>, eps_norm: f64) -> (Array2<f64>, Vec<f64>) {
    let n = values.ncols();
    let mut out = values.to_owned();
    let mut norms = Vec::with_capacity(n);
    for mut col in out.columns_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let divisor = norm.max(eps_norm);
        col.mapv_inplace(|v| v / divisor);
        norms.push(norm);
    }
    (out, norms)
}

/// Normalizes each pixel feature vector to unit L2 norm (with the divisor
/// clamped at `eps_norm`, so degenerate columns stay put).
pub fn normalize_pixels(f: &FeatureMap, eps_norm: f64) -> Result<FeatureMap> {
    if !(eps_norm.is_finite() && eps_norm > 0.0) {
        return Err(Error::Config(format!(
            "eps_norm must be positive and finite, got {eps_norm}"
        )));
    }
    let (values, _) = normalized_columns(f.values().view(), eps_norm);
    let (h, w) = f.spatial();
    FeatureMap::new(values, h, w)
}

/// Mean per-pixel cosine similarity between two feature maps.
pub fn external_similarity(fx: &FeatureMap, fa: &FeatureMap) -> Result<f64> {
    external_similarity_with(fx, fa, &SimilarityParams::default())
}

pub fn external_similarity_with(
    fx: &FeatureMap,
    fa: &FeatureMap,
    params: &SimilarityParams,
) -> Result<f64> {
    params.validate()?;
    check_same_shape(fx, fa, "external_similarity")?;
    let (ux, _) = normalized_columns(fx.values().view(), params.eps_norm);
    let (ua, _) = normalized_columns(fa.values().view(), params.eps_norm);
    let n = fx.pixels();
    let total: f64 = (0..n)
        .map(|i| ux.column(i).dot(&ua.column(i)))
        .sum();
    Ok(total / n as f64)
}

/// All-pairs cosine similarity matrix of a feature map's pixel vectors.
pub fn gram(f: &FeatureMap) -> Result<GramMatrix> {
    gram_with(f, &SimilarityParams::default())
}

pub fn gram_with(f: &FeatureMap, params: &SimilarityParams) -> Result<GramMatrix> {
    params.validate()?;
    let (u, _) = normalized_columns(f.values().view(), params.eps_norm);
    let mut s = u.t().dot(&u);
    // Exact symmetry: dgemm round-off can differ across the diagonal.
    let n = s.nrows();
    for p in 0..n {
        for q in (p + 1)..n {
            let avg = 0.5 * (s[(p, q)] + s[(q, p)]);
            s[(p, q)] = avg;
            s[(q, p)] = avg;
        }
    }
    Ok(GramMatrix { values: s })
}

/// Binarized mask over pixel pairs whose clean-feature cosine exceeds `tau`.
///
/// Built from the clean features only; the comparison is strict, so ties at
/// exactly `tau` map to 0.
pub fn build_mask(fx: &FeatureMap, tau: f64) -> Result<SimilarityMask> {
    build_mask_with(fx, tau, &SimilarityParams::default())
}

pub fn build_mask_with(
    fx: &FeatureMap,
    tau: f64,
    params: &SimilarityParams,
) -> Result<SimilarityMask> {
    check_tau(tau)?;
    let gram = gram_with(fx, params)?;
    let n = gram.size();
    let mut values = Array2::<u8>::zeros((n, n));
    let mut count = 0usize;
    for p in 0..n {
        for q in p..n {
            let bit = u8::from(gram.values[(p, q)] > tau);
            values[(p, q)] = bit;
            values[(q, p)] = bit;
            count += if p == q { usize::from(bit) } else { 2 * usize::from(bit) };
        }
    }
    Ok(SimilarityMask { values, count })
}

/// Masked mean of the adversarial Gram matrix over clean-similar pixel
/// pairs: `(1/2)(1/K) Σ M_B(p,q)·S(p,q)`. Returns 0 when the mask is empty.
pub fn internal_similarity(fx: &FeatureMap, fa: &FeatureMap, tau: f64) -> Result<f64> {
    internal_similarity_detailed(fx, fa, tau, &SimilarityParams::default()).map(|(v, _)| v)
}

/// As [`internal_similarity`], also returning the mask count K so callers
/// can surface the degenerate K = 0 case as a warning.
pub fn internal_similarity_detailed(
    fx: &FeatureMap,
    fa: &FeatureMap,
    tau: f64,
    params: &SimilarityParams,
) -> Result<(f64, usize)> {
    params.validate()?;
    check_same_shape(fx, fa, "internal_similarity")?;
    check_tau(tau)?;
    let (ux, _) = normalized_columns(fx.values().view(), params.eps_norm);
    let (ua, _) = normalized_columns(fa.values().view(), params.eps_norm);
    let n = fx.pixels();

    let (sum, count) = if n <= params.dense_limit {
        masked_sum_dense(&ux, &ua, tau)
    } else {
        masked_sum_tiled(&ux, &ua, tau, params.tile_width)
    };

    if count == 0 {
        return Ok((0.0, 0));
    }
    Ok((0.5 * sum / count as f64, count))
}

fn masked_sum_dense(ux: &Array2<f64>, ua: &Array2<f64>, tau: f64) -> (f64, usize) {
    let m = ux.t().dot(ux);
    let s = ua.t().dot(ua);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (mv, sv) in m.iter().zip(s.iter()) {
        if *mv > tau {
            sum += *sv;
            count += 1;
        }
    }
    (sum, count)
}

fn masked_sum_tiled(ux: &Array2<f64>, ua: &Array2<f64>, tau: f64, tile: usize) -> (f64, usize) {
    let n = ux.ncols();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + tile).min(n);
        let ux_block = ux.slice(ndarray::s![.., start..end]);
        let ua_block = ua.slice(ndarray::s![.., start..end]);
        // (tile × N) similarity slabs for rows start..end.
        let m_slab = ux_block.t().dot(ux);
        let s_slab = ua_block.t().dot(ua);
        for (mv, sv) in m_slab.iter().zip(s_slab.iter()) {
            if *mv > tau {
                sum += *sv;
                count += 1;
            }
        }
        start = end;
    }
    (sum, count)
}

/// The iteration-scheduled blend `λ_t·L_ex + (1−λ_t)·L_in` with `λ_t = t/T`.
pub fn combined_loss(
    fx: &FeatureMap,
    fa: &FeatureMap,
    t: usize,
    total_iters: usize,
    tau: f64,
) -> Result<LossBreakdown> {
    combined_loss_with(fx, fa, t, total_iters, tau, &SimilarityParams::default())
}

pub fn combined_loss_with(
    fx: &FeatureMap,
    fa: &FeatureMap,
    t: usize,
    total_iters: usize,
    tau: f64,
    params: &SimilarityParams,
) -> Result<LossBreakdown> {
    let lambda = lambda_schedule(t, total_iters)?;
    let l_ex = external_similarity_with(fx, fa, params)?;
    let (l_in, mask_count) = internal_similarity_detailed(fx, fa, tau, params)?;
    Ok(LossBreakdown {
        l_ex,
        l_in,
        lambda_t: lambda,
        combined: lambda * l_ex + (1.0 - lambda) * l_in,
        mask_count,
    })
}

/// λ_t = t/T for 0 ≤ t < T.
pub fn lambda_schedule(t: usize, total_iters: usize) -> Result<f64> {
    if total_iters == 0 || t >= total_iters {
        return Err(Error::Config(format!(
            "iteration index {t} outside schedule of length {total_iters}"
        )));
    }
    Ok(t as f64 / total_iters as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn fmap(values: Array2<f64>) -> FeatureMap {
        FeatureMap::flat(values).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let f = fmap(array![[3.0], [4.0]]);
        let n = normalize_pixels(&f, DEFAULT_EPS_NORM).unwrap();
        assert_abs_diff_eq!(n.values()[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n.values()[(1, 0)], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn normalize_zero_column_stays_zero() {
        let f = fmap(array![[0.0, 1.0], [0.0, 0.0]]);
        let n = normalize_pixels(&f, 1e-12).unwrap();
        assert_eq!(n.values()[(0, 0)], 0.0);
        assert_eq!(n.values()[(1, 0)], 0.0);
        assert_abs_diff_eq!(n.values()[(0, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn normalize_unit_columns_unchanged() {
        let inv = std::f64::consts::FRAC_1_SQRT_2;
        let f = fmap(array![[1.0, inv], [0.0, inv]]);
        let n = normalize_pixels(&f, DEFAULT_EPS_NORM).unwrap();
        for (a, b) in n.values().iter().zip(f.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_bad_eps() {
        let f = fmap(array![[1.0]]);
        assert!(normalize_pixels(&f, 0.0).is_err());
        assert!(normalize_pixels(&f, f64::NAN).is_err());
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let values = array![[1.0, f64::NAN]];
        assert!(FeatureMap::flat(values).is_err());
    }

    #[test]
    fn external_identity_antipodal_orthogonal() {
        let fx = fmap(array![[1.0, 0.0], [0.0, 2.0]]);
        assert_abs_diff_eq!(external_similarity(&fx, &fx).unwrap(), 1.0, epsilon = 1e-12);

        let neg = fmap(fx.values().mapv(|v| -v));
        assert_abs_diff_eq!(external_similarity(&fx, &neg).unwrap(), -1.0, epsilon = 1e-12);

        // Orthogonal at both pixels.
        let fa = fmap(array![[0.0, 3.0], [5.0, 0.0]]);
        assert_abs_diff_eq!(external_similarity(&fx, &fa).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn external_shape_mismatch_errors() {
        let fx = fmap(array![[1.0, 0.0]]);
        let fa = fmap(array![[1.0]]);
        assert!(matches!(
            external_similarity(&fx, &fa),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gram_single_pixel_is_one() {
        let f = fmap(array![[2.0], [1.0]]);
        let g = gram(&f).unwrap();
        assert_eq!(g.size(), 1);
        assert_abs_diff_eq!(g.values()[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gram_identical_columns_all_ones() {
        let f = fmap(array![[1.0, 1.0], [2.0, 2.0]]);
        let g = gram(&f).unwrap();
        for v in g.values().iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gram_orthonormal_columns_identity() {
        let f = fmap(array![[1.0, 0.0], [0.0, 1.0]]);
        let g = gram(&f).unwrap();
        assert_abs_diff_eq!(g.values()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.values()[(1, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.values()[(0, 1)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.values()[(1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mask_below_minus_one_is_all_ones() {
        let f = fmap(array![[1.0, -1.0, 0.5], [0.0, 0.3, -0.2]]);
        let m = build_mask(&f, -1.1).unwrap();
        assert_eq!(m.count(), 9);
        assert!(m.values().iter().all(|&v| v == 1));
    }

    #[test]
    fn mask_orthonormal_is_identity() {
        let f = fmap(array![[1.0, 0.0], [0.0, 1.0]]);
        let m = build_mask(&f, DEFAULT_TAU).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(m.values()[(0, 0)], 1);
        assert_eq!(m.values()[(1, 1)], 1);
        assert_eq!(m.values()[(0, 1)], 0);
    }

    #[test]
    fn mask_rejects_tau_at_or_above_one() {
        let f = fmap(array![[1.0]]);
        assert!(build_mask(&f, 1.0).is_err());
        assert!(build_mask(&f, 1.5).is_err());
        assert!(build_mask(&f, f64::NAN).is_err());
        assert!(build_mask(&f, 0.999).is_ok());
    }

    #[test]
    fn mask_strict_inequality_at_tau() {
        // Orthogonal columns give an exact cosine of 0; a tie at tau = 0
        // must map to 0 under the strict comparator.
        let f = fmap(array![[1.0, 0.0], [0.0, 1.0]]);
        let m = build_mask(&f, 0.0).unwrap();
        assert_eq!(m.values()[(0, 1)], 0);
        assert_eq!(m.count(), 2); // diagonal only
    }

    #[test]
    fn internal_identity_mask_gives_half() {
        // Orthonormal fx at tau = 0.5 selects only the diagonal, where the
        // adversarial self-cosines are 1, so the halved masked mean is 0.5.
        let fx = fmap(array![[1.0, 0.0], [0.0, 1.0]]);
        let fa = fmap(array![[0.3, 2.0], [-0.4, 0.7]]);
        let v = internal_similarity(&fx, &fa, DEFAULT_TAU).unwrap();
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn internal_identical_columns_gives_half() {
        let fx = fmap(array![[1.0, 1.0], [1.0, 1.0]]);
        let v = internal_similarity(&fx, &fx, DEFAULT_TAU).unwrap();
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn internal_zero_mask_returns_zero() {
        // Zero feature vectors: all cosines 0, no pair exceeds tau = 0.5.
        let fx = fmap(Array2::zeros((2, 3)));
        let fa = fmap(array![[1.0, 2.0, 3.0], [0.0, 1.0, 0.5]]);
        let (v, k) =
            internal_similarity_detailed(&fx, &fa, DEFAULT_TAU, &SimilarityParams::default())
                .unwrap();
        assert_eq!(k, 0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn tiled_path_matches_dense() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let c = 5;
        let n = 37;
        let fx = fmap(Array2::from_shape_fn((c, n), |_| rng.gen_range(-1.0..1.0)));
        let fa = fmap(Array2::from_shape_fn((c, n), |_| rng.gen_range(-1.0..1.0)));
        let dense = SimilarityParams::default();
        let tiled = SimilarityParams {
            dense_limit: 0,
            tile_width: 7,
            ..Default::default()
        };
        let (vd, kd) = internal_similarity_detailed(&fx, &fa, 0.2, &dense).unwrap();
        let (vt, kt) = internal_similarity_detailed(&fx, &fa, 0.2, &tiled).unwrap();
        assert_eq!(kd, kt);
        assert_abs_diff_eq!(vd, vt, epsilon = 1e-12);
    }

    #[test]
    fn combined_schedule_endpoints() {
        let fx = fmap(array![[1.0, 0.0], [0.0, 1.0]]);
        let fa = fmap(array![[0.6, -0.2], [0.8, 0.9]]);
        let b0 = combined_loss(&fx, &fa, 0, 20, DEFAULT_TAU).unwrap();
        assert_eq!(b0.lambda_t, 0.0);
        assert_abs_diff_eq!(b0.combined, b0.l_in, epsilon = 1e-15);

        let mid = combined_loss(&fx, &fa, 10, 20, DEFAULT_TAU).unwrap();
        assert_eq!(mid.lambda_t, 0.5);
        assert_abs_diff_eq!(
            mid.combined,
            (mid.l_ex + mid.l_in) / 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn combined_rejects_out_of_schedule() {
        let fx = fmap(array![[1.0]]);
        assert!(combined_loss(&fx, &fx, 20, 20, DEFAULT_TAU).is_err());
        assert!(combined_loss(&fx, &fx, 0, 0, DEFAULT_TAU).is_err());
    }
}
