//! Per-layer sensitivity-weighted non-uniform datatypes (nuqX).
//!
//! A codebook is derived offline per layer: vectors are normalized to
//! `[-1, 1]`, outliers are removed by the sparse module, and the pooled
//! normalized values are clustered with Fisher-weighted 1-D k-means. The
//! sorted centroids become the lookup table used by the cache kernels.
//! Q-Norm optionally applies an affine correction to the centroids so the
//! post-quantization distribution keeps the calibration mean and standard
//! deviation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normalized values for k-means init are coarsened to this many weighted
/// bins before the exact contiguous-partition seeding pass.
const INIT_BINS: usize = 256;

/// Codebook derivation subsamples pooled calibration values above this cap
/// (deterministic stride).
const DERIVE_POINT_CAP: usize = 1 << 20;

pub const KMEANS_DEFAULT_MAX_ITER: usize = 100;
pub const KMEANS_DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NuqError {
    #[error("invalid kept range: lo {lo} > hi {hi}")]
    BadRange { lo: f32, hi: f32 },
    #[error("point set is empty")]
    EmptyPoints,
    #[error("points ({points}) and weights ({weights}) differ in length")]
    LengthMismatch { points: usize, weights: usize },
    #[error("weights are all zero")]
    AllZeroWeights,
    #[error("negative weight at index {0}")]
    NegativeWeight(usize),
    #[error("cluster count must be >= 1, got {0}")]
    BadClusterCount(usize),
    #[error("bits must be 2, 3, or 4, got {0}")]
    BadBits(u8),
    #[error("expected {expected} centroids for {bits} bits, got {found}")]
    BadCentroidCount { bits: u8, expected: usize, found: usize },
    #[error("centroids are not sorted ascending")]
    UnsortedCentroids,
    #[error("sigma must be positive: sigma1 {sigma1}, sigma2 {sigma2}")]
    NonPositiveSigma { sigma1: f64, sigma2: f64 },
    #[error("code {code} out of range for {len} centroids")]
    CodeOutOfRange { code: u8, len: usize },
}

/// Per-vector affine denormalization: `x = x_normalized * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f32,
    pub offset: f32,
}

/// Maps a vector's kept range `[lo, hi]` onto `[-1, 1]`.
///
/// Degenerate `hi == lo` yields scale 1 and all-zero normalized values, so
/// dequantization returns the offset exactly.
pub fn normalize_vector(
    v: &[f32],
    lo: f32,
    hi: f32,
) -> Result<(Vec<f32>, AffineParams), NuqError> {
    if lo > hi {
        return Err(NuqError::BadRange { lo, hi });
    }
    if lo == hi {
        return Ok((
            vec![0.0; v.len()],
            AffineParams {
                scale: 1.0,
                offset: lo,
            },
        ));
    }
    let scale = (hi - lo) / 2.0;
    let offset = (hi + lo) / 2.0;
    let normalized = v.iter().map(|&x| (x - offset) / scale).collect();
    Ok((normalized, AffineParams { scale, offset }))
}

/// One weighted k-means run: final centroids plus the per-iteration
/// objective values (iteration 0 is the objective of the initial seeding).
#[derive(Debug, Clone)]
pub struct KmeansRun {
    pub centroids: Vec<f32>,
    pub objective_trace: Vec<f64>,
}

impl KmeansRun {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is nonempty")
    }
}

/// Weighted 1-D k-means: Lloyd iterations seeded by an exact
/// contiguous-partition solve on a weighted-quantile coarsening of the data.
///
/// Returns sorted centroids. The objective `Σ w_i (x_i - Q(x_i))²` is
/// non-increasing per iteration; empty clusters retain their previous
/// centroid.
pub fn weighted_kmeans_1d(
    points: &[f32],
    weights: &[f32],
    k: usize,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<f32>, NuqError> {
    Ok(weighted_kmeans_1d_run(points, weights, k, max_iter, tol)?.centroids)
}

pub fn weighted_kmeans_1d_run(
    points: &[f32],
    weights: &[f32],
    k: usize,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansRun, NuqError> {
    if points.is_empty() {
        return Err(NuqError::EmptyPoints);
    }
    if points.len() != weights.len() {
        return Err(NuqError::LengthMismatch {
            points: points.len(),
            weights: weights.len(),
        });
    }
    if k < 1 {
        return Err(NuqError::BadClusterCount(k));
    }
    if let Some(i) = weights.iter().position(|&w| w < 0.0) {
        return Err(NuqError::NegativeWeight(i));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(NuqError::AllZeroWeights);
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].partial_cmp(&points[b]).expect("finite points"));
    let xs: Vec<f64> = order.iter().map(|&i| points[i] as f64).collect();
    let ws: Vec<f64> = order.iter().map(|&i| weights[i] as f64).collect();

    let mut centroids = seed_centroids(&xs, &ws, k);
    debug_assert!(centroids.windows(2).all(|p| p[0] <= p[1]));

    let mut trace = vec![objective(&xs, &ws, &centroids)];
    for _ in 0..max_iter {
        // assignment boundaries: point belongs to cluster c while it is not
        // strictly closer to centroid c+1 (ties stay with the lower index)
        let mut sum_w = vec![0.0f64; k];
        let mut sum_wx = vec![0.0f64; k];
        let mut c = 0usize;
        for (&x, &w) in xs.iter().zip(&ws) {
            while c + 1 < k && (x - centroids[c + 1]).abs() < (x - centroids[c]).abs() {
                c += 1;
            }
            sum_w[c] += w;
            sum_wx[c] += w * x;
        }

        let mut movement = 0.0f64;
        for j in 0..k {
            if sum_w[j] > 0.0 {
                let next = sum_wx[j] / sum_w[j];
                movement = movement.max((next - centroids[j]).abs());
                centroids[j] = next;
            }
        }
        let obj = objective(&xs, &ws, &centroids);
        debug_assert!(
            obj <= trace.last().unwrap() * (1.0 + 1e-9) + 1e-12,
            "k-means objective increased: {} -> {}",
            trace.last().unwrap(),
            obj
        );
        trace.push(obj);
        if movement < tol {
            break;
        }
    }

    centroids.sort_by(|a, b| a.partial_cmp(b).expect("finite centroids"));
    Ok(KmeansRun {
        centroids: centroids.iter().map(|&c| c as f32).collect(),
        objective_trace: trace,
    })
}

fn objective(xs: &[f64], ws: &[f64], centroids: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    let mut c = 0usize;
    let k = centroids.len();
    for (&x, &w) in xs.iter().zip(ws) {
        while c + 1 < k && (x - centroids[c + 1]).abs() < (x - centroids[c]).abs() {
            c += 1;
        }
        acc += w * (x - centroids[c]).powi(2);
    }
    acc
}

/// Seeds Lloyd with the optimal contiguous partition of a weighted-quantile
/// coarsening (exact when the data has at most `INIT_BINS` distinct values).
fn seed_centroids(xs: &[f64], ws: &[f64], k: usize) -> Vec<f64> {
    // merge duplicates, then quantile-merge down to INIT_BINS weighted bins
    let mut bins: Vec<(f64, f64)> = Vec::new(); // (weighted mean, weight)
    for (&x, &w) in xs.iter().zip(ws) {
        match bins.last_mut() {
            Some((bx, bw)) if *bx == x => *bw += w,
            _ => bins.push((x, w)),
        }
    }
    if bins.len() > INIT_BINS {
        let total: f64 = bins.iter().map(|b| b.1).sum();
        let per = total / INIT_BINS as f64;
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(INIT_BINS + 1);
        let mut closed_w = 0.0f64;
        let mut acc_w = 0.0f64;
        let mut acc_wx = 0.0f64;
        for &(x, w) in &bins {
            acc_w += w;
            acc_wx += w * x;
            // close the bin once cumulative mass crosses the next quantile
            if closed_w + acc_w >= per * (merged.len() + 1) as f64 {
                merged.push((if acc_w > 0.0 { acc_wx / acc_w } else { x }, acc_w));
                closed_w += acc_w;
                acc_w = 0.0;
                acc_wx = 0.0;
            }
        }
        if acc_w > 0.0 {
            merged.push((acc_wx / acc_w, acc_w));
        }
        bins = merged;
    }

    // drop zero-weight bins: they contribute nothing to the objective
    let nz: Vec<(f64, f64)> = bins.iter().copied().filter(|b| b.1 > 0.0).collect();
    let m = nz.len();
    let k_eff = k.min(m);
    let mut centroids = dp_partition_means(&nz, k_eff);

    // pad up to k by splitting the widest gaps (or duplicating when the
    // data is a single point)
    while centroids.len() < k {
        let mut best_gap = -1.0f64;
        let mut best_at = 0usize;
        for i in 0..centroids.len() - 1 {
            let gap = centroids[i + 1] - centroids[i];
            if gap > best_gap {
                best_gap = gap;
                best_at = i;
            }
        }
        if centroids.len() == 1 || best_gap <= 0.0 {
            let v = centroids[0];
            centroids.push(v);
        } else {
            let mid = 0.5 * (centroids[best_at] + centroids[best_at + 1]);
            centroids.insert(best_at + 1, mid);
        }
    }
    centroids
}

/// Exact minimum-cost partition of weighted bins into `k` contiguous
/// clusters; returns the cluster weighted means (sorted by construction).
fn dp_partition_means(bins: &[(f64, f64)], k: usize) -> Vec<f64> {
    let m = bins.len();
    assert!(k >= 1 && k <= m);
    let mut pw = vec![0.0f64; m + 1];
    let mut pwx = vec![0.0f64; m + 1];
    let mut pwx2 = vec![0.0f64; m + 1];
    for (i, &(x, w)) in bins.iter().enumerate() {
        pw[i + 1] = pw[i] + w;
        pwx[i + 1] = pwx[i] + w * x;
        pwx2[i + 1] = pwx2[i] + w * x * x;
    }
    // cost of clustering bins[i..=j] about their weighted mean
    let cost = |i: usize, j: usize| -> f64 {
        let w = pw[j + 1] - pw[i];
        if w <= 0.0 {
            return 0.0;
        }
        let wx = pwx[j + 1] - pwx[i];
        let wx2 = pwx2[j + 1] - pwx2[i];
        (wx2 - wx * wx / w).max(0.0)
    };

    let mut dp = vec![vec![f64::INFINITY; m]; k];
    let mut cut = vec![vec![0usize; m]; k];
    for j in 0..m {
        dp[0][j] = cost(0, j);
    }
    for c in 1..k {
        for j in c..m {
            for i in c..=j {
                let candidate = dp[c - 1][i - 1] + cost(i, j);
                if candidate < dp[c][j] {
                    dp[c][j] = candidate;
                    cut[c][j] = i;
                }
            }
        }
    }

    let mut means = vec![0.0f64; k];
    let mut end = m - 1;
    for c in (0..k).rev() {
        let start = if c == 0 { 0 } else { cut[c][end] };
        let w = pw[end + 1] - pw[start];
        let wx = pwx[end + 1] - pwx[start];
        means[c] = if w > 0.0 {
            wx / w
        } else {
            bins[start].0
        };
        if c > 0 {
            end = start - 1;
        }
    }
    means
}

/// Sorted centroid lookup table for an X-bit non-uniform datatype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuqCodebook {
    bits: u8,
    centroids: Vec<f32>,
    qnorm_applied: bool,
}

impl NuqCodebook {
    pub fn new(bits: u8, centroids: Vec<f32>) -> Result<Self, NuqError> {
        if !matches!(bits, 2 | 3 | 4) {
            return Err(NuqError::BadBits(bits));
        }
        let expected = 1usize << bits;
        if centroids.len() != expected {
            return Err(NuqError::BadCentroidCount {
                bits,
                expected,
                found: centroids.len(),
            });
        }
        if centroids.windows(2).any(|p| p[0] > p[1]) {
            return Err(NuqError::UnsortedCentroids);
        }
        Ok(Self {
            bits,
            centroids,
            qnorm_applied: false,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn qnorm_applied(&self) -> bool {
        self.qnorm_applied
    }

    /// Largest gap between adjacent centroids; bounds the dense-path
    /// reconstruction error at `scale * max_gap / 2`.
    pub fn max_gap(&self) -> f32 {
        self.centroids
            .windows(2)
            .map(|p| p[1] - p[0])
            .fold(0.0, f32::max)
    }
}

/// Calibration-set statistics for Q-Norm, computed over pooled normalized
/// kept values (pre-quantization: mu1/sigma1; post-quantization with the raw
/// codebook: mu2/sigma2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QNormStats {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
}

impl QNormStats {
    pub fn new(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<Self, NuqError> {
        if sigma1 <= 0.0 || sigma2 <= 0.0 {
            return Err(NuqError::NonPositiveSigma { sigma1, sigma2 });
        }
        Ok(Self {
            mu1,
            sigma1,
            mu2,
            sigma2,
        })
    }
}

/// Population mean and standard deviation of an f32 slice, in f64.
pub fn mean_std(xs: &[f32]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Q-Norm: affine-corrects the centroids so the post-quantization
/// distribution regains the pre-quantization mean and standard deviation.
/// Positive slope, so centroid ordering is preserved.
pub fn apply_qnorm(cb: &NuqCodebook, stats: &QNormStats) -> Result<NuqCodebook, NuqError> {
    if stats.sigma1 <= 0.0 || stats.sigma2 <= 0.0 {
        return Err(NuqError::NonPositiveSigma {
            sigma1: stats.sigma1,
            sigma2: stats.sigma2,
        });
    }
    let ratio = stats.sigma1 / stats.sigma2;
    let corrected = cb
        .centroids
        .iter()
        .map(|&c| ((c as f64 - stats.mu2) * ratio + stats.mu1) as f32)
        .collect();
    Ok(NuqCodebook {
        bits: cb.bits,
        centroids: corrected,
        qnorm_applied: true,
    })
}

/// Derives a per-layer codebook from pooled normalized calibration values
/// and their Fisher weights. Subsamples by deterministic stride above
/// `DERIVE_POINT_CAP` points.
pub fn derive_codebook(
    normalized_calib: &[f32],
    fisher: &[f32],
    bits: u8,
) -> Result<NuqCodebook, NuqError> {
    if !matches!(bits, 2 | 3 | 4) {
        return Err(NuqError::BadBits(bits));
    }
    if normalized_calib.len() != fisher.len() {
        return Err(NuqError::LengthMismatch {
            points: normalized_calib.len(),
            weights: fisher.len(),
        });
    }
    let k = 1usize << bits;
    let (points, weights): (Vec<f32>, Vec<f32>) = if normalized_calib.len() > DERIVE_POINT_CAP {
        let stride = normalized_calib.len().div_ceil(DERIVE_POINT_CAP);
        (
            normalized_calib.iter().step_by(stride).copied().collect(),
            fisher.iter().step_by(stride).copied().collect(),
        )
    } else {
        (normalized_calib.to_vec(), fisher.to_vec())
    };
    let centroids = weighted_kmeans_1d(
        &points,
        &weights,
        k,
        KMEANS_DEFAULT_MAX_ITER,
        KMEANS_DEFAULT_TOL,
    )?;
    NuqCodebook::new(bits, centroids)
}

/// Index of the nearest centroid; ties break toward the lower index.
/// Out-of-range inputs clamp to the end centroids. Total and deterministic.
pub fn encode(x: f32, cb: &NuqCodebook) -> u8 {
    let cs = &cb.centroids;
    let xv = x as f64;
    let mut idx = 0usize;
    while idx + 1 < cs.len() {
        let mid = 0.5 * (cs[idx] as f64 + cs[idx + 1] as f64);
        if xv <= mid {
            break;
        }
        idx += 1;
    }
    idx as u8
}

/// Denormalized lookup: `centroids[code] * scale + offset`.
pub fn decode(code: u8, cb: &NuqCodebook, aff: &AffineParams) -> Result<f32, NuqError> {
    let c = cb
        .centroids
        .get(code as usize)
        .ok_or(NuqError::CodeOutOfRange {
            code,
            len: cb.centroids.len(),
        })?;
    Ok(c * aff.scale + aff.offset)
}

/// Tensor kind tag used in codebook serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Key,
    Value,
}

/// Serialized codebook document: consumed by the cache and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookRecord {
    pub layer_id: usize,
    pub tensor_kind: TensorKind,
    pub bits: u8,
    pub centroids: Vec<f32>,
    pub qnorm: Option<QNormStats>,
}

impl CodebookRecord {
    pub fn from_codebook(
        layer_id: usize,
        tensor_kind: TensorKind,
        cb: &NuqCodebook,
        qnorm: Option<QNormStats>,
    ) -> Self {
        Self {
            layer_id,
            tensor_kind,
            bits: cb.bits,
            centroids: cb.centroids.clone(),
            qnorm,
        }
    }

    pub fn to_codebook(&self) -> Result<NuqCodebook, NuqError> {
        let mut cb = NuqCodebook::new(self.bits, self.centroids.clone())?;
        cb.qnorm_applied = self.qnorm.is_some();
        Ok(cb)
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Exhaustive search over contiguous partitions of the sorted points;
    /// the global optimum for 1-D weighted k-means. Test oracle only.
    pub fn exhaustive_best(points: &[f32], weights: &[f32], k: usize) -> (Vec<f64>, f64) {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&a, &b| points[a].partial_cmp(&points[b]).unwrap());
        let xs: Vec<f64> = idx.iter().map(|&i| points[i] as f64).collect();
        let ws: Vec<f64> = idx.iter().map(|&i| weights[i] as f64).collect();
        let n = xs.len();
        let k = k.min(n);

        let mut best = (Vec::new(), f64::INFINITY);
        let mut cuts = vec![0usize; k - 1];
        search(&xs, &ws, k, 0, 1, &mut cuts, &mut best);
        best
    }

    fn search(
        xs: &[f64],
        ws: &[f64],
        k: usize,
        depth: usize,
        min_cut: usize,
        cuts: &mut Vec<usize>,
        best: &mut (Vec<f64>, f64),
    ) {
        let n = xs.len();
        if depth == k - 1 {
            let mut bounds = Vec::with_capacity(k + 1);
            bounds.push(0);
            bounds.extend_from_slice(cuts);
            bounds.push(n);
            let mut cost = 0.0;
            let mut means = Vec::with_capacity(k);
            for w in bounds.windows(2) {
                let (s, e) = (w[0], w[1]);
                let tw: f64 = ws[s..e].iter().sum();
                let twx: f64 = xs[s..e].iter().zip(&ws[s..e]).map(|(x, w)| x * w).sum();
                let mean = if tw > 0.0 { twx / tw } else { xs[s] };
                means.push(mean);
                cost += xs[s..e]
                    .iter()
                    .zip(&ws[s..e])
                    .map(|(x, w)| w * (x - mean).powi(2))
                    .sum::<f64>();
            }
            if cost < best.1 {
                *best = (means, cost);
            }
            return;
        }
        for c in min_cut..=(n - (k - 1 - depth)) {
            cuts[depth] = c;
            search(xs, ws, k, depth + 1, c + 1, cuts, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_hand_case() {
        let (n, aff) = normalize_vector(&[0.0, 2.0, 4.0], 0.0, 4.0).unwrap();
        assert_eq!(n, vec![-1.0, 0.0, 1.0]);
        assert_eq!(aff.scale, 2.0);
        assert_eq!(aff.offset, 2.0);
    }

    #[test]
    fn normalize_identity_range() {
        let v = [-0.5, 0.25, 1.0];
        let (n, aff) = normalize_vector(&v, -1.0, 1.0).unwrap();
        assert_eq!(n, v.to_vec());
        assert_eq!(aff.scale, 1.0);
        assert_eq!(aff.offset, 0.0);
    }

    #[test]
    fn normalize_degenerate_range() {
        let (n, aff) = normalize_vector(&[5.0, 5.0], 5.0, 5.0).unwrap();
        assert_eq!(n, vec![0.0, 0.0]);
        assert_eq!(aff.scale, 1.0);
        assert_eq!(aff.offset, 5.0);
        // dequantization returns the offset exactly
        assert_eq!(0.0 * aff.scale + aff.offset, 5.0);
    }

    #[test]
    fn normalize_rejects_inverted_range() {
        assert!(matches!(
            normalize_vector(&[0.0], 1.0, 0.0),
            Err(NuqError::BadRange { .. })
        ));
    }

    #[test]
    fn kmeans_degenerate_all_equal() {
        let run =
            weighted_kmeans_1d_run(&[3.5; 6], &[1.0; 6], 4, 100, 1e-6).unwrap();
        assert_eq!(run.centroids, vec![3.5; 4]);
        assert_eq!(run.objective(), 0.0);
    }

    #[test]
    fn kmeans_two_clusters_uniform_weights() {
        let centroids =
            weighted_kmeans_1d(&[-1.0, -0.9, 0.8, 1.0], &[1.0; 4], 2, 100, 1e-6).unwrap();
        assert!((centroids[0] - -0.95).abs() < 1e-6);
        assert!((centroids[1] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn kmeans_weighted_hand_case() {
        let run = weighted_kmeans_1d_run(&[-1.0, 0.0, 1.0], &[1.0, 4.0, 2.0], 2, 100, 1e-6)
            .unwrap();
        assert!((run.centroids[0] - -0.2).abs() < 1e-6);
        assert!((run.centroids[1] - 1.0).abs() < 1e-6);
        assert!((run.objective() - 0.8).abs() < 1e-9);
    }

    #[test]
    fn kmeans_rejects_bad_inputs() {
        assert!(matches!(
            weighted_kmeans_1d(&[], &[], 2, 10, 1e-6),
            Err(NuqError::EmptyPoints)
        ));
        assert!(matches!(
            weighted_kmeans_1d(&[1.0, 2.0], &[0.0, 0.0], 2, 10, 1e-6),
            Err(NuqError::AllZeroWeights)
        ));
        assert!(matches!(
            weighted_kmeans_1d(&[1.0], &[1.0], 0, 10, 1e-6),
            Err(NuqError::BadClusterCount(0))
        ));
        assert!(matches!(
            weighted_kmeans_1d(&[1.0, 2.0], &[1.0, -1.0], 1, 10, 1e-6),
            Err(NuqError::NegativeWeight(1))
        ));
    }

    #[test]
    fn kmeans_matches_exhaustive_oracle_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..60 {
            let n = rng.gen_range(2usize..=12);
            let k = rng.gen_range(1usize..=3.min(n));
            let points: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let weights: Vec<f32> = (0..n).map(|_| rng.gen_range(0.05..2.0)).collect();
            let run = weighted_kmeans_1d_run(&points, &weights, k, 200, 1e-9).unwrap();
            let (_, best) = oracle::exhaustive_best(&points, &weights, k);
            assert!(
                run.objective() <= best * 1.05 + 1e-12,
                "trial {trial}: solver {} vs oracle {best}",
                run.objective()
            );
        }
    }

    #[test]
    fn kmeans_exact_on_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            // three clusters spaced 10x wider than their spread
            let mut points = Vec::new();
            for &center in &[-10.0f32, 0.0, 10.0] {
                for _ in 0..4 {
                    points.push(center + rng.gen_range(-0.5..0.5));
                }
            }
            let weights = vec![1.0f32; points.len()];
            let run = weighted_kmeans_1d_run(&points, &weights, 3, 200, 1e-9).unwrap();
            let (_, best) = oracle::exhaustive_best(&points, &weights, 3);
            assert!((run.objective() - best).abs() <= 1e-9 * best.max(1.0));
        }
    }

    #[test]
    fn kmeans_objective_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<f32> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f32> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = weighted_kmeans_1d_run(&points, &weights, 8, 100, 1e-9).unwrap();
        for pair in run.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn kmeans_weight_scaling_leaves_centroids() {
        let points: Vec<f32> = vec![-0.8, -0.2, 0.1, 0.4, 0.9, -0.5];
        let weights: Vec<f32> = vec![1.0, 2.0, 0.5, 1.5, 3.0, 0.25];
        let scaled: Vec<f32> = weights.iter().map(|w| w * 7.5).collect();
        let a = weighted_kmeans_1d(&points, &weights, 3, 100, 1e-9).unwrap();
        let b = weighted_kmeans_1d(&points, &scaled, 3, 100, 1e-9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn derive_uniform_points_symmetric_codebook() {
        let n = 10_000;
        let points: Vec<f32> = (0..n)
            .map(|i| -1.0 + 2.0 * (i as f32 + 0.5) / n as f32)
            .collect();
        let weights = vec![1.0f32; n];
        let cb = derive_codebook(&points, &weights, 2).unwrap();
        assert_eq!(cb.centroids().len(), 4);
        for j in 0..2 {
            let lo = cb.centroids()[j];
            let hi = cb.centroids()[3 - j];
            assert!(
                (lo + hi).abs() < 0.05,
                "centroids not symmetric: {lo} vs {hi}"
            );
        }
    }

    #[test]
    fn derive_two_point_calibration_exact() {
        let points = vec![-1.0f32, 1.0];
        let weights = vec![1.0f32, 1.0];
        let cb = derive_codebook(&points, &weights, 2).unwrap();
        assert!(cb.centroids().contains(&-1.0));
        assert!(cb.centroids().contains(&1.0));
        // strictly ascending even with only two distinct inputs
        assert!(cb.centroids().windows(2).all(|p| p[0] < p[1]));
        // objective 0: both points encode to themselves
        let aff = AffineParams { scale: 1.0, offset: 0.0 };
        for &p in &points {
            let code = encode(p, &cb);
            assert_eq!(decode(code, &cb, &aff).unwrap(), p);
        }
    }

    #[test]
    fn derive_center_weighted_tightens_middle_spacing() {
        // weights concentrated near zero pull centroids inward
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<f32> = (0..20_000).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let weights: Vec<f32> = points.iter().map(|&x| 1.0 / (x.abs() + 0.1)).collect();
        let cb = derive_codebook(&points, &weights, 3).unwrap();
        let cs = cb.centroids();
        let inner_gap = cs[4] - cs[3];
        let outer_gap = (cs[1] - cs[0]).max(cs[7] - cs[6]);
        assert!(
            inner_gap < outer_gap,
            "inner gap {inner_gap} not tighter than outer {outer_gap}"
        );
    }

    #[test]
    fn qnorm_identity_stats() {
        let cb = NuqCodebook::new(2, vec![-1.0, -0.25, 0.25, 1.0]).unwrap();
        let stats = QNormStats::new(0.3, 0.9, 0.3, 0.9).unwrap();
        let out = apply_qnorm(&cb, &stats).unwrap();
        assert_eq!(out.centroids(), cb.centroids());
        assert!(out.qnorm_applied());
    }

    #[test]
    fn qnorm_hand_case() {
        // (C - 0.1) * 1/0.8 + 0: [-1, 0, 1] -> [-1.375, -0.125, 1.125]
        let cb = NuqCodebook::new(2, vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let stats = QNormStats::new(0.0, 1.0, 0.1, 0.8).unwrap();
        let out = apply_qnorm(&cb, &stats).unwrap();
        assert!((out.centroids()[0] - -1.375).abs() < 1e-6);
        assert!((out.centroids()[1] - -0.125).abs() < 1e-6);
        assert!((out.centroids()[2] - 1.125).abs() < 1e-6);
    }

    #[test]
    fn qnorm_preserves_strict_ordering() {
        let cb = NuqCodebook::new(2, vec![-0.9, -0.1, 0.2, 0.8]).unwrap();
        let stats = QNormStats::new(-0.5, 2.0, 0.7, 0.3).unwrap();
        let out = apply_qnorm(&cb, &stats).unwrap();
        assert!(out.centroids().windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn qnorm_rejects_bad_sigma() {
        assert!(matches!(
            QNormStats::new(0.0, 0.0, 0.0, 1.0),
            Err(NuqError::NonPositiveSigma { .. })
        ));
    }

    #[test]
    fn encode_exact_hit_and_ties() {
        let cb = NuqCodebook::new(2, vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(encode(-1.0, &cb), 0);
        assert_eq!(encode(0.0, &cb), 1);
        assert_eq!(encode(1.0, &cb), 2);
        // 0.4 is closer to 0.0 than to 1.0
        assert_eq!(encode(0.4, &cb), 1);
        // 0.5 ties between 0.0 and 1.0: lower index wins
        assert_eq!(encode(0.5, &cb), 1);
        // clamping beyond the ends
        assert_eq!(encode(-100.0, &cb), 0);
        assert_eq!(encode(100.0, &cb), 3);
    }

    #[test]
    fn decode_hand_case_and_bounds() {
        let cb = NuqCodebook::new(2, vec![-1.0, 0.0, 0.5, 1.0]).unwrap();
        let aff = AffineParams { scale: 2.0, offset: 1.0 };
        assert_eq!(decode(2, &cb, &aff).unwrap(), 2.0);
        assert!(matches!(
            decode(4, &cb, &aff),
            Err(NuqError::CodeOutOfRange { code: 4, .. })
        ));
    }

    #[test]
    fn decode_encode_error_bound() {
        let cb = NuqCodebook::new(3, vec![-1.0, -0.7, -0.3, -0.05, 0.1, 0.4, 0.75, 1.0]).unwrap();
        let aff = AffineParams { scale: 3.0, offset: -1.0 };
        let bound = aff.scale * cb.max_gap() / 2.0 + 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let xn: f32 = rng.gen_range(-1.0..1.0);
            let x = xn * aff.scale + aff.offset;
            let got = decode(encode(xn, &cb), &cb, &aff).unwrap();
            assert!((x - got).abs() <= bound, "{x} vs {got}");
        }
    }

    #[test]
    fn encode_decode_idempotent_on_centroids() {
        let cb = NuqCodebook::new(2, vec![-0.8, -0.1, 0.3, 0.9]).unwrap();
        let aff = AffineParams { scale: 1.0, offset: 0.0 };
        for (i, &c) in cb.centroids().iter().enumerate() {
            assert_eq!(encode(c, &cb), i as u8);
            assert_eq!(decode(i as u8, &cb, &aff).unwrap(), c);
        }
    }

    #[test]
    fn codebook_record_round_trip() {
        let cb = NuqCodebook::new(3, vec![-1.0, -0.6, -0.3, -0.1, 0.15, 0.4, 0.7, 1.0]).unwrap();
        let stats = QNormStats::new(0.01, 0.5, 0.02, 0.45).unwrap();
        let rec = CodebookRecord::from_codebook(3, TensorKind::Key, &cb, Some(stats));
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"tensor_kind\":\"key\""));
        let back: CodebookRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.to_codebook().unwrap().centroids(), cb.centroids());
    }

    #[test]
    fn codebook_rejects_invalid() {
        assert!(matches!(
            NuqCodebook::new(5, vec![0.0; 32]),
            Err(NuqError::BadBits(5))
        ));
        assert!(matches!(
            NuqCodebook::new(2, vec![0.0; 3]),
            Err(NuqError::BadCentroidCount { .. })
        ));
        assert!(matches!(
            NuqCodebook::new(2, vec![1.0, 0.0, 2.0, 3.0]),
            Err(NuqError::UnsortedCentroids)
        ));
    }
}
