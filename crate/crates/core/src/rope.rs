//! Rotary positional embeddings.
//!
//! Two equivalent forms: a dense rotation-matrix oracle and the element-wise
//! production form (`x .* cos + rotate_half(x) .* sin`). Channel pairing is
//! the half-split layout (channel `i` pairs with `i + d/2`), matching the
//! Huggingface-style LLaMA implementation, so both forms agree. Storing Keys
//! pre-RoPE and applying the rotation after dequantization depends on this
//! equivalence.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RopeError {
    #[error("head_dim must be even and >= 2, got {0}")]
    BadHeadDim(usize),
    #[error("theta_base must be positive, got {0}")]
    BadThetaBase(f64),
    #[error("vector length {len} does not match head_dim {head_dim}")]
    DimMismatch { len: usize, head_dim: usize },
}

/// Rotation parameters: per-pair angles are `theta_i = base^{-2(i-1)/d}` for
/// pair index `i` in `1..=d/2`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub theta_base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self, RopeError> {
        if head_dim < 2 || head_dim % 2 != 0 {
            return Err(RopeError::BadHeadDim(head_dim));
        }
        if !(theta_base > 0.0) {
            return Err(RopeError::BadThetaBase(theta_base));
        }
        Ok(Self {
            head_dim,
            theta_base,
        })
    }

    /// Default base 10000, as used by LLaMA-family models.
    pub fn with_default_base(head_dim: usize) -> Result<Self, RopeError> {
        Self::new(head_dim, 10000.0)
    }

    /// Frequency for pair index `j` (0-based): `base^{-2j/d}`.
    fn freq(&self, j: usize) -> f64 {
        self.theta_base
            .powf(-2.0 * j as f64 / self.head_dim as f64)
    }

    /// Per-pair (cos, sin) of `n * theta_j`, computed in f64.
    pub fn angles(&self, n: u64) -> Vec<(f64, f64)> {
        (0..self.head_dim / 2)
            .map(|j| {
                let a = n as f64 * self.freq(j);
                (a.cos(), a.sin())
            })
            .collect()
    }
}

/// Dense rotation matrix for position `n`, as a `[d, d]` tensor.
///
/// Pair `j` rotates channels `(j, j + d/2)` by angle `n * theta_j`; the
/// result is orthogonal.
pub fn rope_matrix(params: &RopeParams, n: u64) -> Tensor {
    let d = params.head_dim;
    let h = d / 2;
    let mut m = vec![0.0f32; d * d];
    for (j, (c, s)) in params.angles(n).into_iter().enumerate() {
        m[j * d + j] = c as f32;
        m[j * d + (j + h)] = -s as f32;
        m[(j + h) * d + j] = s as f32;
        m[(j + h) * d + (j + h)] = c as f32;
    }
    Tensor::new(vec![d as u64, d as u64], m).expect("square shape")
}

/// Element-wise RoPE: rotates `x` to position `n`.
///
/// Angles in f64, application in f32. Agrees with `rope_matrix(params, n) * x`
/// within 1e-5 relative error.
pub fn rope_apply(params: &RopeParams, x: &[f32], n: u64) -> Result<Vec<f32>, RopeError> {
    if x.len() != params.head_dim {
        return Err(RopeError::DimMismatch {
            len: x.len(),
            head_dim: params.head_dim,
        });
    }
    let mut out = vec![0.0f32; x.len()];
    rope_apply_into(params, x, n, &mut out);
    Ok(out)
}

/// In-place variant used by the cache kernels; `x.len()` must equal
/// `head_dim` (checked by callers).
pub(crate) fn rope_apply_into(params: &RopeParams, x: &[f32], n: u64, out: &mut [f32]) {
    let h = params.head_dim / 2;
    for (j, (c, s)) in params.angles(n).into_iter().enumerate() {
        let a = x[j] as f64;
        let b = x[j + h] as f64;
        out[j] = (a * c - b * s) as f32;
        out[j + h] = (a * s + b * c) as f32;
    }
}

/// Applies RoPE per consecutive `head_dim` chunk of a multi-head vector.
pub fn rope_apply_heads(params: &RopeParams, x: &[f32], n: u64) -> Result<Vec<f32>, RopeError> {
    if x.len() % params.head_dim != 0 {
        return Err(RopeError::DimMismatch {
            len: x.len(),
            head_dim: params.head_dim,
        });
    }
    let mut out = vec![0.0f32; x.len()];
    for (xc, oc) in x
        .chunks_exact(params.head_dim)
        .zip(out.chunks_exact_mut(params.head_dim))
    {
        rope_apply_into(params, xc, n, oc);
    }
    Ok(out)
}

/// Matrix-vector product against the dense oracle, for tests and the
/// score-identity check.
pub fn matvec(m: &Tensor, x: &[f32]) -> Vec<f32> {
    let rows = m.n_rows();
    let cols = m.n_cols();
    assert_eq!(cols, x.len());
    let mut y = vec![0.0f32; rows];
    for r in 0..rows {
        let mut acc = 0.0f64;
        for c in 0..cols {
            acc += m.data()[r * cols + c] as f64 * x[c] as f64;
        }
        y[r] = acc as f32;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f32], b: &[f32]) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            num += ((x - y) as f64).powi(2);
            den += (*y as f64).powi(2);
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    #[test]
    fn position_zero_is_identity_matrix() {
        let p = RopeParams::with_default_base(8).unwrap();
        let m = rope_matrix(&p, 0);
        for r in 0..8 {
            for c in 0..8 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert_eq!(m.data()[r * 8 + c], expect);
            }
        }
    }

    #[test]
    fn d2_n1_matches_hand_values() {
        // theta_1 = 10000^0 = 1, so the matrix is a rotation by 1 radian
        let p = RopeParams::with_default_base(2).unwrap();
        let m = rope_matrix(&p, 1);
        let c = 1.0f64.cos() as f32;
        let s = 1.0f64.sin() as f32;
        assert!((m.data()[0] - c).abs() < 1e-6);
        assert!((m.data()[1] + s).abs() < 1e-6);
        assert!((m.data()[2] - s).abs() < 1e-6);
        assert!((m.data()[3] - c).abs() < 1e-6);
        assert!((c - 0.5403).abs() < 1e-4);
        assert!((s - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn matrix_is_orthogonal() {
        for &d in &[2usize, 4, 8] {
            let p = RopeParams::with_default_base(d).unwrap();
            for &n in &[0u64, 1, 7, 1000] {
                let m = rope_matrix(&p, n);
                // R * R^T == I
                for r in 0..d {
                    for c in 0..d {
                        let mut acc = 0.0f64;
                        for k in 0..d {
                            acc += m.data()[r * d + k] as f64 * m.data()[c * d + k] as f64;
                        }
                        let expect = if r == c { 1.0 } else { 0.0 };
                        assert!(
                            (acc - expect).abs() < 1e-6,
                            "d={d} n={n} ({r},{c}): {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn apply_at_zero_is_identity() {
        let p = RopeParams::with_default_base(8).unwrap();
        let x: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        assert_eq!(rope_apply(&p, &x, 0).unwrap(), x);
    }

    #[test]
    fn apply_d2_hand_case() {
        let p = RopeParams::with_default_base(2).unwrap();
        let y = rope_apply(&p, &[1.0, 0.0], 1).unwrap();
        assert!((y[0] - 0.5403).abs() < 1e-4);
        assert!((y[1] - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn elementwise_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &d in &[2usize, 4, 8, 128] {
            let p = RopeParams::with_default_base(d).unwrap();
            for &n in &[0u64, 1, 7, 1000] {
                let x: Vec<f32> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let fast = rope_apply(&p, &x, n).unwrap();
                let oracle = matvec(&rope_matrix(&p, n), &x);
                assert!(
                    rel_err(&fast, &oracle) < 1e-5,
                    "d={d} n={n}: {}",
                    rel_err(&fast, &oracle)
                );
            }
        }
    }

    #[test]
    fn norm_preservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = RopeParams::with_default_base(16).unwrap();
        for &n in &[1u64, 42, 1000, 100_000] {
            let x: Vec<f32> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = rope_apply(&p, &x, n).unwrap();
            let nx: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!(((nx - ny) / nx).abs() < 1e-6);
        }
    }

    #[test]
    fn score_identity_rotated_dot() {
        // (R_m q) . (R_n k) computed element-wise equals the matrix form
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = RopeParams::with_default_base(8).unwrap();
        let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (m, n) = (9u64, 4u64);
        let qe = rope_apply(&p, &q, m).unwrap();
        let ke = rope_apply(&p, &k, n).unwrap();
        let dot_e: f64 = qe.iter().zip(&ke).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let qm = matvec(&rope_matrix(&p, m), &q);
        let km = matvec(&rope_matrix(&p, n), &k);
        let dot_m: f64 = qm.iter().zip(&km).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((dot_e - dot_m).abs() < 1e-5 * dot_m.abs().max(1.0));
    }

    #[test]
    fn rejects_odd_head_dim() {
        assert!(matches!(RopeParams::new(3, 10000.0), Err(RopeError::BadHeadDim(3))));
        assert!(matches!(RopeParams::new(0, 10000.0), Err(RopeError::BadHeadDim(0))));
    }

    #[test]
    fn rejects_dim_mismatch() {
        let p = RopeParams::with_default_base(4).unwrap();
        assert!(matches!(
            rope_apply(&p, &[1.0, 2.0], 3),
            Err(RopeError::DimMismatch { len: 2, head_dim: 4 })
        ));
    }

    #[test]
    fn multi_head_apply_matches_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = RopeParams::with_default_base(4).unwrap();
        let x: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let all = rope_apply_heads(&p, &x, 21).unwrap();
        for h in 0..3 {
            let per = rope_apply(&p, &x[h * 4..(h + 1) * 4], 21).unwrap();
            assert_eq!(&all[h * 4..(h + 1) * 4], per.as_slice());
        }
    }
}
