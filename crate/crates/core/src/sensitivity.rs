//! Fisher-information sensitivity weights and mixed-precision assignment.
//!
//! The diagonal Fisher approximation (elementwise squared gradients summed
//! over calibration samples) stands in for the Hessian. It weights the
//! k-means objective during codebook derivation and ranks layers for
//! one-shot mixed-precision bit assignment.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("gradient list is empty")]
    EmptyGrads,
    #[error("gradient {index} shape {found:?} differs from first shape {expected:?}")]
    GradShapeMismatch {
        index: usize,
        expected: Vec<u64>,
        found: Vec<u64>,
    },
    #[error("shape mismatch: activation {activation:?}, quantized {quantized:?}, fisher {fisher:?}")]
    ShapeMismatch {
        activation: Vec<u64>,
        quantized: Vec<u64>,
        fisher: Vec<u64>,
    },
    #[error("demote_count {demote_count} out of range (layers: {layers})")]
    DemoteCountOutOfRange { demote_count: usize, layers: usize },
}

/// Diagonal Fisher weights; same shape as the activation tensor it weights,
/// nonnegative everywhere.
#[derive(Debug, Clone)]
pub struct FisherDiag {
    weights: Tensor,
}

impl FisherDiag {
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Uniform weights of the given shape; the unweighted-k-means baseline.
    pub fn uniform(shape: &[u64]) -> Self {
        let mut t = Tensor::zeros(shape.to_vec()).expect("valid shape");
        t.data_mut().fill(1.0);
        Self { weights: t }
    }

    /// Scales all weights by `c`; ranking-invariant for positive `c`.
    pub fn scaled(&self, c: f32) -> Self {
        let mut t = self.weights.clone();
        for w in t.data_mut() {
            *w *= c;
        }
        Self { weights: t }
    }
}

/// Elementwise sum over samples of `g ⊙ g`.
pub fn fisher_diag(grads: &[Tensor]) -> Result<FisherDiag, SensitivityError> {
    let first = grads.first().ok_or(SensitivityError::EmptyGrads)?;
    let mut acc = Tensor::zeros(first.shape().to_vec()).expect("valid shape");
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != first.shape() {
            return Err(SensitivityError::GradShapeMismatch {
                index: i,
                expected: first.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += v * v;
        }
    }
    Ok(FisherDiag { weights: acc })
}

/// Per-layer sensitivity of a candidate quantization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerSensitivity {
    pub layer_id: usize,
    pub omega: f64,
}

/// `Ω = Σ F_ii (A − Q(A))²`, the Fisher-weighted squared quantization error.
pub fn layer_sensitivity(
    a: &Tensor,
    qa: &Tensor,
    f: &FisherDiag,
) -> Result<f64, SensitivityError> {
    if a.shape() != qa.shape() || a.shape() != f.weights.shape() {
        return Err(SensitivityError::ShapeMismatch {
            activation: a.shape().to_vec(),
            quantized: qa.shape().to_vec(),
            fisher: f.weights.shape().to_vec(),
        });
    }
    let mut omega = 0.0f64;
    for ((&x, &q), &w) in a.data().iter().zip(qa.data()).zip(f.weights.data()) {
        let e = (x - q) as f64;
        omega += w as f64 * e * e;
    }
    Ok(omega)
}

/// Picks the `demote_count` layers with smallest Ω (the least sensitive
/// layers, safest to demote to the lower bit width). Ties break toward the
/// lower layer id.
pub fn assign_mixed_precision(
    sens: &[LayerSensitivity],
    demote_count: usize,
) -> Result<BTreeSet<usize>, SensitivityError> {
    if demote_count > sens.len() {
        return Err(SensitivityError::DemoteCountOutOfRange {
            demote_count,
            layers: sens.len(),
        });
    }
    let mut order: Vec<&LayerSensitivity> = sens.iter().collect();
    order.sort_by(|a, b| {
        a.omega
            .partial_cmp(&b.omega)
            .expect("omega is finite")
            .then(a.layer_id.cmp(&b.layer_id))
    });
    Ok(order[..demote_count].iter().map(|s| s.layer_id).collect())
}
