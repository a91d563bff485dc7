//! Training losses, computed in logit space.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::linalg::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over pixels of -[t ln p + (1-t) ln(1-p)], evaluated in the
    /// numerically stable logit form max(z,0) - z t + ln(1 + exp(-|z|)).
    /// Well-defined for soft targets in [0, 1].
    PixelwiseCrossEntropy,
    /// Mean over pixels of (p - t)^2 with p the squashed output.
    MeanSquaredError,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cross_entropy" | "ce" | "pixelwise_cross_entropy" => {
                Ok(LossKind::PixelwiseCrossEntropy)
            }
            "mse" | "mean_squared_error" => Ok(LossKind::MeanSquaredError),
            other => Err(format!("unknown loss '{other}'")),
        }
    }
}

/// Loss value given pre-squash logits and targets in [0, 1]. Accumulated in
/// f64 regardless of the working precision.
pub fn loss<F: Scalar>(logits: &Array2<F>, targets: &Array2<F>, kind: LossKind) -> f64 {
    debug_assert_eq!(logits.dim(), targets.dim());
    let n = logits.len() as f64;
    let mut acc = 0.0_f64;
    match kind {
        LossKind::PixelwiseCrossEntropy => {
            for (&z, &t) in logits.iter().zip(targets.iter()) {
                let (z, t) = (z.to_real(), t.to_real());
                acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            }
        }
        LossKind::MeanSquaredError => {
            for (&z, &t) in logits.iter().zip(targets.iter()) {
                let p = 1.0 / (1.0 + (-z.to_real()).exp());
                let d = p - t.to_real();
                acc += d * d;
            }
        }
    }
    acc / n
}

/// Loss plus its gradient with respect to the logits. For cross-entropy the
/// gradient is exactly (p - t) / pixel_count.
pub fn loss_grad_logits<F: Scalar>(
    logits: &Array2<F>,
    targets: &Array2<F>,
    kind: LossKind,
) -> (f64, Array2<F>) {
    let value = loss(logits, targets, kind);
    let inv_n = F::from_real(1.0 / logits.len() as f64);
    let mut grad = logits.clone();
    match kind {
        LossKind::PixelwiseCrossEntropy => {
            ndarray::Zip::from(&mut grad).and(targets).for_each(|z, &t| {
                let p = F::one() / (F::one() + (-*z).exp());
                *z = (p - t) * inv_n;
            });
        }
        LossKind::MeanSquaredError => {
            let two = F::from_real(2.0);
            ndarray::Zip::from(&mut grad).and(targets).for_each(|z, &t| {
                let p = F::one() / (F::one() + (-*z).exp());
                *z = two * (p - t) * p * (F::one() - p) * inv_n;
            });
        }
    }
    (value, grad)
}

/// Convenience alias used by `run_backward` callers.
pub use loss_grad_logits as loss_and_grad;
