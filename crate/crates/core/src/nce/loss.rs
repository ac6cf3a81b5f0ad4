//! Scalar forms of the auxiliary and test-time losses. The model module
//! builds the same quantities on the tape; these are the reference values.

use crate::error::{Error, Result};
use crate::nce::posterior::SoftLabelBatch;
use crate::numeric::{log_sigmoid, softplus};

/// Soft-label binary cross-entropy averaged over all views, from discriminator logits.
pub fn aux_loss(logits: &[f64], labels: &SoftLabelBatch) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "aux_loss",
            lhs: vec![logits.len()],
            rhs: vec![labels.len()],
        });
    }
    if logits.is_empty() {
        return Err(Error::invalid("aux_loss over zero views"));
    }
    let total: f64 = logits
        .iter()
        .zip(labels.values())
        .map(|(&x, &p)| softplus(x) - p * x)
        .sum();
    Ok(total / logits.len() as f64)
}

/// `-mean log q(z)` over a test batch, from discriminator logits.
pub fn test_loss(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("test_loss over an empty batch"));
    }
    Ok(-logits.iter().map(|&x| log_sigmoid(x)).sum::<f64>() / logits.len() as f64)
}
