//! Training objectives: multi-hop InfoNCE, the neighbor information
//! bottleneck, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::config::{ensure, ConfigError};
use crate::kernels::{KernelError, Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight of the input-suppression term inside the bottleneck loss.
    pub beta: f64,
    /// Weight of the bottleneck loss in the total.
    pub eta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            beta: 0.01,
            eta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(
            self.tau > 0.0 && self.tau.is_finite(),
            "loss.tau",
            "must be positive",
        )?;
        ensure(
            self.beta >= 0.0 && self.beta.is_finite(),
            "loss.beta",
            "must be non-negative",
        )?;
        ensure(
            self.eta >= 0.0 && self.eta.is_finite(),
            "loss.eta",
            "must be non-negative",
        )
    }
}

/// Contrastive loss summed over hops.
///
/// `positives` is `[hops, d]` (one masked neighbor per hop), `negatives` is
/// `[m, d]`. Each hop's denominator holds that hop's positive and every
/// negative.
pub fn info_nce_multihop<T: Scalar>(
    tape: &mut Tape<'_, T>,
    coding: Var,
    positives: Var,
    negatives: Var,
    tau: T,
) -> Result<Var, KernelError> {
    tape.info_nce(coding, positives, negatives, tau)
}

/// Bottleneck loss: rewards bilinear agreement (`W1`) with the masked
/// neighbors and, weighted by `beta`, penalizes agreement (`W2`) with the
/// encoder's input nodes.
pub fn nib_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    coding: Var,
    positives: Var,
    inputs: Var,
    w1: Var,
    w2: Var,
    beta: T,
) -> Result<Var, KernelError> {
    tape.nib(coding, positives, inputs, w1, w2, beta)
}

/// `vanilla + eta · nib`
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vanilla: Var,
    nib: Var,
    eta: T,
) -> Result<Var, KernelError> {
    let weighted = tape.scale(nib, eta);
    tape.add(vanilla, weighted)
}
