//! Joint recognition objective.

use crate::autograd::{Tape, Var};
use crate::decoder::CharVocab;
use crate::error::Result;
use crate::model::TrainForward;

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// Decoder cross-entropy.
    pub vq: Var,
    /// Quantizer cross-entropy on the pre-noise logits, when present.
    pub sq: Option<Var>,
}

/// `L_vq + alpha * L_sq`. Padded positions are ignored in both terms; the
/// quantizer term sees character slots only, never EOS.
pub fn loss_total(tape: &mut Tape, fwd: &TrainForward, alpha: f64) -> Result<LossParts> {
    let vq = tape.cross_entropy(fwd.logits, &fwd.targets, CharVocab::PAD)?;
    let Some(q) = fwd.sq_logits else {
        return Ok(LossParts { total: vq, vq, sq: None });
    };
    let sq = tape.cross_entropy(q, &fwd.slot_targets, CharVocab::PAD)?;
    let weighted = tape.scale(sq, alpha)?;
    let total = tape.add(vq, weighted)?;
    Ok(LossParts { total, vq, sq: Some(sq) })
}

/// Scalar values of a [`LossParts`], for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub vq: f64,
    pub sq: f64,
}

impl LossParts {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.value(self.total).item(),
            vq: tape.value(self.vq).item(),
            sq: self.sq.map_or(0.0, |s| tape.value(s).item()),
        }
    }
}
