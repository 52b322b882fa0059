//! Frame-indexed contrastive alignment between the invariant stream and
//! each modality-specific stream.
//!
//! For frame `i`, the positive is frame `i` of the other sequence and the
//! negatives are its other frames within the same utterance. The per-utterance
//! loss is the sum over frames and both modalities of
//! `−log softmax_j(cos(inv_i, m_j) / τ)[i]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MimConfig {
    pub temperature: f64,
}

impl Default for MimConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

impl MimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub fn mim_loss<R: Real>(tape: &mut Tape<R>, f_inv: Var, f_v_spe: Var, f_a_spe: Var, cfg: &MimConfig) -> Result<Var> {
    cfg.validate()?;
    let t = tape.value(f_inv).rows();
    for other in [f_v_spe, f_a_spe] {
        let (to, d) = (tape.value(other).rows(), tape.value(other).cols());
        if to != t || d != tape.value(f_inv).cols() {
            return Err(Error::dim("mim_loss", format!("{:?} vs {:?}", tape.value(f_inv).shape(), tape.value(other).shape())));
        }
    }
    if t < 2 {
        log::debug!("mim_loss: single-frame utterance contributes 0");
        return tape.constant(Tensor::scalar(R::zero()));
    }
    let labels: Vec<usize> = (0..t).collect();
    let inv = tape.normalize_rows(f_inv, 1e-8)?;
    let mut total = None;
    for other in [f_v_spe, f_a_spe] {
        let o = tape.normalize_rows(other, 1e-8)?;
        let sim = tape.matmul_nt(inv, o)?;
        let logits = tape.scale(sim, 1.0 / cfg.temperature)?;
        // mean cross-entropy × T = sum over frames
        let ce = tape.cross_entropy(logits, &labels)?;
        let summed = tape.scale(ce, t as f64)?;
        total = Some(match total {
            None => summed,
            Some(acc) => tape.add(acc, summed)?,
        });
    }
    Ok(total.expect("two modalities"))
}
