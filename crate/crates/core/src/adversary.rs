//! Per-frame modality discriminator and the adversarial objective.
//!
//! Label convention: 1 = audio, 0 = visual. All log-probabilities are taken
//! in logit space, `log σ(x) = −softplus(−x)` and `log(1 − σ(x)) = −softplus(x)`,
//! so no probability is ever clamped.

use crate::autodiff::{Real, Tape, Var};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::nn::Linear;
use crate::params::{Group, Init, ParamId, ParamStore, Session};

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub hidden: Linear,
    /// `None` removes the hidden nonlinearity (two stacked affine maps).
    pub slope: Option<ParamId>,
    pub out: Linear,
}

/// Discriminator outputs for one `T×D` sequence.
pub struct Discrimination {
    pub logits: Var,
    pub probs: Var,
}

/// The two expectations of the adversarial objective for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct GanTerms {
    /// `E[log D(f_a^spe) + log(1 − D(f_v^spe))]`, always ≤ 0.
    pub modality: Var,
    /// `E[−log D(f_inv) − log(1 − D(f_inv))]`, always ≥ 2 ln 2.
    pub invariant: Var,
    pub audio_logits: Var,
    pub visual_logits: Var,
    pub inv_logits: Var,
}

impl Discriminator {
    /// The output layer starts at zero, so an untrained discriminator reports
    /// exactly 0.5 everywhere.
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, seed: u64) -> Self {
        let mut init = Init::new(store, Group::Discriminator, seed);
        let hidden = Linear::new(&mut init, "discriminator.hidden", cfg.d_model, cfg.disc_hidden);
        let slope = cfg
            .disc_hidden_activation
            .then(|| init.fill("discriminator.slope", cfg.disc_hidden, 0.25));
        let out = Linear::zeros(&mut init, "discriminator.out", cfg.disc_hidden, 1);
        Self { hidden, slope, out }
    }

    pub fn discriminate<R: Real>(&self, s: &mut Session<R>, f: Var) -> Result<Discrimination> {
        let mut h = self.hidden.forward(s, f)?;
        if let Some(slope) = self.slope {
            let a = s.p(slope);
            h = s.tape.prelu(h, a)?;
        }
        let logits = self.out.forward(s, h)?;
        let probs = s.tape.sigmoid(logits)?;
        Ok(Discrimination { logits, probs })
    }

    /// Full `L_GAN` for one utterance: modality term plus invariant term.
    pub fn loss_d<R: Real>(&self, s: &mut Session<R>, f_a_spe: Var, f_v_spe: Var, f_va_inv: Var) -> Result<Var> {
        let terms = self.terms(s, f_a_spe, f_v_spe, f_va_inv)?;
        s.tape.add(terms.modality, terms.invariant)
    }

    pub fn terms<R: Real>(&self, s: &mut Session<R>, f_a_spe: Var, f_v_spe: Var, f_va_inv: Var) -> Result<GanTerms> {
        let la = self.discriminate(s, f_a_spe)?.logits;
        let lv = self.discriminate(s, f_v_spe)?.logits;
        let li = self.discriminate(s, f_va_inv)?.logits;
        gan_terms(&mut s.tape, la, lv, li)
    }

    /// `L_G` for one utterance.
    pub fn loss_g<R: Real>(&self, s: &mut Session<R>, f_va_inv: Var) -> Result<Var> {
        let li = self.discriminate(s, f_va_inv)?.logits;
        invariant_term(&mut s.tape, li)
    }
}

/// Mean over frames of `log σ(x)`.
fn mean_log_sigmoid<R: Real>(tape: &mut Tape<R>, logits: Var) -> Result<Var> {
    let neg = tape.negate(logits)?;
    let sp = tape.softplus(neg)?;
    let m = tape.mean(sp)?;
    tape.negate(m)
}

/// Mean over frames of `log(1 − σ(x))`.
fn mean_log_one_minus_sigmoid<R: Real>(tape: &mut Tape<R>, logits: Var) -> Result<Var> {
    let sp = tape.softplus(logits)?;
    let m = tape.mean(sp)?;
    tape.negate(m)
}

/// Mean over frames of `−log σ(x) − log(1 − σ(x)) = softplus(−x) + softplus(x)`.
pub fn invariant_term<R: Real>(tape: &mut Tape<R>, logits: Var) -> Result<Var> {
    let neg = tape.negate(logits)?;
    let a = tape.softplus(neg)?;
    let b = tape.softplus(logits)?;
    let both = tape.add(a, b)?;
    tape.mean(both)
}

/// Both expectations from per-frame logits of the audio-specific,
/// visual-specific and invariant sequences.
pub fn gan_terms<R: Real>(tape: &mut Tape<R>, audio_logits: Var, visual_logits: Var, inv_logits: Var) -> Result<GanTerms> {
    let a = mean_log_sigmoid(tape, audio_logits)?;
    let v = mean_log_one_minus_sigmoid(tape, visual_logits)?;
    let modality = tape.add(a, v)?;
    let invariant = invariant_term(tape, inv_logits)?;
    Ok(GanTerms {
        modality,
        invariant,
        audio_logits,
        visual_logits,
        inv_logits,
    })
}
