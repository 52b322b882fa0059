//! Model dimensions, ablation variants, and the assembled forward pipeline
//! with its per-utterance objectives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::{Discriminator, GanTerms};
use crate::autodiff::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::mim::{mim_loss, MimConfig};
use crate::mirgen::Generator;
use crate::params::{Group, ParamStore, Session};
use crate::recognition::{single_modality_mask, ModalityMode, Recognizer, RecognizerInputs};
use crate::towers::Towers;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_visual_raw: usize,
    pub d_audio_raw: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub generator_blocks: usize,
    pub recognizer_layers: usize,
    pub disc_hidden: usize,
    pub disc_hidden_activation: bool,
    pub num_classes: usize,
    pub dropout: f64,
    pub positional_encoding: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_visual_raw: 24,
            d_audio_raw: 26,
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            encoder_layers: 2,
            generator_blocks: 2,
            recognizer_layers: 1,
            disc_hidden: 16,
            disc_hidden_activation: true,
            num_classes: 16,
            dropout: 0.1,
            positional_encoding: false,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("model: {msg}")));
        if self.d_model < 2 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model ({}) must be >= 2 and divisible by heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.d_visual_raw == 0 || self.d_audio_raw == 0 || self.ffn_dim == 0 || self.disc_hidden == 0 {
            return bad("all widths must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    NoInvariant,
    NoSpecific,
    NoEncoders,
    NoGenerator,
    NoDiscriminator,
    NoAdversarial,
    NoMim,
}

impl AblationMode {
    pub const ALL: [AblationMode; 8] = [
        AblationMode::Full,
        AblationMode::NoInvariant,
        AblationMode::NoSpecific,
        AblationMode::NoEncoders,
        AblationMode::NoGenerator,
        AblationMode::NoDiscriminator,
        AblationMode::NoAdversarial,
        AblationMode::NoMim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoInvariant => "no_invariant",
            AblationMode::NoSpecific => "no_specific",
            AblationMode::NoEncoders => "no_encoders",
            AblationMode::NoGenerator => "no_generator",
            AblationMode::NoDiscriminator => "no_discriminator",
            AblationMode::NoAdversarial => "no_adversarial",
            AblationMode::NoMim => "no_mim",
        }
    }

    pub fn has_discriminator(self) -> bool {
        self != AblationMode::NoDiscriminator
    }

    /// Whether the discriminator update phase runs at all.
    pub fn runs_phase_a(self) -> bool {
        !matches!(self, AblationMode::NoDiscriminator | AblationMode::NoAdversarial)
    }

    pub fn uses_gan(self) -> bool {
        self.runs_phase_a()
    }

    pub fn uses_mim(self) -> bool {
        self != AblationMode::NoMim
    }

    fn recognizer_inputs(self) -> RecognizerInputs {
        match self {
            AblationMode::NoInvariant => RecognizerInputs::SpecificOnly,
            AblationMode::NoSpecific => RecognizerInputs::InvariantOnly,
            _ => RecognizerInputs::All,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

/// Loss weights of the Phase-B objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_mim: f64,
    pub mim: MimConfig,
}

/// All parameters plus the module layout that indexes into them.
#[derive(Clone, Debug)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub ablation: AblationMode,
    pub store: ParamStore<R>,
    pub towers: Towers,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub recognizer: Recognizer,
}

impl<R: Real> PartialEq for Model<R> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.ablation == other.ablation && self.store == other.store
    }
}

/// Intermediate sequences of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub f_v: Var,
    pub f_a: Var,
    pub f_v_spe: Var,
    pub f_a_spe: Var,
    pub f_va: Var,
    pub f_va_inv: Var,
    pub logits: Var,
}

/// Per-utterance Phase-B pieces, already weighted for the batch.
#[derive(Clone, Copy, Debug)]
pub struct PhaseB {
    pub total: Var,
    pub rec: Var,
    pub gan_g: Option<Var>,
    pub mim: Option<Var>,
}

impl<R: Real> Model<R> {
    pub fn new(config: ModelConfig, ablation: AblationMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layers = if ablation == AblationMode::NoEncoders { 0 } else { config.encoder_layers };
        let towers = Towers::new(&mut store, &config, layers, seed);
        let blocks = if ablation == AblationMode::NoGenerator { 0 } else { config.generator_blocks };
        let generator = Generator::new(&mut store, &config, blocks, seed);
        let discriminator = ablation
            .has_discriminator()
            .then(|| Discriminator::new(&mut store, &config, seed));
        let recognizer = Recognizer::new(&mut store, &config, ablation.recognizer_inputs(), seed);
        Ok(Self {
            config,
            ablation,
            store,
            towers,
            generator,
            discriminator,
            recognizer,
        })
    }

    /// Same layout at another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            ablation: self.ablation,
            store: self.store.cast(),
            towers: self.towers.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            recognizer: self.recognizer.clone(),
        }
    }

    /// Session with `trainable` groups receiving gradients.
    pub fn session(&self, trainable: impl Fn(Group) -> bool) -> Result<Session<R>> {
        Session::bind(&self.store, trainable)
    }

    pub fn forward<S: Real>(&self, s: &mut Session<R>, visual: &Tensor<S>, audio: &Tensor<S>, mode: ModalityMode) -> Result<Forward> {
        let x_v = s.input(visual.cast())?;
        let x_a = s.input(audio.cast())?;
        self.forward_vars(s, x_v, x_a, mode)
    }

    pub fn forward_vars(&self, s: &mut Session<R>, x_v: Var, x_a: Var, mode: ModalityMode) -> Result<Forward> {
        let f_v = self.towers.visual_frontend(s, x_v)?;
        let f_a = self.towers.audio_frontend(s, x_a)?;
        let (f_v, f_a) = single_modality_mask(s, mode, f_v, f_a)?;
        let (f_v_spe, f_a_spe) = self.towers.encode(s, f_v, f_a)?;
        let f_va = self.generator.fuse_query(s, f_v, f_a)?;
        let f_va_inv = self.generator.generate(s, f_v_spe, f_a_spe, f_va)?;
        let logits = self.recognizer.recognize(s, f_v_spe, f_a_spe, f_va_inv)?;
        Ok(Forward {
            f_v,
            f_a,
            f_v_spe,
            f_a_spe,
            f_va,
            f_va_inv,
            logits,
        })
    }

    /// Discriminator terms on detached representations; `None` without a
    /// discriminator.
    pub fn gan_terms(&self, s: &mut Session<R>, fwd: &Forward) -> Result<Option<GanTerms>> {
        let Some(d) = &self.discriminator else {
            return Ok(None);
        };
        let a = s.tape.detach(fwd.f_a_spe);
        let v = s.tape.detach(fwd.f_v_spe);
        let inv = s.tape.detach(fwd.f_va_inv);
        d.terms(s, a, v, inv).map(Some)
    }

    /// `frame_weight · (L_rec + λ_GAN·L_G) + utt_weight · λ_MIM·L_MIM` for one
    /// utterance. Terms with a zero weight are still reported but not added.
    pub fn phase_b(&self, s: &mut Session<R>, fwd: &Forward, labels: &[usize], frame_weight: f64, utt_weight: f64, w: &LossWeights) -> Result<PhaseB> {
        let ce = s.tape.cross_entropy(fwd.logits, labels)?;
        let rec = s.tape.scale(ce, frame_weight)?;
        let mut total = rec;
        let gan_g = match &self.discriminator {
            Some(d) => {
                let lg = d.loss_g(s, fwd.f_va_inv)?;
                let lg = s.tape.scale(lg, frame_weight)?;
                if self.ablation.uses_gan() && w.lambda_gan > 0.0 {
                    let term = s.tape.scale(lg, w.lambda_gan)?;
                    total = s.tape.add(total, term)?;
                }
                Some(lg)
            }
            None => None,
        };
        let mim = if self.ablation.uses_mim() {
            let m = mim_loss(&mut s.tape, fwd.f_va_inv, fwd.f_v_spe, fwd.f_a_spe, &w.mim)?;
            let m = s.tape.scale(m, utt_weight)?;
            if w.lambda_mim > 0.0 {
                let term = s.tape.scale(m, w.lambda_mim)?;
                total = s.tape.add(total, term)?;
            }
            Some(m)
        } else {
            None
        };
        Ok(PhaseB { total, rec, gan_g, mim })
    }

    /// Checks that the raw feature widths match a corpus.
    pub fn check_compatible(&self, d_visual_raw: usize, d_audio_raw: usize, num_classes: usize) -> Result<()> {
        let c = &self.config;
        for (field, have, want) in [
            ("d_visual_raw", c.d_visual_raw, d_visual_raw),
            ("d_audio_raw", c.d_audio_raw, d_audio_raw),
            ("num_classes", c.num_classes, num_classes),
        ] {
            if have < want || (field != "num_classes" && have != want) {
                return Err(Error::Checkpoint(format!("{field}: model has {have}, corpus has {want}")));
            }
        }
        Ok(())
    }
}
