//! Per-frame recognizer head over the fused representations, token error
//! rate, and single-modality input masking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{Linear, SelfAttentionLayer};
use crate::params::{check_width, Group, Init, ParamStore, Session};

/// Which representations feed the recognizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecognizerInputs {
    /// `f_v^spe ∥ f_a^spe ∥ f_va^inv`
    All,
    /// `f_v^spe ∥ f_a^spe`
    SpecificOnly,
    /// `f_va^inv`
    InvariantOnly,
}

impl RecognizerInputs {
    pub fn width_multiple(self) -> usize {
        match self {
            RecognizerInputs::All => 3,
            RecognizerInputs::SpecificOnly => 2,
            RecognizerInputs::InvariantOnly => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    pub inputs: RecognizerInputs,
    pub fusion: Linear,
    pub layers: Vec<SelfAttentionLayer>,
    pub out: Linear,
    input_width: usize,
}

impl Recognizer {
    pub fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, inputs: RecognizerInputs, seed: u64) -> Self {
        let d = cfg.d_model;
        let input_width = inputs.width_multiple() * d;
        let mut init = Init::new(store, Group::Recognizer, seed);
        let fusion = Linear::new(&mut init, "recognizer.fusion", input_width, d);
        let layers = (0..cfg.recognizer_layers)
            .map(|l| {
                SelfAttentionLayer::new(&mut init, &format!("recognizer.layer.{l}"), d, cfg.heads, cfg.ffn_dim, cfg.ln_eps)
            })
            .collect();
        let out = Linear::new(&mut init, "recognizer.out", d, cfg.num_classes);
        Self {
            inputs,
            fusion,
            layers,
            out,
            input_width,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    /// Class logits `T×C`.
    pub fn recognize<R: Real>(&self, s: &mut Session<R>, f_v_spe: Var, f_a_spe: Var, f_va_inv: Var) -> Result<Var> {
        let parts: Vec<Var> = match self.inputs {
            RecognizerInputs::All => vec![f_v_spe, f_a_spe, f_va_inv],
            RecognizerInputs::SpecificOnly => vec![f_v_spe, f_a_spe],
            RecognizerInputs::InvariantOnly => vec![f_va_inv],
        };
        let x = if parts.len() == 1 { parts[0] } else { s.tape.concat(&parts)? };
        check_width("recognize", s.value(x).cols(), self.input_width)?;
        let mut h = self.fusion.forward(s, x)?;
        for layer in &self.layers {
            h = layer.forward(s, h)?;
        }
        self.out.forward(s, h)
    }
}

/// Frame-level error counts; merge across utterances for a frame-weighted rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TerCount {
    pub errors: usize,
    pub frames: usize,
}

impl TerCount {
    pub fn rate(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.errors as f64 / self.frames as f64
        }
    }

    pub fn merge(&mut self, other: TerCount) {
        self.errors += other.errors;
        self.frames += other.frames;
    }
}

/// Per-row argmax; ties go to the lowest class id.
pub fn argmax_rows<R: Real>(logits: &Tensor<R>) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn count_errors<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> Result<TerCount> {
    if logits.rows() != labels.len() {
        return Err(Error::dim(
            "token_error_rate",
            format!("{} frames, {} labels", logits.rows(), labels.len()),
        ));
    }
    let errors = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    Ok(TerCount {
        errors,
        frames: labels.len(),
    })
}

/// Fraction of frames whose argmax differs from the label.
pub fn token_error_rate<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> Result<f64> {
    count_errors(logits, labels).map(|c| c.rate())
}

/// Input modality mode for evaluation and training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModalityMode {
    #[default]
    AV,
    A,
    V,
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModalityMode::AV => "AV",
            ModalityMode::A => "A",
            ModalityMode::V => "V",
        })
    }
}

impl FromStr for ModalityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AV" | "av" => Ok(ModalityMode::AV),
            "A" | "a" => Ok(ModalityMode::A),
            "V" | "v" => Ok(ModalityMode::V),
            other => Err(Error::Config(format!("unknown modality mode `{other}`"))),
        }
    }
}

/// Replaces the missing modality's front-end output with zeros.
pub fn single_modality_mask<R: Real>(s: &mut Session<R>, mode: ModalityMode, f_v: Var, f_a: Var) -> Result<(Var, Var)> {
    let zeros_like = |s: &mut Session<R>, v: Var| {
        let shape = s.value(v).shape().to_vec();
        s.input(Tensor::zeros(&shape))
    };
    Ok(match mode {
        ModalityMode::AV => (f_v, f_a),
        ModalityMode::A => (zeros_like(s, f_v)?, f_a),
        ModalityMode::V => (f_v, zeros_like(s, f_a)?),
    })
}
