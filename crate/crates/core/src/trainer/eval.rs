//! Deterministic held-out evaluation, clean and at fixed SNR levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::Result;
use crate::model::Model;
use crate::recognition::{count_errors, ModalityMode, TerCount};
use crate::synthdata::{add_noise, Utterance};

pub const DEFAULT_SNR_LEVELS: [f64; 5] = [-10.0, -5.0, 0.0, 5.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrTer {
    pub snr_db: f64,
    pub ter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modality: ModalityMode,
    pub utterances: usize,
    pub frames: usize,
    pub clean_ter: f64,
    pub per_snr: Vec<SnrTer>,
    /// Mean of `per_snr`; absent for a clean-only evaluation.
    pub noisy_ter: Option<f64>,
}

/// Mixes several integers into one RNG seed (SplitMix64 finaliser).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Frame-weighted TER of `utts` with audio corrupted at `snr_db`
/// (`None` = clean). Noise for utterance `i` at level `level` is a pure
/// function of `(seed, level, i)`.
pub fn corpus_ter<R: Real>(model: &Model<R>, utts: &[&Utterance], mode: ModalityMode, snr_db: Option<f64>, seed: u64, level: u64) -> Result<TerCount> {
    let counts = utts
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let audio = match snr_db {
                Some(snr) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, level, i as u64]));
                    add_noise(&u.audio, snr, &mut rng)?
                }
                None => u.audio.clone(),
            };
            let mut s = model.session(|_| false)?;
            let fwd = model.forward(&mut s, &u.visual, &audio, mode)?;
            count_errors(s.value(fwd.logits), &u.labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = TerCount::default();
    for c in counts {
        total.merge(c);
    }
    Ok(total)
}

pub fn evaluate<R: Real>(model: &Model<R>, utts: &[&Utterance], snr_levels: &[f64], mode: ModalityMode, seed: u64) -> Result<EvalReport> {
    let clean = corpus_ter(model, utts, mode, None, seed, 0)?;
    let mut per_snr = Vec::with_capacity(snr_levels.len());
    for (k, &snr) in snr_levels.iter().enumerate() {
        let c = corpus_ter(model, utts, mode, Some(snr), seed, k as u64 + 1)?;
        per_snr.push(SnrTer {
            snr_db: snr,
            ter: c.rate(),
        });
    }
    let noisy_ter = (!per_snr.is_empty()).then(|| per_snr.iter().map(|p| p.ter).sum::<f64>() / per_snr.len() as f64);
    let lowest = per_snr.iter().min_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
    let highest = per_snr.iter().max_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
    if let (Some(lo), Some(hi)) = (lowest, highest) {
        if lo.ter < hi.ter {
            log::warn!(
                "TER at {} dB ({:.4}) is below TER at {} dB ({:.4})",
                lo.snr_db,
                lo.ter,
                hi.snr_db,
                hi.ter
            );
        }
    }
    Ok(EvalReport {
        modality: mode,
        utterances: utts.len(),
        frames: clean.frames,
        clean_ter: clean.rate(),
        per_snr,
        noisy_ter,
    })
}
