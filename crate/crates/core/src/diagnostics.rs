//! Post-training analysis: invariant/specific alignment matrices, the
//! diagonality score, discriminator statistics, and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::recognition::ModalityMode;
use crate::synthdata::Utterance;

pub const HISTOGRAM_BINS: usize = 10;

/// Representations and discriminator outputs of one utterance.
#[derive(Clone, Debug)]
pub struct UtteranceAnalysis {
    pub id: String,
    pub v_spe: Tensor<f64>,
    pub a_spe: Tensor<f64>,
    pub inv: Tensor<f64>,
    /// `S_ij = cos(inv_i, v_spe_j)`
    pub sim_visual: Tensor<f64>,
    /// `S_ij = cos(inv_i, a_spe_j)`
    pub sim_audio: Tensor<f64>,
    /// Per-frame discriminator probabilities; empty without a discriminator.
    pub d_inv: Vec<f64>,
    pub d_audio: Vec<f64>,
    pub d_visual: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscStats {
    pub kind: String,
    pub mean: f64,
    pub std: f64,
    /// Counts over `HISTOGRAM_BINS` equal bins of `[0, 1]`.
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub utterances: usize,
    pub frames: usize,
    pub diag_score_visual: f64,
    pub diag_score_audio: f64,
    /// Frame accuracy of `audio-specific → 1, visual-specific → 0` at 0.5.
    pub disc_accuracy: Option<f64>,
    /// Mean `|D(f_inv) − 0.5|`.
    pub inv_deviation: Option<f64>,
    pub discriminator: Vec<DiscStats>,
}

fn cosine_matrix(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let (t, u) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(t * u);
    for i in 0..t {
        let ai = a.row(i);
        let na = norm(ai);
        for j in 0..u {
            let bj = b.row(j);
            let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
            out.push(dot / (na * norm(bj)));
        }
    }
    Tensor::matrix(t, u, out).expect("shape")
}

/// `mean_i S_ii − mean_{i≠j} S_ij`; `None` for fewer than two frames.
pub fn diag_score(s: &Tensor<f64>) -> Option<f64> {
    let t = s.rows();
    if t < 2 || s.cols() != t {
        return None;
    }
    let (mut on, mut off) = (0.0, 0.0);
    for i in 0..t {
        for j in 0..t {
            if i == j {
                on += s.at(i, j);
            } else {
                off += s.at(i, j);
            }
        }
    }
    Some(on / t as f64 - off / (t * (t - 1)) as f64)
}

fn sigmoid_values<R: Real>(t: &Tensor<R>) -> Vec<f64> {
    t.data().iter().map(|x| 1.0 / (1.0 + (-x.as_f64()).exp())).collect()
}

pub fn analyze_utterance<R: Real>(model: &Model<R>, u: &Utterance, mode: ModalityMode) -> Result<UtteranceAnalysis> {
    let mut s = model.session(|_| false)?;
    let fwd = model.forward(&mut s, &u.visual, &u.audio, mode)?;
    let (d_inv, d_audio, d_visual) = match model.gan_terms(&mut s, &fwd)? {
        Some(terms) => (
            sigmoid_values(s.value(terms.inv_logits)),
            sigmoid_values(s.value(terms.audio_logits)),
            sigmoid_values(s.value(terms.visual_logits)),
        ),
        None => Default::default(),
    };
    let v_spe: Tensor<f64> = s.value(fwd.f_v_spe).cast();
    let a_spe: Tensor<f64> = s.value(fwd.f_a_spe).cast();
    let inv: Tensor<f64> = s.value(fwd.f_va_inv).cast();
    Ok(UtteranceAnalysis {
        id: u.id.clone(),
        sim_visual: cosine_matrix(&inv, &v_spe),
        sim_audio: cosine_matrix(&inv, &a_spe),
        v_spe,
        a_spe,
        inv,
        d_inv,
        d_audio,
        d_visual,
    })
}

fn stats(kind: &str, values: &[f64]) -> DiscStats {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for v in values {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    DiscStats {
        kind: kind.into(),
        mean,
        std: var.sqrt(),
        histogram,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn summarize(analyses: &[UtteranceAnalysis]) -> DiagnosticsSummary {
    let frames = analyses.iter().map(|a| a.inv.rows()).sum();
    let collect = |f: fn(&UtteranceAnalysis) -> &Vec<f64>| -> Vec<f64> { analyses.iter().flat_map(|a| f(a).iter().copied()).collect() };
    let (d_inv, d_audio, d_visual) = (collect(|a| &a.d_inv), collect(|a| &a.d_audio), collect(|a| &a.d_visual));
    let has_d = !d_inv.is_empty();
    let disc_accuracy = has_d.then(|| {
        let correct = d_audio.iter().filter(|&&p| p > 0.5).count() + d_visual.iter().filter(|&&p| p < 0.5).count();
        correct as f64 / (d_audio.len() + d_visual.len()) as f64
    });
    DiagnosticsSummary {
        utterances: analyses.len(),
        frames,
        diag_score_visual: mean(analyses.iter().filter_map(|a| diag_score(&a.sim_visual))),
        diag_score_audio: mean(analyses.iter().filter_map(|a| diag_score(&a.sim_audio))),
        disc_accuracy,
        inv_deviation: has_d.then(|| mean(d_inv.iter().map(|p| (p - 0.5).abs()))),
        discriminator: if has_d {
            vec![stats("inv", &d_inv), stats("a_spe", &d_audio), stats("v_spe", &d_visual)]
        } else {
            Vec::new()
        },
    }
}

pub fn analyze<R: Real>(model: &Model<R>, utts: &[&Utterance], mode: ModalityMode) -> Result<(Vec<UtteranceAnalysis>, DiagnosticsSummary)> {
    let analyses = utts
        .par_iter()
        .map(|u| analyze_utterance(model, u, mode))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&analyses);
    Ok((analyses, summary))
}

fn matrix_csv(m: &Tensor<f64>) -> String {
    let mut s = String::new();
    let header: Vec<String> = (0..m.cols()).map(|j| format!("j{j}")).collect();
    writeln!(s, "i,{}", header.join(",")).unwrap();
    for i in 0..m.rows() {
        write!(s, "{i}").unwrap();
        for v in m.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `similarity/<utt>_{visual,audio}.csv`, `diag_scores.csv`,
/// `discriminator_stats.csv`, `discriminator_hist.csv`, `embeddings.csv` and
/// `summary.json` into `dir`.
pub fn write_artifacts(dir: &Path, analyses: &[UtteranceAnalysis], summary: &DiagnosticsSummary) -> Result<()> {
    let sim_dir = dir.join("similarity");
    fs::create_dir_all(&sim_dir).map_err(|e| Error::io(&sim_dir, e))?;
    let mut scores = String::from("utt,frames,diag_score_visual,diag_score_audio\n");
    for a in analyses {
        write(&sim_dir.join(format!("{}_visual.csv", a.id)), &matrix_csv(&a.sim_visual))?;
        write(&sim_dir.join(format!("{}_audio.csv", a.id)), &matrix_csv(&a.sim_audio))?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            scores,
            "{},{},{},{}",
            a.id,
            a.inv.rows(),
            fmt(diag_score(&a.sim_visual)),
            fmt(diag_score(&a.sim_audio))
        )
        .unwrap();
    }
    write(&dir.join("diag_scores.csv"), &scores)?;

    let mut st = String::from("type,mean,std\n");
    let mut hist = String::from("type,bin_lo,bin_hi,count\n");
    for d in &summary.discriminator {
        writeln!(st, "{},{},{}", d.kind, d.mean, d.std).unwrap();
        for (b, c) in d.histogram.iter().enumerate() {
            let w = 1.0 / HISTOGRAM_BINS as f64;
            writeln!(hist, "{},{},{},{c}", d.kind, b as f64 * w, (b + 1) as f64 * w).unwrap();
        }
    }
    write(&dir.join("discriminator_stats.csv"), &st)?;
    write(&dir.join("discriminator_hist.csv"), &hist)?;

    let dim = analyses.first().map_or(0, |a| a.inv.cols());
    let mut emb = String::from("type,utt,frame");
    for k in 0..dim {
        write!(emb, ",d_{k}").unwrap();
    }
    emb.push('\n');
    for a in analyses {
        for (kind, t) in [("v_spe", &a.v_spe), ("a_spe", &a.a_spe), ("inv", &a.inv)] {
            for i in 0..t.rows() {
                write!(emb, "{kind},{},{i}", a.id).unwrap();
                for v in t.row(i) {
                    write!(emb, ",{v}").unwrap();
                }
                emb.push('\n');
            }
        }
    }
    write(&dir.join("embeddings.csv"), &emb)?;
    write(&dir.join("summary.json"), &(serde_json::to_string_pretty(summary)? + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AblationMode, ModelConfig};
    use crate::synthdata::{generate_corpus, CorpusSpec};

    #[test]
    fn diag_score_examples() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(diag_score(&eye), Some(1.0));
        let flat = Tensor::full(&[3, 3], 0.4);
        assert!(diag_score(&flat).unwrap().abs() < 1e-15);
        assert_eq!(diag_score(&Tensor::full(&[1, 1], 1.0)), None);
        let c = cosine_matrix(&eye, &eye);
        assert_eq!(c, eye);
    }

    #[test]
    fn untrained_model_artifacts() {
        let corpus = generate_corpus(&CorpusSpec {
            n_utterances: 3,
            ..CorpusSpec::default()
        })
        .unwrap();
        let utts: Vec<&Utterance> = corpus.iter().collect();
        let model = Model::<f32>::new(ModelConfig::default(), AblationMode::Full, 3).unwrap();
        let (analyses, summary) = analyze(&model, &utts, ModalityMode::AV).unwrap();
        assert_eq!(summary.discriminator.len(), 3);
        for d in &summary.discriminator {
            assert_eq!(d.mean, 0.5);
            assert_eq!(d.std, 0.0);
        }
        assert_eq!(summary.inv_deviation, Some(0.0));
        assert!(summary.diag_score_visual.is_finite());

        let dir = tempfile::tempdir().unwrap();
        write_artifacts(dir.path(), &analyses, &summary).unwrap();
        let emb = fs::read_to_string(dir.path().join("embeddings.csv")).unwrap();
        let frames: usize = corpus.iter().map(|u| u.frames()).sum();
        assert_eq!(emb.lines().count(), 1 + 3 * frames);
        assert_eq!(emb.lines().next().unwrap().split(',').count(), 3 + 32);
        assert!(dir.path().join("similarity/utt00000_audio.csv").exists());
        let hist = fs::read_to_string(dir.path().join("discriminator_hist.csv")).unwrap();
        assert_eq!(hist.lines().count(), 1 + 3 * HISTOGRAM_BINS);
    }

    #[test]
    fn no_discriminator_has_no_stats() {
        let corpus = generate_corpus(&CorpusSpec {
            n_utterances: 2,
            ..CorpusSpec::default()
        })
        .unwrap();
        let utts: Vec<&Utterance> = corpus.iter().collect();
        let model = Model::<f32>::new(ModelConfig::default(), AblationMode::NoDiscriminator, 3).unwrap();
        let (_, summary) = analyze(&model, &utts, ModalityMode::AV).unwrap();
        assert!(summary.discriminator.is_empty() && summary.disc_accuracy.is_none());
    }
}
