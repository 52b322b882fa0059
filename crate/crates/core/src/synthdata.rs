//! Synthetic paired-modality corpus, additive noise at a target SNR, and the
//! on-disk corpus container.
//!
//! Every utterance is a sequence of symbols drawn uniformly from `[0, C)`.
//! Each symbol owns a fixed latent embedding; a frame of modality `m` is
//! `W_m · embed(z_t) + ε_m` with a corpus-wide random linear map `W_m` and
//! Gaussian noise of modality-specific strength.
//!
//! Container layout: `manifest.json` plus one `<id>.bin` blob per utterance:
//! `"MIRU"`, version `u32`, `T u32`, `D_v u32`, `D_a u32`, visual then audio
//! as row-major `f32`, then `T` label ids as `u32`; all little-endian.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"MIRU";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_utterances: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub num_classes: usize,
    pub d_visual_raw: usize,
    pub d_audio_raw: usize,
    pub latent_dim: usize,
    /// Standard deviation scale of the modality mixing matrices.
    pub mixing_scale: f64,
    pub visual_noise_std: f64,
    pub audio_noise_std: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_utterances: 2000,
            t_min: 8,
            t_max: 16,
            num_classes: 16,
            d_visual_raw: 24,
            d_audio_raw: 26,
            latent_dim: 32,
            mixing_scale: 1.0,
            visual_noise_std: 2.0,
            audio_noise_std: 1.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("corpus: {msg}")));
        if self.t_min < 2 || self.t_max < self.t_min {
            return bad(format!("need 2 <= t_min <= t_max, got {}..{}", self.t_min, self.t_max));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.d_visual_raw == 0 || self.d_audio_raw == 0 || self.latent_dim == 0 {
            return bad("dimensions must be >= 1".into());
        }
        if self.n_utterances == 0 {
            return bad("n_utterances must be >= 1".into());
        }
        if !(self.visual_noise_std >= 0.0 && self.audio_noise_std >= 0.0 && self.mixing_scale > 0.0) {
            return bad("noise std must be >= 0 and mixing scale > 0".into());
        }
        Ok(())
    }
}

/// One paired sample. Features are stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub visual: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub labels: Vec<usize>,
    pub snr_db: Option<f64>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let t = self.labels.len();
        if self.visual.rows() != t || self.audio.rows() != t {
            return Err(Error::Input(format!(
                "utterance {}: visual {} / audio {} / labels {} frames",
                self.id,
                self.visual.rows(),
                self.audio.rows(),
                t
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("utterance {}: label {l} >= {num_classes}", self.id)));
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            std * n
        })
        .collect()
}

/// `W · e` for a row-major `rows × cols` matrix.
fn mat_vec<'a>(w: &'a [f64], cols: usize, e: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    w.chunks(cols).map(move |row| row.iter().zip(e).map(|(a, b)| a * b).sum())
}

/// Deterministic corpus; a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent = spec.latent_dim;
    let embeddings = gaussian_matrix(&mut rng, spec.num_classes, latent, 1.0);
    let mix_std = spec.mixing_scale / (latent as f64).sqrt();
    let w_v = gaussian_matrix(&mut rng, spec.d_visual_raw, latent, mix_std);
    let w_a = gaussian_matrix(&mut rng, spec.d_audio_raw, latent, mix_std);

    let corpus = (0..spec.n_utterances)
        .into_par_iter()
        .map(|i| {
            // independent stream per utterance
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let t = rng.gen_range(spec.t_min..=spec.t_max);
            let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..spec.num_classes)).collect();
            let mut visual = Vec::with_capacity(t * spec.d_visual_raw);
            let mut audio = Vec::with_capacity(t * spec.d_audio_raw);
            for &z in &labels {
                let e = &embeddings[z * latent..(z + 1) * latent];
                for x in mat_vec(&w_v, latent, e).collect::<Vec<_>>() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    visual.push((x + spec.visual_noise_std * n) as f32);
                }
                for x in mat_vec(&w_a, latent, e).collect::<Vec<_>>() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    audio.push((x + spec.audio_noise_std * n) as f32);
                }
            }
            Ok(Utterance {
                id: format!("utt{i:05}"),
                visual: Tensor::matrix(t, spec.d_visual_raw, visual)?,
                audio: Tensor::matrix(t, spec.d_audio_raw, audio)?,
                labels,
                snr_db: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(corpus)
}

/// Mean of squares.
pub fn power<R: Real>(x: &[R]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / x.len() as f64
}

/// Adds Gaussian noise scaled so that `power(signal) / power(noise)` equals
/// `10^(snr_db / 10)`. `snr_db = +∞` returns the input unchanged, as does an
/// all-zero signal (logged). The caller decides whether to apply noise at all.
pub fn add_noise<R: Real>(audio: &Tensor<R>, snr_db: f64, rng: &mut impl Rng) -> Result<Tensor<R>> {
    if audio.is_empty() {
        return Err(Error::Input("add_noise on empty audio".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(audio.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::Input(format!("invalid snr {snr_db}")));
    }
    let signal = power(audio.data());
    if signal == 0.0 {
        log::warn!("add_noise: all-zero audio, no noise added");
        return Ok(audio.clone());
    }
    let noise: Vec<f64> = (0..audio.len()).map(|_| StandardNormal.sample(rng)).collect();
    let raw = noise.iter().map(|n| n * n).sum::<f64>() / noise.len() as f64;
    let target = signal / 10f64.powf(snr_db / 10.0);
    let scale = (target / raw).sqrt();
    let data = audio
        .data()
        .iter()
        .zip(&noise)
        .map(|(&x, &n)| R::from_f64(x.as_f64() + scale * n))
        .collect();
    Tensor::new(audio.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: CorpusSpec,
    pub d_visual_raw: usize,
    pub d_audio_raw: usize,
    pub num_classes: usize,
    pub total_frames: usize,
    pub utterances: Vec<ManifestEntry>,
}

fn blob_name(id: &str) -> String {
    format!("{id}.bin")
}

pub fn encode_blob(u: &Utterance) -> Vec<u8> {
    let t = u.frames();
    let mut out = Vec::with_capacity(20 + 4 * (u.visual.len() + u.audio.len() + t));
    out.extend_from_slice(BLOB_MAGIC);
    for v in [FORMAT_VERSION, t as u32, u.visual.cols() as u32, u.audio.cols() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &x in u.visual.data().iter().chain(u.audio.data()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &l in &u.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                section: format!("{}: {section}", self.origin),
                offset: self.pos as u64,
                detail: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, section: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, section)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn err(&self, section: &str, offset: usize, detail: String) -> Error {
        Error::Format {
            section: format!("{}: {section}", self.origin),
            offset: offset as u64,
            detail,
        }
    }
}

pub fn decode_blob(id: &str, bytes: &[u8]) -> Result<Utterance> {
    let mut r = Reader { bytes, pos: 0, origin: id };
    let magic = r.take(4, "magic")?;
    if magic != BLOB_MAGIC {
        return Err(r.err("magic", 0, format!("expected {BLOB_MAGIC:?}, found {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.err("version", 4, format!("unsupported version {version}")));
    }
    let t = r.u32("header")? as usize;
    let dv = r.u32("header")? as usize;
    let da = r.u32("header")? as usize;
    if t == 0 || dv == 0 || da == 0 {
        return Err(r.err("header", 8, format!("zero dimension: T={t} D_v={dv} D_a={da}")));
    }
    let visual = Tensor::matrix(t, dv, r.f32s(t * dv, "visual")?)?;
    let audio = Tensor::matrix(t, da, r.f32s(t * da, "audio")?)?;
    let mut labels = Vec::with_capacity(t);
    for _ in 0..t {
        labels.push(r.u32("labels")? as usize);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing", r.pos, format!("{} unexpected bytes", bytes.len() - r.pos)));
    }
    Ok(Utterance {
        id: id.to_string(),
        visual,
        audio,
        labels,
        snr_db: None,
    })
}

/// Writes the container into `dir` (created if missing).
pub fn save_corpus(corpus: &[Utterance], spec: &CorpusSpec, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = corpus
        .first()
        .ok_or_else(|| Error::Input("cannot save an empty corpus".into()))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        spec: spec.clone(),
        d_visual_raw: first.visual.cols(),
        d_audio_raw: first.audio.cols(),
        num_classes: spec.num_classes,
        total_frames: corpus.iter().map(Utterance::frames).sum(),
        utterances: corpus
            .iter()
            .map(|u| ManifestEntry {
                id: u.id.clone(),
                frames: u.frames(),
                snr_db: u.snr_db,
            })
            .collect(),
    };
    for u in corpus {
        let path = dir.join(blob_name(&u.id));
        fs::write(&path, encode_blob(u)).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        section: MANIFEST_FILE.into(),
        offset: 0,
        detail: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format {
            section: MANIFEST_FILE.into(),
            offset: 0,
            detail: format!("unsupported version {}", manifest.version),
        });
    }
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<(Manifest, Vec<Utterance>)> {
    let manifest = load_manifest(dir)?;
    let blobs = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
        .count();
    if blobs != manifest.utterances.len() {
        return Err(Error::Format {
            section: MANIFEST_FILE.into(),
            offset: 0,
            detail: format!(
                "manifest lists {} utterances but the directory holds {blobs} blobs",
                manifest.utterances.len()
            ),
        });
    }
    let mut corpus = Vec::with_capacity(blobs);
    for entry in &manifest.utterances {
        let path = dir.join(blob_name(&entry.id));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut u = decode_blob(&entry.id, &bytes)?;
        if u.frames() != entry.frames || u.visual.cols() != manifest.d_visual_raw || u.audio.cols() != manifest.d_audio_raw {
            return Err(Error::Format {
                section: blob_name(&entry.id),
                offset: 8,
                detail: "blob header disagrees with manifest".into(),
            });
        }
        u.validate(manifest.num_classes)?;
        u.snr_db = entry.snr_db;
        corpus.push(u);
    }
    Ok((manifest, corpus))
}
