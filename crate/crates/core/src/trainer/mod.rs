//! Two-phase adversarial training loop, evaluation and checkpointing.
//!
//! Each step draws one batch, applies the noise gate, then
//! (A) ascends the adversarial objective on discriminator parameters with
//! everything upstream held constant, and
//! (B) runs a fresh forward pass and descends the recognition objective on
//! all other parameters, gradients flowing through the frozen discriminator.
//!
//! Every random draw is a pure function of `(seed, step, utterance)`, so a
//! resumed run replays the uninterrupted one exactly.

pub mod checkpoint;
pub mod eval;
pub mod metrics;
pub mod optim;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mim::MimConfig;
use crate::model::{AblationMode, LossWeights, Model, ModelConfig};
use crate::params::{Group, ParamStore};
use crate::recognition::ModalityMode;
use crate::synthdata::{add_noise, Utterance};

pub use eval::{derive_seed, evaluate, EvalReport, SnrTer, DEFAULT_SNR_LEVELS};
pub use metrics::{MetricsRow, MetricsWriter};
pub use optim::{AdamConfig, AdamState};

const TAG_EPOCH: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_DROPOUT_A: u64 = 3;
const TAG_DROPOUT_B: u64 = 4;
const TAG_EVAL: u64 = 5;

/// Buckets of this many batches are sorted by length before batching.
const BUCKET_BATCHES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_gan: f64,
    pub lambda_mim: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub noise_prob: f64,
    pub train_snr_db: f64,
    pub ablation: AblationMode,
    pub modality: ModalityMode,
    pub val_fraction: f64,
    /// Validation every this many steps (0 = only after the last step).
    pub eval_interval: u64,
    /// Validation subset size during training (0 = whole split).
    pub eval_max_utterances: usize,
    pub eval_snr_db: Vec<f64>,
    /// Checkpoint every this many steps (0 = only after the last step).
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_gan: 0.01,
            lambda_mim: 0.005,
            temperature: 0.1,
            learning_rate: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            batch_size: 8,
            total_steps: 2000,
            seed: 1,
            noise_prob: 0.25,
            train_snr_db: 0.0,
            ablation: AblationMode::Full,
            modality: ModalityMode::AV,
            val_fraction: 0.1,
            eval_interval: 500,
            eval_max_utterances: 100,
            eval_snr_db: DEFAULT_SNR_LEVELS.to_vec(),
            checkpoint_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("train: {msg}")));
        if !(self.lambda_gan >= 0.0 && self.lambda_mim >= 0.0) {
            return bad("lambda_gan and lambda_mim must be >= 0".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return bad(format!("noise_prob must be in [0, 1], got {}", self.noise_prob));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps > 0".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0".into());
        }
        if self.eval_snr_db.iter().any(|s| s.is_nan()) || !self.train_snr_db.is_finite() {
            return bad("SNR levels must be numbers".into());
        }
        self.mim().validate()
    }

    pub fn mim(&self) -> MimConfig {
        MimConfig {
            temperature: self.temperature,
        }
    }

    /// Loss weights after the ablation's overrides.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_gan: if self.ablation.uses_gan() { self.lambda_gan } else { 0.0 },
            lambda_mim: if self.ablation.uses_mim() { self.lambda_mim } else { 0.0 },
            mim: self.mim(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    pub val_ter_clean: f64,
}

/// Everything a resumed run needs. Randomness is derived from `seed` and
/// `step`, so no generator state is stored separately.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let model = Model::new(model.clone(), train.ablation, train.seed)?;
        let values: Vec<&Tensor<f32>> = model.store.iter().map(|p| &p.value).collect();
        let adam = AdamState::zeros_like(&values);
        Ok(Self {
            step: 0,
            seed: train.seed,
            model,
            adam,
            best: None,
        })
    }
}

/// Train/validation partition: the last `val_fraction` of the corpus is
/// held out, independent of the training seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn split_corpus(n: usize, val_fraction: f64) -> Result<Split> {
    let mut n_val = (n as f64 * val_fraction).ceil() as usize;
    if n_val >= n {
        n_val = n.saturating_sub(1);
    }
    if n == 0 {
        return Err(Error::Input("empty corpus".into()));
    }
    let cut = n - n_val;
    Ok(Split {
        train: (0..cut).collect(),
        val: (cut..n).collect(),
    })
}

/// Parallelism cap from `MIRGAN_THREADS`, else the machine's core count.
pub fn worker_threads() -> usize {
    std::env::var("MIRGAN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Points at which an audit hook observes the parameters within one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Start,
    AfterDiscriminator,
    AfterRest,
}

struct PhaseAOut {
    grads: Vec<Vec<f32>>,
    loss: f64,
    sum_inv: f64,
    sum_audio: f64,
    sum_visual: f64,
}

struct PhaseBOut {
    grads: Vec<Vec<f32>>,
    total: f64,
    rec: f64,
    gan_g: Option<f64>,
    mim: Option<f64>,
}

fn sigmoid_sum(logits: &Tensor<f32>) -> f64 {
    logits
        .data()
        .iter()
        .map(|&x| 1.0 / (1.0 + (-(x as f64)).exp()))
        .sum()
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub split: Split,
    pub state: TrainState,
    corpus: &'a [Utterance],
    pool: rayon::ThreadPool,
    plan: Option<(u64, Vec<Vec<usize>>)>,
    d_ids: Vec<usize>,
    rest_ids: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, corpus: &'a [Utterance], state: TrainState) -> Result<Self> {
        config.validate()?;
        let first = corpus.first().ok_or_else(|| Error::Input("empty corpus".into()))?;
        let max_label = corpus.iter().flat_map(|u| u.labels.iter()).max().copied().unwrap_or(0);
        state
            .model
            .check_compatible(first.visual.cols(), first.audio.cols(), max_label + 1)?;
        if state.model.ablation != config.ablation {
            return Err(Error::Checkpoint(format!(
                "ablation: state has {}, config has {}",
                state.model.ablation, config.ablation
            )));
        }
        let split = split_corpus(corpus.len(), config.val_fraction)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        let (d_ids, rest_ids) = (0..state.model.store.len()).partition(|&i| state.model.store.get_index(i).group == Group::Discriminator);
        Ok(Self {
            config,
            split,
            state,
            corpus,
            pool,
            plan: None,
            d_ids,
            rest_ids,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.split.train.len().div_ceil(self.config.batch_size) as u64
    }

    /// Batch (corpus indices) for 0-based `step`. Each epoch shuffles the
    /// training split, sorts buckets by length, and shuffles the batches.
    pub fn batch_for_step(&mut self, step: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let epoch = step / per_epoch;
        if self.plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.state.seed, TAG_EPOCH, epoch]));
            let mut order = self.split.train.clone();
            order.shuffle(&mut rng);
            let corpus = self.corpus;
            for bucket in order.chunks_mut(self.config.batch_size * BUCKET_BATCHES) {
                bucket.sort_by_key(|&i| corpus[i].frames());
            }
            let mut batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
            batches.shuffle(&mut rng);
            self.plan = Some((epoch, batches));
        }
        self.plan.as_ref().unwrap().1[(step % per_epoch) as usize].clone()
    }

    pub fn val_utterances(&self, limit: usize) -> Vec<&'a Utterance> {
        let n = if limit == 0 { self.split.val.len() } else { limit.min(self.split.val.len()) };
        self.split.val[..n].iter().map(|&i| &self.corpus[i]).collect()
    }

    pub fn validate_now(&self) -> Result<EvalReport> {
        let utts = self.val_utterances(self.config.eval_max_utterances);
        let seed = derive_seed(&[self.state.seed, TAG_EVAL]);
        self.pool.install(|| {
            evaluate(
                &self.state.model,
                &utts,
                &self.config.eval_snr_db,
                self.config.modality,
                seed,
            )
        })
    }

    pub fn train_step(&mut self) -> Result<MetricsRow> {
        self.train_step_audited(&mut |_, _| {})
    }

    /// One optimisation step; `hook` sees the parameters at the start, after
    /// the discriminator update and after the update of everything else.
    pub fn train_step_audited(&mut self, hook: &mut dyn FnMut(Phase, &ParamStore<f32>)) -> Result<MetricsRow> {
        let step = self.state.step;
        let t = step + 1;
        let batch = self.batch_for_step(step);
        let seed = self.state.seed;
        let cfg = self.config.clone();
        let utts: Vec<&Utterance> = batch.iter().map(|&i| &self.corpus[i]).collect();
        let frames: usize = utts.iter().map(|u| u.frames()).sum();
        let audio = utts
            .iter()
            .zip(&batch)
            .map(|(u, &idx)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, TAG_NOISE, step, idx as u64]));
                if cfg.noise_prob > 0.0 && rng.gen_bool(cfg.noise_prob) {
                    add_noise(&u.audio, cfg.train_snr_db, &mut rng)
                } else {
                    Ok(u.audio.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = optim::learning_rate(step, cfg.learning_rate, cfg.warmup_steps, cfg.total_steps);
        let adam = cfg.adam();
        let weights = cfg.weights();
        let dropout = self.state.model.config.dropout;
        let mut row = MetricsRow {
            step: t,
            ..MetricsRow::default()
        };
        let lens: Vec<usize> = self.state.model.store.iter().map(|p| p.value.len()).collect();
        let lens = &lens;
        let mut components = BTreeMap::new();
        hook(Phase::Start, &self.state.model.store);

        if self.state.model.ablation.runs_phase_a() {
            let model = &self.state.model;
            let d_ids = &self.d_ids;
            let outs = self.pool.install(|| {
                utts.par_iter()
                    .zip(audio.par_iter())
                    .zip(batch.par_iter())
                    .map(|((u, a), &idx)| {
                        let mut s = model
                            .session(|g| g == Group::Discriminator)?
                            .with_dropout(dropout, derive_seed(&[seed, TAG_DROPOUT_A, step, idx as u64]));
                        let fwd = model.forward(&mut s, &u.visual, a, cfg.modality)?;
                        let terms = model
                            .gan_terms(&mut s, &fwd)?
                            .ok_or_else(|| Error::Usage("phase A without a discriminator".into()))?;
                        let gan = s.tape.add(terms.modality, terms.invariant)?;
                        let w = u.frames() as f64 / frames as f64;
                        let loss = s.tape.scale(gan, -w)?;
                        let g = s.tape.backward(loss)?;
                        let vars = s.param_vars();
                        Ok(PhaseAOut {
                            grads: d_ids
                                .iter()
                                .map(|&i| g.get_or_zeros(vars[i], lens[i]))
                                .collect(),
                            loss: s.scalar(loss),
                            sum_inv: sigmoid_sum(s.value(terms.inv_logits)),
                            sum_audio: sigmoid_sum(s.value(terms.audio_logits)),
                            sum_visual: sigmoid_sum(s.value(terms.visual_logits)),
                        })
                    })
                    .collect::<Vec<Result<PhaseAOut>>>()
            });
            let outs = collect_or_diverge(outs, t, "A", &components)?;
            let mut grads = sum_grads(outs.iter().map(|o| &o.grads));
            let l_d: f64 = outs.iter().map(|o| o.loss).sum();
            let f = frames as f64;
            row.l_d = Some(l_d);
            row.mean_d_on_inv = Some(outs.iter().map(|o| o.sum_inv).sum::<f64>() / f);
            row.mean_d_on_audio = Some(outs.iter().map(|o| o.sum_audio).sum::<f64>() / f);
            row.mean_d_on_visual = Some(outs.iter().map(|o| o.sum_visual).sum::<f64>() / f);
            let norm = optim::clip_global_norm(&mut grads, cfg.grad_clip);
            row.grad_norm_d = Some(norm);
            components.insert("L_D", l_d);
            components.insert("grad_norm_D", norm);
            if !l_d.is_finite() || !norm.is_finite() {
                return Err(divergence(t, "A", "loss or gradient", &components));
            }
            self.apply(&self.d_ids.clone(), &grads, lr, t, &adam);
        }
        hook(Phase::AfterDiscriminator, &self.state.model.store);

        let model = &self.state.model;
        let rest_ids = &self.rest_ids;
        let n_utts = utts.len() as f64;
        let outs = self.pool.install(|| {
            utts.par_iter()
                .zip(audio.par_iter())
                .zip(batch.par_iter())
                .map(|((u, a), &idx)| {
                    let mut s = model
                        .session(|g| g != Group::Discriminator)?
                        .with_dropout(dropout, derive_seed(&[seed, TAG_DROPOUT_B, step, idx as u64]));
                    let fwd = model.forward(&mut s, &u.visual, a, cfg.modality)?;
                    let w = u.frames() as f64 / frames as f64;
                    let pb = model.phase_b(&mut s, &fwd, &u.labels, w, 1.0 / n_utts, &weights)?;
                    let g = s.tape.backward(pb.total)?;
                    let vars = s.param_vars();
                    Ok(PhaseBOut {
                        grads: rest_ids
                            .iter()
                            .map(|&i| g.get_or_zeros(vars[i], lens[i]))
                            .collect(),
                        total: s.scalar(pb.total),
                        rec: s.scalar(pb.rec),
                        gan_g: pb.gan_g.map(|v| s.scalar(v)),
                        mim: pb.mim.map(|v| s.scalar(v)),
                    })
                })
                .collect::<Vec<Result<PhaseBOut>>>()
        });
        let outs = collect_or_diverge(outs, t, "B", &components)?;
        let mut grads = sum_grads(outs.iter().map(|o| &o.grads));
        row.l_rec = outs.iter().map(|o| o.rec).sum();
        row.total_phase_b = outs.iter().map(|o| o.total).sum();
        row.l_g = outs.iter().map(|o| o.gan_g).sum();
        row.l_mim = outs.iter().map(|o| o.mim).sum();
        let norm = optim::clip_global_norm(&mut grads, cfg.grad_clip);
        row.grad_norm_rest = norm;
        components.insert("L_rec", row.l_rec);
        components.insert("total_phaseB", row.total_phase_b);
        if let Some(v) = row.l_g {
            components.insert("L_G", v);
        }
        if let Some(v) = row.l_mim {
            components.insert("L_MIM", v);
        }
        components.insert("grad_norm_rest", norm);
        if components.values().any(|v| !v.is_finite()) {
            return Err(divergence(t, "B", "loss or gradient", &components));
        }
        self.apply(&self.rest_ids.clone(), &grads, lr, t, &adam);
        hook(Phase::AfterRest, &self.state.model.store);
        self.state.step = t;
        Ok(row)
    }

    fn apply(&mut self, ids: &[usize], grads: &[Vec<f32>], lr: f64, t: u64, adam: &AdamConfig) {
        let mut params: Vec<&mut Tensor<f32>> = self.state.model.store.iter_mut().map(|p| &mut p.value).collect();
        for (k, &i) in ids.iter().enumerate() {
            self.state.adam.update(i, params[i], &grads[k], lr, t, adam);
        }
    }

    /// Runs until `state.step == last_step`, validating every
    /// `eval_interval` steps and after the final one. `on_step` receives each
    /// finished row (with validation columns filled on evaluation steps).
    pub fn run(&mut self, last_step: u64, mut on_step: impl FnMut(&Self, &MetricsRow) -> Result<()>) -> Result<()> {
        while self.state.step < last_step {
            let mut row = self.train_step()?;
            let step = self.state.step;
            let due = (self.config.eval_interval > 0 && step % self.config.eval_interval == 0) || step == self.config.total_steps;
            if due && !self.split.val.is_empty() {
                let report = self.validate_now()?;
                row.val_ter_clean = Some(report.clean_ter);
                row.val_ter_noisy = report.noisy_ter;
                if self.state.best.map_or(true, |b| report.clean_ter < b.val_ter_clean) {
                    self.state.best = Some(BestRecord {
                        step,
                        val_ter_clean: report.clean_ter,
                    });
                }
            }
            on_step(self, &row)?;
        }
        Ok(())
    }

    pub fn checkpoint_due(&self) -> bool {
        let step = self.state.step;
        (self.config.checkpoint_interval > 0 && step % self.config.checkpoint_interval == 0) || step == self.config.total_steps
    }
}

fn sum_grads<'g>(mut parts: impl Iterator<Item = &'g Vec<Vec<f32>>>) -> Vec<Vec<f32>> {
    let mut acc = parts.next().cloned().unwrap_or_default();
    for p in parts {
        for (a, g) in acc.iter_mut().zip(p) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += *y;
            }
        }
    }
    acc
}

fn divergence(step: u64, phase: &str, op: &str, components: &BTreeMap<&str, f64>) -> Error {
    let mut dump = serde_json::Map::new();
    dump.insert("phase".into(), phase.into());
    dump.insert("op".into(), op.into());
    for (k, v) in components {
        // non-finite numbers are not valid JSON; keep them readable as strings
        let val = serde_json::Number::from_f64(*v).map_or_else(|| v.to_string().into(), serde_json::Value::Number);
        dump.insert((*k).into(), val);
    }
    Error::Divergence {
        step,
        components: serde_json::Value::Object(dump).to_string(),
    }
}

fn collect_or_diverge<T>(outs: Vec<Result<T>>, step: u64, phase: &str, components: &BTreeMap<&str, f64>) -> Result<Vec<T>> {
    outs.into_iter()
        .map(|r| {
            r.map_err(|e| match e {
                Error::NonFinite { op } => divergence(step, phase, op, components),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
