//! Whole-run helpers shared by the command line and the acceptance suite:
//! train to completion, evaluate the held-out split, aggregate ablations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{AblationMode, ModelConfig};
use crate::recognition::ModalityMode;
use crate::synthdata::Utterance;
use crate::trainer::{derive_seed, evaluate, split_corpus, EvalReport, MetricsRow, TrainConfig, TrainState, Trainer};

const TAG_FINAL_EVAL: u64 = 6;

/// Trains a fresh model for `train.total_steps` steps.
pub fn fit(model: &ModelConfig, train: &TrainConfig, corpus: &[Utterance], on_step: impl FnMut(&MetricsRow) -> Result<()>) -> Result<TrainState> {
    let state = TrainState::new(model, train)?;
    resume(state, train, corpus, on_step)
}

/// Continues `state` to `train.total_steps`.
pub fn resume(state: TrainState, train: &TrainConfig, corpus: &[Utterance], mut on_step: impl FnMut(&MetricsRow) -> Result<()>) -> Result<TrainState> {
    let mut trainer = Trainer::new(train.clone(), corpus, state)?;
    trainer.run(train.total_steps, |_, row| on_step(row))?;
    Ok(trainer.state)
}

/// The whole validation split (the last `val_fraction` of the corpus).
pub fn held_out<'a>(corpus: &'a [Utterance], train: &TrainConfig) -> Result<Vec<&'a Utterance>> {
    let split = split_corpus(corpus.len(), train.val_fraction)?;
    Ok(split.val.iter().map(|&i| &corpus[i]).collect())
}

/// Held-out evaluation with noise fixed by the training seed.
pub fn final_eval(state: &TrainState, train: &TrainConfig, corpus: &[Utterance], mode: ModalityMode) -> Result<EvalReport> {
    let utts = held_out(corpus, train)?;
    evaluate(
        &state.model,
        &utts,
        &train.eval_snr_db,
        mode,
        derive_seed(&[state.seed, TAG_FINAL_EVAL]),
    )
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: AblationMode,
    pub seed: u64,
    pub clean_ter: f64,
    pub noisy_ter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub baseline: bool,
    pub seeds: usize,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub noisy_mean: Option<f64>,
    pub noisy_std: Option<f64>,
}

impl AblationRow {
    pub fn clean_stderr(&self) -> f64 {
        self.clean_std / (self.seeds as f64).sqrt()
    }
}

/// One row per mode present in `cells`, in [`AblationMode::ALL`] order.
pub fn aggregate(cells: &[AblationCell]) -> Vec<AblationRow> {
    AblationMode::ALL
        .iter()
        .filter_map(|&mode| {
            let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.mode == mode).collect();
            if mine.is_empty() {
                return None;
            }
            let clean: Vec<f64> = mine.iter().map(|c| c.clean_ter).collect();
            let noisy: Option<Vec<f64>> = mine.iter().map(|c| c.noisy_ter).collect();
            let (clean_mean, clean_std) = mean_std(&clean);
            let noisy = noisy.map(|n| mean_std(&n));
            Some(AblationRow {
                mode,
                baseline: mode == AblationMode::Full,
                seeds: mine.len(),
                clean_mean,
                clean_std,
                noisy_mean: noisy.map(|n| n.0),
                noisy_std: noisy.map(|n| n.1),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("mode,baseline,seeds,clean_ter_mean,clean_ter_std,noisy_ter_mean,noisy_ter_std\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.mode,
            r.baseline,
            r.seeds,
            r.clean_mean,
            r.clean_std,
            opt(r.noisy_mean),
            opt(r.noisy_std)
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn aggregate_orders_and_flags_baseline() {
        let mut cells = Vec::new();
        for mode in AblationMode::ALL.iter().rev() {
            for seed in 1..=3 {
                cells.push(AblationCell {
                    mode: *mode,
                    seed,
                    clean_ter: seed as f64 / 10.0,
                    noisy_ter: Some(0.5),
                });
            }
        }
        let rows = aggregate(&cells);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows.iter().map(|r| r.mode).collect::<Vec<_>>(), AblationMode::ALL.to_vec());
        assert!(rows[0].baseline && rows.iter().skip(1).all(|r| !r.baseline));
        assert!(rows.iter().all(|r| r.seeds == 3 && (r.clean_mean - 0.2).abs() < 1e-12));
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().nth(1).unwrap().starts_with("full,true,3,"));
    }
}
