//! Per-step metrics rows and their CSV encoding.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 13] = [
    "step",
    "L_rec",
    "L_D",
    "L_G",
    "L_MIM",
    "total_phaseB",
    "mean_D_on_inv",
    "mean_D_on_audio",
    "mean_D_on_visual",
    "grad_norm_D",
    "grad_norm_rest",
    "val_TER_clean",
    "val_TER_noisy",
];

/// One row per optimisation step. `None` renders as an empty field: columns
/// of disabled terms, and validation columns outside evaluation steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub l_rec: f64,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    pub l_mim: Option<f64>,
    pub total_phase_b: f64,
    pub mean_d_on_inv: Option<f64>,
    pub mean_d_on_audio: Option<f64>,
    pub mean_d_on_visual: Option<f64>,
    pub grad_norm_d: Option<f64>,
    pub grad_norm_rest: f64,
    pub val_ter_clean: Option<f64>,
    pub val_ter_noisy: Option<f64>,
}

fn push(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        // `-0` reads oddly in a spreadsheet
        let v = if v == 0.0 { 0.0 } else { v };
        write!(out, "{v}").unwrap();
    }
}

impl MetricsRow {
    pub fn header() -> String {
        COLUMNS.join(",")
    }

    /// Shortest round-trip decimal formatting; locale independent.
    pub fn to_csv(&self) -> String {
        let mut s = self.step.to_string();
        for v in [
            Some(self.l_rec),
            self.l_d,
            self.l_g,
            self.l_mim,
            Some(self.total_phase_b),
            self.mean_d_on_inv,
            self.mean_d_on_audio,
            self.mean_d_on_visual,
            self.grad_norm_d,
            Some(self.grad_norm_rest),
            self.val_ter_clean,
            self.val_ter_noisy,
        ] {
            push(&mut s, v);
        }
        s
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != COLUMNS.len() {
            return Err(Error::Input(format!("metrics row has {} fields, want {}", f.len(), COLUMNS.len())));
        }
        let opt = |i: usize| -> Result<Option<f64>> {
            if f[i].is_empty() {
                return Ok(None);
            }
            f[i].parse()
                .map(Some)
                .map_err(|_| Error::Input(format!("metrics column {}: bad number `{}`", COLUMNS[i], f[i])))
        };
        let req = |i: usize| -> Result<f64> {
            opt(i)?.ok_or_else(|| Error::Input(format!("metrics column {} is empty", COLUMNS[i])))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::Input(format!("bad step `{}`", f[0])))?,
            l_rec: req(1)?,
            l_d: opt(2)?,
            l_g: opt(3)?,
            l_mim: opt(4)?,
            total_phase_b: req(5)?,
            mean_d_on_inv: opt(6)?,
            mean_d_on_audio: opt(7)?,
            mean_d_on_visual: opt(8)?,
            grad_norm_d: opt(9)?,
            grad_norm_rest: req(10)?,
            val_ter_clean: opt(11)?,
            val_ter_noisy: opt(12)?,
        })
    }
}

/// Append-only CSV sink. Opening an existing file keeps rows up to
/// `keep_through` (for resumed runs) and drops anything later.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", MetricsRow::header()).map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn resume(path: &Path, keep_through: u64) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let kept: Vec<String> = {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut lines = BufReader::new(f).lines();
            let header = lines.next().transpose().map_err(|e| Error::io(path, e))?;
            if header.as_deref() != Some(MetricsRow::header().as_str()) {
                return Err(Error::Input(format!("{}: unexpected metrics header", path.display())));
            }
            let mut kept = Vec::new();
            for line in lines {
                let line = line.map_err(|e| Error::io(path, e))?;
                if MetricsRow::from_csv(&line)?.step <= keep_through {
                    kept.push(line);
                }
            }
            kept
        };
        let mut w = Self::create(path)?;
        for line in kept {
            writeln!(w.file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(w)
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv()).map_err(|e| Error::io("metrics.csv", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).map(MetricsRow::from_csv).collect()
}
