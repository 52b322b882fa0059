use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mirgan_core::diagnostics;
use mirgan_core::experiment::{self, AblationCell};
use mirgan_core::gradsuite::{self, Scope};
use mirgan_core::synthdata::{self, Manifest, Utterance, MANIFEST_FILE};
use mirgan_core::trainer::{checkpoint, derive_seed, evaluate, split_corpus, MetricsWriter, TrainConfig, TrainState, Trainer};
use mirgan_core::{Error, ModalityMode, Result, RunConfig};
use serde::Serialize;

use crate::{AblateArgs, Cli, Command, DiagnoseArgs, EvalArgs, TrainArgs};

const TAG_CLI_EVAL: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Val,
    Train,
    All,
}

pub fn run(cli: &Cli) -> Result<u8> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    match &cli.command {
        Command::GenData { utterances } => gen_data(cli, cfg, *utterances),
        Command::Train(a) => train(cli, cfg, a),
        Command::Eval(a) => eval(cli, cfg, a),
        Command::Gradcheck { scope, inject_fault } => gradcheck(cli, scope, inject_fault.as_deref()),
        Command::Diagnose(a) => diagnose(cli, cfg, a),
        Command::Ablate(a) => ablate(cli, cfg, a),
    }
}

fn required(flag: Option<&PathBuf>, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or(from_config.as_ref())
        .cloned()
        .ok_or_else(|| Error::Usage(format!("no {what} given (flag or paths.{what} in the config)")))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Refuses a non-empty directory unless `--force`; creates it otherwise.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir).map_err(io(dir))?.next().is_some();
    if occupied && !force {
        return Err(Error::Usage(format!(
            "refusing to write into non-empty {} (use --force)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<String> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, &text).map_err(io(path))?;
    Ok(text)
}

fn gen_data(cli: &Cli, mut cfg: RunConfig, utterances: Option<usize>) -> Result<u8> {
    if let Some(s) = cli.seed {
        cfg.corpus.seed = s;
    }
    if let Some(n) = utterances {
        cfg.corpus.n_utterances = n;
    }
    cfg.corpus.validate()?;
    let out = required(cli.out.as_ref(), &cfg.paths.corpus, "corpus")?;
    prepare_out(&out, cli.force)?;
    // stale blobs from an earlier corpus would break the manifest/blob count
    for entry in fs::read_dir(&out).map_err(io(&out))? {
        let path = entry.map_err(io(&out))?.path();
        let stale = path.extension().is_some_and(|x| x == "bin") || path.file_name().is_some_and(|n| n == MANIFEST_FILE);
        if stale {
            fs::remove_file(&path).map_err(io(&path))?;
        }
    }
    let corpus = synthdata::generate_corpus(&cfg.corpus)?;
    let manifest = synthdata::save_corpus(&corpus, &cfg.corpus, &out)?;
    println!(
        "{}",
        serde_json::json!({
            "dir": out,
            "utterances": manifest.utterances.len(),
            "total_frames": manifest.total_frames,
        })
    );
    Ok(0)
}

fn load_corpus(flag: Option<&PathBuf>, cfg: &RunConfig) -> Result<(Manifest, Vec<Utterance>)> {
    let dir = required(flag, &cfg.paths.corpus, "corpus")?;
    let (manifest, corpus) = synthdata::load_corpus(&dir)?;
    log::info!("loaded {} utterances ({} frames) from {}", corpus.len(), manifest.total_frames, dir.display());
    Ok((manifest, corpus))
}

fn train(cli: &Cli, mut cfg: RunConfig, a: &TrainArgs) -> Result<u8> {
    let out = required(cli.out.as_ref(), &cfg.paths.out, "out")?;
    let (_, corpus) = load_corpus(a.corpus.as_ref(), &cfg)?;
    let (state, train) = match &a.resume {
        Some(ckpt) => {
            if cli.seed.is_some() || a.steps.is_some() || a.ablation.is_some() || a.modality.is_some() {
                return Err(Error::Usage("a resumed run uses the checkpoint's configuration; drop --seed/--steps/--ablation/--modality".into()));
            }
            let (state, train) = checkpoint::load(ckpt)?;
            fs::create_dir_all(&out).map_err(io(&out))?;
            (state, train)
        }
        None => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if let Some(n) = a.steps {
                cfg.train.total_steps = n;
            }
            if let Some(m) = a.ablation {
                cfg.train.ablation = m;
            }
            if let Some(m) = a.modality {
                cfg.train.modality = m;
            }
            cfg.model.validate()?;
            cfg.train.validate()?;
            let state = TrainState::new(&cfg.model, &cfg.train)?;
            Trainer::new(cfg.train.clone(), &corpus, state.clone())?;
            prepare_out(&out, cli.force)?;
            write_json(&out.join("config.json"), &cfg)?;
            (state, cfg.train.clone())
        }
    };

    let metrics_path = out.join("metrics.csv");
    let mut metrics = if a.resume.is_some() {
        MetricsWriter::resume(&metrics_path, state.step)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    let mut trainer = Trainer::new(train.clone(), &corpus, state)?;
    let total = train.total_steps;
    let result = trainer.run(total, |t, row| {
        metrics.write(row)?;
        if let Some(clean) = row.val_ter_clean {
            log::info!(
                "step {}/{total}: L_rec {:.4}, val TER clean {clean:.4}, noisy {}",
                row.step,
                row.l_rec,
                row.val_ter_noisy.map_or("-".into(), |n| format!("{n:.4}"))
            );
        }
        if t.checkpoint_due() {
            let path = out.join(format!("ckpt_{:06}.mirc", row.step));
            checkpoint::save(&path, &t.state, &train)?;
            checkpoint::save(&out.join("latest.mirc"), &t.state, &train)?;
        }
        Ok(())
    });
    match result {
        Ok(()) => {
            let summary = serde_json::json!({
                "steps": trainer.state.step,
                "best": trainer.state.best,
                "checkpoint": out.join("latest.mirc"),
            });
            println!("{summary}");
            Ok(0)
        }
        Err(Error::Divergence { step, components }) => {
            let detail: serde_json::Value = serde_json::from_str(&components).unwrap_or(serde_json::Value::String(components));
            let dump = serde_json::json!({ "step": step, "divergence": detail });
            write_json(&out.join("divergence.json"), &dump)?;
            eprintln!("{dump}");
            Ok(3)
        }
        Err(e) => Err(e),
    }
}

fn parse_snr(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Usage(format!("bad SNR level `{s}`"))))
        .collect()
}

fn select<'a>(corpus: &'a [Utterance], train: &TrainConfig, which: SplitChoice) -> Result<Vec<&'a Utterance>> {
    let split = split_corpus(corpus.len(), train.val_fraction)?;
    let idx = match which {
        SplitChoice::Val => split.val,
        SplitChoice::Train => split.train,
        SplitChoice::All => (0..corpus.len()).collect(),
    };
    Ok(idx.into_iter().map(|i| &corpus[i]).collect())
}

/// Loads a checkpoint and the corpus and checks they fit together.
fn checkpoint_and_corpus(ckpt: Option<&PathBuf>, corpus: Option<&PathBuf>, cfg: &RunConfig) -> Result<(PathBuf, TrainState, TrainConfig, Vec<Utterance>)> {
    let path = required(ckpt, &cfg.paths.checkpoint, "checkpoint")?;
    let (state, train) = checkpoint::load(&path)?;
    let (manifest, corpus) = load_corpus(corpus, cfg)?;
    state
        .model
        .check_compatible(manifest.d_visual_raw, manifest.d_audio_raw, manifest.num_classes)?;
    Ok((path, state, train, corpus))
}

fn default_out(cli: &Cli, cfg: &RunConfig, ckpt: &Path) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf))
}

fn eval(cli: &Cli, cfg: RunConfig, a: &EvalArgs) -> Result<u8> {
    let (path, state, train, corpus) = checkpoint_and_corpus(a.checkpoint.as_ref(), a.corpus.as_ref(), &cfg)?;
    let snr = match &a.snr {
        Some(s) => parse_snr(s)?,
        None => train.eval_snr_db.clone(),
    };
    let utts = select(&corpus, &train, a.split)?;
    let seed = derive_seed(&[cli.seed.unwrap_or(state.seed), TAG_CLI_EVAL]);
    let report = evaluate(&state.model, &utts, &snr, a.modality, seed)?;
    let out = default_out(cli, &cfg, &path);
    fs::create_dir_all(&out).map_err(io(&out))?;
    let text = write_json(&out.join(format!("eval_{}.json", a.modality)), &report)?;
    print!("{text}");
    Ok(0)
}

fn gradcheck(cli: &Cli, scopes: &[String], fault: Option<&str>) -> Result<u8> {
    let scopes: Vec<Scope> = if scopes.is_empty() {
        Scope::ALL.to_vec()
    } else {
        scopes
            .iter()
            .flat_map(|s| s.split(','))
            .map(|s| s.parse().map_err(|e: Error| Error::Usage(e.to_string())))
            .collect::<Result<_>>()?
    };
    let fault: Option<&'static str> = fault.map(|f| &*Box::leak(f.to_owned().into_boxed_str()));
    let results = gradsuite::run(&scopes, fault)?;
    println!("{:<8} {:<22} {:>7} {:>12}  result", "scope", "check", "coords", "max_rel_err");
    for r in &results {
        println!(
            "{:<8} {:<22} {:>7} {:>12.3e}  {}",
            r.scope.name(),
            r.name,
            r.coordinates,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if let Some(out) = &cli.out {
        fs::create_dir_all(out).map_err(io(out))?;
        write_json(&out.join("gradcheck.json"), &results)?;
    }
    if failed.is_empty() {
        println!("all {} checks passed (tolerance {:e})", results.len(), gradsuite::TOLERANCE);
        Ok(0)
    } else {
        println!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", "));
        Ok(1)
    }
}

fn diagnose(cli: &Cli, cfg: RunConfig, a: &DiagnoseArgs) -> Result<u8> {
    let (path, state, train, corpus) = checkpoint_and_corpus(a.checkpoint.as_ref(), a.corpus.as_ref(), &cfg)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| default_out(cli, &cfg, &path).join("diagnostics"));
    prepare_out(&out, cli.force)?;
    let utts = select(&corpus, &train, a.split)?;
    let (analyses, summary) = diagnostics::analyze(&state.model, &utts, a.modality)?;
    diagnostics::write_artifacts(&out, &analyses, &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(0)
}

fn ablate(cli: &Cli, cfg: RunConfig, a: &AblateArgs) -> Result<u8> {
    if a.seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    let out = required(cli.out.as_ref(), &cfg.paths.out, "out")?;
    let mut train = cfg.train.clone();
    if let Some(n) = a.steps {
        train.total_steps = n;
    }
    train.validate()?;
    cfg.model.validate()?;
    let (_, corpus) = load_corpus(a.corpus.as_ref(), &cfg)?;
    prepare_out(&out, cli.force)?;
    let modes = if a.modes.is_empty() {
        mirgan_core::AblationMode::ALL.to_vec()
    } else {
        a.modes.clone()
    };
    let mut cells = Vec::new();
    for &mode in &modes {
        for &seed in &a.seeds {
            let tc = TrainConfig {
                ablation: mode,
                seed,
                ..train.clone()
            };
            let dir = out.join(mode.name()).join(format!("seed_{seed}"));
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"))?;
            log::info!("ablation {mode}, seed {seed}: training {} steps", tc.total_steps);
            let state = experiment::fit(&cfg.model, &tc, &corpus, |row| metrics.write(row))?;
            let report = experiment::final_eval(&state, &tc, &corpus, ModalityMode::AV)?;
            write_json(&dir.join("eval.json"), &report)?;
            let cell = AblationCell {
                mode,
                seed,
                clean_ter: report.clean_ter,
                noisy_ter: report.noisy_ter,
            };
            log::info!("ablation {mode}, seed {seed}: clean TER {:.4}", cell.clean_ter);
            cells.push(cell);
        }
    }
    let rows = experiment::aggregate(&cells);
    let csv = experiment::ablation_csv(&rows);
    let path = out.join("ablation.csv");
    fs::write(&path, &csv).map_err(io(&path))?;
    write_json(&out.join("cells.json"), &cells)?;
    print!("{csv}");
    Ok(0)
}
