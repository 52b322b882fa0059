use super::checkpoint;
use super::*;
use crate::synthdata::{generate_corpus, CorpusSpec};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        encoder_layers: 1,
        generator_blocks: 1,
        recognizer_layers: 1,
        disc_hidden: 4,
        num_classes: 4,
        ..ModelConfig::default()
    }
}

fn tiny_corpus() -> Vec<Utterance> {
    generate_corpus(&CorpusSpec {
        n_utterances: 40,
        t_min: 4,
        t_max: 7,
        num_classes: 4,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        total_steps: 30,
        warmup_steps: 5,
        learning_rate: 3e-3,
        eval_interval: 10,
        eval_max_utterances: 0,
        checkpoint_interval: 0,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn trainer<'a>(corpus: &'a [Utterance], cfg: &TrainConfig) -> Trainer<'a> {
    let state = TrainState::new(&tiny_model(), cfg).unwrap();
    Trainer::new(cfg.clone(), corpus, state).unwrap()
}

fn run_rows(t: &mut Trainer<'_>, last: u64) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    t.run(last, |_, r| {
        rows.push(r.clone());
        Ok(())
    })
    .unwrap();
    rows
}

fn group_values(store: &ParamStore<f32>, disc: bool) -> Vec<Vec<u32>> {
    store
        .iter()
        .filter(|p| (p.group == Group::Discriminator) == disc)
        .map(|p| p.value.data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn phases_touch_disjoint_parameters() {
    let corpus = tiny_corpus();
    let mut t = trainer(&corpus, &tiny_train());
    for _ in 0..5 {
        let mut snaps: Vec<(Phase, Vec<Vec<u32>>, Vec<Vec<u32>>)> = Vec::new();
        t.train_step_audited(&mut |phase, store| {
            snaps.push((phase, group_values(store, true), group_values(store, false)));
        })
        .unwrap();
        let [(_, d0, r0), (_, d1, r1), (_, d2, r2)] = &snaps[..] else {
            panic!("three snapshots expected")
        };
        assert_ne!(d0, d1, "discriminator must move in phase A");
        assert_eq!(r0, r1, "rest must not move in phase A");
        assert_eq!(d1, d2, "discriminator must not move in phase B");
        assert_ne!(r1, r2, "rest must move in phase B");
    }
}

#[test]
fn rows_respect_bounds_and_bookkeeping() {
    let corpus = tiny_corpus();
    let cfg = tiny_train();
    let mut t = trainer(&corpus, &cfg);
    let rows = run_rows(&mut t, 12);
    assert_eq!(rows.len(), 12);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
    for r in &rows {
        let lg = r.l_g.unwrap();
        assert!(lg >= 2.0 * std::f64::consts::LN_2 - 1e-6, "{r:?}");
        for p in [r.mean_d_on_inv, r.mean_d_on_audio, r.mean_d_on_visual] {
            let p = p.unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
        let recomputed = r.l_rec + cfg.lambda_gan * lg + cfg.lambda_mim * r.l_mim.unwrap();
        assert!((r.total_phase_b - recomputed).abs() < 1e-6, "{r:?}");
    }
    assert!(rows[9].val_ter_clean.is_some() && rows[9].val_ter_noisy.is_some());
    assert!(rows[8].val_ter_clean.is_none());
    // the untrained discriminator sees every frame at one half
    let first = &rows[0];
    assert_eq!(first.mean_d_on_inv, Some(0.5));
    assert!((first.l_d.unwrap() - 0.0).abs() < 1e-6);
}

#[test]
fn training_is_deterministic() {
    let corpus = tiny_corpus();
    let a = run_rows(&mut trainer(&corpus, &tiny_train()), 8);
    let b = run_rows(&mut trainer(&corpus, &tiny_train()), 8);
    assert_eq!(a, b);
    let other = TrainConfig {
        seed: 12,
        ..tiny_train()
    };
    assert_ne!(a, run_rows(&mut trainer(&corpus, &other), 8));
}

#[test]
fn recognition_only_training_reduces_loss() {
    let corpus = tiny_corpus();
    let cfg = TrainConfig {
        lambda_gan: 0.0,
        lambda_mim: 0.0,
        noise_prob: 0.0,
        total_steps: 50,
        eval_interval: 0,
        ..tiny_train()
    };
    let rows = run_rows(&mut trainer(&corpus, &cfg), 50);
    let early: f64 = rows[..10].iter().map(|r| r.l_rec).sum::<f64>() / 10.0;
    let late: f64 = rows[40..].iter().map(|r| r.l_rec).sum::<f64>() / 10.0;
    assert!(late < 0.8 * early, "early {early}, late {late}");
    for r in &rows {
        assert_eq!(r.total_phase_b, r.l_rec);
    }
}

#[test]
fn ablation_columns() {
    let corpus = tiny_corpus();
    let row = |mode| {
        let cfg = TrainConfig {
            ablation: mode,
            ..tiny_train()
        };
        trainer(&corpus, &cfg).train_step().unwrap()
    };
    let r = row(AblationMode::NoMim);
    assert!(r.l_mim.is_none() && r.l_g.is_some());
    let r = row(AblationMode::NoDiscriminator);
    assert!(r.l_g.is_none() && r.l_d.is_none() && r.mean_d_on_inv.is_none() && r.grad_norm_d.is_none());
    let r = row(AblationMode::NoAdversarial);
    assert!(r.l_d.is_none() && r.l_g.is_some());
    assert!((r.total_phase_b - r.l_rec - 0.005 * r.l_mim.unwrap()).abs() < 1e-6);
}

#[test]
fn zero_gan_weight_matches_without_discriminator() {
    let corpus = tiny_corpus();
    let totals: Vec<Vec<f64>> = [AblationMode::NoDiscriminator, AblationMode::NoAdversarial]
        .into_iter()
        .map(|mode| {
            let cfg = TrainConfig {
                ablation: mode,
                lambda_gan: 0.0,
                eval_interval: 0,
                ..tiny_train()
            };
            let mut t = trainer(&corpus, &cfg);
            (0..4).map(|_| t.train_step().unwrap().total_phase_b).collect()
        })
        .collect();
    assert_eq!(totals[0], totals[1]);
}

#[test]
fn checkpoint_resume_replays_exactly() {
    let corpus = tiny_corpus();
    let cfg = tiny_train();
    let full = run_rows(&mut trainer(&corpus, &cfg), 14);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.mirc");
    let mut first = trainer(&corpus, &cfg);
    let head = run_rows(&mut first, 9);
    checkpoint::save(&path, &first.state, &cfg).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    checkpoint::save(&path, &first.state, &cfg).unwrap();
    assert_eq!(bytes, std::fs::read(&path).unwrap(), "byte-stable saves");

    let (state, loaded_cfg) = checkpoint::load(&path).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(state, first.state);
    let mut resumed = Trainer::new(loaded_cfg, &corpus, state).unwrap();
    let tail = run_rows(&mut resumed, 14);
    let joined: Vec<MetricsRow> = head.into_iter().chain(tail).collect();
    assert_eq!(joined, full);
}

#[test]
fn checkpoint_errors() {
    let corpus = tiny_corpus();
    let cfg = tiny_train();
    let t = trainer(&corpus, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mirc");
    checkpoint::save(&path, &t.state, &cfg).unwrap();

    let want = ModelConfig {
        d_model: 16,
        ..tiny_model()
    };
    let err = checkpoint::load_expecting(&path, &want).unwrap_err().to_string();
    assert!(err.contains("d_model"), "{err}");
    checkpoint::load_expecting(&path, &tiny_model()).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[4] = 7;
    assert!(checkpoint::decode(&bad).unwrap_err().to_string().contains("version"));
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(matches!(checkpoint::decode(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn incompatible_corpus_is_rejected() {
    let corpus = generate_corpus(&CorpusSpec {
        n_utterances: 4,
        d_audio_raw: 13,
        num_classes: 4,
        ..CorpusSpec::default()
    })
    .unwrap();
    let cfg = tiny_train();
    let state = TrainState::new(&tiny_model(), &cfg).unwrap();
    let err = Trainer::new(cfg, &corpus, state).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("d_audio_raw")), "{err}");
}

#[test]
fn non_finite_input_reports_divergence() {
    let mut corpus = tiny_corpus();
    for u in &mut corpus {
        u.audio.data_mut()[0] = f32::NAN;
    }
    let cfg = TrainConfig {
        noise_prob: 0.0,
        ..tiny_train()
    };
    match trainer(&corpus, &cfg).train_step() {
        Err(Error::Divergence { step, components }) => {
            assert_eq!(step, 1);
            let v: serde_json::Value = serde_json::from_str(&components).unwrap();
            assert_eq!(v["phase"], "A");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn batching_covers_the_split_each_epoch() {
    let corpus = tiny_corpus();
    let mut t = trainer(&corpus, &tiny_train());
    let per_epoch = t.batches_per_epoch();
    for epoch in 0..2 {
        let mut seen: Vec<usize> = (0..per_epoch).flat_map(|s| t.batch_for_step(epoch * per_epoch + s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, t.split.train);
    }
    assert_ne!(t.batch_for_step(0), t.batch_for_step(per_epoch));
    assert_eq!(t.split.val.len(), 4);
}

#[test]
fn invalid_train_config() {
    for cfg in [
        TrainConfig { learning_rate: 0.0, ..tiny_train() },
        TrainConfig { batch_size: 0, ..tiny_train() },
        TrainConfig { lambda_mim: -1.0, ..tiny_train() },
        TrainConfig { temperature: 0.0, ..tiny_train() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
    let json = r#"{"learning_rate": 0.01, "bogus": 1}"#;
    assert!(serde_json::from_str::<TrainConfig>(json).is_err());
}
