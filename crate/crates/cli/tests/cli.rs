use std::path::{Path, PathBuf};
use std::process::Command;

use pmilm_cli::*;
use pmilm_core::checkpoint::Checkpoint;
use pmilm_core::fixture::{unigram_perplexity, Fixture};
use pmilm_core::{Config, ModelParams, Vocabulary};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/fixture")
        .join(name)
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmilm"))
}

fn small_train_args(out: &Path) -> TrainArgs {
    TrainArgs {
        config: Some(preset("fixture.cfg")),
        mode: None,
        train: data("train.txt"),
        valid: Some(data("valid.txt")),
        vocab: None,
        out: out.to_path_buf(),
        seed: None,
        threads: None,
        k: None,
        overrides: vec!["epochs=2".into(), "hidden=8".into(), "embed_dim=8".into()],
    }
}

#[test]
fn bundled_fixture_matches_generator() {
    let fx = Fixture::standard();
    assert_eq!(std::fs::read_to_string(data("train.txt")).unwrap(), fx.train);
    assert_eq!(std::fs::read_to_string(data("valid.txt")).unwrap(), fx.valid);
    assert_eq!(std::fs::read_to_string(data("test.txt")).unwrap(), fx.test);
}

#[test]
fn presets_parse() {
    let ptb = Config::load(&preset("ptb.cfg")).unwrap();
    assert_eq!(ptb, Config::default());
    let big = Config::load(&preset("bigcorpus.cfg")).unwrap();
    assert_eq!((big.model.layers, big.model.hidden), (1, 512));
    assert_eq!(big.model.dropout, 0.1);
    assert_eq!((big.train.epochs, big.train.batch_size), (1, 1000));
    assert_eq!(big.train.optimizer, pmilm_core::Optimizer::Adam);
    assert_eq!(big.train.lr0, 0.001);
    let fx = Config::load(&preset("fixture.cfg")).unwrap();
    assert_eq!((fx.model.hidden, fx.model.embed_dim, fx.model.k, fx.train.epochs), (32, 32, 10, 10));
}

#[test]
fn vocab_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("v.txt");
    let args = VocabArgs {
        train: empty,
        out: out.clone(),
        max_size: 10_000,
        min_count: 1,
    };
    let v = cmd_vocab(&args, &mut Vec::new()).unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);

    let args = VocabArgs {
        train: data("train.txt"),
        out: out.clone(),
        max_size: 2,
        min_count: 1,
    };
    assert_eq!(cmd_vocab(&args, &mut Vec::new()).unwrap().len(), 2);

    let args = VocabArgs {
        train: data("train.txt"),
        out: out.clone(),
        max_size: 10_000,
        min_count: 1,
    };
    assert_eq!(cmd_vocab(&args, &mut Vec::new()).unwrap().len(), 50);
}

#[test]
fn train_writes_checkpoints_log_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let args = small_train_args(dir.path());
    let mut log = Vec::new();
    let outcome = cmd_train(&args, &mut log).unwrap();
    let log = String::from_utf8(log).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        assert_eq!(line.split('\t').count(), 5, "{line}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("train.log")).unwrap(), log);
    for name in ["epoch001.ckpt", "epoch002.ckpt", "best.ckpt", "vocab.txt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(outcome.last, dir.path().join("epoch002.ckpt"));

    let ck = Checkpoint::load(&outcome.last).unwrap();
    let m = RunManifest::load(&RunManifest::path_for(&outcome.last)).unwrap();
    assert_eq!(m.epoch, 2);
    assert_eq!(m.seed, 1);
    assert_eq!(m.vocab_hash, ck.vocab_hash);
    assert_eq!(
        m.checkpoint_sha256,
        pmilm_core::io::sha256_hex(&std::fs::read(&outcome.last).unwrap())
    );
    assert!(m.corpus_hashes.contains_key("train") && m.corpus_hashes.contains_key("valid"));
    assert_eq!(m.config["hidden"], "8");
    assert!(m.finished_unix >= m.started_unix);

    // evaluating the best checkpoint on the validation file reproduces the
    // perplexity logged during training, up to f32 storage
    let best_epoch = outcome
        .stats
        .epochs
        .iter()
        .min_by(|a, b| a.valid_ppl.unwrap().total_cmp(&b.valid_ppl.unwrap()))
        .unwrap();
    let eval = EvalArgs {
        checkpoint: outcome.best.unwrap(),
        test: vec![data("valid.txt")],
        vocab: None,
        threads: 1,
        dump: Some(dir.path().join("dump.tsv")),
    };
    let mut report = Vec::new();
    let reports = cmd_eval(&eval, &mut report).unwrap();
    let logged = best_epoch.valid_ppl.unwrap();
    assert!((reports[0].perplexity - logged).abs() / logged < 1e-4);
    let report = String::from_utf8(report).unwrap();
    for key in ["dataset:", "mode: pmi", "tokens:", "total_log_prob:", "perplexity:"] {
        assert!(report.contains(key), "{report}");
    }
    let dump = std::fs::read_to_string(dir.path().join("dump.tsv")).unwrap();
    assert_eq!(dump.lines().count(), reports[0].tokens);
    let total: f64 = dump
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - reports[0].total_log_prob).abs() < 1e-2);
}

#[test]
fn eval_refuses_mismatched_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_train_args(dir.path()), &mut Vec::new()).unwrap();
    let other = dir.path().join("other_vocab.txt");
    Vocabulary::build(["x", "y"], 10, 1).unwrap().save(&other).unwrap();
    let eval = EvalArgs {
        checkpoint: outcome.last.clone(),
        test: vec![data("test.txt")],
        vocab: Some(other.clone()),
        threads: 1,
        dump: None,
    };
    let err = cmd_eval(&eval, &mut Vec::new()).unwrap_err();
    assert!(format!("{err:#}").contains("vocab"), "{err:#}");

    let status = bin()
        .args(["eval", "--checkpoint"])
        .arg(&outcome.last)
        .arg("--test")
        .arg(data("test.txt"))
        .arg("--vocab")
        .arg(&other)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn zero_pmi_checkpoint_scores_unigram_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(data("train.txt")).unwrap();
    let vocab = Vocabulary::build_from_lines(text.lines(), 100, 1).unwrap();
    let vpath = dir.path().join("vocab.txt");
    vocab.save(&vpath).unwrap();
    let mut config = Config::load(&preset("fixture.cfg")).unwrap();
    config.model.vocab_size = vocab.len();
    let ck = Checkpoint {
        params: ModelParams::zeros(&config.model).unwrap(),
        config,
        vocab_hash: vocab.hash(),
        epoch: 0,
        best_valid_ppl: None,
        adam: None,
    };
    let cpath = dir.path().join("zero.ckpt");
    ck.save(&cpath).unwrap();

    let eval = EvalArgs {
        checkpoint: cpath,
        test: vec![data("test.txt")],
        vocab: Some(vpath),
        threads: 1,
        dump: None,
    };
    let ppl = cmd_eval(&eval, &mut Vec::new()).unwrap()[0].perplexity;
    let train_ids = vocab.encode(text.lines(), true);
    let test_text = std::fs::read_to_string(data("test.txt")).unwrap();
    let test_ids = vocab.encode(test_text.lines(), true);
    // the never-seen <unk> holds floor mass 1/(N+|V|) after normalization
    let floor = 1.0 / (train_ids.len() + vocab.len()) as f64;
    let oracle = unigram_perplexity(&train_ids, &test_ids) * (1.0 + floor);
    assert!((ppl - oracle).abs() / oracle < 1e-9, "{ppl} vs {oracle}");
}

#[test]
fn predict_lists_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_train_args(dir.path()), &mut Vec::new()).unwrap();
    let args = PredictArgs {
        checkpoint: outcome.last,
        vocab: None,
        prefix: "w01 w02".into(),
        top: 100,
    };
    let rows = cmd_predict(&args, &mut Vec::new()).unwrap();
    assert_eq!(rows.len(), 50);
    let total: f64 = rows.iter().map(|r| r.1).sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert!(rows.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn verify_passes_and_is_reproducible() {
    let args = VerifyArgs {
        seed: 7,
        trials: 100,
        size: 5,
        k: 2,
        dims: vec![1, 2, 3, 5],
    };
    let mut a = Vec::new();
    let report = cmd_verify(&args, &mut a).unwrap();
    assert!(report.passed, "{}", String::from_utf8_lossy(&a));
    let mut b = Vec::new();
    cmd_verify(&args, &mut b).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("<= 1e-12: PASS"), "{text}");
}

#[test]
fn exit_codes() {
    let status = bin().args(["train", "--mode", "bogus", "--train", "x", "--out", "y"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = bin().arg("frobnicate").status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = bin()
        .args(["vocab", "--train", "/nonexistent/corpus.txt", "--out", "/tmp/never.txt"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let out = bin().args(["verify", "--trials", "10"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn environment_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--set", "epochs=1", "--set", "hidden=4", "--set", "embed_dim=4"])
        .env("PMILM_CONFIG", preset("fixture.cfg"))
        .env("PMILM_MODE", "nce")
        .env("PMILM_TRAIN", data("valid.txt"))
        .env("PMILM_OUT", dir.path())
        .env("PMILM_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = Checkpoint::load(&dir.path().join("epoch001.ckpt")).unwrap();
    assert_eq!(ck.config.model.mode, pmilm_core::Mode::Nce);
    assert_eq!(ck.config.train.seed, 5);
}

#[test]
fn divergence_exits_nonzero_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small_train_args(dir.path());
    // SGD at a sane rate for one epoch, then a rate of ~1e298
    args.overrides.extend([
        "optimizer=sgd".to_string(),
        "lr=0.01".to_string(),
        "decay_factor=1e-300".to_string(),
        "decay_start_epoch=1".to_string(),
        "epochs=3".to_string(),
    ]);
    let err = cmd_train(&args, &mut Vec::new()).unwrap_err();
    assert!(format!("{err:#}").contains("non-finite"), "{err:#}");
    let written: Vec<usize> = (1..=3)
        .filter(|e| dir.path().join(format!("epoch{e:03}.ckpt")).exists())
        .collect();
    assert!(!written.is_empty() && written.len() < 3, "{written:?}");
    let last = dir.path().join(format!("epoch{:03}.ckpt", written.last().unwrap()));
    let ck = Checkpoint::load(&last).unwrap();
    assert!(ck.params.is_finite());
    let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
    assert_eq!(log.lines().count(), written.len());
}
