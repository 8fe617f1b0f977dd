//! Subcommands behind the `pmilm` binary.
//!
//! Each `cmd_*` function takes parsed arguments and a writer for its report,
//! so the commands can be driven from tests without spawning a process.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pmilm_core::checkpoint::Checkpoint;
use pmilm_core::fixture::{Fixture, FIXTURE_SEED};
use pmilm_core::io::{sha256_hex, write_atomic};
use pmilm_core::oracle::{self, JointCounts};
use pmilm_core::trainer::{seeded_rng, RngStream, TrainData, TrainStats, Trainer};
use pmilm_core::{evaluator, Config, Mode, ModelParams, UnigramDistribution, Vocabulary, WordId};

#[derive(Debug, Parser)]
#[command(name = "pmilm", version, about = "PMI-LM and NCE-LM recurrent language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from a training corpus
    Vocab(VocabArgs),
    /// Train a model and write per-epoch checkpoints
    Train(TrainArgs),
    /// Report perplexity of a checkpoint on held-out text
    Eval(EvalArgs),
    /// Print the most probable next words after a prefix
    Predict(PredictArgs),
    /// Run the PMI and NCE oracle checks
    Verify(VerifyArgs),
    /// Write the synthetic Markov-chain corpus
    GenFixture(GenFixtureArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Pmi,
    Nce,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pmi => Mode::Pmi,
            ModeArg::Nce => Mode::Nce,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct VocabArgs {
    #[arg(long, env = "PMILM_TRAIN")]
    pub train: PathBuf,
    #[arg(long, env = "PMILM_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub max_size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Preset file of key=value lines; the built-in PTB recipe when absent
    #[arg(long, env = "PMILM_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "PMILM_MODE", value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, env = "PMILM_TRAIN")]
    pub train: PathBuf,
    #[arg(long, env = "PMILM_VALID")]
    pub valid: Option<PathBuf>,
    /// Existing vocabulary; built from --train when absent
    #[arg(long, env = "PMILM_VOCAB")]
    pub vocab: Option<PathBuf>,
    #[arg(long, env = "PMILM_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "PMILM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "PMILM_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, env = "PMILM_K")]
    pub k: Option<usize>,
    /// Override any config key, e.g. --set epochs=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, env = "PMILM_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Held-out files, each scored as one stream
    #[arg(long, env = "PMILM_TEST", required = true, num_args = 1..)]
    pub test: Vec<PathBuf>,
    /// Defaults to vocab.txt next to the checkpoint
    #[arg(long, env = "PMILM_VOCAB")]
    pub vocab: Option<PathBuf>,
    #[arg(long, env = "PMILM_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Write `token<TAB>log_prob` lines for the first test file
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long, env = "PMILM_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "PMILM_VOCAB")]
    pub vocab: Option<PathBuf>,
    /// Whitespace-separated words; may be empty
    #[arg(long, default_value = "")]
    pub prefix: String,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, env = "PMILM_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Random instances for the posterior identity
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Words per posterior instance and side of the joint distribution
    #[arg(long, default_value_t = 5)]
    pub size: usize,
    #[arg(long, env = "PMILM_K", default_value_t = 2)]
    pub k: usize,
    /// Embedding sizes for the factorization sweep
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 5])]
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenFixtureArgs {
    #[arg(long, env = "PMILM_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "PMILM_SEED", default_value_t = FIXTURE_SEED)]
    pub seed: u64,
}

/// Provenance written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub epoch: usize,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub vocab_hash: String,
    pub corpus_hashes: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("manifest.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn cmd_vocab(args: &VocabArgs, out: &mut dyn Write) -> Result<Vocabulary> {
    let text = read_text(&args.train)?;
    let vocab = Vocabulary::build_from_lines(text.lines(), args.max_size, args.min_count)?;
    vocab.save(&args.out)?;
    writeln!(out, "wrote {} entries to {}", vocab.len(), args.out.display())?;
    Ok(vocab)
}

/// Preset, then `--set` overrides, then the dedicated flags.
pub fn resolve_config(args: &TrainArgs) -> Result<Config> {
    let mut config = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(m) = args.mode {
        config.model.mode = m.into();
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if let Some(t) = args.threads {
        config.train.threads = t;
    }
    if let Some(k) = args.k {
        config.model.k = k;
    }
    Ok(config)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub stats: TrainStats,
    pub last: PathBuf,
    pub best: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainOutcome> {
    let started = unix_now();
    let mut config = resolve_config(args)?;
    let train_text = read_text(&args.train)?;
    let valid_text = args.valid.as_deref().map(read_text).transpose()?;

    let mut vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build_from_lines(train_text.lines(), config.max_vocab, config.min_count)?,
    };
    let train_ids = vocab.encode(train_text.lines(), true);
    vocab.recount(&train_ids);
    let valid_ids = valid_text.as_ref().map(|t| vocab.encode(t.lines(), true));
    config.model.vocab_size = vocab.len();
    config.validate()?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    vocab.save(&args.out.join("vocab.txt"))?;
    let vocab_hash = vocab.hash();

    let mut corpus_hashes = BTreeMap::new();
    corpus_hashes.insert("train".to_string(), sha256_hex(train_text.as_bytes()));
    if let Some(t) = &valid_text {
        corpus_hashes.insert("valid".to_string(), sha256_hex(t.as_bytes()));
    }
    let config_map: BTreeMap<String, String> = config
        .to_kv_string()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();

    let dist = UnigramDistribution::from_stream(&vocab, &train_ids, config.train.noise_exponent)?;
    let params = ModelParams::init(&config.model, &mut seeded_rng(config.train.seed, RngStream::Init))?;
    let mut trainer = Trainer::new(config.clone(), params, &dist)?;
    let data = TrainData {
        train: &train_ids,
        valid: valid_ids.as_deref(),
        dist: &dist,
        vocab_hash: vocab_hash.clone(),
    };

    let mut log = String::new();
    let mut last = None;
    let mut best = None;
    let stats = trainer.train(&data, |end| {
        let line = end.stats.log_line();
        log.push_str(&line);
        log.push('\n');
        writeln!(out, "{line}").map_err(pmilm_core::Error::Io)?;
        write_atomic(&args.out.join("train.log"), log.as_bytes())?;

        let mut targets = vec![args.out.join(format!("epoch{:03}.ckpt", end.stats.epoch))];
        if end.is_best {
            targets.push(args.out.join("best.ckpt"));
        }
        let bytes = end.checkpoint.to_bytes();
        for path in &targets {
            write_atomic(path, &bytes)?;
            let manifest = RunManifest {
                version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
                checkpoint: path.file_name().unwrap().to_string_lossy().into_owned(),
                checkpoint_sha256: sha256_hex(&bytes),
                epoch: end.stats.epoch,
                seed: config.train.seed,
                config: config_map.clone(),
                vocab_hash: vocab_hash.clone(),
                corpus_hashes: corpus_hashes.clone(),
                started_unix: started,
                finished_unix: unix_now(),
            };
            let json = serde_json::to_string_pretty(&manifest)
                .map_err(|e| pmilm_core::Error::Checkpoint(e.to_string()))?;
            write_atomic(&RunManifest::path_for(path), json.as_bytes())?;
        }
        last = Some(targets[0].clone());
        if end.is_best {
            best = Some(targets[1].clone());
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        stats,
        last: last.context("no epochs were run")?,
        best,
    })
}

fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> Result<(Checkpoint, Vocabulary, UnigramDistribution)> {
    let ck = Checkpoint::load(checkpoint)?;
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("vocab.txt"),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    ck.check_vocab(&vocab.hash())?;
    let dist = UnigramDistribution::from_counts(vocab.counts(), ck.config.train.noise_exponent)?;
    Ok((ck, vocab, dist))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<Vec<evaluator::EvalReport>> {
    let (ck, vocab, dist) = load_model(&args.checkpoint, args.vocab.as_deref())?;
    let streams: Vec<Vec<WordId>> = args
        .test
        .iter()
        .map(|p| Ok(vocab.encode(read_text(p)?.lines(), true)))
        .collect::<Result<_>>()?;
    if let Some(p) = streams.iter().zip(&args.test).find(|(s, _)| s.is_empty()).map(|(_, p)| p) {
        bail!("{} contains no tokens", p.display());
    }
    let views: Vec<&[WordId]> = streams.iter().map(Vec::as_slice).collect();
    let lps = evaluator::parallel_token_log_probs(&ck.params, &views, &dist, args.threads)?;

    if let Some(dump) = &args.dump {
        let mut text = String::new();
        for (&id, lp) in streams[0].iter().zip(&lps[0]) {
            text.push_str(&format!("{}\t{lp:.6}\n", vocab.token(id).unwrap_or("?")));
        }
        write_atomic(dump, text.as_bytes())?;
    }
    let mut reports = Vec::new();
    for (path, lp) in args.test.iter().zip(&lps) {
        let report = evaluator::EvalReport::new(path.display().to_string(), ck.params.mode(), lp);
        write!(out, "{report}")?;
        reports.push(report);
    }
    Ok(reports)
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<Vec<(String, f64)>> {
    let (ck, vocab, dist) = load_model(&args.checkpoint, args.vocab.as_deref())?;
    let prefix: Vec<WordId> = args.prefix.split_whitespace().map(|t| vocab.lookup(t)).collect();
    let top = evaluator::top_k_predictions(&ck.params, &prefix, &dist, args.top)?;
    let mut rows = Vec::with_capacity(top.len());
    for (id, p) in top {
        let token = vocab.token(id).unwrap_or("?").to_string();
        writeln!(out, "{token}\t{p:.6}")?;
        rows.push((token, p));
    }
    Ok(rows)
}

pub const POSTERIOR_TOL: f64 = 1e-12;
pub const FACTORIZATION_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub dim: usize,
    pub max_deviation: f64,
    pub objective_gap: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub posterior_max_err: f64,
    pub sweep: Vec<SweepPoint>,
    /// Whether max |w·c − pmi| also happened to be non-increasing in d.
    pub deviation_monotone: bool,
    pub passed: bool,
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<VerifyReport> {
    use rand::Rng;
    if args.size < 2 || args.k == 0 || args.dims.is_empty() {
        bail!("verify needs size >= 2, k >= 1 and at least one dimension");
    }
    let mut rng = seeded_rng(args.seed, RngStream::Init);
    let mut posterior_max_err: f64 = 0.0;
    for _ in 0..args.trials {
        let logits: Vec<f64> = (0..args.size).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let raw: Vec<f64> = (0..args.size).map(|_| rng.random::<f64>() + 0.01).collect();
        let z: f64 = raw.iter().sum();
        let noise: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let k = 1 + rng.random_range(0..10);
        posterior_max_err = posterior_max_err.max(oracle::verify_nce_posterior(&logits, &noise, k));
    }
    let posterior_ok = posterior_max_err <= POSTERIOR_TOL;
    writeln!(
        out,
        "nce posterior identity: max err {posterior_max_err:.3e} over {} instances <= {POSTERIOR_TOL:.0e}: {}",
        args.trials,
        verdict(posterior_ok)
    )?;

    let joint = JointCounts::random(args.size, args.size, &mut rng);
    let mut sweep = Vec::new();
    let mut dims = args.dims.clone();
    dims.sort_unstable();
    dims.dedup();
    for &dim in &dims {
        let mut init = seeded_rng(args.seed.wrapping_add(dim as u64), RngStream::Train);
        let r = oracle::verify_pmi_optimum(&joint, args.k, dim, &mut init);
        writeln!(
            out,
            "pmi factorization d={dim}: max deviation {:.3e}, objective gap {:.3e}, grad norm {:.3e}, iterations {}{}",
            r.max_deviation,
            r.objective_gap,
            r.grad_norm,
            r.iterations,
            if r.converged { "" } else { " (not converged)" }
        )?;
        sweep.push(SweepPoint {
            dim,
            max_deviation: r.max_deviation,
            objective_gap: r.objective_gap,
            grad_norm: r.grad_norm,
            converged: r.converged,
        });
    }
    let full = sweep.iter().find(|s| s.dim >= args.size);
    let full_ok = full.is_none_or(|s| s.max_deviation <= FACTORIZATION_TOL);
    if let Some(s) = full {
        writeln!(
            out,
            "pmi factorization full rank d={}: max deviation <= {FACTORIZATION_TOL:.0e}: {}",
            s.dim,
            verdict(full_ok)
        )?;
    }
    let gap_ok = sweep.windows(2).all(|w| w[1].objective_gap <= w[0].objective_gap);
    writeln!(out, "pmi objective gap non-increasing in d: {}", verdict(gap_ok))?;
    let deviation_monotone = sweep.windows(2).all(|w| w[1].max_deviation <= w[0].max_deviation);
    writeln!(
        out,
        "pmi max deviation non-increasing in d: {} (informational)",
        if deviation_monotone { "yes" } else { "no" }
    )?;

    Ok(VerifyReport {
        posterior_max_err,
        sweep,
        deviation_monotone,
        passed: posterior_ok && full_ok && gap_ok,
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn cmd_gen_fixture(args: &GenFixtureArgs, out: &mut dyn Write) -> Result<Fixture> {
    let fx = Fixture::generate(args.seed);
    fs::create_dir_all(&args.out)?;
    for (name, text) in [("train.txt", &fx.train), ("valid.txt", &fx.valid), ("test.txt", &fx.test)] {
        write_atomic(&args.out.join(name), text.as_bytes())?;
    }
    writeln!(out, "states: {}", fx.chain.states())?;
    writeln!(out, "analytic perplexity: {:.6}", fx.chain.perplexity())?;
    Ok(fx)
}

/// Runs a parsed command line; the return value is the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Vocab(a) => cmd_vocab(a, out).map(|_| 0),
        Command::Train(a) => cmd_train(a, out).map(|_| 0),
        Command::Eval(a) => cmd_eval(a, out).map(|_| 0),
        Command::Predict(a) => cmd_predict(a, out).map(|_| 0),
        Command::Verify(a) => cmd_verify(a, out).map(|r| if r.passed { 0 } else { 1 }),
        Command::GenFixture(a) => cmd_gen_fixture(a, out).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
