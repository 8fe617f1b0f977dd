//! Small training runs with outcomes that can be checked by counting.

use pmilm_core::fixture::{alternating, unigram_perplexity, Fixture, MarkovChain};
use pmilm_core::trainer::{seeded_rng, RngStream, TrainData, TrainStats, Trainer};
use pmilm_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(mode: Mode, vocab: usize) -> Config {
    let mut c = Config::default();
    c.model.mode = mode;
    c.model.vocab_size = vocab;
    c.model.embed_dim = 16;
    c.model.hidden = 16;
    c.model.layers = 1;
    c.model.dropout = 0.0;
    c.model.k = 5;
    c.model.init_scale = 0.1;
    c.train.batch_size = 10;
    c.train.bptt_len = 10;
    c.train.epochs = 5;
    c
}

fn train(cfg: &Config, ids: &[WordId], valid: Option<&[WordId]>, vocab: &Vocabulary) -> (TrainStats, ModelParams, UnigramDistribution) {
    let dist = UnigramDistribution::from_stream(vocab, ids, 1.0).unwrap();
    let params = ModelParams::init(&cfg.model, &mut seeded_rng(cfg.train.seed, RngStream::Init)).unwrap();
    let mut t = Trainer::new(cfg.clone(), params, &dist).unwrap();
    let data = TrainData {
        train: ids,
        valid,
        dist: &dist,
        vocab_hash: vocab.hash(),
    };
    let stats = t.train(&data, |_| Ok(())).unwrap();
    (stats, t.params, dist)
}

#[test]
fn alternating_pattern_is_learned() {
    // Each line ends in a word outside the 4-entry vocabulary so that every
    // id, <unk> included, occurs in training. NCE never updates a word that
    // is neither observed nor drawn as noise.
    let text: String = alternating(200, 10).lines().map(|l| format!("{l} c\n")).collect();
    let vocab = Vocabulary::build_from_lines(text.lines(), 4, 1).unwrap();
    let ids = vocab.encode(text.lines(), true);
    assert!(vocab.id("c").is_none());
    let (a, b) = (vocab.id("a").unwrap(), vocab.id("b").unwrap());
    for mode in [Mode::Pmi, Mode::Nce] {
        let mut cfg = config(mode, vocab.len());
        cfg.train.optimizer = Optimizer::Adam;
        cfg.train.lr0 = 0.01;
        cfg.train.epochs = 20;
        let (_, params, dist) = train(&cfg, &ids, None, &vocab);
        let prefix = [a, b, a, b, a];
        let top = evaluator::top_k_predictions(&params, &prefix, &dist, 1).unwrap();
        assert_eq!(top[0].0, b, "{mode}");
        assert!(top[0].1 > 0.9, "{mode}: p(b|a) = {}", top[0].1);
        let top = evaluator::top_k_predictions(&params, &prefix[..4], &dist, 1).unwrap();
        assert_eq!(top[0].0, a, "{mode}");
        assert!(top[0].1 > 0.9, "{mode}: p(a|b) = {}", top[0].1);
    }
}

#[test]
fn tiny_corpus_loss_leaves_plateau() {
    // vocabulary of 10 including the specials, 2K tokens
    let chain = MarkovChain::random(5, 8, 2, 0.05);
    let text = chain.render(&chain.sample(2000, &mut ChaCha8Rng::seed_from_u64(5)));
    let vocab = Vocabulary::build_from_lines(text.lines(), 100, 1).unwrap();
    assert_eq!(vocab.len(), 10);
    let ids = vocab.encode(text.lines(), true);
    let cfg = config(Mode::Pmi, vocab.len());
    let (stats, _, _) = train(&cfg, &ids, None, &vocab);
    let plateau = (1 + cfg.model.k) as f64 * std::f64::consts::LN_2;
    assert!(stats.epochs.last().unwrap().train_loss < plateau);
}

#[test]
fn ptb_style_loss_is_non_increasing_after_first_epoch() {
    let fx = Fixture::standard();
    let vocab = Vocabulary::build_from_lines(fx.train.lines(), 100, 1).unwrap();
    let ids = vocab.encode(fx.train.lines(), true);
    let mut cfg = Config::default();
    cfg.model.vocab_size = vocab.len();
    cfg.model.embed_dim = 32;
    cfg.model.hidden = 32;
    cfg.model.k = 10;
    cfg.train.epochs = 8;
    cfg.train.decay_start_epoch = 3;
    let (stats, _, _) = train(&cfg, &ids, None, &vocab);
    let losses: Vec<f64> = stats.epochs.iter().map(|e| e.train_loss).collect();
    for w in losses[1..].windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

#[test]
fn zero_pmi_model_scores_like_unigram_counts() {
    let fx = Fixture::standard();
    let vocab = Vocabulary::build_from_lines(fx.train.lines(), 100, 1).unwrap();
    let train_ids = vocab.encode(fx.train.lines(), true);
    let test_ids = vocab.encode(fx.test.lines(), true);
    let dist = UnigramDistribution::from_stream(&vocab, &train_ids, 1.0).unwrap();
    let cfg = config(Mode::Pmi, vocab.len());
    let params = ModelParams::zeros(&cfg.model).unwrap();
    let ppl = evaluator::perplexity(&params, &test_ids, &dist).unwrap();
    // <unk> never occurs, so it takes the floor 1/(N+|V|) and the seen words
    // share the remaining mass after normalization
    let n = train_ids.len() as f64;
    let floor_mass = 1.0 / (n + vocab.len() as f64);
    let oracle = unigram_perplexity(&train_ids, &test_ids) * (1.0 + floor_mass);
    assert!((ppl - oracle).abs() / oracle < 1e-9, "{ppl} vs {oracle}");
    assert!((ppl / unigram_perplexity(&train_ids, &test_ids) - 1.0).abs() < 1e-4);
}
