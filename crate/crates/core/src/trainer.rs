//! Truncated-BPTT training loop.
//!
//! Each step runs forward → objective → backward → clip → optimizer update.
//! Recurrent state carries across the steps of an epoch and is reset to zero
//! at the start of every epoch.

use std::time::Instant;

use ndarray::{s, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, Optimizer};
use crate::corpus::{BatchPlan, UnigramDistribution, WordId};
use crate::evaluator;
use crate::model::{Gradients, LstmState, Mode, ModelParams};
use crate::objectives::{nce_loss, neg_loss};
use crate::optim::{adam_step, clip_gradients, lr_schedule, sgd_step, AdamHyper, AdamState};
use crate::sampler::AliasTable;
use crate::{Error, Result};

/// Independent generator streams derived from one seed.
#[derive(Clone, Copy, Debug)]
pub enum RngStream {
    Init = 0,
    Train = 1,
}

pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_ppl: Option<f64>,
    pub wall_secs: f64,
    pub tokens_per_sec: f64,
}

impl EpochStats {
    /// `epoch<TAB>lr<TAB>train_loss<TAB>valid_ppl<TAB>tokens_per_sec`.
    pub fn log_line(&self) -> String {
        let ppl = self
            .valid_ppl
            .map_or_else(|| "nan".to_string(), |p| format!("{p:.4}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:.1}",
            self.epoch, self.lr, self.train_loss, ppl, self.tokens_per_sec
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
    pub tokens_seen: u64,
}

pub struct TrainData<'a> {
    pub train: &'a [WordId],
    pub valid: Option<&'a [WordId]>,
    pub dist: &'a UnigramDistribution,
    pub vocab_hash: String,
}

/// What the trainer hands out after each epoch.
pub struct EpochEnd<'a> {
    pub stats: &'a EpochStats,
    pub checkpoint: &'a Checkpoint,
    /// Best validation perplexity so far.
    pub is_best: bool,
}

/// `B × T × k` noise ids; with `share`, one set of `k` for the whole step.
pub fn sample_noise<R: Rng + ?Sized>(
    table: &AliasTable,
    rng: &mut R,
    batch: usize,
    steps: usize,
    k: usize,
    share: bool,
) -> Array3<WordId> {
    if share {
        let shared = table.draw(rng, k);
        Array3::from_shape_fn((batch, steps, k), |(_, _, i)| shared[i])
    } else {
        let mut noise = Array3::zeros((batch, steps, k));
        table.fill(rng, noise.as_slice_mut().expect("fresh array"));
        noise
    }
}

/// Loss, gradients and next state for one window of rows.
fn step_gradients<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: ArrayView2<'_, WordId>,
    targets: ArrayView2<'_, WordId>,
    state: &LstmState,
    table: &AliasTable,
    dist: &UnigramDistribution,
    share_noise: bool,
    rng: &mut R,
) -> Result<(f64, Gradients, LstmState)> {
    let (batch, steps) = inputs.dim();
    let k = params.config.k;
    let noise = sample_noise(table, rng, batch, steps, k, share_noise);
    let mut fwd = params.forward(inputs, state, true, rng)?;
    let loss = match params.mode() {
        Mode::Pmi => neg_loss(params, fwd.context.view(), targets, noise.view())?,
        Mode::Nce => nce_loss(params, fwd.context.view(), targets, noise.view(), dist, k)?,
    };
    let mut grads = params.backward(&mut fwd.tape, loss.grad_context.view())?;
    grads.output_embed = loss.output_embed;
    grads.nce_bias = loss.nce_bias;
    Ok((loss.value, grads, fwd.state))
}

pub struct Trainer {
    pub config: Config,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
    table: AliasTable,
    rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(config: Config, params: ModelParams, dist: &UnigramDistribution) -> Result<Self> {
        config.validate()?;
        if params.config.mode != config.model.mode || params.vocab_size() != dist.len() {
            return Err(Error::InvalidArgument(
                "model, config and noise distribution disagree on mode or vocabulary".into(),
            ));
        }
        let adam = (config.train.optimizer == Optimizer::Adam).then(|| AdamState::new(&params));
        let pool = if config.train.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.train.threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            rng: seeded_rng(config.train.seed, RngStream::Train),
            table: AliasTable::new(dist),
            config,
            params,
            adam,
            pool,
        })
    }

    /// One optimizer step; returns the mean per-token loss.
    pub fn step(
        &mut self,
        inputs: ArrayView2<'_, WordId>,
        targets: ArrayView2<'_, WordId>,
        state: &mut LstmState,
        dist: &UnigramDistribution,
        lr: f64,
    ) -> Result<f64> {
        let share = self.config.train.share_noise;
        let (loss, mut grads, next) = match &self.pool {
            None => step_gradients(
                &self.params,
                inputs,
                targets,
                state,
                &self.table,
                dist,
                share,
                &mut self.rng,
            )?,
            Some(pool) => {
                let batch = inputs.nrows();
                let shards = self.config.train.threads.min(batch);
                let bounds: Vec<(usize, usize, u64)> = (0..shards)
                    .map(|i| (i * batch / shards, (i + 1) * batch / shards, self.rng.random()))
                    .collect();
                let params = &self.params;
                let table = &self.table;
                let st = &*state;
                let parts: Vec<Result<(f64, Gradients, LstmState)>> = pool.install(|| {
                    bounds
                        .par_iter()
                        .map(|&(lo, hi, seed)| {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            step_gradients(
                                params,
                                inputs.slice(s![lo..hi, ..]),
                                targets.slice(s![lo..hi, ..]),
                                &st.select_rows(lo..hi),
                                table,
                                dist,
                                share,
                                &mut rng,
                            )
                        })
                        .collect()
                });
                let mut loss = 0.0;
                let mut total = Gradients::zeros(&self.params);
                let mut states = Vec::with_capacity(shards);
                for (part, &(lo, hi, _)) in parts.into_iter().zip(&bounds) {
                    let (l, mut g, st) = part?;
                    let weight = (hi - lo) as f64 / batch as f64;
                    loss += l * weight;
                    g.scale(weight);
                    total.add_assign(&g);
                    states.push(st);
                }
                (loss, total, LstmState::concat_rows(&states))
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        clip_gradients(&mut grads, self.config.train.clip_norm)?;
        match self.adam.as_mut() {
            Some(adam) => {
                let hp = AdamHyper::from_config(&self.config.train);
                adam_step(&mut self.params, &grads, adam, &hp);
            }
            None => sgd_step(&mut self.params, &grads, lr),
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        *state = next;
        Ok(loss)
    }

    fn checkpoint(&self, epoch: usize, best: Option<f64>, vocab_hash: &str) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab_hash: vocab_hash.to_string(),
            epoch,
            best_valid_ppl: best,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Runs all configured epochs. `on_epoch` sees every epoch's checkpoint
    /// and is where callers persist it. A non-finite loss aborts the run;
    /// whatever `on_epoch` wrote before stays in place.
    pub fn train<F>(&mut self, data: &TrainData<'_>, mut on_epoch: F) -> Result<TrainStats>
    where
        F: FnMut(EpochEnd<'_>) -> Result<()>,
    {
        let tc = self.config.train.clone();
        let mut plan = BatchPlan::new(data.train, tc.batch_size, tc.bptt_len)?;
        let mut stats = TrainStats::default();
        let mut best: Option<f64> = None;

        for epoch in 1..=tc.epochs {
            let start = Instant::now();
            let lr = lr_schedule(&tc, epoch);
            let mut state = LstmState::zeros(&self.params, tc.batch_size);
            plan.reset();
            let mut loss_sum = 0.0;
            let mut tokens = 0usize;
            while let Some(batch) = plan.next() {
                let n = batch.inputs.len();
                let loss = self.step(
                    batch.inputs.view(),
                    batch.targets.view(),
                    &mut state,
                    data.dist,
                    lr,
                )?;
                loss_sum += loss * n as f64;
                tokens += n;
            }
            stats.tokens_seen += tokens as u64;

            let valid_ppl = match data.valid {
                Some(v) if !v.is_empty() => Some(evaluator::perplexity(&self.params, v, data.dist)?),
                _ => None,
            };
            if valid_ppl.is_some_and(|p| !p.is_finite()) {
                return Err(Error::NonFinite("validation perplexity"));
            }
            let is_best = match (valid_ppl, best) {
                (Some(p), Some(b)) => p < b,
                (Some(_), None) => true,
                _ => false,
            };
            if is_best {
                best = valid_ppl;
            }
            let wall = start.elapsed().as_secs_f64();
            let es = EpochStats {
                epoch,
                lr: if tc.optimizer == Optimizer::Adam { tc.lr0 } else { lr },
                train_loss: loss_sum / tokens as f64,
                valid_ppl,
                wall_secs: wall,
                tokens_per_sec: tokens as f64 / wall.max(1e-9),
            };
            let ck = self.checkpoint(epoch, best, &data.vocab_hash);
            on_epoch(EpochEnd {
                stats: &es,
                checkpoint: &ck,
                is_best,
            })?;
            stats.epochs.push(es);
        }
        Ok(stats)
    }
}
