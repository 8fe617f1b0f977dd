//! Recurrent language models trained with sampled binary objectives.
//!
//! Two model families share one harness. The PMI language model trains an
//! LSTM context encoder and an output word-embedding table with word2vec's
//! negative-sampling objective, so that `w · c` approximates the shifted
//! pointwise mutual information between a word and its preceding context.
//! At test time the conditional distribution is recovered as
//! `p(w|c) ∝ exp(w · c) p(w)`. The NCE language model uses the same encoder
//! with a per-word bias and the noise-contrastive score, with the partition
//! function fixed to one during training.
//!
//! Everything is computed in `f64` with hand-written forward and backward
//! passes; checkpoints store parameters as little-endian `f32`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod fixture;
pub mod io;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod sampler;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Config, ModelConfig, Optimizer, TrainConfig};
pub use corpus::{BatchPlan, UnigramDistribution, Vocabulary, WordId};
pub use error::{Error, Result};
pub use evaluator::ConditionalDist;
pub use model::{Gradients, LstmState, Mode, ModelParams};
pub use objectives::StepLoss;
pub use sampler::AliasTable;
pub use trainer::{EpochStats, TrainStats};
