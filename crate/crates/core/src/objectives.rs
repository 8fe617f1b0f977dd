//! Sampled binary objectives.
//!
//! Both training objectives have the form
//!
//! ```text
//! S = Σ_{w,c} [ log s(w,c) + Σ_{i=1..k} log(1 − s(u_i,c)) ]
//! ```
//!
//! with `s = σ(logit)`. Negative sampling uses `logit = w·c`; NCE uses
//! `logit = w·c + b_w − ln(k p(w))`. The loss reported here is `−S` divided
//! by the number of predicted tokens.

use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::corpus::{UnigramDistribution, WordId};
use crate::model::{ModelParams, SparseRows};
use crate::numeric::{log_sigmoid, sigmoid};
use crate::{Error, Result};

/// Loss and first-order terms of one step.
#[derive(Clone, Debug)]
pub struct StepLoss {
    /// Mean per-token loss.
    pub value: f64,
    pub tokens: usize,
    /// `B × T × d`.
    pub grad_context: Array3<f64>,
    pub output_embed: SparseRows,
    pub nce_bias: Option<SparseRows>,
}

/// A pre-sigmoid score `logit(w, c)`.
pub trait Score {
    fn logit(&self, params: &ModelParams, context: &[f64], word: WordId) -> Result<f64>;

    /// Whether `d logit / d b_w = 1`.
    fn trains_bias(&self) -> bool;
}

pub struct PmiScore;

impl Score for PmiScore {
    fn logit(&self, params: &ModelParams, context: &[f64], word: WordId) -> Result<f64> {
        Ok(params.score_pmi(context, word))
    }

    fn trains_bias(&self) -> bool {
        false
    }
}

pub struct NceScore<'a> {
    pub dist: &'a UnigramDistribution,
    pub k: usize,
}

impl Score for NceScore<'_> {
    fn logit(&self, params: &ModelParams, context: &[f64], word: WordId) -> Result<f64> {
        params.score_nce(context, word, self.dist, self.k)
    }

    fn trains_bias(&self) -> bool {
        true
    }
}

/// `noise` is `B × T × k`; repeated ids accumulate.
pub fn common_form<S: Score + ?Sized>(
    score: &S,
    params: &ModelParams,
    context: ArrayView3<'_, f64>,
    targets: ArrayView2<'_, WordId>,
    noise: ArrayView3<'_, WordId>,
) -> Result<StepLoss> {
    let (batch, steps, d) = context.dim();
    if targets.dim() != (batch, steps) || noise.dim().0 != batch || noise.dim().1 != steps {
        return Err(Error::ShapeMismatch {
            name: "targets/noise".into(),
            expected: vec![batch, steps],
            found: targets.shape().to_vec(),
        });
    }
    if d != params.hidden() {
        return Err(Error::ShapeMismatch {
            name: "context".into(),
            expected: vec![batch, steps, params.hidden()],
            found: context.shape().to_vec(),
        });
    }
    let trains_bias = score.trains_bias() && params.nce_bias.is_some();
    let tokens = batch * steps;
    let scale = 1.0 / tokens as f64;

    let mut grad_context = Array3::zeros((batch, steps, d));
    let mut out_grad = SparseRows::new(d);
    let mut bias_grad = trains_bias.then(|| SparseRows::new(1));
    let mut total = 0.0;

    let mut push = |word: WordId, dlogit: f64, c: &[f64], gc: &mut [f64]| {
        let w = params.output_embed.row(word as usize);
        for (g, &wv) in gc.iter_mut().zip(w.iter()) {
            *g += dlogit * wv;
        }
        for (g, &cv) in out_grad.row_mut(word).iter_mut().zip(c) {
            *g += dlogit * cv;
        }
        if let Some(bg) = bias_grad.as_mut() {
            bg.row_mut(word)[0] += dlogit;
        }
    };

    for b in 0..batch {
        for t in 0..steps {
            let c_view = context.slice(ndarray::s![b, t, ..]);
            let c_owned;
            let c = match c_view.as_slice() {
                Some(s) => s,
                None => {
                    c_owned = c_view.to_vec();
                    &c_owned
                }
            };
            let mut gc = vec![0.0; d];

            let word = targets[[b, t]];
            let x = score.logit(params, c, word)?;
            total -= log_sigmoid(x);
            // d/dx of −log σ(x) = σ(x) − 1 = −σ(−x)
            push(word, -sigmoid(-x) * scale, c, &mut gc);

            for &u in noise.slice(ndarray::s![b, t, ..]).iter() {
                let x = score.logit(params, c, u)?;
                total -= log_sigmoid(-x);
                push(u, sigmoid(x) * scale, c, &mut gc);
            }
            grad_context
                .slice_mut(ndarray::s![b, t, ..])
                .iter_mut()
                .zip(gc)
                .for_each(|(g, v)| *g = v);
        }
    }

    let value = total * scale;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(StepLoss {
        value,
        tokens,
        grad_context,
        output_embed: out_grad,
        nce_bias: bias_grad,
    })
}

/// Negative-sampling loss `−mean[log σ(w·c) + Σ log σ(−u_i·c)]`.
pub fn neg_loss(
    params: &ModelParams,
    context: ArrayView3<'_, f64>,
    targets: ArrayView2<'_, WordId>,
    noise: ArrayView3<'_, WordId>,
) -> Result<StepLoss> {
    common_form(&PmiScore, params, context, targets, noise)
}

/// NCE loss with `Z_c = 1`; gradients also reach `b_w`.
pub fn nce_loss(
    params: &ModelParams,
    context: ArrayView3<'_, f64>,
    targets: ArrayView2<'_, WordId>,
    noise: ArrayView3<'_, WordId>,
    dist: &UnigramDistribution,
    k: usize,
) -> Result<StepLoss> {
    common_form(&NceScore { dist, k }, params, context, targets, noise)
}
