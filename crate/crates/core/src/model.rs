//! Model parameters and the LSTM context encoder.
//!
//! The context vector for predicting `targets[b][t]` is the top LSTM layer's
//! hidden state after reading `inputs[b][t]`. Word vectors live in a separate
//! output embedding table of the same width, so scores are plain dot
//! products. Gate layout in the fused weight matrix is `[i | f | g | o]`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::config::ModelConfig;
use crate::corpus::{UnigramDistribution, WordId};
use crate::numeric::{dot, sigmoid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Negative sampling; test distribution `∝ exp(w·c) p(w)`.
    Pmi,
    /// Noise-contrastive estimation with `Z_c = 1`; test distribution `∝ exp(w·c + b_w)`.
    Nce,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pmi" => Ok(Mode::Pmi),
            "nce" => Ok(Mode::Nce),
            other => Err(format!("unknown mode {other:?} (expected pmi or nce)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pmi => "pmi",
            Mode::Nce => "nce",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// `(input + hidden) × 4·hidden`.
    pub weights: Array2<f64>,
    /// `4·hidden`.
    pub bias: Array1<f64>,
}

impl LstmLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.nrows() - self.hidden()
    }

    pub fn hidden(&self) -> usize {
        self.bias.len() / 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input_embed: Array2<f64>,
    pub layers: Vec<LstmLayer>,
    pub output_embed: Array2<f64>,
    /// Present only in NCE mode.
    pub nce_bias: Option<Array1<f64>>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

impl ModelParams {
    /// Weights and embeddings uniform in `±init_scale`, forget-gate bias
    /// `forget_bias`, other gate biases zero, NCE bias `-ln |V|`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden);
        let scale = config.init_scale;
        let input_embed = uniform(rng, (v, d), scale);
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { d } else { h };
                let mut bias = Array1::zeros(4 * h);
                bias.slice_mut(s![h..2 * h]).fill(config.forget_bias);
                LstmLayer {
                    weights: uniform(rng, (input + h, 4 * h), scale),
                    bias,
                }
            })
            .collect();
        let output_embed = uniform(rng, (v, h), scale);
        let nce_bias = match config.mode {
            Mode::Nce => Some(Array1::from_elem(v, -(v as f64).ln())),
            Mode::Pmi => None,
        };
        Ok(ModelParams {
            config: config.clone(),
            input_embed,
            layers,
            output_embed,
            nce_bias,
        })
    }

    /// All-zero parameters (NCE bias included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden);
        Ok(ModelParams {
            config: config.clone(),
            input_embed: Array2::zeros((v, d)),
            layers: (0..config.layers)
                .map(|l| LstmLayer {
                    weights: Array2::zeros((if l == 0 { d } else { h } + h, 4 * h)),
                    bias: Array1::zeros(4 * h),
                })
                .collect(),
            output_embed: Array2::zeros((v, h)),
            nce_bias: (config.mode == Mode::Nce).then(|| Array1::zeros(v)),
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.output_embed.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.output_embed.ncols()
    }

    /// Pre-sigmoid PMI-LM logit `w · c`.
    pub fn score_pmi(&self, context: &[f64], word: WordId) -> f64 {
        dot(
            self.output_embed
                .row(word as usize)
                .as_slice()
                .expect("standard layout"),
            context,
        )
    }

    /// Pre-sigmoid NCE-LM logit `w · c + b_w − ln(k p(w))`, i.e. with `ln Z_c = 0`.
    pub fn score_nce(
        &self,
        context: &[f64],
        word: WordId,
        dist: &UnigramDistribution,
        k: usize,
    ) -> Result<f64> {
        let p = dist.prob(word);
        if p <= 0.0 {
            return Err(Error::ZeroProbability(word));
        }
        let bias = self.nce_bias.as_ref().map_or(0.0, |b| b[word as usize]);
        Ok(self.score_pmi(context, word) + bias - (k as f64 * p).ln())
    }

    /// Expected `(name, dims)` of every tensor, in serialization order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden);
        let mut out = vec![("input_embed".to_string(), vec![v, d])];
        for l in 0..config.layers {
            let input = if l == 0 { d } else { h };
            out.push((format!("lstm.{l}.weights"), vec![input + h, 4 * h]));
            out.push((format!("lstm.{l}.bias"), vec![4 * h]));
        }
        out.push(("output_embed".to_string(), vec![v, h]));
        if config.mode == Mode::Nce {
            out.push(("nce_bias".to_string(), vec![v]));
        }
        out
    }

    /// Flat views of every tensor in `layout` order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.input_embed.as_slice().unwrap()];
        for layer in &self.layers {
            out.push(layer.weights.as_slice().unwrap());
            out.push(layer.bias.as_slice().unwrap());
        }
        out.push(self.output_embed.as_slice().unwrap());
        if let Some(b) = &self.nce_bias {
            out.push(b.as_slice().unwrap());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.input_embed.as_slice_mut().unwrap()];
        for layer in &mut self.layers {
            out.push(layer.weights.as_slice_mut().unwrap());
            out.push(layer.bias.as_slice_mut().unwrap());
        }
        out.push(self.output_embed.as_slice_mut().unwrap());
        if let Some(b) = &mut self.nce_bias {
            out.push(b.as_slice_mut().unwrap());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Runs the encoder over a `B × T` window starting from `state`.
    ///
    /// In train mode, inverted dropout is applied to every layer's
    /// non-recurrent input; the top layer's output is left untouched.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        inputs: ArrayView2<'_, WordId>,
        state: &LstmState,
        train: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let (batch, steps) = inputs.dim();
        let d = self.config.embed_dim;
        state.check(self, batch)?;
        if let Some(&bad) = inputs.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(Error::InvalidArgument(format!(
                "input id {bad} outside vocabulary of {}",
                self.vocab_size()
            )));
        }

        let mut layer_in = Array3::zeros((batch, steps, d));
        for ((b, t), &id) in inputs.indexed_iter() {
            layer_in
                .slice_mut(s![b, t, ..])
                .assign(&self.input_embed.row(id as usize));
        }

        let keep = 1.0 - self.config.dropout;
        let mut new_state = state.clone();
        let mut layer_tapes = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = if train && self.config.dropout > 0.0 {
                let mask = Array3::from_shape_simple_fn(layer_in.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                layer_in *= &mask;
                Some(mask)
            } else {
                None
            };
            let (out, step_tapes) =
                run_layer(layer, l, layer_in.view(), &mut new_state.h[l], &mut new_state.c[l])?;
            layer_tapes.push(LayerTape {
                steps: step_tapes,
                mask,
            });
            layer_in = out;
        }

        Ok(Forward {
            context: layer_in,
            state: new_state,
            tape: Tape {
                inputs: inputs.to_owned(),
                layers: layer_tapes,
                consumed: false,
            },
        })
    }

    /// Reverse pass through the window recorded in `tape`.
    ///
    /// The incoming state is a truncation boundary and receives no gradient.
    /// Output-embedding and bias gradients come from the objective, so they
    /// are left empty here.
    pub fn backward(&self, tape: &mut Tape, grad_context: ArrayView3<'_, f64>) -> Result<Gradients> {
        if tape.consumed {
            return Err(Error::TapeConsumed);
        }
        tape.consumed = true;
        let layer_tapes = std::mem::take(&mut tape.layers);
        let (batch, steps) = tape.inputs.dim();
        let expected = [batch, steps, self.hidden()];
        if grad_context.shape() != expected {
            return Err(Error::ShapeMismatch {
                name: "grad_context".into(),
                expected: expected.to_vec(),
                found: grad_context.shape().to_vec(),
            });
        }

        let mut grads = Gradients::zeros(self);
        let mut grad_out = grad_context.to_owned();
        for (l, lt) in layer_tapes.into_iter().enumerate().rev() {
            let layer = &self.layers[l];
            let lg = &mut grads.layers[l];
            let mut grad_in = backprop_layer(layer, lt.steps, grad_out.view(), lg);
            if let Some(mask) = lt.mask {
                grad_in *= &mask;
            }
            grad_out = grad_in;
        }

        for ((b, t), &id) in tape.inputs.indexed_iter() {
            let row = grads.input_embed.row_mut(id);
            for (g, x) in row.iter_mut().zip(grad_out.slice(s![b, t, ..])) {
                *g += x;
            }
        }
        Ok(grads)
    }
}

fn run_layer(
    layer: &LstmLayer,
    layer_idx: usize,
    input: ArrayView3<'_, f64>,
    h: &mut Array2<f64>,
    c: &mut Array2<f64>,
) -> Result<(Array3<f64>, Vec<StepTape>)> {
    let (batch, steps, in_dim) = input.dim();
    let hid = layer.hidden();
    let mut out = Array3::zeros((batch, steps, hid));
    let mut tapes = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut xh = Array2::zeros((batch, in_dim + hid));
        xh.slice_mut(s![.., ..in_dim]).assign(&input.slice(s![.., t, ..]));
        xh.slice_mut(s![.., in_dim..]).assign(h);

        let mut gates = xh.dot(&layer.weights);
        gates += &layer.bias;
        for mut row in gates.rows_mut() {
            for (j, a) in row.iter_mut().enumerate() {
                *a = if j >= 2 * hid && j < 3 * hid {
                    a.tanh()
                } else {
                    sigmoid(*a)
                };
            }
        }

        let c_prev = c.clone();
        let mut tanh_c = Array2::zeros((batch, hid));
        {
            let i = gates.slice(s![.., ..hid]);
            let f = gates.slice(s![.., hid..2 * hid]);
            let g = gates.slice(s![.., 2 * hid..3 * hid]);
            let o = gates.slice(s![.., 3 * hid..]);
            for b in 0..batch {
                for j in 0..hid {
                    let cell = f[[b, j]] * c[[b, j]] + i[[b, j]] * g[[b, j]];
                    c[[b, j]] = cell;
                    tanh_c[[b, j]] = cell.tanh();
                    h[[b, j]] = o[[b, j]] * cell.tanh();
                }
            }
        }
        if !h.iter().chain(c.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFiniteActivation {
                step: t,
                layer: layer_idx,
            });
        }
        out.slice_mut(s![.., t, ..]).assign(h);
        tapes.push(StepTape {
            xh,
            gates,
            c_prev,
            tanh_c,
        });
    }
    Ok((out, tapes))
}

fn backprop_layer(
    layer: &LstmLayer,
    steps: Vec<StepTape>,
    grad_out: ArrayView3<'_, f64>,
    grads: &mut LayerGrad,
) -> Array3<f64> {
    let (batch, n_steps, hid) = grad_out.dim();
    let in_dim = layer.input_dim();
    let mut grad_in = Array3::zeros((batch, n_steps, in_dim));
    let mut dh_next = Array2::<f64>::zeros((batch, hid));
    let mut dc_next = Array2::<f64>::zeros((batch, hid));
    let mut da = Array2::<f64>::zeros((batch, 4 * hid));

    for (t, st) in steps.into_iter().enumerate().rev() {
        let i = st.gates.slice(s![.., ..hid]);
        let f = st.gates.slice(s![.., hid..2 * hid]);
        let g = st.gates.slice(s![.., 2 * hid..3 * hid]);
        let o = st.gates.slice(s![.., 3 * hid..]);
        let dh = &grad_out.slice(s![.., t, ..]) + &dh_next;

        for b in 0..batch {
            for j in 0..hid {
                let (ib, fb, gb, ob) = (i[[b, j]], f[[b, j]], g[[b, j]], o[[b, j]]);
                let tc = st.tanh_c[[b, j]];
                let dhb = dh[[b, j]];
                let dc = dc_next[[b, j]] + dhb * ob * (1.0 - tc * tc);
                da[[b, j]] = dc * gb * ib * (1.0 - ib);
                da[[b, hid + j]] = dc * st.c_prev[[b, j]] * fb * (1.0 - fb);
                da[[b, 2 * hid + j]] = dc * ib * (1.0 - gb * gb);
                da[[b, 3 * hid + j]] = dhb * tc * ob * (1.0 - ob);
                dc_next[[b, j]] = dc * fb;
            }
        }

        general_mat_mul(1.0, &st.xh.t(), &da, 1.0, &mut grads.weights);
        grads.bias += &da.sum_axis(Axis(0));
        let dxh = da.dot(&layer.weights.t());
        grad_in
            .slice_mut(s![.., t, ..])
            .assign(&dxh.slice(s![.., ..in_dim]));
        dh_next.assign(&dxh.slice(s![.., in_dim..]));
    }
    grad_in
}

/// Per-layer recurrent state, `B × hidden` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Array2<f64>>,
    pub c: Vec<Array2<f64>>,
}

impl LstmState {
    pub fn zeros(params: &ModelParams, batch: usize) -> Self {
        let n = params.layers.len();
        let h = params.config.hidden;
        LstmState {
            h: vec![Array2::zeros((batch, h)); n],
            c: vec![Array2::zeros((batch, h)); n],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.h.first().map_or(0, |h| h.nrows())
    }

    /// Hidden state of the top layer: the context for the next prediction.
    pub fn top(&self) -> ArrayView2<'_, f64> {
        self.h.last().expect("at least one layer").view()
    }

    /// Rows `range` of every layer.
    pub fn select_rows(&self, range: std::ops::Range<usize>) -> Self {
        LstmState {
            h: self.h.iter().map(|a| a.slice(s![range.clone(), ..]).to_owned()).collect(),
            c: self.c.iter().map(|a| a.slice(s![range.clone(), ..]).to_owned()).collect(),
        }
    }

    /// Stacks row blocks back together, in order.
    pub fn concat_rows(parts: &[LstmState]) -> Self {
        let layers = parts[0].h.len();
        let stack = |get: &dyn Fn(&LstmState) -> &Vec<Array2<f64>>, l: usize| {
            let views: Vec<_> = parts.iter().map(|p| get(p)[l].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("matching widths")
        };
        LstmState {
            h: (0..layers).map(|l| stack(&|p| &p.h, l)).collect(),
            c: (0..layers).map(|l| stack(&|p| &p.c, l)).collect(),
        }
    }

    fn check(&self, params: &ModelParams, batch: usize) -> Result<()> {
        let expected = [batch, params.config.hidden];
        if self.h.len() != params.layers.len() || self.c.len() != params.layers.len() {
            return Err(Error::ShapeMismatch {
                name: "state layers".into(),
                expected: vec![params.layers.len()],
                found: vec![self.h.len()],
            });
        }
        for a in self.h.iter().chain(&self.c) {
            if a.shape() != expected {
                return Err(Error::ShapeMismatch {
                    name: "state".into(),
                    expected: expected.to_vec(),
                    found: a.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

pub struct Forward {
    /// `B × T × hidden`.
    pub context: Array3<f64>,
    pub state: LstmState,
    pub tape: Tape,
}

/// Intermediates retained by `forward` for a single `backward`.
pub struct Tape {
    inputs: Array2<WordId>,
    layers: Vec<LayerTape>,
    consumed: bool,
}

struct LayerTape {
    steps: Vec<StepTape>,
    mask: Option<Array3<f64>>,
}

struct StepTape {
    xh: Array2<f64>,
    /// Post-activation `[i | f | g | o]`.
    gates: Array2<f64>,
    c_prev: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Row-sparse gradient for an embedding-like table, rows keyed by word id in
/// first-touch order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    width: usize,
    index: HashMap<WordId, usize>,
    ids: Vec<WordId>,
    data: Vec<f64>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        SparseRows {
            width,
            ..Default::default()
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Zero-initialized on first touch.
    pub fn row_mut(&mut self, id: WordId) -> &mut [f64] {
        let w = self.width;
        let slot = *self.index.entry(id).or_insert_with(|| {
            self.ids.push(id);
            self.data.resize(self.data.len() + w, 0.0);
            self.ids.len() - 1
        });
        &mut self.data[slot * w..(slot + 1) * w]
    }

    pub fn row(&self, id: WordId) -> Option<&[f64]> {
        self.index
            .get(&id)
            .map(|&slot| &self.data[slot * self.width..(slot + 1) * self.width])
    }

    pub fn iter(&self) -> impl Iterator<Item = (WordId, &[f64])> {
        self.ids.iter().copied().zip(self.data.chunks(self.width.max(1)))
    }

    pub fn add_assign(&mut self, other: &SparseRows) {
        for (id, row) in other.iter() {
            for (a, b) in self.row_mut(id).iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Dense `rows × width` copy.
    pub fn to_dense(&self, rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.width];
        for (id, row) in self.iter() {
            let start = id as usize * self.width;
            out[start..start + self.width].copy_from_slice(row);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub input_embed: SparseRows,
    pub layers: Vec<LayerGrad>,
    pub output_embed: SparseRows,
    /// Width-1 rows; present only in NCE mode.
    pub nce_bias: Option<SparseRows>,
}

/// One tensor's gradient, aligned with `ModelParams::tensors`.
pub enum GradRef<'a> {
    Dense(&'a [f64]),
    Sparse(&'a SparseRows),
}

impl Gradients {
    pub fn zeros(params: &ModelParams) -> Self {
        Gradients {
            input_embed: SparseRows::new(params.input_embed.ncols()),
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            output_embed: SparseRows::new(params.hidden()),
            nce_bias: params.nce_bias.as_ref().map(|_| SparseRows::new(1)),
        }
    }

    pub fn tensors(&self) -> Vec<GradRef<'_>> {
        let mut out = vec![GradRef::Sparse(&self.input_embed)];
        for l in &self.layers {
            out.push(GradRef::Dense(l.weights.as_slice().unwrap()));
            out.push(GradRef::Dense(l.bias.as_slice().unwrap()));
        }
        out.push(GradRef::Sparse(&self.output_embed));
        if let Some(b) = &self.nce_bias {
            out.push(GradRef::Sparse(b));
        }
        out
    }

    /// Dense copies aligned with `ModelParams::tensors`.
    pub fn to_dense(&self, params: &ModelParams) -> Vec<Vec<f64>> {
        self.tensors()
            .into_iter()
            .zip(params.tensors())
            .map(|(g, p)| match g {
                GradRef::Dense(d) => d.to_vec(),
                GradRef::Sparse(s) => s.to_dense(p.len() / s.width()),
            })
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        let mut sum = self.input_embed.sum_sq() + self.output_embed.sum_sq();
        for l in &self.layers {
            sum += l.weights.iter().map(|x| x * x).sum::<f64>();
            sum += l.bias.iter().map(|x| x * x).sum::<f64>();
        }
        if let Some(b) = &self.nce_bias {
            sum += b.sum_sq();
        }
        sum.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.input_embed.scale(factor);
        self.output_embed.scale(factor);
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
        if let Some(b) = &mut self.nce_bias {
            b.scale(factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.input_embed.add_assign(&other.input_embed);
        self.output_embed.add_assign(&other.output_embed);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
        if let (Some(a), Some(b)) = (&mut self.nce_bias, &other.nce_bias) {
            a.add_assign(b);
        }
    }
}
