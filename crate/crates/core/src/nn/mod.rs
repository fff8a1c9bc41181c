//! Bidirectional LSTM encoder, LSTM decoder with local attention, and a
//! sigmoid multi-label head, trained with Adam on smoothed binary targets.

mod checkpoint;
mod tape;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use tape::Tensor;
use tape::{Graph, Id};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("time step {t} outside 0..{len}")]
    TimeStep { t: usize, len: usize },
    #[error("loss became {loss} in epoch {epoch}; try a smaller learning rate than {lr}")]
    NonFiniteLoss { epoch: usize, loss: f64, lr: f64 },
    #[error("gradient check failed on {block}: relative error {error:.3e}")]
    GradCheck { block: String, error: f64 },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub encoder_hidden: usize,
    pub layers: usize,
    /// Attention half-width D.
    pub window: usize,
    pub dropout: f64,
    pub label_smooth: f64,
}

impl Seq2SeqConfig {
    /// Desk-scale defaults: hidden 32, two layers, D = 5.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            encoder_hidden: 32,
            layers: 2,
            window: 5,
            dropout: 0.25,
            label_smooth: 0.1,
        }
    }

    pub fn decoder_hidden(&self) -> usize {
        2 * self.encoder_hidden
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.input_dim == 0 || self.output_dim == 0 || self.encoder_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.layers == 0 {
            return bad("at least one layer");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.label_smooth) {
            return bad("label smoothing must lie in [0, 0.5)");
        }
        Ok(())
    }

    /// Parameter blocks in storage order: name, rows, cols, init fan-in.
    fn blocks(&self) -> Vec<(String, usize, usize, usize)> {
        let (h, hd) = (self.encoder_hidden, self.decoder_hidden());
        let mut out = Vec::new();
        for l in 0..self.layers {
            let inp = if l == 0 { self.input_dim } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                out.push((format!("enc.{l}.{dir}.wx"), inp, 4 * h, inp));
                out.push((format!("enc.{l}.{dir}.wh"), h, 4 * h, h));
                out.push((format!("enc.{l}.{dir}.b"), 1, 4 * h, h));
            }
        }
        for l in 0..self.layers {
            let inp = if l == 0 { self.output_dim } else { hd };
            out.push((format!("dec.{l}.wx"), inp, 4 * hd, inp));
            out.push((format!("dec.{l}.wh"), hd, 4 * hd, hd));
            out.push((format!("dec.{l}.b"), 1, 4 * hd, hd));
        }
        out.push(("attn.w_alpha".into(), hd, 2 * h, hd));
        out.push(("head.w1".into(), 2 * h + hd, hd, 2 * h + hd));
        out.push(("head.b1".into(), 1, hd, 2 * h + hd));
        out.push(("head.w2".into(), hd, self.output_dim, hd));
        out.push(("head.b2".into(), 1, self.output_dim, hd));
        out
    }

    fn enc(&self, layer: usize, dir: usize) -> usize {
        (layer * 2 + dir) * 3
    }

    fn dec(&self, layer: usize) -> usize {
        self.layers * 6 + layer * 3
    }

    fn attn(&self) -> usize {
        self.layers * 9
    }

    fn head(&self) -> usize {
        self.layers * 9 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub config: Seq2SeqConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Seq2SeqModel {
    /// Uniform initialization in ±1/√fan-in.
    pub fn new(config: Seq2SeqConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, rows, cols, fan_in) in config.blocks() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            names.push(name);
            params.push(Tensor::from_vec(rows, cols, data));
        }
        Ok(Self { config, names, params })
    }

    pub(crate) fn from_blocks(config: Seq2SeqConfig, blocks: Vec<(String, Tensor)>) -> Result<Self, NnError> {
        config.validate()?;
        let expected = config.blocks();
        if expected.len() != blocks.len() {
            return Err(NnError::Shape(format!("expected {} parameter blocks, found {}", expected.len(), blocks.len())));
        }
        for ((name, rows, cols, _), (got, t)) in expected.iter().zip(&blocks) {
            if name != got || t.rows != *rows || t.cols != *cols {
                return Err(NnError::Shape(format!(
                    "block {got} {}x{} does not match {name} {rows}x{cols}",
                    t.rows, t.cols
                )));
            }
        }
        let (names, params) = blocks.into_iter().unzip();
        Ok(Self { config, names, params })
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn bind(&self, g: &mut Graph, track: bool) -> Vec<Id> {
        self.params
            .iter()
            .map(|p| if track { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }
}

/// Inverted dropout masks drawn from a seeded stream.
struct Dropout<'r> {
    rate: f64,
    rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Id) -> Id {
        if self.rate == 0.0 {
            return x;
        }
        let v = g.value(x);
        let keep = 1.0 / (1.0 - self.rate);
        let data = (0..v.data.len())
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let mask = g.constant(Tensor::from_vec(v.rows, v.cols, data));
        g.mul(x, mask)
    }
}

fn lstm_step(g: &mut Graph, w: &[Id], x: Id, h: Id, c: Id, hidden: usize) -> (Id, Id) {
    let a = g.matmul(x, w[0]);
    let b = g.matmul(h, w[1]);
    let s = g.add(a, b);
    let gates = g.add_row(s, w[2]);
    let hc = g.lstm(gates, c);
    (g.slice(hc, 0, hidden), g.slice(hc, hidden, hidden))
}

/// Top-layer encoder states per period: `(fwd, bwd)`, each `B×H`.
fn encode(g: &mut Graph, p: &[Id], cfg: &Seq2SeqConfig, xs: &[Id], mut drop: Option<&mut Dropout>) -> Vec<(Id, Id)> {
    let h = cfg.encoder_hidden;
    let batch = g.value(xs[0]).rows;
    let mut inputs = xs.to_vec();
    let mut states = Vec::new();
    for l in 0..cfg.layers {
        let mut fwd = Vec::with_capacity(inputs.len());
        let mut bwd = vec![0; inputs.len()];
        for dir in 0..2 {
            let w = &p[cfg.enc(l, dir)..cfg.enc(l, dir) + 3];
            let mut hs = g.constant(Tensor::zeros(batch, h));
            let mut cs = g.constant(Tensor::zeros(batch, h));
            let order: Vec<usize> = if dir == 0 {
                (0..inputs.len()).collect()
            } else {
                (0..inputs.len()).rev().collect()
            };
            for t in order {
                (hs, cs) = lstm_step(g, w, inputs[t], hs, cs, h);
                if dir == 0 {
                    fwd.push(hs);
                } else {
                    bwd[t] = hs;
                }
            }
        }
        states = fwd.iter().copied().zip(bwd.iter().copied()).collect();
        if l + 1 < cfg.layers {
            inputs = states
                .iter()
                .map(|&(f, b)| {
                    let cat = g.concat(&[f, b]);
                    match drop.as_deref_mut() {
                        Some(d) => d.apply(g, cat),
                        None => cat,
                    }
                })
                .collect();
        }
    }
    states
}

/// Clipped attention window around period `t`.
pub fn attention_window(t: usize, len: usize, d: usize) -> Range<usize> {
    t.saturating_sub(d)..(t + d + 1).min(len)
}

struct StepOut {
    logits: Id,
    attention: Id,
}

/// One decoder step; `state` holds `(h, c)` per layer and is updated in place.
#[allow(clippy::too_many_arguments)]
fn decode_step(
    g: &mut Graph,
    p: &[Id],
    cfg: &Seq2SeqConfig,
    y_prev: Id,
    state: &mut [(Id, Id)],
    enc: &[Id],
    t: usize,
    mut drop: Option<&mut Dropout>,
) -> StepOut {
    let hd = cfg.decoder_hidden();
    let mut input = y_prev;
    for l in 0..cfg.layers {
        let w = &p[cfg.dec(l)..cfg.dec(l) + 3];
        let (h, c) = lstm_step(g, w, input, state[l].0, state[l].1, hd);
        state[l] = (h, c);
        input = match drop.as_deref_mut() {
            Some(d) if l + 1 < cfg.layers => d.apply(g, h),
            _ => h,
        };
    }
    let top = state[cfg.layers - 1].0;
    let query = g.matmul(top, p[cfg.attn()]);
    let win = attention_window(t, enc.len(), cfg.window);
    let scores: Vec<Id> = win.clone().map(|i| g.row_dot(query, enc[i])).collect();
    let scores = g.concat(&scores);
    let attention = g.softmax_rows(scores);
    let mut context = None;
    for (k, i) in win.enumerate() {
        let part = g.scale_by_col(attention, k, enc[i]);
        context = Some(match context {
            None => part,
            Some(acc) => g.add(acc, part),
        });
    }
    let z = g.concat(&[context.expect("window is never empty"), top]);
    let hp = &p[cfg.head()..cfg.head() + 4];
    let a = g.matmul(z, hp[0]);
    let a = g.add_row(a, hp[1]);
    let hidden = g.tanh(a);
    let o = g.matmul(hidden, hp[2]);
    let logits = g.add_row(o, hp[3]);
    StepOut { logits, attention }
}

fn check_inputs(cfg: &Seq2SeqConfig, inputs: &Tensor) -> Result<(), NnError> {
    if inputs.cols != cfg.input_dim {
        return Err(NnError::Shape(format!("inputs have {} features, model expects {}", inputs.cols, cfg.input_dim)));
    }
    if inputs.rows == 0 {
        return Err(NnError::Shape("empty sequence".into()));
    }
    Ok(())
}

/// Splits a `T×n` tensor into `T` row constants of shape `1×n`.
fn row_constants(g: &mut Graph, x: &Tensor) -> Vec<Id> {
    (0..x.rows)
        .map(|t| g.constant(Tensor::from_vec(1, x.cols, x.row(t).to_vec())))
        .collect()
}

/// Top-layer encoder hidden states, `T×H` each.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub forward: Tensor,
    pub backward: Tensor,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.forward.rows
    }

    pub fn is_empty(&self) -> bool {
        self.forward.rows == 0
    }
}

/// Runs the encoder (dropout off) on a `T×input_dim` sequence.
pub fn encoder_forward(model: &Seq2SeqModel, inputs: &Tensor) -> Result<EncoderStates, NnError> {
    let cfg = &model.config;
    check_inputs(cfg, inputs)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xs = row_constants(&mut g, inputs);
    let states = encode(&mut g, &p, cfg, &xs, None);
    let h = cfg.encoder_hidden;
    let mut out = EncoderStates {
        forward: Tensor::zeros(inputs.rows, h),
        backward: Tensor::zeros(inputs.rows, h),
    };
    for (t, &(f, b)) in states.iter().enumerate() {
        out.forward.data[t * h..(t + 1) * h].copy_from_slice(&g.value(f).data);
        out.backward.data[t * h..(t + 1) * h].copy_from_slice(&g.value(b).data);
    }
    Ok(out)
}

/// Decoder `(h, c)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl DecoderState {
    pub fn zeros(config: &Seq2SeqConfig) -> Self {
        let z = vec![vec![0.0; config.decoder_hidden()]; config.layers];
        Self { h: z.clone(), c: z }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStep {
    pub probabilities: Vec<f64>,
    pub state: DecoderState,
    /// Weights over `window`, summing to one.
    pub attention: Vec<f64>,
    pub window: Range<usize>,
}

/// One decoding step at period `t` (0-based).
pub fn decoder_attend_predict(
    model: &Seq2SeqModel,
    y_prev: &[f64],
    state: &DecoderState,
    encoder: &EncoderStates,
    t: usize,
) -> Result<DecoderStep, NnError> {
    let cfg = &model.config;
    let len = encoder.len();
    if t >= len {
        return Err(NnError::TimeStep { t, len });
    }
    if y_prev.len() != cfg.output_dim {
        return Err(NnError::Shape(format!("previous output has {} entries, expected {}", y_prev.len(), cfg.output_dim)));
    }
    if state.h.len() != cfg.layers || state.h.iter().chain(&state.c).any(|v| v.len() != cfg.decoder_hidden()) {
        return Err(NnError::Shape("decoder state does not match the model".into()));
    }
    if encoder.forward.cols != cfg.encoder_hidden {
        return Err(NnError::Shape("encoder states do not match the model".into()));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let h = cfg.encoder_hidden;
    let enc: Vec<Id> = (0..len)
        .map(|i| {
            let mut row = encoder.forward.row(i).to_vec();
            row.extend_from_slice(encoder.backward.row(i));
            g.constant(Tensor::from_vec(1, 2 * h, row))
        })
        .collect();
    let mut st: Vec<(Id, Id)> = (0..cfg.layers)
        .map(|l| {
            let hd = cfg.decoder_hidden();
            let hh = g.constant(Tensor::from_vec(1, hd, state.h[l].clone()));
            let cc = g.constant(Tensor::from_vec(1, hd, state.c[l].clone()));
            (hh, cc)
        })
        .collect();
    let y = g.constant(Tensor::from_vec(1, cfg.output_dim, y_prev.to_vec()));
    let out = decode_step(&mut g, &p, cfg, y, &mut st, &enc, t, None);
    let probs = g.sigmoid(out.logits);
    Ok(DecoderStep {
        probabilities: g.value(probs).data.clone(),
        state: DecoderState {
            h: st.iter().map(|&(hh, _)| g.value(hh).data.clone()).collect(),
            c: st.iter().map(|&(_, cc)| g.value(cc).data.clone()).collect(),
        },
        attention: g.value(out.attention).data.clone(),
        window: attention_window(t, len, cfg.window),
    })
}

/// Greedy decoding: each step receives the previous prediction thresholded at 0.5.
/// Returns `T×output_dim` probabilities.
pub fn predict(model: &Seq2SeqModel, inputs: &Tensor) -> Result<Tensor, NnError> {
    let cfg = &model.config;
    check_inputs(cfg, inputs)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xs = row_constants(&mut g, inputs);
    let states = encode(&mut g, &p, cfg, &xs, None);
    let enc: Vec<Id> = states.iter().map(|&(f, b)| g.concat(&[f, b])).collect();
    let hd = cfg.decoder_hidden();
    let mut st: Vec<(Id, Id)> = (0..cfg.layers)
        .map(|_| (g.constant(Tensor::zeros(1, hd)), g.constant(Tensor::zeros(1, hd))))
        .collect();
    let mut y = g.constant(Tensor::zeros(1, cfg.output_dim));
    let mut out = Tensor::zeros(inputs.rows, cfg.output_dim);
    for t in 0..inputs.rows {
        let step = decode_step(&mut g, &p, cfg, y, &mut st, &enc, t, None);
        let probs = g.sigmoid(step.logits);
        let pv = g.value(probs).data.clone();
        let fed = pv.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        y = g.constant(Tensor::from_vec(1, cfg.output_dim, fed));
        out.data[t * cfg.output_dim..(t + 1) * cfg.output_dim].copy_from_slice(&pv);
    }
    Ok(out)
}

/// Smoothed target `y·(1−ε) + ε/2`.
pub fn smooth_label(y: f64, eps: f64) -> f64 {
    y * (1.0 - eps) + 0.5 * eps
}

/// A training pair: `T×input_dim` features and `T×output_dim` binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Tensor,
    pub labels: Tensor,
}

/// Builds the teacher-forced loss of a batch of equal-length examples.
/// The loss is the mean elementwise cross-entropy.
fn batch_loss(
    g: &mut Graph,
    p: &[Id],
    cfg: &Seq2SeqConfig,
    batch: &[&Example],
    mut drop: Option<&mut Dropout>,
) -> Id {
    let (b, len, od) = (batch.len(), batch[0].inputs.rows, cfg.output_dim);
    let stack = |f: &dyn Fn(&Example) -> &[f64]| {
        let mut data = Vec::with_capacity(b * f(batch[0]).len());
        for ex in batch {
            data.extend_from_slice(f(ex));
        }
        data
    };
    let xs: Vec<Id> = (0..len)
        .map(|t| {
            let data = stack(&|ex| ex.inputs.row(t));
            g.constant(Tensor::from_vec(b, cfg.input_dim, data))
        })
        .collect();
    let states = encode(g, p, cfg, &xs, drop.as_deref_mut());
    let enc: Vec<Id> = states.iter().map(|&(f, bw)| g.concat(&[f, bw])).collect();
    let hd = cfg.decoder_hidden();
    let mut st: Vec<(Id, Id)> = (0..cfg.layers)
        .map(|_| (g.constant(Tensor::zeros(b, hd)), g.constant(Tensor::zeros(b, hd))))
        .collect();
    let weight = 1.0 / (b * len * od) as f64;
    let mut y_prev = g.constant(Tensor::zeros(b, od));
    let mut total = None;
    for t in 0..len {
        let step = decode_step(g, p, cfg, y_prev, &mut st, &enc, t, drop.as_deref_mut());
        let raw = stack(&|ex| ex.labels.row(t));
        let smoothed = raw.iter().map(|&y| smooth_label(y, cfg.label_smooth)).collect();
        let target = g.constant(Tensor::from_vec(b, od, smoothed));
        let loss = g.bce_logits(step.logits, target, weight);
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss),
        });
        y_prev = g.constant(Tensor::from_vec(b, od, raw));
    }
    total.expect("sequence is never empty")
}

fn check_example(cfg: &Seq2SeqConfig, ex: &Example) -> Result<(), NnError> {
    check_inputs(cfg, &ex.inputs)?;
    if ex.labels.cols != cfg.output_dim || ex.labels.rows != ex.inputs.rows {
        return Err(NnError::Shape(format!(
            "labels {}x{} do not match inputs with {} periods and {} outputs",
            ex.labels.rows, ex.labels.cols, ex.inputs.rows, cfg.output_dim
        )));
    }
    Ok(())
}

/// Loss and per-block gradients of one batch (dropout off).
pub fn loss_and_gradients(model: &Seq2SeqModel, batch: &[&Example]) -> Result<(f64, Vec<Vec<f64>>), NnError> {
    for ex in batch {
        check_example(&model.config, ex)?;
    }
    Ok(loss_grads(model, batch, None))
}

fn loss_grads(model: &Seq2SeqModel, batch: &[&Example], drop: Option<&mut Dropout>) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let root = batch_loss(&mut g, &p, &model.config, batch, drop);
    g.backward(root);
    let grads = p
        .iter()
        .zip(&model.params)
        .map(|(&id, t)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect();
    (g.value(root).data[0], grads)
}

/// Mean loss (dropout off) without gradients.
pub fn evaluate_loss(model: &Seq2SeqModel, batch: &[&Example]) -> Result<f64, NnError> {
    for ex in batch {
        check_example(&model.config, ex)?;
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let root = batch_loss(&mut g, &p, &model.config, batch, None);
    Ok(g.value(root).data[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Seq2SeqModel, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut Seq2SeqModel, grads: &[Vec<f64>]) -> Result<(), NnError> {
        if grads.len() != model.params.len() || grads.iter().zip(&model.params).any(|(g, p)| g.len() != p.data.len()) {
            return Err(NnError::Shape("gradient blocks do not match the model".into()));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (param, grad)) in model.params.iter_mut().zip(grads).enumerate() {
            for (j, &gj) in grad.iter().enumerate() {
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                let mhat = *m / b1t;
                let vhat = *v / b2t;
                param.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

/// Teacher-forced training. Returns the mean loss of every epoch.
pub fn train(
    model: &mut Seq2SeqModel,
    data: &[Example],
    opts: &TrainOptions,
    adam: &mut AdamState,
) -> Result<Vec<f64>, NnError> {
    train_with(model, data, opts, adam, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss)` after each epoch.
pub fn train_with(
    model: &mut Seq2SeqModel,
    data: &[Example],
    opts: &TrainOptions,
    adam: &mut AdamState,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, NnError> {
    if data.is_empty() {
        return Err(NnError::Config("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(NnError::Config("batch size must be positive".into()));
    }
    for ex in data {
        check_example(&model.config, ex)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // batches never mix sequence lengths
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in data.iter().enumerate() {
        by_len.entry(ex.inputs.rows).or_default().push(i);
    }
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for idx in by_len.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(opts.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in &batches {
            let exs: Vec<&Example> = batch.iter().map(|&i| &data[i]).collect();
            let mut drop = Dropout {
                rate: model.config.dropout,
                rng: &mut rng,
            };
            let (loss, mut grads) = loss_grads(model, &exs, Some(&mut drop));
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, loss, lr: adam.lr });
            }
            if let Some(max) = opts.clip_norm {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    let s = max / norm;
                    grads.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            adam.update(model, &grads)?;
            sum += loss * exs.len() as f64;
        }
        let mean = sum / data.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_block: String,
    /// Largest relative error per parameter block.
    pub per_block: Vec<(String, f64)>,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-3;

/// Compares backprop gradients of a random tiny problem against central
/// finite differences on every parameter. Dropout is disabled.
pub fn grad_check(config: &Seq2SeqConfig, periods: usize, seed: u64) -> Result<GradCheckReport, NnError> {
    let mut config = config.clone();
    config.dropout = 0.0;
    let mut model = Seq2SeqModel::new(config, seed)?;
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let examples: Vec<Example> = (0..2)
        .map(|_| Example {
            inputs: Tensor::from_vec(
                periods,
                cfg.input_dim,
                (0..periods * cfg.input_dim).map(|_| rng.gen::<f64>()).collect(),
            ),
            labels: Tensor::from_vec(
                periods,
                cfg.output_dim,
                (0..periods * cfg.output_dim).map(|_| f64::from(rng.gen::<bool>() as u8)).collect(),
            ),
        })
        .collect();
    let batch: Vec<&Example> = examples.iter().collect();
    let (_, analytic) = loss_and_gradients(&model, &batch)?;
    let mut per_block = Vec::new();
    for k in 0..model.params.len() {
        let mut worst: f64 = 0.0;
        for j in 0..model.params[k].data.len() {
            let orig = model.params[k].data[j];
            model.params[k].data[j] = orig + GRAD_CHECK_STEP;
            let up = evaluate_loss(&model, &batch)?;
            model.params[k].data[j] = orig - GRAD_CHECK_STEP;
            let down = evaluate_loss(&model, &batch)?;
            model.params[k].data[j] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[k][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        per_block.push((model.names[k].clone(), worst));
    }
    let (worst_block, max_rel_error) = per_block
        .iter()
        .fold((String::new(), 0.0), |acc, (n, e)| if *e > acc.1 { (n.clone(), *e) } else { acc });
    if max_rel_error >= GRAD_CHECK_TOL {
        return Err(NnError::GradCheck {
            block: worst_block,
            error: max_rel_error,
        });
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_block,
        per_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Seq2SeqConfig {
        Seq2SeqConfig {
            input_dim: 3,
            output_dim: 2,
            encoder_hidden: 5,
            layers: 2,
            window: 1,
            dropout: 0.0,
            label_smooth: 0.1,
        }
    }

    fn seq(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen()).collect())
    }

    #[test]
    fn zero_model_zero_states() {
        let mut m = Seq2SeqModel::new(tiny(), 1).unwrap();
        m.params.iter_mut().for_each(|p| p.data.fill(0.0));
        let e = encoder_forward(&m, &Tensor::zeros(4, 3)).unwrap();
        assert!(e.forward.data.iter().chain(&e.backward.data).all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_shapes() {
        let cfg = Seq2SeqConfig {
            input_dim: 9,
            encoder_hidden: 16,
            ..tiny()
        };
        let m = Seq2SeqModel::new(cfg, 2).unwrap();
        let e = encoder_forward(&m, &seq(7, 9, 3)).unwrap();
        assert_eq!(e.forward.shape(), [7, 16]);
        assert_eq!(e.backward.shape(), [7, 16]);
    }

    #[test]
    fn backward_direction_is_reversed_forward() {
        let cfg = Seq2SeqConfig { layers: 1, ..tiny() };
        let mut m = Seq2SeqModel::new(cfg, 4).unwrap();
        for part in ["wx", "wh", "b"] {
            let f = m.block_mut(&format!("enc.0.fwd.{part}")).unwrap().clone();
            *m.block_mut(&format!("enc.0.bwd.{part}")).unwrap() = f;
        }
        let x = seq(6, 3, 5);
        let mut rev = Tensor::zeros(6, 3);
        for t in 0..6 {
            rev.data[t * 3..(t + 1) * 3].copy_from_slice(x.row(5 - t));
        }
        let a = encoder_forward(&m, &x).unwrap();
        let b = encoder_forward(&m, &rev).unwrap();
        for t in 0..6 {
            assert_eq!(a.backward.row(t), b.forward.row(5 - t));
        }
    }

    #[test]
    fn attention_window_and_weights() {
        assert_eq!(attention_window(0, 10, 2), 0..3);
        assert_eq!(attention_window(9, 10, 2), 7..10);
        let cfg = Seq2SeqConfig { window: 2, ..tiny() };
        let mut m = Seq2SeqModel::new(cfg.clone(), 6).unwrap();
        let x = seq(10, 3, 7);
        let enc = encoder_forward(&m, &x).unwrap();
        let step = decoder_attend_predict(&m, &[0.0, 0.0], &DecoderState::zeros(&cfg), &enc, 0).unwrap();
        assert_eq!(step.window, 0..3);
        assert!((step.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        m.block_mut("attn.w_alpha").unwrap().data.fill(0.0);
        let step = decoder_attend_predict(&m, &[1.0, 0.0], &step.state, &enc, 4).unwrap();
        assert!(step.attention.iter().all(|&a| (a - 0.2).abs() < 1e-15));
        assert!(step.probabilities.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(matches!(
            decoder_attend_predict(&m, &[0.0, 0.0], &step.state, &enc, 10),
            Err(NnError::TimeStep { t: 10, len: 10 })
        ));
    }

    #[test]
    fn head_width_follows_output_dim() {
        let cfg = Seq2SeqConfig::new(33, 17);
        let m = Seq2SeqModel::new(cfg, 0).unwrap();
        let p = predict(&m, &seq(3, 33, 1)).unwrap();
        assert_eq!(p.shape(), [3, 17]);
    }

    #[test]
    fn predict_matches_stepwise_decoding() {
        let m = Seq2SeqModel::new(tiny(), 8).unwrap();
        let x = seq(5, 3, 9);
        let full = predict(&m, &x).unwrap();
        let enc = encoder_forward(&m, &x).unwrap();
        let mut state = DecoderState::zeros(&m.config);
        let mut y = vec![0.0; 2];
        for t in 0..5 {
            let step = decoder_attend_predict(&m, &y, &state, &enc, t).unwrap();
            for (a, b) in step.probabilities.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
            y = step.probabilities.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
            state = step.state;
        }
    }

    #[test]
    fn smoothing() {
        assert!((smooth_label(1.0, 0.1) - 0.95).abs() < 1e-15);
        assert!((smooth_label(0.0, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut m = Seq2SeqModel::new(tiny(), 3).unwrap();
        let before = m.clone();
        let mut adam = AdamState::new(&m, 0.01);
        let zeros: Vec<Vec<f64>> = m.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        adam.update(&mut m, &zeros).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn overfits_a_single_pair() {
        let mut m = Seq2SeqModel::new(tiny(), 10).unwrap();
        let ex = Example {
            inputs: seq(4, 3, 11),
            labels: Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]),
        };
        let data = vec![ex];
        let initial = evaluate_loss(&m, &[&data[0]]).unwrap();
        let mut adam = AdamState::new(&m, 0.01);
        let opts = TrainOptions {
            epochs: 100,
            batch_size: 1,
            ..TrainOptions::default()
        };
        let hist = train(&mut m, &data, &opts, &mut adam).unwrap();
        assert_eq!(hist.len(), 100);
        let last = evaluate_loss(&m, &[&data[0]]).unwrap();
        assert!(last < 0.5 * initial, "{initial} -> {last}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let report = grad_check(&tiny(), 4, 0).unwrap();
        assert!(report.max_rel_error < GRAD_CHECK_TOL);
        let attn = report.per_block.iter().find(|(n, _)| n == "attn.w_alpha").unwrap();
        assert!(attn.1 < GRAD_CHECK_TOL);
        let again = grad_check(&tiny(), 4, 0).unwrap();
        assert_eq!(again, report);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let m = Seq2SeqModel::new(tiny(), 0).unwrap();
        assert!(matches!(predict(&m, &Tensor::zeros(3, 4)), Err(NnError::Shape(_))));
    }
}
