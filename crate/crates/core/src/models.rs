//! The two node-state predictors.
//!
//! Both map a window of `t_h` past class indices per node to logits over
//! `n_classes` for each of the next `t_f` steps:
//!
//! * `lstm`: embedding -> LSTM (shared across nodes) -> linear head.
//! * `stgat`: embedding -> graph attention per time step (shared weights) ->
//!   LSTM -> LSTM -> batch norm -> dropout -> linear head.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;

use crate::dataset::{shuffle_train, Window};
use crate::nncore::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, dropout_backward, dropout_forward,
    embedding_backward, embedding_forward, gat_backward, gat_forward, linear_backward,
    linear_forward, lstm_sequence_backward, lstm_sequence_forward, softmax_cross_entropy,
    softmax_cross_entropy_backward, xavier_uniform, AdamConfig, AdamState, BatchNormCache,
    GatCache, GatGraph, LstmSeqCache, LstmWeights, ParamSet, Tensor, BN_EPS, BN_MOMENTUM,
};
use crate::{seeds, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Lstm,
    Stgat,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Lstm => "lstm",
            Architecture::Stgat => "stgat",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(Architecture::Lstm),
            "stgat" => Ok(Architecture::Stgat),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub n_classes: usize,
    pub d_embed: usize,
    /// Hidden width of the plain LSTM model.
    pub lstm_hidden: usize,
    /// Hidden widths of the two STGAT LSTM layers.
    pub stgat_hidden: (usize, usize),
    pub gat_heads: usize,
    pub gat_head_dim: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    pub fn new(arch: Architecture, n_classes: usize) -> Self {
        ModelConfig {
            arch,
            n_classes,
            d_embed: 16,
            lstm_hidden: 64,
            stgat_hidden: (32, 64),
            gat_heads: 8,
            gat_head_dim: 8,
            t_h: 10,
            t_f: 10,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_classes", self.n_classes),
            ("d_embed", self.d_embed),
            ("lstm_hidden", self.lstm_hidden),
            ("stgat_hidden.0", self.stgat_hidden.0),
            ("stgat_hidden.1", self.stgat_hidden.1),
            ("gat_heads", self.gat_heads),
            ("gat_head_dim", self.gat_head_dim),
            ("t_h", self.t_h),
            ("t_f", self.t_f),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.n_classes < 2 || self.n_classes > 5 {
            return Err(Error::invalid(format!("n_classes={} outside 2..=5", self.n_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout_p={} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    fn record(&self) -> String {
        format!(
            "arch={} n_classes={} d_embed={} lstm_hidden={} stgat_hidden={},{} gat_heads={} gat_head_dim={} t_h={} t_f={} dropout_p={}",
            self.arch,
            self.n_classes,
            self.d_embed,
            self.lstm_hidden,
            self.stgat_hidden.0,
            self.stgat_hidden.1,
            self.gat_heads,
            self.gat_head_dim,
            self.t_h,
            self.t_f,
            self.dropout_p
        )
    }

    fn parse_record(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Parse { line: 1, msg };
        let mut cfg = ModelConfig::new(Architecture::Lstm, 2);
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{kv}`")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad value for {k}: `{v}`")));
            match k {
                "arch" => cfg.arch = v.parse()?,
                "n_classes" => cfg.n_classes = num(v)?,
                "d_embed" => cfg.d_embed = num(v)?,
                "lstm_hidden" => cfg.lstm_hidden = num(v)?,
                "stgat_hidden" => {
                    let (a, b) = v.split_once(',').ok_or_else(|| bad(format!("bad stgat_hidden `{v}`")))?;
                    cfg.stgat_hidden = (num(a)?, num(b)?);
                }
                "gat_heads" => cfg.gat_heads = num(v)?,
                "gat_head_dim" => cfg.gat_head_dim = num(v)?,
                "t_h" => cfg.t_h = num(v)?,
                "t_f" => cfg.t_f = num(v)?,
                "dropout_p" => cfg.dropout_p = v.parse().map_err(|_| bad(format!("bad dropout_p `{v}`")))?,
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Keeping buffers apart means an optimizer step with `lr = 0`
/// leaves `params` bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

const CHECKPOINT_MAGIC: &str = "epifed-model";

impl ModelState {
    /// Xavier-uniform weights, zero biases, unit batch-norm scale.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seed, &[seeds::tag::INIT]);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let c = &config;
        params.insert("embed.table", xavier_uniform(&[c.n_classes, c.d_embed], &mut rng)?)?;
        let head_in = match c.arch {
            Architecture::Lstm => {
                LstmWeights::init_params(&mut params, "lstm", c.d_embed, c.lstm_hidden, &mut rng)?;
                c.lstm_hidden
            }
            Architecture::Stgat => {
                let kf = c.gat_heads * c.gat_head_dim;
                params.insert("gat.weight", xavier_uniform(&[c.d_embed, kf], &mut rng)?)?;
                params.insert("gat.attn", xavier_uniform(&[c.gat_heads, 2 * c.gat_head_dim], &mut rng)?)?;
                let (h1, h2) = c.stgat_hidden;
                LstmWeights::init_params(&mut params, "lstm1", kf, h1, &mut rng)?;
                LstmWeights::init_params(&mut params, "lstm2", h1, h2, &mut rng)?;
                params.insert("bn.gamma", Tensor::filled(&[h2], 1.0))?;
                params.insert("bn.beta", Tensor::zeros(&[h2]))?;
                buffers.insert("bn.running_mean", Tensor::zeros(&[h2]))?;
                buffers.insert("bn.running_var", Tensor::filled(&[h2], 1.0))?;
                h2
            }
        };
        params.insert("head.w", xavier_uniform(&[head_in, c.t_f * c.n_classes], &mut rng)?)?;
        params.insert("head.b", Tensor::zeros(&[c.t_f * c.n_classes]))?;
        Ok(ModelState { config, params, buffers })
    }

    /// A text line with the configuration, then parameters and buffers in the
    /// `ParamSet` binary format.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC} {}", self.config.record())?;
        self.params.write_to(&mut out)?;
        self.buffers.write_to(&mut out)
    }

    /// Reads a checkpoint, skipping any leading `#` comment lines.
    pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Self> {
        let mut line = String::new();
        loop {
            line.clear();
            if input.read_line(&mut line)? == 0 || !line.starts_with('#') {
                break;
            }
        }
        let rest = line
            .trim_end()
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| Error::Parse { line: 1, msg: "not a model checkpoint".into() })?;
        let config = ModelConfig::parse_record(rest)?;
        let params = ParamSet::read_from(&mut input)?;
        let buffers = ParamSet::read_from(&mut input)?;
        let fresh = ModelState::init(config.clone(), 0)?;
        fresh.params.check_congruent(&params)?;
        fresh.buffers.check_congruent(&buffers)?;
        Ok(ModelState { config, params, buffers })
    }
}

/// Windows stacked row-wise: row `b * n_nodes + v` is node `v` of window `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowBatch {
    pub n_windows: usize,
    pub n_nodes: usize,
    pub t_h: usize,
    pub t_f: usize,
    /// `[row][t_h]`.
    pub inputs: Vec<u8>,
    /// `[row][t_f]`.
    pub targets: Vec<u8>,
}

impl WindowBatch {
    pub fn from_windows(windows: &[&Window]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Empty("batch of zero windows".into()))?;
        let (n, t_h, t_f) = (first.n_nodes, first.t_h, first.t_f);
        let mut inputs = Vec::with_capacity(windows.len() * n * t_h);
        let mut targets = Vec::with_capacity(windows.len() * n * t_f);
        for w in windows {
            if (w.n_nodes, w.t_h, w.t_f) != (n, t_h, t_f)
                || w.input.len() != n * t_h
                || w.target.len() != n * t_f
            {
                return Err(Error::shape("windows in a batch disagree in shape"));
            }
            inputs.extend_from_slice(&w.input);
            targets.extend_from_slice(&w.target);
        }
        Ok(WindowBatch { n_windows: windows.len(), n_nodes: n, t_h, t_f, inputs, targets })
    }

    pub fn rows(&self) -> usize {
        self.n_windows * self.n_nodes
    }

    fn step_codes(&self, s: usize) -> Vec<u8> {
        (0..self.rows()).map(|r| self.inputs[r * self.t_h + s]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Cache {
    Lstm {
        w: LstmWeights,
        seq: LstmSeqCache,
    },
    Stgat {
        gat: Vec<GatCache>,
        w1: LstmWeights,
        seq1: LstmSeqCache,
        w2: LstmWeights,
        seq2: LstmSeqCache,
        bn: Option<BatchNormCache>,
        mask: Option<Vec<f64>>,
    },
}

/// Logits plus everything needed to backpropagate through them.
#[derive(Debug)]
pub struct ForwardPass {
    /// `[row][t_f][n_classes]`.
    pub logits: Vec<f64>,
    head_in: Vec<f64>,
    cache: Cache,
    running: Option<(Vec<f64>, Vec<f64>)>,
}

impl ForwardPass {
    /// Stores the batch-norm running statistics updated by a training pass.
    pub fn commit_buffers(&self, buffers: &mut ParamSet) -> Result<()> {
        if let Some((m, v)) = &self.running {
            buffers.get_mut("bn.running_mean")?.data_mut().copy_from_slice(m);
            buffers.get_mut("bn.running_var")?.data_mut().copy_from_slice(v);
        }
        Ok(())
    }
}

fn check_batch(cfg: &ModelConfig, batch: &WindowBatch, graph: Option<&GatGraph>) -> Result<()> {
    if batch.t_h != cfg.t_h || batch.t_f != cfg.t_f {
        return Err(Error::shape(format!(
            "batch windows ({}, {}) vs model ({}, {})",
            batch.t_h, batch.t_f, cfg.t_h, cfg.t_f
        )));
    }
    if cfg.arch == Architecture::Stgat {
        match graph {
            Some(g) if g.n_nodes() == batch.n_nodes => {}
            Some(g) => {
                return Err(Error::shape(format!(
                    "graph has {} nodes, windows have {}",
                    g.n_nodes(),
                    batch.n_nodes
                )))
            }
            None => return Err(Error::invalid("stgat needs the client subgraph")),
        }
    }
    Ok(())
}

/// Runs the model. In `Train` mode batch norm uses batch statistics (the
/// updated running statistics are returned, not written) and dropout draws
/// from `rng`; `Eval` mode is deterministic and row-independent.
pub fn forward<R: Rng>(
    cfg: &ModelConfig,
    params: &ParamSet,
    buffers: &ParamSet,
    batch: &WindowBatch,
    graph: Option<&GatGraph>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardPass> {
    check_batch(cfg, batch, graph)?;
    let rows = batch.rows();
    let table = params.get("embed.table")?;
    let embeds = (0..cfg.t_h)
        .map(|s| embedding_forward(table, &batch.step_codes(s)))
        .collect::<Result<Vec<_>>>()?;
    let (head_in, cache, running) = match cfg.arch {
        Architecture::Lstm => {
            let w = LstmWeights::gather(params, "lstm")?;
            let seq = lstm_sequence_forward(&w, &embeds, rows)?;
            (seq.last_hidden().to_vec(), Cache::Lstm { w, seq }, None)
        }
        Architecture::Stgat => {
            let graph = graph.expect("checked above");
            let (gw, ga) = (params.get("gat.weight")?, params.get("gat.attn")?);
            let mut spatial = Vec::with_capacity(cfg.t_h);
            let mut gat = Vec::with_capacity(cfg.t_h);
            for e in &embeds {
                let (out, c) = gat_forward(graph, gw, ga, e, batch.n_windows)?;
                spatial.push(out);
                gat.push(c);
            }
            let w1 = LstmWeights::gather(params, "lstm1")?;
            let seq1 = lstm_sequence_forward(&w1, &spatial, rows)?;
            let w2 = LstmWeights::gather(params, "lstm2")?;
            let seq2 = lstm_sequence_forward(&w2, &seq1.hs, rows)?;
            let (gamma, beta) = (params.get("bn.gamma")?, params.get("bn.beta")?);
            let mut rm = buffers.get("bn.running_mean")?.data().to_vec();
            let mut rv = buffers.get("bn.running_var")?.data().to_vec();
            let h2 = seq2.last_hidden();
            let (normed, bn, running) = match mode {
                Mode::Train => {
                    let (y, c) = batch_norm_train(h2, rows, gamma, beta, &mut rm, &mut rv, BN_MOMENTUM, BN_EPS)?;
                    (y, Some(c), Some((rm, rv)))
                }
                Mode::Eval => (batch_norm_eval(h2, rows, gamma, beta, &rm, &rv, BN_EPS)?, None, None),
            };
            let (dropped, mask) = dropout_forward(&normed, cfg.dropout_p, rng, mode == Mode::Train)?;
            (dropped, Cache::Stgat { gat, w1, seq1, w2, seq2, bn, mask }, running)
        }
    };
    let logits = linear_forward(&head_in, rows, params.get("head.w")?, params.get("head.b")?)?;
    Ok(ForwardPass { logits, head_in, cache, running })
}

/// Gradients of a scalar loss w.r.t. all parameters, given `dlogits`.
pub fn backward(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &WindowBatch,
    graph: Option<&GatGraph>,
    pass: &ForwardPass,
    dlogits: &[f64],
) -> Result<ParamSet> {
    let rows = batch.rows();
    let mut grads = params.zeros_like();
    let head_w = params.get("head.w")?;
    let mut dw = Tensor::zeros(head_w.shape());
    let mut db = Tensor::zeros(params.get("head.b")?.shape());
    let dhead = linear_backward(&pass.head_in, rows, head_w, dlogits, &mut dw, &mut db);
    *grads.get_mut("head.w")? = dw;
    *grads.get_mut("head.b")? = db;

    let last_only = |d: Vec<f64>| {
        let mut dhs = vec![Vec::new(); cfg.t_h];
        dhs[cfg.t_h - 1] = d;
        dhs
    };
    let dembeds = match &pass.cache {
        Cache::Lstm { w, seq } => {
            let mut gw = LstmWeights::zeros(w.input, w.hidden);
            let dxs = lstm_sequence_backward(w, seq, &last_only(dhead), &mut gw);
            gw.scatter_add(&mut grads, "lstm")?;
            dxs
        }
        Cache::Stgat { gat, w1, seq1, w2, seq2, bn, mask } => {
            let bn = bn
                .as_ref()
                .ok_or_else(|| Error::invalid("backward needs a training-mode forward pass"))?;
            let dnormed = dropout_backward(&dhead, mask.as_deref());
            let gamma = params.get("bn.gamma")?;
            let mut dgamma = Tensor::zeros(gamma.shape());
            let mut dbeta = Tensor::zeros(gamma.shape());
            let dh2 = batch_norm_backward(bn, gamma, &dnormed, &mut dgamma, &mut dbeta);
            *grads.get_mut("bn.gamma")? = dgamma;
            *grads.get_mut("bn.beta")? = dbeta;
            let mut g2 = LstmWeights::zeros(w2.input, w2.hidden);
            let dh1 = lstm_sequence_backward(w2, seq2, &last_only(dh2), &mut g2);
            g2.scatter_add(&mut grads, "lstm2")?;
            let mut g1 = LstmWeights::zeros(w1.input, w1.hidden);
            let dspatial = lstm_sequence_backward(w1, seq1, &dh1, &mut g1);
            g1.scatter_add(&mut grads, "lstm1")?;
            let graph = graph.ok_or_else(|| Error::invalid("stgat needs the client subgraph"))?;
            let (gw, ga) = (params.get("gat.weight")?, params.get("gat.attn")?);
            let mut dgw = Tensor::zeros(gw.shape());
            let mut dga = Tensor::zeros(ga.shape());
            let dembeds = gat
                .iter()
                .zip(&dspatial)
                .map(|(c, d)| gat_backward(graph, gw, ga, c, d, &mut dgw, &mut dga))
                .collect::<Result<Vec<_>>>()?;
            *grads.get_mut("gat.weight")? = dgw;
            *grads.get_mut("gat.attn")? = dga;
            dembeds
        }
    };
    let dtable = grads.get_mut("embed.table")?;
    for (s, d) in dembeds.iter().enumerate() {
        embedding_backward(&batch.step_codes(s), d, dtable);
    }
    grads.check_finite()?;
    Ok(grads)
}

/// Mean cross-entropy over every (node, horizon step) cell of the batch.
pub fn batch_loss(cfg: &ModelConfig, pass: &ForwardPass, batch: &WindowBatch) -> Result<(f64, Vec<f64>)> {
    softmax_cross_entropy(&pass.logits, cfg.n_classes, &batch.targets)
}

/// Training-mode loss and its gradient; running statistics are committed to
/// `buffers`.
pub fn loss_and_grad<R: Rng>(
    cfg: &ModelConfig,
    params: &ParamSet,
    buffers: &mut ParamSet,
    batch: &WindowBatch,
    graph: Option<&GatGraph>,
    rng: &mut R,
) -> Result<(f64, ParamSet)> {
    let pass = forward(cfg, params, buffers, batch, graph, Mode::Train, rng)?;
    let (loss, probs) = batch_loss(cfg, &pass, batch)?;
    let cells = batch.targets.len();
    let dlogits = softmax_cross_entropy_backward(&probs, cfg.n_classes, &batch.targets, 1.0 / cells as f64);
    let grads = backward(cfg, params, batch, graph, &pass, &dlogits)?;
    pass.commit_buffers(buffers)?;
    Ok((loss, grads))
}

/// Argmax over classes per cell; ties go to the smallest class index.
pub fn predict(logits: &[f64], n_classes: usize) -> Vec<u8> {
    logits
        .chunks(n_classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch_size: 32, adam: AdamConfig::default() }
    }
}

/// FedProx pull towards the broadcast global model.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub global: &'a ParamSet,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalOutcome {
    /// Per-step objective (CE plus proximal term), in step order.
    pub step_losses: Vec<f64>,
    /// Cell-weighted mean CE per epoch.
    pub epoch_ce: Vec<f64>,
}

/// Local training: `cfg.epochs` passes of minibatch Adam over `train`, with the
/// window order reshuffled per epoch from `(seed, first_epoch + e)`.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    state: &mut ModelState,
    adam: &mut AdamState,
    train: &[Window],
    graph: Option<&GatGraph>,
    cfg: &TrainConfig,
    proximal: Option<Proximal<'_>>,
    seed: u64,
    first_epoch: u64,
) -> Result<LocalOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if let Some(p) = &proximal {
        if !(p.mu >= 0.0) {
            return Err(Error::invalid(format!("proximal mu={} must be >= 0", p.mu)));
        }
        state.params.check_congruent(p.global)?;
    }
    let mut out = LocalOutcome::default();
    for e in 0..cfg.epochs as u64 {
        let epoch = first_epoch + e;
        let order = shuffle_train(train.len(), seed, epoch);
        let mut drop_rng = seeds::rng(seed, &[seeds::tag::DROPOUT, epoch]);
        let (mut ce_sum, mut cells) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let windows: Vec<&Window> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = WindowBatch::from_windows(&windows)?;
            let (ce, mut grads) = loss_and_grad(
                &state.config,
                &state.params,
                &mut state.buffers,
                &batch,
                graph,
                &mut drop_rng,
            )?;
            let mut objective = ce;
            if let Some(p) = proximal.filter(|p| p.mu > 0.0) {
                objective += 0.5 * p.mu * state.params.distance_sq(p.global)?;
                grads.add_scaled(&state.params, p.mu)?;
                grads.add_scaled(p.global, -p.mu)?;
            }
            adam.step(&mut state.params, &grads)?;
            out.step_losses.push(objective);
            ce_sum += ce * batch.targets.len() as f64;
            cells += batch.targets.len();
        }
        out.epoch_ce.push(ce_sum / cells as f64);
    }
    Ok(out)
}

/// Eval-mode predictions over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy over all cells.
    pub ce: f64,
    /// Predicted class per cell, windows concatenated in order, each `[node][t_f]`.
    pub predictions: Vec<u8>,
    pub targets: Vec<u8>,
}

pub const EVAL_BATCH: usize = 32;

pub fn evaluate(state: &ModelState, windows: &[Window], graph: Option<&GatGraph>) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let cfg = &state.config;
    let mut ce_sum = 0.0;
    let mut predictions = Vec::new();
    let mut targets = Vec::new();
    // eval mode never draws from the rng
    let mut rng = seeds::rng(0, &[]);
    for chunk in windows.chunks(EVAL_BATCH) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let batch = WindowBatch::from_windows(&refs)?;
        let pass = forward(cfg, &state.params, &state.buffers, &batch, graph, Mode::Eval, &mut rng)?;
        let (ce, _) = batch_loss(cfg, &pass, &batch)?;
        ce_sum += ce * batch.targets.len() as f64;
        predictions.extend(predict(&pass.logits, cfg.n_classes));
        targets.extend_from_slice(&batch.targets);
    }
    Ok(Evaluation { ce: ce_sum / targets.len() as f64, predictions, targets })
}

/// Persistence baseline: every node keeps its last observed state.
pub fn persistence_predictions(windows: &[Window]) -> Vec<u8> {
    let mut out = Vec::new();
    for w in windows {
        for v in 0..w.n_nodes {
            let last = w.input[v * w.t_h + w.t_h - 1];
            out.extend(std::iter::repeat_n(last, w.t_f));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{chrono_split, make_windows, DEFAULT_FRACTIONS};
    use crate::epidemics::{simulate, InitialCondition, ModelSpec};
    use crate::netgraph::{generate_synthetic, Graph, Synthetic};
    use crate::nncore::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(arch: Architecture, classes: usize) -> ModelConfig {
        ModelConfig {
            d_embed: 4,
            lstm_hidden: 6,
            stgat_hidden: (5, 6),
            gat_heads: 2,
            gat_head_dim: 3,
            t_h: 4,
            t_f: 3,
            dropout_p: 0.2,
            ..ModelConfig::new(arch, classes)
        }
    }

    fn random_windows(n_windows: usize, n_nodes: usize, cfg: &ModelConfig, seed: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.n_classes as u8;
        (0..n_windows)
            .map(|k| Window {
                start: k,
                n_nodes,
                t_h: cfg.t_h,
                t_f: cfg.t_f,
                input: (0..n_nodes * cfg.t_h).map(|_| rng.random_range(0..c)).collect(),
                target: (0..n_nodes * cfg.t_f).map(|_| rng.random_range(0..c)).collect(),
            })
            .collect()
    }

    fn batch_of(ws: &[Window]) -> WindowBatch {
        WindowBatch::from_windows(&ws.iter().collect::<Vec<_>>()).unwrap()
    }

    fn eval_logits(state: &ModelState, batch: &WindowBatch, graph: Option<&GatGraph>) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        forward(&state.config, &state.params, &state.buffers, batch, graph, Mode::Eval, &mut rng)
            .unwrap()
            .logits
    }

    fn six_node_graph() -> Graph {
        Graph::from_edges(6, [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (5, 5)]).unwrap()
    }

    #[test]
    fn default_config_and_shapes() {
        let cfg = ModelConfig::new(Architecture::Lstm, 2);
        let state = ModelState::init(cfg.clone(), 0).unwrap();
        assert_eq!(state.params.get("lstm.w_f").unwrap().shape(), &[64 + 16, 64]);
        assert_eq!(state.params.get("head.w").unwrap().shape(), &[64, 20]);
        let ws = random_windows(1, 1, &cfg, 1);
        let logits = eval_logits(&state, &batch_of(&ws), None);
        // (B, N_m, t_f, C) = (1, 1, 10, 2)
        assert_eq!(logits.len(), 10 * 2);

        let cfg = ModelConfig::new(Architecture::Stgat, 3);
        let state = ModelState::init(cfg, 0).unwrap();
        assert_eq!(state.params.get("gat.weight").unwrap().shape(), &[16, 64]);
        assert_eq!(state.params.get("gat.attn").unwrap().shape(), &[8, 16]);
        assert_eq!(state.params.get("lstm1.w_o").unwrap().shape(), &[32 + 64, 32]);
        assert_eq!(state.params.get("lstm2.w_o").unwrap().shape(), &[64 + 32, 64]);
        assert_eq!(state.buffers.len(), 2);
        assert!(ModelState::init(ModelConfig { dropout_p: 1.0, ..ModelConfig::new(Architecture::Lstm, 2) }, 0).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        for arch in [Architecture::Lstm, Architecture::Stgat] {
            let cfg = small_config(arch, 3);
            let mut state = ModelState::init(cfg.clone(), 5).unwrap();
            state.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
            let ws = random_windows(2, 6, &cfg, 2);
            let g = GatGraph::from_graph(&six_node_graph());
            let batch = batch_of(&ws);
            let logits = eval_logits(&state, &batch, Some(&g));
            let (ce, probs) = softmax_cross_entropy(&logits, 3, &batch.targets).unwrap();
            assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
            assert!((ce - 3f64.ln()).abs() < 1e-12);
            assert!(predict(&logits, 3).iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn predict_rules() {
        assert_eq!(predict(&[0.0, 0.0, 0.0, 1.0, 1.0, 0.0], 3), vec![0, 0]);
        assert_eq!(predict(&[0.0, 0.0, 1.0, 0.0, 1.0, 0.0], 3), vec![2, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits: Vec<f64> = (0..400).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = predict(&logits, 4);
        for (row, &p) in logits.chunks(4).zip(&got) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let first = row.iter().position(|&v| v == max).unwrap();
            assert_eq!(p as usize, first);
        }
    }

    #[test]
    fn stgat_without_edges_and_identity_like_gat() {
        let mut cfg = small_config(Architecture::Stgat, 2);
        cfg.gat_heads = 1;
        cfg.gat_head_dim = cfg.d_embed;
        let mut state = ModelState::init(cfg.clone(), 1).unwrap();
        let w = state.params.get_mut("gat.weight").unwrap();
        let d = cfg.d_embed;
        w.data_mut().fill(0.0);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        let empty = GatGraph::from_graph(&Graph::from_edges(5, []).unwrap());
        let ws = random_windows(3, 5, &cfg, 4);
        let logits = eval_logits(&state, &batch_of(&ws), Some(&empty));
        assert_eq!(logits.len(), 3 * 5 * cfg.t_f * 2);
        // with only self-loops each node sees ELU(its own embedding); rows with the
        // same history therefore agree exactly
        let mut twin = ws[0].clone();
        let first = twin.input[..cfg.t_h].to_vec();
        twin.input[cfg.t_h..2 * cfg.t_h].copy_from_slice(&first);
        let l = eval_logits(&state, &batch_of(&[twin]), Some(&empty));
        let per_row = cfg.t_f * 2;
        assert_eq!(l[..per_row], l[per_row..2 * per_row]);
    }

    #[test]
    fn lstm_cross_node_invariance() {
        let cfg = ModelConfig::new(Architecture::Lstm, 3);
        let state = ModelState::init(cfg.clone(), 3).unwrap();
        let ws = random_windows(3, 7, &cfg, 5);
        let base = eval_logits(&state, &batch_of(&ws), None);
        let mut changed = ws.clone();
        for w in &mut changed {
            for s in 0..cfg.t_h {
                w.input[4 * cfg.t_h + s] = (w.input[4 * cfg.t_h + s] + 1) % 3;
            }
        }
        let after = eval_logits(&state, &batch_of(&changed), None);
        let per_row = cfg.t_f * 3;
        for r in 0..21 {
            let same = base[r * per_row..(r + 1) * per_row] == after[r * per_row..(r + 1) * per_row];
            assert_eq!(same, r % 7 != 4, "row {r}");
        }
    }

    #[test]
    fn stgat_neighbourhood_invariance() {
        let cfg = ModelConfig::new(Architecture::Stgat, 2);
        let mut state = ModelState::init(cfg.clone(), 3).unwrap();
        // non-trivial running statistics
        state.buffers.get_mut("bn.running_mean").unwrap().data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64);
        let g = six_node_graph();
        let gg = GatGraph::from_graph(&g);
        let ws = random_windows(2, 6, &cfg, 6);
        let base = eval_logits(&state, &batch_of(&ws), Some(&gg));
        let per_row = cfg.t_f * 2;
        for target in 0..6 {
            let mut changed = ws.clone();
            for w in &mut changed {
                for s in 0..cfg.t_h {
                    w.input[target * cfg.t_h + s] ^= 1;
                }
            }
            let after = eval_logits(&state, &batch_of(&changed), Some(&gg));
            for b in 0..2 {
                for v in 0..6 {
                    let r = b * 6 + v;
                    let same = base[r * per_row..(r + 1) * per_row] == after[r * per_row..(r + 1) * per_row];
                    if v != target && !g.has_edge(v, target) {
                        assert!(same, "node {v} changed after perturbing {target}");
                    }
                }
            }
            let r = target;
            assert_ne!(base[r * per_row..(r + 1) * per_row], after[r * per_row..(r + 1) * per_row]);
        }
    }

    #[test]
    fn stgat_permutation_equivariance() {
        let cfg = small_config(Architecture::Stgat, 3);
        let state = ModelState::init(cfg.clone(), 8).unwrap();
        let g = generate_synthetic(Synthetic::BarabasiAlbert { n: 9, m: 2 }, 1).unwrap();
        let ws = random_windows(2, 9, &cfg, 7);
        let perm = [4usize, 7, 0, 2, 8, 1, 6, 3, 5]; // new index of old node v is perm[v]
        let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let pg = Graph::from_edges(9, edges).unwrap();
        let permuted: Vec<Window> = ws
            .iter()
            .map(|w| {
                let mut p = w.clone();
                for v in 0..9 {
                    let nv = perm[v];
                    p.input[nv * cfg.t_h..(nv + 1) * cfg.t_h].copy_from_slice(&w.input[v * cfg.t_h..(v + 1) * cfg.t_h]);
                    p.target[nv * cfg.t_f..(nv + 1) * cfg.t_f].copy_from_slice(&w.target[v * cfg.t_f..(v + 1) * cfg.t_f]);
                }
                p
            })
            .collect();
        let a = eval_logits(&state, &batch_of(&ws), Some(&GatGraph::from_graph(&g)));
        let b = eval_logits(&state, &batch_of(&permuted), Some(&GatGraph::from_graph(&pg)));
        let per_row = cfg.t_f * 3;
        for bi in 0..2 {
            for v in 0..9 {
                let (ra, rb) = (bi * 9 + v, bi * 9 + perm[v]);
                for k in 0..per_row {
                    let (x, y) = (a[ra * per_row + k], b[rb * per_row + k]);
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
                }
            }
        }
    }

    fn full_model_gradcheck(arch: Architecture, seed: u64) -> f64 {
        let cfg = small_config(arch, 3);
        let mut state = ModelState::init(cfg.clone(), seed).unwrap();
        // move biases and bn affine away from their init values
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in state.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let gg = GatGraph::from_graph(&six_node_graph());
        let ws = random_windows(3, 6, &cfg, seed);
        let batch = batch_of(&ws);
        let buffers = state.buffers.clone();
        let (_, grads) = loss_and_grad(&cfg, &state.params, &mut state.buffers, &batch, Some(&gg), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let f = |p: &ParamSet| -> Result<f64> {
            let mut b = buffers.clone();
            Ok(loss_and_grad(&cfg, p, &mut b, &batch, Some(&gg), &mut ChaCha8Rng::seed_from_u64(seed))?.0)
        };
        gradient_check(f, &state.params, &grads, 1e-5, 200, seed).unwrap()
    }

    #[test]
    fn full_model_gradients() {
        for arch in [Architecture::Lstm, Architecture::Stgat] {
            for seed in 0..3 {
                let err = full_model_gradcheck(arch, seed);
                assert!(err < 1e-4, "{arch} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config(Architecture::Stgat, 4);
        let state = ModelState::init(cfg, 2).unwrap();
        let mut buf = Vec::new();
        state.write_checkpoint(&mut buf).unwrap();
        let back = ModelState::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, state);
        assert!(ModelState::read_checkpoint(&b"junk\n"[..]).is_err());
    }

    fn sis_windows(n: usize, seed: u64) -> (Graph, Vec<Window>) {
        let g = generate_synthetic(Synthetic::BarabasiAlbert { n, m: 2 }, seed).unwrap();
        let tr = simulate(&g, &ModelSpec::Sis { beta: 0.6, delta: 1.0 }, &InitialCondition::Fraction(0.3), 0.25, 100.0, seed).unwrap();
        (g, make_windows(&tr, 10, 10).unwrap())
    }

    #[test]
    fn lr_zero_and_mu_zero_identities() {
        let (g, ws) = sis_windows(8, 1);
        let gg = GatGraph::from_graph(&g);
        let train = &ws[..40];
        for arch in [Architecture::Lstm, Architecture::Stgat] {
            let cfg = ModelConfig::new(arch, 2);
            let init = ModelState::init(cfg, 4).unwrap();
            let tc = TrainConfig { epochs: 2, ..TrainConfig::default() };

            let mut s = init.clone();
            let mut adam = AdamState::new(&s.params, AdamConfig { lr: 0.0, ..tc.adam.clone() });
            train_local(&mut s, &mut adam, train, Some(&gg), &tc, None, 3, 0).unwrap();
            assert_eq!(s.params, init.params);

            let mut plain = init.clone();
            let mut a1 = AdamState::new(&plain.params, tc.adam.clone());
            let o1 = train_local(&mut plain, &mut a1, train, Some(&gg), &tc, None, 3, 0).unwrap();
            let mut prox = init.clone();
            let mut a2 = AdamState::new(&prox.params, tc.adam.clone());
            let global = init.params.clone();
            let o2 = train_local(&mut prox, &mut a2, train, Some(&gg), &tc, Some(Proximal { global: &global, mu: 0.0 }), 3, 0).unwrap();
            assert_eq!(o1, o2);
            assert_eq!(plain, prox);
        }
    }

    #[test]
    fn strong_proximal_term_pulls_towards_global() {
        let (g, ws) = sis_windows(8, 2);
        let gg = GatGraph::from_graph(&g);
        let cfg = ModelConfig::new(Architecture::Lstm, 2);
        let mut state = ModelState::init(cfg.clone(), 1).unwrap();
        let global = ModelState::init(cfg, 2).unwrap().params;
        let before = state.params.distance_sq(&global).unwrap();
        let tc = TrainConfig { epochs: 3, adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..TrainConfig::default() };
        let mut adam = AdamState::new(&state.params, tc.adam.clone());
        train_local(&mut state, &mut adam, &ws[..40], Some(&gg), &tc, Some(Proximal { global: &global, mu: 1e6 }), 0, 0).unwrap();
        assert!(state.params.distance_sq(&global).unwrap() < before);
    }

    #[test]
    fn training_is_deterministic_and_loss_falls() {
        let (g, ws) = sis_windows(10, 3);
        let gg = GatGraph::from_graph(&g);
        let split = chrono_split(ws, DEFAULT_FRACTIONS).unwrap();
        for arch in [Architecture::Lstm, Architecture::Stgat] {
            let cfg = ModelConfig::new(arch, 2);
            let run = || {
                let mut s = ModelState::init(cfg.clone(), 7).unwrap();
                let tc = TrainConfig { epochs: 10, adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() }, ..TrainConfig::default() };
                let mut adam = AdamState::new(&s.params, tc.adam.clone());
                let out = train_local(&mut s, &mut adam, &split.train, Some(&gg), &tc, None, 11, 0).unwrap();
                (s, out)
            };
            let (s1, o1) = run();
            let (s2, o2) = run();
            assert_eq!(s1, s2);
            assert_eq!(o1, o2);
            assert!(o1.epoch_ce.last() < o1.epoch_ce.first(), "{arch}: {:?}", o1.epoch_ce);
            let e = evaluate(&s1, &split.test, Some(&gg)).unwrap();
            assert_eq!(e.predictions.len(), split.test.len() * 10 * 10);
        }
    }

    #[test]
    fn persistence_repeats_last_input() {
        let w = Window { start: 0, n_nodes: 2, t_h: 3, t_f: 2, input: vec![0, 0, 1, 1, 1, 0], target: vec![0; 4] };
        assert_eq!(persistence_predictions(&[w]), vec![1, 1, 0, 0]);
    }
}
