//! Frozen noisy embedding layer → stacked BiLSTM → deep self-attention →
//! task-specific head, expressed as a [`Graph`] per input sequence.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::grad::{Chain, Graph, NodeId, Tensor};
use crate::text::Vocabulary;

/// Probability clipping used by the cross-entropy losses.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskHead {
    /// One sigmoid unit.
    Regression,
    /// Softmax over `k` ordered classes.
    Ordinal(usize),
    /// `m` independent sigmoid units.
    Multilabel(usize),
}

impl TaskHead {
    pub fn width(self) -> usize {
        match self {
            TaskHead::Regression => 1,
            TaskHead::Ordinal(k) => k,
            TaskHead::Multilabel(m) => m,
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            TaskHead::Ordinal(k) if k < 2 => Err(Error::invalid("ordinal heads need at least 2 classes")),
            TaskHead::Multilabel(0) => Err(Error::invalid("multilabel heads need at least 1 label")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TaskHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskHead::Regression => write!(f, "regression"),
            TaskHead::Ordinal(k) => write!(f, "ordinal {k}"),
            TaskHead::Multilabel(m) => write!(f, "multilabel {m}"),
        }
    }
}

impl FromStr for TaskHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let head = match (parts.next(), parts.next().map(str::parse::<usize>), parts.next()) {
            (Some("regression"), None, None) => TaskHead::Regression,
            (Some("ordinal"), Some(Ok(k)), None) => TaskHead::Ordinal(k),
            (Some("multilabel"), Some(Ok(m)), None) => TaskHead::Multilabel(m),
            _ => return Err(Error::invalid(format!("bad task head {s:?}"))),
        };
        head.validate()?;
        Ok(head)
    }
}

/// Training target of one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Scalar(f64),
    Class(usize),
    Labels(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Hidden size per direction.
    pub lstm_size: usize,
    pub lstm_layers: usize,
    pub attention_layers: usize,
    pub attention_hidden: usize,
    pub noise_sigma: f64,
    pub embed_dropout: f64,
    pub repr_dropout: f64,
    pub head: TaskHead,
}

impl ModelConfig {
    /// 310-dim embeddings, 2×250 BiLSTM, 2-layer attention.
    pub fn full(head: TaskHead) -> Self {
        ModelConfig {
            embed_dim: 310,
            lstm_size: 250,
            lstm_layers: 2,
            attention_layers: 2,
            attention_hidden: 500,
            noise_sigma: 0.2,
            embed_dropout: 0.1,
            repr_dropout: 0.3,
            head,
        }
    }

    /// Desk-scale configuration used by tests and `gradcheck`.
    pub fn toy(head: TaskHead) -> Self {
        ModelConfig {
            embed_dim: 8,
            lstm_size: 4,
            attention_hidden: 8,
            ..ModelConfig::full(head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.lstm_size == 0
            || self.lstm_layers == 0
            || self.attention_layers == 0
            || self.attention_hidden == 0
        {
            return Err(Error::invalid("model sizes must all be at least 1"));
        }
        for (name, p) in [("embed_dropout", self.embed_dropout), ("repr_dropout", self.repr_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        self.head.validate()
    }

    /// Width of the encoded representation, `2L`.
    pub fn repr_dim(&self) -> usize {
        2 * self.lstm_size
    }

    /// Names and shapes of every trainable tensor, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let l = self.lstm_size;
        let mut out = Vec::new();
        for layer in 0..self.lstm_layers {
            let input = if layer == 0 { self.embed_dim } else { 2 * l };
            for dir in ["fwd", "bwd"] {
                out.push((format!("lstm.{layer}.{dir}.w_ih"), vec![input, 4 * l]));
                out.push((format!("lstm.{layer}.{dir}.w_hh"), vec![l, 4 * l]));
                out.push((format!("lstm.{layer}.{dir}.bias"), vec![1, 4 * l]));
            }
        }
        for k in 0..self.attention_layers {
            let input = if k == 0 { self.repr_dim() } else { self.attention_hidden };
            let output = if k + 1 == self.attention_layers { 1 } else { self.attention_hidden };
            out.push((format!("attn.{k}.w"), vec![input, output]));
            out.push((format!("attn.{k}.b"), vec![1, output]));
        }
        out.push(("head.w".into(), vec![self.repr_dim(), self.head.width()]));
        out.push(("head.b".into(), vec![1, self.head.width()]));
        out
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("lstm.") || name.starts_with("attn.")
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gate layout inside the `4L` pre-activation: input, forget, output,
/// candidate.
const GATE_FORGET: usize = 1;

/// Initializes every tensor of `shapes`: weights uniform in
/// `±1/sqrt(fan_in)`, biases zero except LSTM forget gates at 1.
fn init_params(shapes: &[(String, Vec<usize>)], lstm_size: usize, rng: &mut ChaCha8Rng) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            let mut b = vec![0.0; n];
            b[GATE_FORGET * lstm_size..(GATE_FORGET + 1) * lstm_size].fill(1.0);
            b
        } else if name.ends_with(".b") {
            vec![0.0; n]
        } else {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        out.insert(name.clone(), Tensor::new(shape.clone(), data).expect("shape matches data"));
    }
    out
}

/// Graph fragment for one LSTM step. `pre_input` is `x_t W_ih` (1×4L).
pub fn lstm_cell(
    g: &mut Graph,
    pre_input: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    w_hh: NodeId,
    bias: NodeId,
    size: usize,
) -> (NodeId, NodeId) {
    let rec = g.matmul(h_prev, w_hh);
    let z = g.add(pre_input, rec);
    let z = g.add_row(z, bias);
    let gate = |g: &mut Graph, k: usize| g.slice(z, 1, k * size, (k + 1) * size);
    let i = gate(g, 0);
    let i = g.sigmoid(i);
    let f = gate(g, GATE_FORGET);
    let f = g.sigmoid(f);
    let o = gate(g, 2);
    let o = g.sigmoid(o);
    let cand = gate(g, 3);
    let cand = g.tanh(cand);
    let keep = g.mul(f, c_prev);
    let write = g.mul(i, cand);
    let c = g.add(keep, write);
    let tc = g.tanh(c);
    let h = g.mul(o, tc);
    (h, c)
}

/// Forward graph for a sequence of a given length.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub graph: Graph,
    pub tokens: usize,
    /// N×2L annotations of the last BiLSTM layer.
    pub annotations: NodeId,
    /// 1×N attention weights.
    pub attention: NodeId,
    /// 1×2L representation before the head (after dropout in train mode).
    pub representation: NodeId,
    /// 1×width head output.
    pub prediction: NodeId,
}

pub const INPUT_EMBEDDED: &str = "x";
pub const INPUT_ZERO_STATE: &str = "zero_state";
pub const INPUT_TARGET: &str = "target";
pub const INPUT_PREDICTION: &str = "prediction";

/// Builds the model graph for `tokens` positions. The graph reads the
/// embedded sequence from input `"x"` and every parameter by name.
pub fn build_forward(cfg: &ModelConfig, tokens: usize, mode: Mode, seed: u64) -> Result<ForwardGraph> {
    cfg.validate()?;
    if tokens == 0 {
        return Err(Error::invalid("empty input"));
    }
    let l = cfg.lstm_size;
    let mut g = Graph::new(seed);
    let mut seq = g.input(INPUT_EMBEDDED);
    if mode == Mode::Train {
        if cfg.noise_sigma > 0.0 {
            seq = g.gaussian_noise(seq, cfg.noise_sigma);
        }
        if cfg.embed_dropout > 0.0 {
            seq = g.dropout(seq, cfg.embed_dropout);
        }
    }
    let zero = g.input(INPUT_ZERO_STATE);

    for layer in 0..cfg.lstm_layers {
        let mut directions = Vec::with_capacity(2);
        for dir in ["fwd", "bwd"] {
            let w_ih = g.input(format!("lstm.{layer}.{dir}.w_ih"));
            let w_hh = g.input(format!("lstm.{layer}.{dir}.w_hh"));
            let bias = g.input(format!("lstm.{layer}.{dir}.bias"));
            let projected = g.matmul(seq, w_ih);
            let mut states = vec![None; tokens];
            let (mut h, mut c) = (zero, zero);
            let order: Box<dyn Iterator<Item = usize>> = if dir == "fwd" {
                Box::new(0..tokens)
            } else {
                Box::new((0..tokens).rev())
            };
            for t in order {
                let pre = g.slice(projected, 0, t, t + 1);
                (h, c) = lstm_cell(&mut g, pre, h, c, w_hh, bias, l);
                states[t] = Some(h);
            }
            let states: Vec<NodeId> = states.into_iter().map(|s| s.expect("every step visited")).collect();
            directions.push(g.concat(&states, 0));
        }
        seq = g.concat(&directions, 1);
        g.label(seq, format!("bilstm layer {layer}"));
    }
    let annotations = seq;

    let mut scores = annotations;
    for k in 0..cfg.attention_layers {
        let w = g.input(format!("attn.{k}.w"));
        let b = g.input(format!("attn.{k}.b"));
        scores = g.matmul(scores, w);
        scores = g.add_row(scores, b);
        if k + 1 < cfg.attention_layers {
            scores = g.tanh(scores);
        }
    }
    let scores = g.reshape(scores, &[1, tokens]);
    let attention = g.softmax(scores);
    g.label(attention, "attention");
    let mut representation = g.matmul(attention, annotations);
    if mode == Mode::Train && cfg.repr_dropout > 0.0 {
        representation = g.dropout(representation, cfg.repr_dropout);
    }

    let w = g.input("head.w");
    let b = g.input("head.b");
    let logits = g.matmul(representation, w);
    let logits = g.add_row(logits, b);
    let prediction = match cfg.head {
        TaskHead::Regression | TaskHead::Multilabel(_) => g.sigmoid(logits),
        TaskHead::Ordinal(_) => g.softmax(logits),
    };
    g.label(prediction, "head");
    Ok(ForwardGraph {
        graph: g,
        tokens,
        annotations,
        attention,
        representation,
        prediction,
    })
}

/// Appends the loss for `target` to `g` and returns the scalar node plus
/// the tensor to bind to [`INPUT_TARGET`].
///
/// Regression: squared error. Ordinal: class-weighted cross-entropy.
/// Multilabel: mean binary cross-entropy. Probabilities are clipped to
/// `[1e-7, 1 - 1e-7]`.
pub fn append_loss(
    g: &mut Graph,
    prediction: NodeId,
    head: TaskHead,
    target: &Target,
    class_weights: Option<&[f64]>,
) -> Result<(NodeId, Tensor)> {
    match (head, target) {
        (TaskHead::Regression, Target::Scalar(t)) => {
            if !t.is_finite() {
                return Err(Error::invalid("regression target must be finite"));
            }
            let y = g.input(INPUT_TARGET);
            let diff = g.sub(prediction, y);
            let sq = g.mul(diff, diff);
            Ok((g.mean(sq), Tensor::row(vec![*t])))
        }
        (TaskHead::Ordinal(k), Target::Class(c)) => {
            if *c >= k {
                return Err(Error::invalid(format!("class {c} out of range for {k} classes")));
            }
            let weight = match class_weights {
                Some(w) if w.len() == k => w[*c],
                Some(w) => return Err(Error::invalid(format!("{} class weights for {k} classes", w.len()))),
                None => 1.0,
            };
            let p = g.slice(prediction, 1, *c, c + 1);
            let p = g.clamp(p, PROB_FLOOR, 1.0);
            let lp = g.log(p);
            let nll = g.affine(lp, -weight, 0.0);
            Ok((g.sum(nll), Tensor::row(vec![*c as f64])))
        }
        (TaskHead::Multilabel(m), Target::Labels(labels)) => {
            if labels.len() != m {
                return Err(Error::invalid(format!("{} labels for a {m}-label head", labels.len())));
            }
            let y = g.input(INPUT_TARGET);
            let p = g.clamp(prediction, PROB_FLOOR, 1.0 - PROB_FLOOR);
            let lp = g.log(p);
            let q = g.affine(p, -1.0, 1.0);
            let lq = g.log(q);
            let ny = g.affine(y, -1.0, 1.0);
            let pos = g.mul(y, lp);
            let neg = g.mul(ny, lq);
            let ll = g.add(pos, neg);
            let mean = g.mean(ll);
            let data = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            Ok((g.affine(mean, -1.0, 0.0), Tensor::row(data)))
        }
        (head, target) => Err(Error::invalid(format!("target {target:?} does not fit a {head} head"))),
    }
}

/// Loss of a plain prediction vector.
pub fn loss(prediction: &[f64], target: &Target, head: TaskHead, class_weights: Option<&[f64]>) -> Result<f64> {
    if prediction.len() != head.width() {
        return Err(Error::invalid(format!(
            "prediction has {} values, {head} head expects {}",
            prediction.len(),
            head.width()
        )));
    }
    let mut g = Graph::new(0);
    let p = g.input(INPUT_PREDICTION);
    let (out, t) = append_loss(&mut g, p, head, target, class_weights)?;
    let pred = Tensor::row(prediction.to_vec());
    let inputs: HashMap<&str, &Tensor> = [(INPUT_PREDICTION, &pred), (INPUT_TARGET, &t)].into();
    Ok(g.evaluate(&inputs)?.value(out).item())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub prediction: Vec<f64>,
    pub attention: Vec<f64>,
    /// N×2L.
    pub annotations: Tensor,
    pub representation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    embedding: EmbeddingMatrix,
    params: BTreeMap<String, Tensor>,
    /// Set by transfer with frozen encoder; training then only updates the
    /// head.
    pub frozen_encoder: bool,
}

impl Model {
    pub fn new(config: ModelConfig, embedding: EmbeddingMatrix, seed: u64) -> Result<Self> {
        config.validate()?;
        if embedding.dim() != config.embed_dim {
            return Err(Error::invalid(format!(
                "embedding dimension {} does not match configured {}",
                embedding.dim(),
                config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config.param_shapes(), config.lstm_size, &mut rng);
        Ok(Model {
            config,
            embedding,
            params,
            frozen_encoder: false,
        })
    }

    pub fn embedding(&self) -> &EmbeddingMatrix {
        &self.embedding
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.embedding.vocab()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replaces a parameter tensor; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Looks up embedding rows, N×W.
    pub fn embed(&self, indices: &[usize]) -> Result<Tensor> {
        let dim = self.embedding.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= self.embedding.len() {
                return Err(Error::invalid(format!(
                    "token index {i} out of range for a vocabulary of {}",
                    self.embedding.len()
                )));
            }
            data.extend_from_slice(self.embedding.row(i));
        }
        Tensor::matrix(indices.len(), dim, data)
    }

    /// Embedding layer output: rows in eval mode, rows plus Gaussian noise
    /// and dropout in train mode.
    pub fn embed_forward(&self, indices: &[usize], mode: Mode, seed: u64) -> Result<Tensor> {
        let x = self.embed(indices)?;
        if mode == Mode::Eval {
            return Ok(x);
        }
        let mut g = Graph::new(seed);
        let mut node = g.input(INPUT_EMBEDDED);
        if self.config.noise_sigma > 0.0 {
            node = g.gaussian_noise(node, self.config.noise_sigma);
        }
        if self.config.embed_dropout > 0.0 {
            node = g.dropout(node, self.config.embed_dropout);
        }
        let inputs: HashMap<&str, &Tensor> = [(INPUT_EMBEDDED, &x)].into();
        let out = g.evaluate(&inputs)?.value(node).clone();
        Ok(out)
    }

    pub fn zero_state(&self) -> Tensor {
        Tensor::zeros(&[1, self.config.lstm_size])
    }

    pub fn forward(&self, indices: &[usize], mode: Mode, seed: u64) -> Result<ForwardOutput> {
        if indices.is_empty() {
            return Err(Error::invalid("empty input"));
        }
        let fg = build_forward(&self.config, indices.len(), mode, seed)?;
        let x = self.embed(indices)?;
        let zero = self.zero_state();
        let local: HashMap<&str, &Tensor> = [(INPUT_EMBEDDED, &x), (INPUT_ZERO_STATE, &zero)].into();
        let bound = Chain(&local, &self.params);
        let eval = fg.graph.evaluate(&bound)?;
        Ok(ForwardOutput {
            prediction: eval.value(fg.prediction).data().to_vec(),
            attention: eval.value(fg.attention).data().to_vec(),
            annotations: eval.value(fg.annotations).clone(),
            representation: eval.value(fg.representation).data().to_vec(),
        })
    }

    /// Builds the forward + loss graph for one example, evaluates it and
    /// returns the loss with gradients for the parameters in `wrt`.
    pub fn loss_and_gradients(
        &self,
        indices: &[usize],
        target: &Target,
        class_weights: Option<&[f64]>,
        mode: Mode,
        seed: u64,
        wrt: &[&str],
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut fg = build_forward(&self.config, indices.len(), mode, seed)?;
        let (loss, t) = append_loss(&mut fg.graph, fg.prediction, self.config.head, target, class_weights)?;
        let x = self.embed(indices)?;
        let zero = self.zero_state();
        let local: HashMap<&str, &Tensor> =
            [(INPUT_EMBEDDED, &x), (INPUT_ZERO_STATE, &zero), (INPUT_TARGET, &t)].into();
        let bound = Chain(&local, &self.params);
        let eval = fg.graph.evaluate(&bound)?;
        let value = eval.value(loss).item();
        if wrt.is_empty() {
            return Ok((value, Vec::new()));
        }
        let nodes: Vec<NodeId> = wrt
            .iter()
            .map(|n| {
                fg.graph
                    .input_node(n)
                    .ok_or_else(|| Error::invalid(format!("model has no parameter {n:?}")))
            })
            .collect::<Result<_>>()?;
        let grads = fg.graph.gradients(&eval, loss, &nodes)?;
        Ok((value, grads))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("checkpoint");
        let cfg = &self.config;
        c.set("embed_dim", cfg.embed_dim);
        c.set("lstm_size", cfg.lstm_size);
        c.set("lstm_layers", cfg.lstm_layers);
        c.set("attention_layers", cfg.attention_layers);
        c.set("attention_hidden", cfg.attention_hidden);
        c.set("noise_sigma", cfg.noise_sigma);
        c.set("embed_dropout", cfg.embed_dropout);
        c.set("repr_dropout", cfg.repr_dropout);
        c.set("head", cfg.head);
        c.tokens = self.embedding.vocab().entries().to_vec();
        let emb = Tensor::matrix(self.embedding.len(), self.embedding.dim(), self.embedding.as_slice().to_vec())
            .expect("embedding shape");
        c.tensors.push(("embedding".into(), emb));
        for (name, _) in cfg.param_shapes() {
            c.tensors.push((name.clone(), self.params[&name].clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "checkpoint" {
            return Err(Error::invalid(format!("expected a checkpoint, found a {:?} file", c.kind)));
        }
        let config = ModelConfig {
            embed_dim: c.require("embed_dim")?,
            lstm_size: c.require("lstm_size")?,
            lstm_layers: c.require("lstm_layers")?,
            attention_layers: c.require("attention_layers")?,
            attention_hidden: c.require("attention_hidden")?,
            noise_sigma: c.require("noise_sigma")?,
            embed_dropout: c.require("embed_dropout")?,
            repr_dropout: c.require("repr_dropout")?,
            head: c.require("head")?,
        };
        config.validate()?;
        let min_count = c.tokens.iter().skip(crate::text::SPECIALS.len()).map(|(_, n)| *n).min().unwrap_or(1);
        let vocab = Vocabulary::from_entries(c.tokens.iter().cloned(), min_count)?;
        let emb = c
            .tensor("embedding")
            .ok_or_else(|| Error::invalid("checkpoint has no embedding tensor"))?;
        if emb.shape() != [vocab.len(), config.embed_dim] {
            return Err(Error::invalid(format!(
                "embedding tensor has shape {:?}, expected {:?}",
                emb.shape(),
                [vocab.len(), config.embed_dim]
            )));
        }
        let embedding = EmbeddingMatrix::new(vocab, config.embed_dim, emb.data().to_vec())?;
        let mut params = BTreeMap::new();
        let mut problems = Vec::new();
        for (name, shape) in config.param_shapes() {
            match c.tensor(&name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    params.insert(name, t.clone());
                }
                Some(t) => problems.push(format!("{name}: {:?} != {shape:?}", t.shape())),
                None => problems.push(format!("{name}: missing")),
            }
        }
        let expected = config.param_shapes().len() + 1;
        if c.tensors.len() != expected {
            problems.push(format!("{} tensors, expected {expected}", c.tensors.len()));
        }
        if !problems.is_empty() {
            return Err(Error::invalid(format!("checkpoint tensors do not match its config: {}", problems.join("; "))));
        }
        Ok(Model {
            config,
            embedding,
            params,
            frozen_encoder: false,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_container(&Container::load(path)?)
    }

    /// Reinitializes the head for `head` with `seed`; the encoder is kept.
    pub(crate) fn with_new_head(&self, head: TaskHead, seed: u64) -> Result<Model> {
        let mut config = self.config.clone();
        config.head = head;
        config.validate()?;
        let mut fresh = Model::new(config, self.embedding.clone(), seed)?;
        let mut problems = Vec::new();
        for (name, t) in &self.params {
            if !is_encoder_param(name) {
                continue;
            }
            match fresh.params.get_mut(name) {
                Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                Some(slot) => problems.push(format!("{name}: {:?} vs {:?}", t.shape(), slot.shape())),
                None => problems.push(format!("{name}: not in target model")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::invalid(format!("incompatible encoder tensors: {}", problems.join("; "))));
        }
        Ok(fresh)
    }
}

/// Turns a head output into a target: the score, the argmax class, or the
/// labels whose probability reaches 0.5.
pub fn decode(prediction: &[f64], head: TaskHead) -> Target {
    match head {
        TaskHead::Regression => Target::Scalar(prediction[0]),
        TaskHead::Ordinal(_) => Target::Class(argmax(prediction)),
        TaskHead::Multilabel(_) => Target::Labels(prediction.iter().map(|p| *p >= 0.5).collect()),
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
