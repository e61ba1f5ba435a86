//! Parameterised layers that add nodes to a [`Graph`].
//!
//! Each layer is a small config struct owning a name prefix; its parameters
//! live in a [`ParamMap`] under `"{prefix}.{name}"` and are bound to the
//! graph at evaluation time. Sequences are `T x d` matrices (one row per
//! sentence) paired with a validity mask of length `T`.
//!
//! The `*_forward` free functions evaluate a single layer eagerly on concrete
//! tensors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, glorot, SeededRng};

pub type ParamMap = BTreeMap<String, Tensor>;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Bindings for a graph evaluated in precision `R`.
pub fn bind_params<R: Real>(params: &ParamMap) -> Bindings<R> {
    params.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

/// Source of per-node dropout seeds for one training step.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    seed: u64,
    counter: u64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            seed,
            counter: 0,
        }
    }

    pub fn apply<R: Real>(&mut self, g: &mut Graph<R>, x: NodeId) -> NodeId {
        if self.rate <= 0.0 {
            return x;
        }
        self.counter += 1;
        g.dropout(x, R::lit(self.rate), derive_seed(self.seed, self.counter))
    }
}

/// Applies dropout when training, identity otherwise.
pub fn maybe_dropout<R: Real>(g: &mut Graph<R>, x: NodeId, d: Option<&mut Dropout>) -> NodeId {
    match d {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
}

pub fn activate<R: Real>(g: &mut Graph<R>, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Identity => x,
        Activation::Tanh => g.tanh(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Relu => g.relu(x),
        Activation::Softmax => g.softmax(x),
    }
}

/// Fully connected layer `activation(x W^T + b)` with `W: out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl Dense {
    pub fn new(prefix: &str, input: usize, output: usize, activation: Activation) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            output,
            activation,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, params: &mut ParamMap, rng: &mut SeededRng) {
        params.insert(self.weight_name(), glorot(self.output, self.input, rng));
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.output]));
        }
    }

    pub fn param_count(&self) -> usize {
        self.output * self.input + if self.bias { self.output } else { 0 }
    }

    /// `x` is `rows x input`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: NodeId) -> NodeId {
        let w = g.param(&self.weight_name());
        let z = g.matmul_nt(x, w);
        let z = if self.bias {
            let b = g.param(&self.bias_name());
            g.add(z, b)
        } else {
            z
        };
        activate(g, z, self.activation)
    }
}

/// Concrete parameters of a single dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

/// Eager dense layer on a vector (`in`) or batch (`rows x in`).
pub fn dense_forward(p: &DenseParams, x: &Tensor) -> Result<Tensor> {
    if p.w.rank() != 2 || p.b.len() != p.w.shape()[0] {
        return Err(Error::DimMismatch {
            expected: p.w.rows(),
            got: p.b.len(),
        });
    }
    let (out, inp) = (p.w.shape()[0], p.w.shape()[1]);
    if x.cols() != inp {
        return Err(Error::DimMismatch {
            expected: inp,
            got: x.cols(),
        });
    }
    let layer = Dense::new("dense", inp, out, p.activation);
    let mut g = Graph::<f64>::new();
    let xi = g.input("x");
    let vector = x.rank() == 1;
    let x2 = if vector { g.reshape(xi, &[1, inp]) } else { xi };
    let y = layer.forward(&mut g, x2);
    let y = if vector { g.reshape(y, &[out]) } else { y };
    let mut b = Bindings::new();
    b.insert("x".into(), x.clone());
    b.insert(layer.weight_name(), p.w.clone());
    b.insert(layer.bias_name(), p.b.clone());
    Ok(g.evaluate(&b)?.value(y).clone())
}

/// Learned affine layer normalisation over the last axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, params: &mut ParamMap) {
        params.insert(format!("{}.gamma", self.prefix), Tensor::ones(&[self.dim]));
        params.insert(format!("{}.beta", self.prefix), Tensor::zeros(&[self.dim]));
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: NodeId) -> NodeId {
        let gamma = g.param(&format!("{}.gamma", self.prefix));
        let beta = g.param(&format!("{}.beta", self.prefix));
        let n = g.normalize(x, R::lit(LAYER_NORM_EPS));
        let s = g.mul(n, gamma);
        g.add(s, beta)
    }
}

/// Single-direction LSTM. Gate blocks inside the stacked weights are ordered
/// input, forget, candidate, output:
/// `w_ih: 4H x in`, `w_hh: 4H x H`, `b: 4H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

/// Graph nodes produced by one LSTM pass.
#[derive(Clone, Debug)]
pub struct LstmNodes {
    /// `T x H`, row `t` is the state after position `t` (masked positions
    /// repeat the previous state).
    pub states: NodeId,
    /// `1 x H` hidden state after the last valid position.
    pub final_hidden: NodeId,
    pub final_cell: NodeId,
}

impl Lstm {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn names(&self) -> [String; 3] {
        [
            format!("{}.w_ih", self.prefix),
            format!("{}.w_hh", self.prefix),
            format!("{}.b", self.prefix),
        ]
    }

    pub fn init(&self, params: &mut ParamMap, rng: &mut SeededRng) {
        let h = self.hidden;
        let [wi, wh, b] = self.names();
        params.insert(wi, glorot(4 * h, self.input, rng));
        params.insert(wh, glorot(4 * h, h, rng));
        let mut bias = Tensor::zeros(&[4 * h]);
        // forget-gate bias starts at 1
        for v in &mut bias.data_mut()[h..2 * h] {
            *v = 1.0;
        }
        params.insert(b, bias);
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }

    /// Runs the recurrence over `seq` (`T x input`, `T = mask.len()`).
    /// Masked timesteps are skipped: state passes through unchanged.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        seq: NodeId,
        mask: &[bool],
        reverse: bool,
    ) -> LstmNodes {
        let h_dim = self.hidden;
        let t_len = mask.len();
        let [wi, wh, b] = self.names();
        let w_ih = g.param(&wi);
        let w_hh = g.param(&wh);
        let bias = g.param(&b);
        let mut h = g.constant(Tensor::zeros(&[1, h_dim]));
        let mut c = g.constant(Tensor::zeros(&[1, h_dim]));
        if t_len == 0 {
            let states = g.constant(Tensor::zeros(&[0, h_dim]));
            return LstmNodes {
                states,
                final_hidden: h,
                final_cell: c,
            };
        }
        let xw = g.matmul_nt(seq, w_ih);
        let xw = g.add(xw, bias);
        let mut states = vec![h; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            if mask[t] {
                let row = g.slice(xw, 0, t, t + 1);
                let rec = g.matmul_nt(h, w_hh);
                let z = g.add(row, rec);
                let zi = g.slice(z, 1, 0, h_dim);
                let zf = g.slice(z, 1, h_dim, 2 * h_dim);
                let zg = g.slice(z, 1, 2 * h_dim, 3 * h_dim);
                let zo = g.slice(z, 1, 3 * h_dim, 4 * h_dim);
                let i = g.sigmoid(zi);
                let f = g.sigmoid(zf);
                let cand = g.tanh(zg);
                let o = g.sigmoid(zo);
                let fc = g.mul(f, c);
                let ic = g.mul(i, cand);
                c = g.add(fc, ic);
                let tc = g.tanh(c);
                h = g.mul(o, tc);
            }
            states[t] = h;
        }
        let states = g.concat(&states, 0);
        LstmNodes {
            states,
            final_hidden: h,
            final_cell: c,
        }
    }
}

/// Concrete LSTM parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b: Tensor,
    pub hidden: usize,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
            hidden,
        }
    }

    pub fn random(input: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let layer = Lstm::new("lstm", input, hidden);
        let mut m = ParamMap::new();
        layer.init(&mut m, rng);
        Self::from_map(&layer, &m)
    }

    fn from_map(layer: &Lstm, m: &ParamMap) -> Self {
        let [wi, wh, b] = layer.names();
        Self {
            w_ih: m[&wi].clone(),
            w_hh: m[&wh].clone(),
            b: m[&b].clone(),
            hidden: layer.hidden,
        }
    }

    fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden;
        let ok = self.w_ih.rank() == 2
            && self.w_ih.rows() == 4 * h
            && self.w_hh.shape() == [4 * h, h]
            && self.b.shape() == [4 * h];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidTensor(format!(
                "inconsistent LSTM parameters for hidden size {}",
                h
            )))
        }
    }

    fn bind(&self, layer: &Lstm, b: &mut Bindings) {
        let [wi, wh, bn] = layer.names();
        b.insert(wi, self.w_ih.clone());
        b.insert(wh, self.w_hh.clone());
        b.insert(bn, self.b.clone());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmOutput {
    /// `T x H`
    pub states: Tensor,
    /// `H`
    pub final_hidden: Tensor,
}

fn check_seq(seq: &Tensor, mask: &[bool], dim: usize) -> Result<()> {
    if seq.rank() != 2 || seq.rows() != mask.len() {
        return Err(Error::LengthMismatch(seq.rows(), mask.len()));
    }
    if seq.cols() != dim && seq.rows() > 0 {
        return Err(Error::DimMismatch {
            expected: dim,
            got: seq.cols(),
        });
    }
    Ok(())
}

/// Eager LSTM over a `T x d_in` sequence.
pub fn lstm_forward(p: &LstmParams, seq: &Tensor, mask: &[bool]) -> Result<LstmOutput> {
    p.validate()?;
    check_seq(seq, mask, p.input_dim())?;
    let layer = Lstm::new("lstm", p.input_dim(), p.hidden);
    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let nodes = layer.forward(&mut g, x, mask, false);
    let mut b = Bindings::new();
    b.insert("x".into(), seq.clone());
    p.bind(&layer, &mut b);
    let e = g.evaluate(&b)?;
    Ok(LstmOutput {
        states: e.value(nodes.states).clone(),
        final_hidden: e.value(nodes.final_hidden).clone().reshaped(&[p.hidden])?,
    })
}

/// Forward and backward LSTMs with per-timestep concatenated states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

#[derive(Clone, Debug)]
pub struct BiLstmNodes {
    /// `T x 2H`
    pub states: NodeId,
    pub final_forward: NodeId,
    pub final_backward: NodeId,
}

impl BiLstm {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            forward: Lstm::new(&format!("{}.fwd", prefix), input, hidden),
            backward: Lstm::new(&format!("{}.bwd", prefix), input, hidden),
        }
    }

    pub fn init(&self, params: &mut ParamMap, rng: &mut SeededRng) {
        self.forward.init(params, rng);
        self.backward.init(params, rng);
    }

    pub fn param_count(&self) -> usize {
        self.forward.param_count() + self.backward.param_count()
    }

    pub fn apply<R: Real>(&self, g: &mut Graph<R>, seq: NodeId, mask: &[bool]) -> BiLstmNodes {
        let f = self.forward.forward(g, seq, mask, false);
        let b = self.backward.forward(g, seq, mask, true);
        let states = g.concat(&[f.states, b.states], 1);
        BiLstmNodes {
            states,
            final_forward: f.final_hidden,
            final_backward: b.final_hidden,
        }
    }
}

/// Eager bidirectional LSTM, `T x 2H`.
pub fn bilstm_forward(
    fwd: &LstmParams,
    bwd: &LstmParams,
    seq: &Tensor,
    mask: &[bool],
) -> Result<Tensor> {
    fwd.validate()?;
    bwd.validate()?;
    if fwd.hidden != bwd.hidden || fwd.input_dim() != bwd.input_dim() {
        return Err(Error::InvalidTensor("forward/backward LSTM shapes differ".into()));
    }
    check_seq(seq, mask, fwd.input_dim())?;
    let layer = BiLstm::new("bilstm", fwd.input_dim(), fwd.hidden);
    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let nodes = layer.apply(&mut g, x, mask);
    let mut b = Bindings::new();
    b.insert("x".into(), seq.clone());
    fwd.bind(&layer.forward, &mut b);
    bwd.bind(&layer.backward, &mut b);
    Ok(g.evaluate(&b)?.value(nodes.states).clone())
}

/// Transformer encoder block: multi-head self-attention and a position-wise
/// feed-forward sublayer, each with residual connection and layer norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhaBlock {
    pub prefix: String,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub feed_forward: bool,
    pub layer_norm: bool,
}

#[derive(Clone, Debug)]
pub struct MhaNodes {
    /// `T x d_model`
    pub output: NodeId,
    /// Per head, `T x T` attention weights (rows = queries).
    pub attention: Vec<NodeId>,
}

impl MhaBlock {
    pub fn new(prefix: &str, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidSpec(format!(
                "d_model {} is not divisible by {} heads",
                d_model, heads
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            d_model,
            heads,
            d_ff,
            feed_forward: true,
            layer_norm: true,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn proj(&self, name: &str) -> Dense {
        let d = Dense::new(
            &format!("{}.{}", self.prefix, name),
            self.d_model,
            self.d_model,
            Activation::Identity,
        );
        // a key bias adds the same q.b to every score in a row, which the
        // softmax cancels, so it would be a parameter with zero gradient
        if name == "k" {
            d.without_bias()
        } else {
            d
        }
    }

    fn ffn(&self) -> (Dense, Dense) {
        (
            Dense::new(
                &format!("{}.ff1", self.prefix),
                self.d_model,
                self.d_ff,
                Activation::Relu,
            ),
            Dense::new(
                &format!("{}.ff2", self.prefix),
                self.d_ff,
                self.d_model,
                Activation::Identity,
            ),
        )
    }

    fn norms(&self) -> (LayerNorm, LayerNorm) {
        (
            LayerNorm::new(&format!("{}.ln1", self.prefix), self.d_model),
            LayerNorm::new(&format!("{}.ln2", self.prefix), self.d_model),
        )
    }

    pub fn init(&self, params: &mut ParamMap, rng: &mut SeededRng) {
        for n in ["q", "k", "v", "o"] {
            self.proj(n).init(params, rng);
        }
        if self.feed_forward {
            let (a, b) = self.ffn();
            a.init(params, rng);
            b.init(params, rng);
        }
        if self.layer_norm {
            let (a, b) = self.norms();
            a.init(params);
            b.init(params);
        }
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let mut n = 4 * d * d + 3 * d;
        if self.feed_forward {
            let (a, b) = self.ffn();
            n += a.param_count() + b.param_count();
        }
        if self.layer_norm {
            n += 4 * d;
        }
        n
    }

    /// Multi-head scaled dot-product self-attention followed by the output
    /// projection. Masked key positions receive zero weight.
    pub fn attention<R: Real>(&self, g: &mut Graph<R>, x: NodeId, mask: &[bool]) -> MhaNodes {
        let q = self.proj("q").forward(g, x);
        let k = self.proj("k").forward(g, x);
        let v = self.proj("v").forward(g, x);
        let dk = self.head_dim();
        let scale = R::one() / R::lit(dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 1, lo, hi), g.slice(k, 1, lo, hi), g.slice(v, 1, lo, hi))
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let w = g.softmax_masked(scores, mask);
            attention.push(w);
            heads.push(g.matmul(w, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)
        };
        let output = self.proj("o").forward(g, cat);
        MhaNodes { output, attention }
    }

    pub fn apply<R: Real>(
        &self,
        g: &mut Graph<R>,
        x: NodeId,
        mask: &[bool],
        mut dropout: Option<&mut Dropout>,
    ) -> MhaNodes {
        let att = self.attention(g, x, mask);
        let a = maybe_dropout(g, att.output, dropout.as_deref_mut());
        let mut h = g.add(x, a);
        let (ln1, ln2) = self.norms();
        if self.layer_norm {
            h = ln1.forward(g, h);
        }
        if self.feed_forward {
            let (f1, f2) = self.ffn();
            let z = f1.forward(g, h);
            let z = f2.forward(g, z);
            let z = maybe_dropout(g, z, dropout);
            h = g.add(h, z);
            if self.layer_norm {
                h = ln2.forward(g, h);
            }
        }
        MhaNodes {
            output: h,
            attention: att.attention,
        }
    }
}

/// An [`MhaBlock`] together with concrete parameter values.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub block: MhaBlock,
    pub params: ParamMap,
}

impl MhaParams {
    pub fn random(block: MhaBlock, rng: &mut SeededRng) -> Self {
        let mut params = ParamMap::new();
        block.init(&mut params, rng);
        Self { block, params }
    }
}

#[derive(Clone, Debug)]
pub struct MhaOutput {
    pub output: Tensor,
    pub attention: Vec<Tensor>,
}

/// Eager encoder block over a `T x d_model` sequence.
pub fn mha_block(p: &MhaParams, seq: &Tensor, mask: &[bool]) -> Result<MhaOutput> {
    if p.block.heads == 0 || !p.block.d_model.is_multiple_of(p.block.heads) {
        return Err(Error::InvalidSpec(format!(
            "d_model {} is not divisible by {} heads",
            p.block.d_model, p.block.heads
        )));
    }
    check_seq(seq, mask, p.block.d_model)?;
    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let nodes = p.block.apply(&mut g, x, mask, None);
    let mut b = bind_params::<f64>(&p.params);
    b.insert("x".into(), seq.clone());
    let e = g.evaluate(&b)?;
    Ok(MhaOutput {
        output: e.value(nodes.output).clone(),
        attention: nodes.attention.iter().map(|&n| e.value(n).clone()).collect(),
    })
}

/// Luong multiplicative attention: `s_i = q^T W k_i`, softmax over valid keys,
/// context `sum_i w_i k_i`. `query` is `1 x d`, `keys` is `T x d`.
/// Returns `(context 1 x d, weights 1 x T)`.
pub fn luong_attention<R: Real>(
    g: &mut Graph<R>,
    query: NodeId,
    keys: NodeId,
    w: NodeId,
    mask: &[bool],
) -> (NodeId, NodeId) {
    let qw = g.matmul(query, w);
    let scores = g.matmul_nt(qw, keys);
    let weights = g.softmax_masked(scores, mask);
    let context = g.matmul(weights, keys);
    (context, weights)
}

/// Eager Luong scoring: `(context, weights)`.
pub fn luong_score(query: &Tensor, keys: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = query.len();
    if keys.rank() != 2 || keys.cols() != d || w.shape() != [d, d] {
        return Err(Error::DimMismatch {
            expected: d,
            got: keys.cols(),
        });
    }
    let mut g = Graph::<f64>::new();
    let q = g.input("q");
    let q = g.reshape(q, &[1, d]);
    let k = g.input("k");
    let wn = g.input("w");
    let mask = vec![true; keys.rows()];
    let (c, a) = luong_attention(&mut g, q, k, wn, &mask);
    let mut b = Bindings::new();
    b.insert("q".into(), query.clone());
    b.insert("k".into(), keys.clone());
    b.insert("w".into(), w.clone());
    let e = g.evaluate(&b)?;
    Ok((
        e.value(c).clone().reshaped(&[d])?,
        e.value(a).clone().reshaped(&[keys.rows()])?,
    ))
}

/// Sinusoidal position table, `len x dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / num_traits::Float::powf(10000.0f64, pair / dim as f64);
            data.push(if i % 2 == 0 {
                num_traits::Float::sin(angle)
            } else {
                num_traits::Float::cos(angle)
            });
        }
    }
    Tensor::new(vec![len, dim], data).expect("len x dim")
}

/// Mean over valid rows of a `T x d` node, as `1 x d`.
pub fn masked_mean<R: Real>(g: &mut Graph<R>, x: NodeId, mask: &[bool]) -> NodeId {
    let count = mask.iter().filter(|&&m| m).count().max(1);
    let w: Vec<R> = mask
        .iter()
        .map(|&m| if m { R::one() / R::lit(count as f64) } else { R::zero() })
        .collect();
    let wn = g.constant(Tensor::new(vec![1, mask.len()], w).expect("1 x T"));
    g.matmul(wn, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::rng::{normal_tensor, seeded};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn dense_identity() {
        let p = DenseParams {
            w: Tensor::identity(2),
            b: Tensor::zeros(&[2]),
            activation: Activation::Identity,
        };
        let y = dense_forward(&p, &Tensor::vector(vec![2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn dense_sum_plus_bias() {
        let p = DenseParams {
            w: Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            b: Tensor::vector(vec![1.0]),
            activation: Activation::Identity,
        };
        let y = dense_forward(&p, &Tensor::vector(vec![2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn dense_softmax_symmetric() {
        let p = DenseParams {
            w: Tensor::identity(2),
            b: Tensor::zeros(&[2]),
            activation: Activation::Softmax,
        };
        let y = dense_forward(&p, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn dense_rejects_wrong_input() {
        let p = DenseParams {
            w: Tensor::identity(2),
            b: Tensor::zeros(&[2]),
            activation: Activation::Identity,
        };
        assert!(dense_forward(&p, &Tensor::vector(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn lstm_empty_sequence() {
        let p = LstmParams::random(3, 4, &mut seeded(1));
        let out = lstm_forward(&p, &Tensor::zeros(&[0, 3]), &[]).unwrap();
        assert_eq!(out.final_hidden, Tensor::zeros(&[4]));
        assert_eq!(out.states.shape(), &[0, 4]);
    }

    #[test]
    fn lstm_zero_params_give_zero_states() {
        let p = LstmParams::zeros(3, 2);
        let seq = normal_tensor(&[5, 3], 1.0, &mut seeded(2));
        let out = lstm_forward(&p, &seq, &[true; 5]).unwrap();
        assert!(out.states.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_masked_padding_keeps_final_state() {
        let p = LstmParams::random(3, 4, &mut seeded(3));
        let seq = normal_tensor(&[4, 3], 1.0, &mut seeded(4));
        let base = lstm_forward(&p, &seq, &[true; 4]).unwrap();
        let pad = seq.vstack(&normal_tensor(&[2, 3], 5.0, &mut seeded(5))).unwrap();
        let padded = lstm_forward(&p, &pad, &[true, true, true, true, false, false]).unwrap();
        assert_eq!(base.final_hidden, padded.final_hidden);
    }

    #[test]
    fn bilstm_palindrome_mirrors() {
        let p = LstmParams::random(2, 3, &mut seeded(6));
        let rows = [[0.1, -0.4], [0.7, 0.2], [-0.3, 0.9], [0.7, 0.2], [0.1, -0.4]];
        let seq = Tensor::from_rows(&rows).unwrap();
        let out = bilstm_forward(&p, &p, &seq, &[true; 5]).unwrap();
        for t in 0..5 {
            let fwd = &out.row(t)[..3];
            let bwd = &out.row(4 - t)[3..];
            assert!(close(fwd, bwd, 1e-14));
        }
    }

    #[test]
    fn bilstm_zero_params() {
        let p = LstmParams::zeros(2, 3);
        let seq = normal_tensor(&[4, 2], 1.0, &mut seeded(7));
        let out = bilstm_forward(&p, &p, &seq, &[true; 4]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_masked_tail_does_not_leak() {
        let mut rng = seeded(8);
        let f = LstmParams::random(2, 3, &mut rng);
        let b = LstmParams::random(2, 3, &mut rng);
        let seq = normal_tensor(&[3, 2], 1.0, &mut rng);
        let base = bilstm_forward(&f, &b, &seq, &[true; 3]).unwrap();
        let pad = seq.vstack(&normal_tensor(&[2, 2], 3.0, &mut rng)).unwrap();
        let out = bilstm_forward(&f, &b, &pad, &[true, true, true, false, false]).unwrap();
        for t in 0..3 {
            assert_eq!(base.row(t), out.row(t));
        }
    }

    fn identity_block(d: usize) -> MhaParams {
        let mut block = MhaBlock::new("blk", d, 1, 4).unwrap();
        block.feed_forward = false;
        block.layer_norm = false;
        let mut params = ParamMap::new();
        for n in ["q", "k", "v", "o"] {
            params.insert(format!("blk.{}.w", n), Tensor::identity(d));
        }
        for n in ["q", "v", "o"] {
            params.insert(format!("blk.{}.b", n), Tensor::zeros(&[d]));
        }
        MhaParams { block, params }
    }

    #[test]
    fn single_key_attention_returns_value() {
        let p = identity_block(3);
        let v = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let att = p.block.attention(&mut g, x, &[true]);
        let mut b = bind_params::<f64>(&p.params);
        b.insert("x".into(), v.clone());
        let e = g.evaluate(&b).unwrap();
        assert_eq!(e.value(att.output), &v);
        // residual path without layer norm doubles the value
        let out = mha_block(&p, &v, &[true]).unwrap();
        assert_eq!(out.output.data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn layer_norm_on_residual() {
        let mut p = identity_block(3);
        p.block.layer_norm = true;
        p.block.norms().0.init(&mut p.params);
        let v = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let out = mha_block(&p, &v, &[true]).unwrap();
        let s = [1.0, -2.0, 4.0];
        let mean = 1.0;
        let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        let expect: Vec<f64> = s.iter().map(|x| (x - mean) / (var + 1e-6).sqrt()).collect();
        assert!(close(out.output.data(), &expect, 1e-12));
    }

    #[test]
    fn heads_must_divide_model_width() {
        assert!(matches!(MhaBlock::new("b", 512, 3, 64), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let block = MhaBlock::new("blk", 8, 2, 16).unwrap();
        let p = MhaParams::random(block, &mut seeded(9));
        let seq = normal_tensor(&[5, 8], 1.0, &mut seeded(10));
        let mask = [true, true, false, true, false];
        let out = mha_block(&p, &seq, &mask).unwrap();
        for w in &out.attention {
            for r in 0..5 {
                let row = w.row(r);
                assert_eq!(row[2], 0.0);
                assert_eq!(row[4], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    /// Literal single-head attention: softmax(q k^T / sqrt(d)) v with q, k, v
    /// computed by explicit loops.
    fn oracle_attention(p: &ParamMap, x: &Tensor, d: usize) -> Vec<f64> {
        let t = x.rows();
        let proj = |name: &str| -> Vec<Vec<f64>> {
            let w = &p[&format!("blk.{}.w", name)];
            let zero = Tensor::zeros(&[d]);
            let b = p.get(&format!("blk.{}.b", name)).unwrap_or(&zero);
            (0..t)
                .map(|r| {
                    (0..d)
                        .map(|o| b.data()[o] + (0..d).map(|i| w.at(o, i) * x.at(r, i)).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let wo = &p["blk.o.w"];
        let bo = &p["blk.o.b"];
        let mut out = Vec::new();
        for r in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|c| (0..d).map(|i| q[r][i] * k[c][i]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let ctx: Vec<f64> = (0..d)
                .map(|i| (0..t).map(|c| e[c] / z * v[c][i]).sum())
                .collect();
            for o in 0..d {
                out.push(bo.data()[o] + (0..d).map(|i| wo.at(o, i) * ctx[i]).sum::<f64>());
            }
        }
        out
    }

    #[test]
    fn single_head_matches_oracle() {
        let mut rng = seeded(11);
        for case in 0..20 {
            let block = MhaBlock::new("blk", 6, 1, 8).unwrap();
            let p = MhaParams::random(block, &mut rng);
            let t = 1 + case % 5;
            let x = normal_tensor(&[t, 6], 1.0, &mut rng);
            let mut g = Graph::<f64>::new();
            let xi = g.input("x");
            let att = p.block.attention(&mut g, xi, &vec![true; t]);
            let mut b = bind_params::<f64>(&p.params);
            b.insert("x".into(), x.clone());
            let got = g.evaluate(&b).unwrap().value(att.output).clone();
            assert!(close(got.data(), &oracle_attention(&p.params, &x, 6), 1e-10));
        }
    }

    #[test]
    fn mha_padding_invariance() {
        let block = MhaBlock::new("blk", 8, 2, 16).unwrap();
        let p = MhaParams::random(block, &mut seeded(12));
        let seq = normal_tensor(&[4, 8], 1.0, &mut seeded(13));
        let base = mha_block(&p, &seq, &[true; 4]).unwrap().output;
        let pad = seq.vstack(&normal_tensor(&[3, 8], 4.0, &mut seeded(14))).unwrap();
        let mut mask = vec![true; 4];
        mask.extend([false; 3]);
        let out = mha_block(&p, &pad, &mask).unwrap().output;
        for t in 0..4 {
            assert!(close(base.row(t), out.row(t), 1e-10));
        }
    }

    #[test]
    fn mha_is_permutation_equivariant() {
        let block = MhaBlock::new("blk", 8, 4, 16).unwrap();
        let p = MhaParams::random(block, &mut seeded(15));
        let seq = normal_tensor(&[5, 8], 1.0, &mut seeded(16));
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<&[f64]> = perm.iter().map(|&i| seq.row(i)).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        let a = mha_block(&p, &seq, &[true; 5]).unwrap().output;
        let b = mha_block(&p, &permuted, &[true; 5]).unwrap().output;
        for (k, &i) in perm.iter().enumerate() {
            assert!(close(b.row(k), a.row(i), 1e-12));
        }
    }

    #[test]
    fn luong_worked_example() {
        let (ctx, w) = luong_score(
            &Tensor::vector(vec![1.0, 0.0]),
            &Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            &Tensor::identity(2),
        )
        .unwrap();
        let e = core::f64::consts::E;
        assert!(close(w.data(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12));
        assert!(close(ctx.data(), &[0.7311, 0.2689], 1e-4));
    }

    #[test]
    fn luong_equal_keys_and_zero_weight_are_uniform() {
        let keys = Tensor::from_rows(&[[0.3, 0.4], [0.3, 0.4], [0.3, 0.4]]).unwrap();
        let (ctx, w) = luong_score(&Tensor::vector(vec![1.0, -2.0]), &keys, &Tensor::identity(2)).unwrap();
        assert!(close(w.data(), &[1.0 / 3.0; 3], 1e-12));
        assert!(close(ctx.data(), &[0.3, 0.4], 1e-12));
        let keys = Tensor::from_rows(&[[1.0, 0.0], [0.0, 5.0]]).unwrap();
        let (_, w) = luong_score(&Tensor::vector(vec![1.0, 1.0]), &keys, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(close(w.data(), &[0.5, 0.5], 1e-15));
    }

    fn weighted_loss(g: &mut Graph<f64>, out: NodeId, shape: &[usize], seed: u64) -> NodeId {
        let r = g.constant(normal_tensor(shape, 1.0, &mut seeded(seed)));
        let m = g.mul(out, r);
        g.sum(m)
    }

    fn check_all(g: &Graph<f64>, b: &Bindings, loss: NodeId) {
        let names: Vec<String> = b.keys().cloned().collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let report = gradient_check(g, b, loss, &refs, 1e-5).unwrap();
        let worst = report.worst().unwrap();
        assert!(
            report.max_rel_error() < 1e-4,
            "{} rel err {}",
            worst.name,
            worst.max_rel_error
        );
    }

    #[test]
    fn gradient_check_dense_and_layer_norm() {
        let mut rng = seeded(20);
        let d = Dense::new("d", 4, 3, Activation::Tanh);
        let ln = LayerNorm::new("ln", 3);
        let mut p = ParamMap::new();
        d.init(&mut p, &mut rng);
        ln.init(&mut p);
        p.insert("ln.gamma".into(), normal_tensor(&[3], 1.0, &mut rng));
        p.insert("ln.beta".into(), normal_tensor(&[3], 1.0, &mut rng));
        let mut g = Graph::new();
        let x = g.input("x");
        let y = d.forward(&mut g, x);
        let y = ln.forward(&mut g, y);
        let loss = weighted_loss(&mut g, y, &[5, 3], 21);
        let mut b = bind_params(&p);
        b.insert("x".into(), normal_tensor(&[5, 4], 1.0, &mut rng));
        check_all(&g, &b, loss);
    }

    #[test]
    fn gradient_check_lstm_and_bilstm() {
        let mut rng = seeded(22);
        let layer = BiLstm::new("bi", 3, 4);
        let mut p = ParamMap::new();
        layer.init(&mut p, &mut rng);
        let mut g = Graph::new();
        let x = g.input("x");
        let mask = [true, true, false, true];
        let nodes = layer.apply(&mut g, x, &mask);
        let l1 = weighted_loss(&mut g, nodes.states, &[4, 8], 23);
        let l2 = weighted_loss(&mut g, nodes.final_backward, &[1, 4], 24);
        let loss = g.add(l1, l2);
        let mut b = bind_params(&p);
        b.insert("x".into(), normal_tensor(&[4, 3], 1.0, &mut rng));
        check_all(&g, &b, loss);
    }

    #[test]
    fn gradient_check_mha_block() {
        let mut rng = seeded(25);
        let block = MhaBlock::new("blk", 8, 2, 12).unwrap();
        let mut p = ParamMap::new();
        block.init(&mut p, &mut rng);
        let mut g = Graph::new();
        let x = g.input("x");
        let mask = [true, false, true];
        let out = block.apply(&mut g, x, &mask, None);
        let loss = weighted_loss(&mut g, out.output, &[3, 8], 26);
        let mut b = bind_params(&p);
        b.insert("x".into(), normal_tensor(&[3, 8], 1.0, &mut rng));
        check_all(&g, &b, loss);
    }

    #[test]
    fn gradient_check_luong() {
        let mut rng = seeded(27);
        let mut g = Graph::new();
        let q = g.input("q");
        let k = g.input("k");
        let w = g.param("w");
        let (c, _) = luong_attention(&mut g, q, k, w, &[true, true, false, true]);
        let loss = weighted_loss(&mut g, c, &[1, 5], 28);
        let mut b = Bindings::new();
        b.insert("q".into(), normal_tensor(&[1, 5], 1.0, &mut rng));
        b.insert("k".into(), normal_tensor(&[4, 5], 1.0, &mut rng));
        b.insert("w".into(), normal_tensor(&[5, 5], 0.5, &mut rng));
        check_all(&g, &b, loss);
    }

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding(2, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(1, 3) - (1.0f64 / 100.0).cos()).abs() < 1e-15);
    }
}
