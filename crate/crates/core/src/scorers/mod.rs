//! The scorer family over sentence-embedding sequences.
//!
//! Every model maps one essay (a `T x d_e` matrix plus mask) to a feature
//! vector, then to two heads: a softmax over the set's score classes and a
//! sigmoid regression of the normalised score. Kinds differ only in the
//! encoder:
//!
//! * `lstm`: LSTM final state, then two dense layers.
//! * `mha`: one encoder block over `[CLS; sentences]`, CLS (or Luong) readout, one dense layer.
//! * `mha2`: as `mha` with two stacked blocks.
//! * `mha_blstm`: encoder blocks, then a BiLSTM whose final states and
//!   masked mean feed one dense layer.
//! * `passage_conditioned`: a shared `mha2` trunk encodes both essay and
//!   passage; both readouts plus standardised essay statistics feed one
//!   dense layer.

pub mod data;
mod train;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::embeddings::EssayStats;
use crate::error::{Error, Result};
use crate::evaluation::Scorer;
use crate::hypergen::{ClassLossKind, HyperParams, Readout};
use crate::layers::{
    bind_params, luong_attention, masked_mean, maybe_dropout, positional_encoding, Activation, BiLstm, Dense,
    Dropout, Lstm, MhaBlock, ParamMap,
};
use crate::objectives::{cce_node, combined_node, kappa_node, mse_node, smoothed_targets};
use crate::rng::{glorot, normal_tensor, seeded};

pub use data::{EssayInput, ExampleSource, TrainExample};
pub use train::{train, EpochLog, NeuralLearner, StopReason, TrainReport};

/// Standard deviation of the CLS vector at initialisation.
pub const CLS_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lstm,
    Mha,
    Mha2,
    MhaBlstm,
    PassageConditioned,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Lstm,
        ModelKind::Mha,
        ModelKind::Mha2,
        ModelKind::MhaBlstm,
        ModelKind::PassageConditioned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Mha => "mha",
            ModelKind::Mha2 => "mha2",
            ModelKind::MhaBlstm => "mha_blstm",
            ModelKind::PassageConditioned => "passage_conditioned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown model kind `{}`", s)))
    }

    fn uses_attention(self) -> bool {
        !matches!(self, ModelKind::Lstm)
    }
}

fn default_mha_layers() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hp: HyperParams,
    pub input_dim: usize,
    pub n_classes: usize,
    pub score_min: i64,
    pub score_max: i64,
    /// Encoder depth for `mha_blstm` (`mha` is 1 and the `mha2` trunks 2).
    #[serde(default = "default_mha_layers")]
    pub mha_layers: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, hp: HyperParams, input_dim: usize, score_min: i64, score_max: i64) -> Self {
        Self {
            kind,
            hp,
            input_dim,
            n_classes: (score_max - score_min + 1).max(0) as usize,
            score_min,
            score_max,
            mha_layers: default_mha_layers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if self.score_max <= self.score_min || self.n_classes != (self.score_max - self.score_min + 1) as usize {
            return bad(format!(
                "score range [{}, {}] does not give {} classes",
                self.score_min, self.score_max, self.n_classes
            ));
        }
        if self.kind.uses_attention() && !self.hp.d_model.is_multiple_of(self.hp.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.hp.d_model, self.hp.n_heads
            ));
        }
        if self.kind == ModelKind::MhaBlstm && (!self.hp.d_model.is_multiple_of(2) || self.mha_layers == 0) {
            return bad("mha_blstm needs an even d_model and at least one encoder block".into());
        }
        Ok(())
    }

    fn blocks(&self) -> usize {
        match self.kind {
            ModelKind::Lstm => 0,
            ModelKind::Mha => 1,
            ModelKind::Mha2 | ModelKind::PassageConditioned => 2,
            ModelKind::MhaBlstm => self.mha_layers,
        }
    }
}

/// Per-feature mean and standard deviation of the essay statistics, taken
/// from the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsNorm {
    pub mean: [f64; EssayStats::COUNT],
    pub std: [f64; EssayStats::COUNT],
}

impl Default for StatsNorm {
    fn default() -> Self {
        Self {
            mean: [0.0; EssayStats::COUNT],
            std: [1.0; EssayStats::COUNT],
        }
    }
}

impl StatsNorm {
    pub fn fit(rows: &[[f64; EssayStats::COUNT]]) -> Self {
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; EssayStats::COUNT];
        let mut std = [0.0; EssayStats::COUNT];
        for k in 0..EssayStats::COUNT {
            mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean[k]) * (r[k] - mean[k])).sum::<f64>() / n;
            let s = Float::sqrt(var);
            std[k] = if s > 1e-9 { s } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, raw: &[f64; EssayStats::COUNT]) -> [f64; EssayStats::COUNT] {
        let mut z = [0.0; EssayStats::COUNT];
        for k in 0..EssayStats::COUNT {
            z[k] = (raw[k] - self.mean[k]) / self.std[k];
        }
        z
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub trained: bool,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_qwk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub class_probs: Vec<f64>,
    /// Regression head output in `[0, 1]`.
    pub regression: f64,
    /// `sum_k P(k) (score_min + k)`
    pub expected_score: f64,
    /// Regression output on the score scale.
    pub regression_score: f64,
    /// Weight of the classification estimate in the blend.
    pub p: f64,
    pub score: i64,
}

/// `round(p E + (1 - p) R)` clamped to `[min, max]`.
pub fn blend_score(p: f64, expected: f64, regression: f64, min: i64, max: i64) -> i64 {
    let v = Float::round(p * expected + (1.0 - p) * regression);
    if v.is_nan() {
        return min;
    }
    Float::min(Float::max(v, min as f64), max as f64) as i64
}

/// Layer configuration derived from a [`ModelSpec`].
#[derive(Clone, Debug)]
struct Arch {
    proj: Option<Dense>,
    lstm: Option<Lstm>,
    blocks: Vec<MhaBlock>,
    luong: bool,
    blstm: Option<BiLstm>,
    features: Vec<Dense>,
    class_head: Dense,
    reg_head: Dense,
}

impl Arch {
    fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let hp = &spec.hp;
        let d = hp.d_model;
        let proj = (spec.input_dim != d).then(|| Dense::new("proj", spec.input_dim, d, Activation::Identity));
        let mut blocks = Vec::new();
        for i in 0..spec.blocks() {
            blocks.push(MhaBlock::new(&format!("mha{}", i), d, hp.n_heads, hp.d_ff)?);
        }
        let luong = spec.kind.uses_attention() && spec.kind != ModelKind::MhaBlstm && hp.readout == Readout::Luong;
        let (lstm, blstm, width, n_dense) = match spec.kind {
            ModelKind::Lstm => (Some(Lstm::new("lstm", d, d)), None, d, 2),
            ModelKind::Mha | ModelKind::Mha2 => (None, None, d, 1),
            ModelKind::MhaBlstm => (None, Some(BiLstm::new("blstm", d, d / 2)), 2 * d, 1),
            ModelKind::PassageConditioned => (None, None, 2 * d + EssayStats::COUNT, 1),
        };
        let mut features = Vec::new();
        let mut w = width;
        for i in 0..n_dense {
            features.push(Dense::new(&format!("fc{}", i + 1), w, hp.d_ff, Activation::Relu));
            w = hp.d_ff;
        }
        Ok(Self {
            proj,
            lstm,
            blocks,
            luong,
            blstm,
            features,
            class_head: Dense::new("class_head", w, spec.n_classes, Activation::Identity),
            reg_head: Dense::new("reg_head", w, 1, Activation::Sigmoid),
        })
    }

    fn init(&self, spec: &ModelSpec, seed: u64) -> ParamMap {
        let mut rng = seeded(seed);
        let mut p = ParamMap::new();
        if let Some(l) = &self.proj {
            l.init(&mut p, &mut rng);
        }
        if let Some(l) = &self.lstm {
            l.init(&mut p, &mut rng);
        }
        if !self.blocks.is_empty() {
            p.insert("cls".into(), normal_tensor(&[1, spec.hp.d_model], CLS_INIT_STD, &mut rng));
        }
        for b in &self.blocks {
            b.init(&mut p, &mut rng);
        }
        if self.luong {
            p.insert("luong.w".into(), glorot(spec.hp.d_model, spec.hp.d_model, &mut rng));
        }
        if let Some(l) = &self.blstm {
            l.init(&mut p, &mut rng);
        }
        for l in &self.features {
            l.init(&mut p, &mut rng);
        }
        self.class_head.init(&mut p, &mut rng);
        self.reg_head.init(&mut p, &mut rng);
        p
    }

    fn param_count(&self, spec: &ModelSpec) -> usize {
        let d = spec.hp.d_model;
        let mut n = 0;
        n += self.proj.as_ref().map_or(0, Dense::param_count);
        n += self.lstm.as_ref().map_or(0, Lstm::param_count);
        if !self.blocks.is_empty() {
            n += d;
        }
        n += self.blocks.iter().map(MhaBlock::param_count).sum::<usize>();
        if self.luong {
            n += d * d;
        }
        n += self.blstm.as_ref().map_or(0, BiLstm::param_count);
        n += self.features.iter().map(Dense::param_count).sum::<usize>();
        n + self.class_head.param_count() + self.reg_head.param_count()
    }
}

/// Position of each row among the valid rows (CLS included at 0).
fn valid_ranks(mask: &[bool]) -> Vec<usize> {
    let mut r = 0;
    mask.iter()
        .map(|&m| {
            let v = r;
            if m {
                r += 1;
            }
            v
        })
        .collect()
}

/// A scorer with its parameters. Immutable once trained; prediction only
/// reads it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub spec: ModelSpec,
    pub params: ParamMap,
    pub stats_norm: StatsNorm,
    pub provenance: Provenance,
}

/// Nodes of one forward pass over a batch.
pub struct BatchNodes {
    /// `N x C`
    pub probs: NodeId,
    /// `N x 1`
    pub regression: NodeId,
}

/// Loss nodes for one batch.
pub struct LossNodes {
    pub total: NodeId,
    pub class: NodeId,
    pub mse: NodeId,
    /// False when the batch fell back to cross-entropy.
    pub used_kappa: bool,
}

impl ScoreModel {
    /// Freshly initialised model.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let arch = Arch::new(&spec)?;
        let params = arch.init(&spec, seed);
        Ok(Self {
            spec,
            params,
            stats_norm: StatsNorm::default(),
            provenance: Provenance {
                seed,
                ..Provenance::default()
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Closed-form count from the layer shapes.
    pub fn expected_param_count(spec: &ModelSpec) -> Result<usize> {
        Ok(Arch::new(spec)?.param_count(spec))
    }

    fn arch(&self) -> Result<Arch> {
        Arch::new(&self.spec)
    }

    fn check_input(&self, input: &EssayInput) -> Result<()> {
        let d = self.spec.input_dim;
        if input.embeddings.rank() != 2 {
            return Err(Error::InvalidTensor("essay embeddings must be a T x d matrix".into()));
        }
        if input.embeddings.rows() > 0 && input.dim() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: input.dim(),
            });
        }
        if input.mask.len() != input.embeddings.rows() {
            return Err(Error::LengthMismatch(input.mask.len(), input.embeddings.rows()));
        }
        if let Some(p) = &input.passage {
            if p.rank() != 2 || (p.rows() > 0 && p.cols() != d) {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: p.cols(),
                });
            }
        }
        Ok(())
    }

    /// Projected input sequence with CLS prepended and positions added.
    fn attention_trunk(
        &self,
        arch: &Arch,
        g: &mut Graph,
        seq: &Tensor,
        mask: &[bool],
        mut dropout: Option<&mut Dropout>,
    ) -> (NodeId, Vec<bool>) {
        let d = self.spec.hp.d_model;
        let cls = g.param("cls");
        let mut full_mask = vec![true];
        full_mask.extend_from_slice(mask);
        let mut x = if seq.rows() == 0 {
            cls
        } else {
            let mut s = g.constant(seq.clone());
            if let Some(p) = &arch.proj {
                s = p.forward(g, s);
            }
            g.concat(&[cls, s], 0)
        };
        if self.spec.hp.positional_encoding {
            let ranks = valid_ranks(&full_mask);
            let table = positional_encoding(ranks.iter().max().map_or(1, |m| m + 1), d);
            let mut pe = Tensor::zeros(&[full_mask.len(), d]);
            for (row, (&m, &r)) in full_mask.iter().zip(&ranks).enumerate() {
                if m {
                    pe.data_mut()[row * d..(row + 1) * d].copy_from_slice(table.row(r));
                }
            }
            let pe = g.constant(pe);
            x = g.add(x, pe);
        }
        for b in &arch.blocks {
            x = b.apply(g, x, &full_mask, dropout.as_deref_mut()).output;
        }
        (x, full_mask)
    }

    fn readout(&self, arch: &Arch, g: &mut Graph, out: NodeId, mask: &[bool]) -> NodeId {
        let cls = g.slice(out, 0, 0, 1);
        if arch.luong {
            let w = g.param("luong.w");
            luong_attention(g, cls, out, w, mask).0
        } else {
            cls
        }
    }

    /// `1 x F` features for one essay.
    fn essay_features(
        &self,
        arch: &Arch,
        g: &mut Graph,
        input: &EssayInput,
        mut dropout: Option<&mut Dropout>,
    ) -> NodeId {
        match self.spec.kind {
            ModelKind::Lstm => {
                let lstm = arch.lstm.as_ref().expect("lstm kind");
                let x = if input.embeddings.rows() == 0 {
                    g.constant(Tensor::zeros(&[0, self.spec.hp.d_model]))
                } else {
                    let s = g.constant(input.embeddings.clone());
                    match &arch.proj {
                        Some(p) => p.forward(g, s),
                        None => s,
                    }
                };
                lstm.forward(g, x, &input.mask, false).final_hidden
            }
            ModelKind::Mha | ModelKind::Mha2 => {
                let (out, mask) = self.attention_trunk(arch, g, &input.embeddings, &input.mask, dropout);
                self.readout(arch, g, out, &mask)
            }
            ModelKind::MhaBlstm => {
                let (out, mask) = self.attention_trunk(arch, g, &input.embeddings, &input.mask, dropout);
                let bl = arch.blstm.as_ref().expect("blstm kind").apply(g, out, &mask);
                let pooled = masked_mean(g, bl.states, &mask);
                g.concat(&[bl.final_forward, bl.final_backward, pooled], 1)
            }
            ModelKind::PassageConditioned => {
                let (out, mask) =
                    self.attention_trunk(arch, g, &input.embeddings, &input.mask, dropout.as_deref_mut());
                let essay = self.readout(arch, g, out, &mask);
                let empty = Tensor::zeros(&[0, self.spec.input_dim]);
                let passage = input.passage.as_ref().unwrap_or(&empty);
                let pmask = vec![true; passage.rows()];
                let (pout, pmask) = self.attention_trunk(arch, g, passage, &pmask, dropout);
                let pvec = self.readout(arch, g, pout, &pmask);
                let z = self.stats_norm.apply(&input.stats);
                let stats = g.constant(Tensor::matrix(1, EssayStats::COUNT, z.to_vec()).expect("1 x 4"));
                g.concat(&[essay, pvec, stats], 1)
            }
        }
    }

    /// Adds the forward pass for a batch to `g`.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        inputs: &[&EssayInput],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<BatchNodes> {
        if inputs.is_empty() {
            return Err(Error::OutOfRange("empty batch".into()));
        }
        for i in inputs {
            self.check_input(i)?;
        }
        let arch = self.arch()?;
        let rows: Vec<NodeId> = inputs
            .iter()
            .map(|i| self.essay_features(&arch, g, i, dropout.as_deref_mut()))
            .collect();
        let mut h = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0) };
        for l in &arch.features {
            h = l.forward(g, h);
        }
        h = maybe_dropout(g, h, dropout);
        let logits = arch.class_head.forward(g, h);
        let probs = g.softmax(logits);
        let regression = arch.reg_head.forward(g, h);
        Ok(BatchNodes { probs, regression })
    }

    /// Builds the training objective for a batch of examples. Ordinal batches
    /// with fewer than two distinct labels fall back to cross-entropy.
    pub fn loss_graph(
        &self,
        batch: &[&TrainExample],
        dropout: Option<&mut Dropout>,
    ) -> Result<(Graph, LossNodes)> {
        let mut g = Graph::new();
        let inputs: Vec<&EssayInput> = batch.iter().map(|e| &e.input).collect();
        let nodes = self.forward_batch(&mut g, &inputs, dropout)?;
        let (class, used_kappa) = self.class_loss(&mut g, nodes.probs, batch)?;
        let targets = Tensor::matrix(batch.len(), 1, batch.iter().map(|e| e.target).collect())?;
        let mse = mse_node(&mut g, nodes.regression, &targets);
        let total = combined_node(&mut g, class, mse, self.spec.hp.p);
        Ok((
            g,
            LossNodes {
                total,
                class,
                mse,
                used_kappa,
            },
        ))
    }

    fn class_loss(&self, g: &mut Graph, probs: NodeId, batch: &[&TrainExample]) -> Result<(NodeId, bool)> {
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let c = self.spec.n_classes;
        let eps = self.spec.hp.label_smoothing;
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::IndexOutOfRange { index: bad, len: c });
        }
        let distinct = labels.iter().any(|&y| y != labels[0]);
        if self.spec.hp.class_loss == ClassLossKind::OrdinalKappa && distinct {
            return Ok((kappa_node(g, probs, &labels, c, eps)?, true));
        }
        Ok((cce_node(g, probs, &smoothed_targets(&labels, c, eps)?), false))
    }

    pub fn bindings(&self) -> crate::autodiff::Bindings {
        bind_params::<f64>(&self.params)
    }

    /// Predictions for many essays, evaluated in chunks.
    pub fn predict_batch(&self, inputs: &[&EssayInput]) -> Result<Vec<ScorePrediction>> {
        let mut out = Vec::with_capacity(inputs.len());
        let bindings = self.bindings();
        for chunk in inputs.chunks(64) {
            let mut g = Graph::new();
            let nodes = self.forward_batch(&mut g, chunk, None)?;
            let ev = g.evaluate(&bindings)?;
            let probs = ev.value(nodes.probs);
            let reg = ev.value(nodes.regression);
            for r in 0..chunk.len() {
                out.push(self.prediction(probs.row(r).to_vec(), reg.data()[r]));
            }
        }
        Ok(out)
    }

    pub fn predict(&self, input: &EssayInput) -> Result<ScorePrediction> {
        Ok(self.predict_batch(&[input])?.remove(0))
    }

    fn prediction(&self, class_probs: Vec<f64>, regression: f64) -> ScorePrediction {
        let (lo, hi) = (self.spec.score_min, self.spec.score_max);
        let expected_score = class_probs
            .iter()
            .enumerate()
            .map(|(k, p)| p * (lo + k as i64) as f64)
            .sum();
        let regression_score = lo as f64 + regression * (hi - lo) as f64;
        let p = self.spec.hp.p;
        ScorePrediction {
            score: blend_score(p, expected_score, regression_score, lo, hi),
            class_probs,
            regression,
            expected_score,
            regression_score,
            p,
        }
    }

    /// Parameter names with shapes in a fixed (sorted) order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.to_string(), v.shape().to_vec()))
            .collect()
    }
}

impl Scorer for ScoreModel {
    fn score(&self, input: &EssayInput) -> Result<i64> {
        Ok(self.predict(input)?.score)
    }

    fn score_many(&self, inputs: &[&EssayInput]) -> Result<Vec<i64>> {
        Ok(self.predict_batch(inputs)?.into_iter().map(|p| p.score).collect())
    }
}

#[cfg(test)]
mod tests;
