//! Model inputs and training examples.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::corpus::{EssayRecord, EssaySetMeta};
use crate::embeddings::EssayStats;
use crate::error::{Error, Result};

/// One essay as the scorers see it: a `T x d_e` sentence-embedding matrix
/// with a validity mask, plus what the passage-conditioned model needs.
#[derive(Clone, Debug, PartialEq)]
pub struct EssayInput {
    pub embeddings: Tensor,
    pub mask: Vec<bool>,
    /// `P x d_e` passage sentence embeddings, all valid.
    pub passage: Option<Tensor>,
    /// Raw (not yet standardised) surface statistics.
    pub stats: [f64; EssayStats::COUNT],
}

impl EssayInput {
    pub fn new(embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 {
            return Err(Error::InvalidTensor("essay embeddings must be a T x d matrix".into()));
        }
        let t = embeddings.rows();
        Ok(Self {
            embeddings,
            mask: vec![true; t],
            passage: None,
            stats: [0.0; EssayStats::COUNT],
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.embeddings.rows() {
            return Err(Error::LengthMismatch(mask.len(), self.embeddings.rows()));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn with_passage(mut self, passage: Option<Tensor>) -> Self {
        self.passage = passage;
        self
    }

    pub fn with_stats(mut self, stats: EssayStats) -> Self {
        self.stats = stats.to_array();
        self
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Appends `extra` masked rows filled with `fill`.
    pub fn padded(&self, extra: usize, fill: f64) -> Self {
        let d = self.dim();
        let pad = Tensor::full(&[extra, d], fill);
        let embeddings = if self.embeddings.rows() == 0 {
            pad
        } else {
            self.embeddings.vstack(&pad).expect("same width")
        };
        let mut mask = self.mask.clone();
        mask.extend(core::iter::repeat_n(false, extra));
        Self {
            embeddings,
            mask,
            passage: self.passage.clone(),
            stats: self.stats,
        }
    }
}

/// A scored essay ready for training: zero-based class index and score
/// normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub input: EssayInput,
    pub label: usize,
    pub score: i64,
    pub target: f64,
}

impl TrainExample {
    pub fn new(id: &str, input: EssayInput, score: i64, meta: &EssaySetMeta) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            input,
            label: meta.class_of(score)?,
            score,
            target: meta.normalize(score)?,
        })
    }

    /// From a record whose embedding has been filled in.
    pub fn from_record(rec: &EssayRecord, meta: &EssaySetMeta, passage: Option<&Tensor>) -> Result<Self> {
        let emb = rec
            .embedding
            .clone()
            .ok_or_else(|| Error::UnembeddedRecord(rec.essay_id.clone()))?;
        let input = EssayInput::new(emb)?
            .with_passage(passage.cloned())
            .with_stats(EssayStats::of(&rec.text));
        Self::new(&rec.essay_id, input, rec.score, meta)
    }
}

/// Indexed read access to training examples. Training and evaluation only
/// touch data through this trait, so tests can track which indices are read.
pub trait ExampleSource {
    fn len(&self) -> usize;
    fn example(&self, index: usize) -> Result<&TrainExample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for [TrainExample] {
    fn len(&self) -> usize {
        <[TrainExample]>::len(self)
    }

    fn example(&self, index: usize) -> Result<&TrainExample> {
        self.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: <[TrainExample]>::len(self),
        })
    }
}

impl ExampleSource for Vec<TrainExample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn example(&self, index: usize) -> Result<&TrainExample> {
        self.as_slice().example(index)
    }
}
