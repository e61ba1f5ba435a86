//! Sentence-level links between an essay and its source passage.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::embeddings::{cosine, SentenceSplit};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.3;

/// Cosine similarities, `rows` essay sentences by `cols` passage sentences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if i >= self.rows {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.rows,
            });
        }
        Ok(&self.values[i * self.cols..(i + 1) * self.cols])
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                values.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }

    /// Nested rows, the shape used in JSON responses.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.values[i * self.cols..(i + 1) * self.cols].to_vec()).collect()
    }
}

/// `essay` and `passage` are `sentences x dim` embedding matrices.
pub fn similarity_matrix(essay: &Tensor, passage: &Tensor) -> Result<SimilarityMatrix> {
    let (rows, cols) = (essay.rows(), passage.rows());
    if rows > 0 && cols > 0 && essay.cols() != passage.cols() {
        return Err(Error::DimMismatch {
            expected: essay.cols(),
            got: passage.cols(),
        });
    }
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            values.push(cosine(essay.row(i), passage.row(j)).clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix { rows, cols, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighlightSpan {
    pub passage_index: usize,
    /// Character offsets into the passage text.
    pub start: usize,
    pub end: usize,
    pub similarity: f64,
    pub saturation: f64,
}

/// Saturation for one cell given the row maximum.
pub fn saturation(s: f64, s_max: f64, tau: f64) -> f64 {
    if s <= tau || s_max <= tau {
        0.0
    } else {
        ((s - tau) / (s_max - tau)).min(1.0)
    }
}

/// One span per passage sentence for essay sentence `i`.
pub fn highlight_spans(sim: &SimilarityMatrix, i: usize, passage: &SentenceSplit, tau: f64) -> Result<Vec<HighlightSpan>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::OutOfRange("threshold must lie in [0, 1)".into()));
    }
    if passage.offsets.len() != sim.cols {
        return Err(Error::DimMismatch {
            expected: sim.cols,
            got: passage.offsets.len(),
        });
    }
    let row = sim.row(i)?;
    let s_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(row
        .iter()
        .zip(&passage.offsets)
        .enumerate()
        .map(|(j, (&s, &(start, end)))| HighlightSpan {
            passage_index: j,
            start,
            end,
            similarity: s,
            saturation: saturation(s, s_max, tau),
        })
        .collect())
}

/// Highlights for every essay sentence at one threshold.
pub fn all_highlights(sim: &SimilarityMatrix, passage: &SentenceSplit, tau: f64) -> Result<Vec<Vec<HighlightSpan>>> {
    (0..sim.rows).map(|i| highlight_spans(sim, i, passage, tau)).collect()
}
