//! Glue between raw text, embeddings and scorers, shared by the CLI and the
//! HTTP service.

use std::collections::BTreeMap;
use std::sync::Arc;

use essaylens_core::corpus::{EssayRecord, EssaySetMeta};
use essaylens_core::embeddings::{
    embed_sentences, segment_sentences, EmbeddedDocument, EssayStats, SentenceEncoder, SentenceSplit,
};
use essaylens_core::insight::{all_highlights, similarity_matrix, HighlightSpan};
use essaylens_core::scorers::{EssayInput, ScorePrediction, TrainExample};
use essaylens_core::{Error as CoreError, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provider;
use crate::registry::{LoadedModel, Registry};

/// Embedding-file id under which a set's passage is stored.
pub fn passage_doc_id(set_id: u32) -> String {
    format!("passage:{}", set_id)
}

pub fn embed_text(enc: &dyn SentenceEncoder, text: &str) -> Result<(SentenceSplit, Tensor)> {
    let split = segment_sentences(text);
    let m = embed_sentences(enc, &split.sentences, None)?;
    Ok((split, m))
}

pub fn essay_input(embeddings: Tensor, text: &str, passage: Option<&Tensor>) -> Result<EssayInput> {
    Ok(EssayInput::new(embeddings)?
        .with_passage(passage.cloned())
        .with_stats(EssayStats::of(text)))
}

pub enum EmbeddingSource<'a> {
    Provider(&'a dyn SentenceEncoder),
    /// Pre-computed documents keyed by essay id.
    File(&'a [EmbeddedDocument]),
}

/// One essay set ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: EssaySetMeta,
    pub examples: Vec<TrainExample>,
    pub provider: String,
    pub dim: usize,
}

pub fn build_dataset(records: &[EssayRecord], meta: &EssaySetMeta, source: &EmbeddingSource) -> Result<Dataset> {
    let records: Vec<&EssayRecord> = records.iter().filter(|r| r.set_id == meta.set_id).collect();
    if records.is_empty() {
        return Err(CoreError::UnknownSet(meta.set_id).into());
    }
    let mut examples = Vec::with_capacity(records.len());
    let (provider, dim) = match source {
        EmbeddingSource::Provider(enc) => {
            let passage = match &meta.passage {
                Some(p) => Some(embed_text(*enc, p)?.1),
                None => None,
            };
            for r in &records {
                let (_, m) = embed_text(*enc, &r.text)?;
                let input = essay_input(m, &r.text, passage.as_ref())?;
                examples.push(TrainExample::new(&r.essay_id, input, r.score, meta)?);
            }
            (enc.id(), enc.dim())
        }
        EmbeddingSource::File(docs) => {
            let by_id: BTreeMap<&str, &EmbeddedDocument> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
            let first = docs.first().ok_or_else(|| CoreError::UnembeddedRecord(records[0].essay_id.clone()))?;
            let passage = match by_id.get(passage_doc_id(meta.set_id).as_str()) {
                Some(d) => Some(d.matrix()?),
                None => None,
            };
            for r in &records {
                let d = by_id
                    .get(r.essay_id.as_str())
                    .ok_or_else(|| CoreError::UnembeddedRecord(r.essay_id.clone()))?;
                let input = essay_input(d.matrix()?, &r.text, passage.as_ref())?;
                examples.push(TrainExample::new(&r.essay_id, input, r.score, meta)?);
            }
            (first.provider.clone(), first.dim)
        }
    };
    Ok(Dataset {
        meta: meta.clone(),
        examples,
        provider,
        dim,
    })
}

/// Encoder for a request: the one asked for, else the model's own if it can
/// be built here, else the configured default.
pub fn choose_encoder(
    requested: Option<&str>,
    model: Option<&LoadedModel>,
    default: &Arc<dyn SentenceEncoder>,
) -> Result<Arc<dyn SentenceEncoder>> {
    if let Some(id) = requested {
        return provider::resolve(id);
    }
    if let Some(id) = model.and_then(|m| m.meta.provider.as_deref()) {
        if let Ok(enc) = provider::resolve(id) {
            return Ok(enc);
        }
    }
    Ok(Arc::clone(default))
}

fn check_dim(model: &LoadedModel, enc: &dyn SentenceEncoder) -> Result<()> {
    let want = model.model.spec.input_dim;
    if enc.dim() != want {
        return Err(CoreError::DimMismatch {
            expected: want,
            got: enc.dim(),
        }
        .into());
    }
    Ok(())
}

fn non_empty(field: &str, text: &str) -> Result<()> {
    if segment_sentences(text).is_empty() {
        return Err(Error::InvalidRequest(format!("`{}` has no sentences", field)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub model: String,
    pub essay: String,
    #[serde(default)]
    pub passage: Option<String>,
    #[serde(default)]
    pub provider: Option<String>,
}

pub fn score(req: &ScoreRequest, registry: &Registry, default: &Arc<dyn SentenceEncoder>) -> Result<ScorePrediction> {
    non_empty("essay", &req.essay)?;
    let model = registry.get(&req.model)?;
    score_with(&model, &req.essay, req.passage.as_deref(), req.provider.as_deref(), default)
}

pub fn score_with(
    model: &LoadedModel,
    essay: &str,
    passage: Option<&str>,
    provider: Option<&str>,
    default: &Arc<dyn SentenceEncoder>,
) -> Result<ScorePrediction> {
    let enc = choose_encoder(provider, Some(model), default)?;
    check_dim(model, enc.as_ref())?;
    let passage = match passage {
        Some(p) => Some(embed_text(enc.as_ref(), p)?.1),
        None => None,
    };
    let (_, m) = embed_text(enc.as_ref(), essay)?;
    Ok(model.model.predict(&essay_input(m, essay, passage.as_ref())?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    pub passage: String,
    #[serde(default)]
    pub prompt: Option<String>,
    pub essay: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub provider: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResponse {
    pub essay: SentenceSplit,
    pub passage: SentenceSplit,
    /// Essay sentences by passage sentences.
    pub similarity: Vec<Vec<f64>>,
    /// One list per essay sentence, one span per passage sentence.
    pub highlights: Vec<Vec<HighlightSpan>>,
    pub tau: f64,
    pub provider: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub prediction: Option<ScorePrediction>,
}

pub fn analyze(
    req: &AnalyzeRequest,
    registry: &Registry,
    default: &Arc<dyn SentenceEncoder>,
    tau: f64,
) -> Result<AnalyzeResponse> {
    non_empty("passage", &req.passage)?;
    non_empty("essay", &req.essay)?;
    let model = match &req.model {
        Some(id) => Some(registry.get(id)?),
        None => None,
    };
    let enc = choose_encoder(req.provider.as_deref(), model.as_deref(), default)?;
    if let Some(m) = &model {
        check_dim(m, enc.as_ref())?;
    }
    let (essay, em) = embed_text(enc.as_ref(), &req.essay)?;
    let (passage, pm) = embed_text(enc.as_ref(), &req.passage)?;
    let sim = similarity_matrix(&em, &pm)?;
    let highlights = all_highlights(&sim, &passage, tau)?;
    let prediction = match &model {
        Some(m) => Some(m.model.predict(&essay_input(em, &req.essay, Some(&pm))?)?),
        None => None,
    };
    Ok(AnalyzeResponse {
        similarity: sim.to_rows(),
        essay,
        passage,
        highlights,
        tau,
        provider: enc.id(),
        model: model.map(|m| m.id.clone()),
        prediction,
    })
}
