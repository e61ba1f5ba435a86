//! Seeded toy corpus with a learnable score signal, used by tests, the
//! acceptance suite and CLI demos.
//!
//! Each essay gets a label `k` in `0..classes`. Its sentences mix a small
//! "strong" vocabulary with a larger "plain" one; a token is strong with
//! probability `0.15 + 0.25 k` (capped at 0.95), so higher scores push the
//! mean embedding toward the strong-word direction. The vocabularies are
//! kept small enough that the hashed 64-dim embedding stays separable.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::corpus::{EssayRecord, EssaySetMeta};
use crate::embeddings::{embed_sentences, segment_sentences, HashedProvider};
use crate::error::Result;
use crate::hypergen::{generate_hyperparams, HyperParams};
use crate::rng::{derive_seed, seeded};
use crate::scorers::data::TrainExample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub essays: usize,
    pub classes: usize,
    pub dim: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Size of the vocabulary that carries the score signal.
    pub strong_words: usize,
    pub plain_words: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            essays: 200,
            classes: 4,
            dim: 64,
            min_sentences: 4,
            max_sentences: 10,
            strong_words: 8,
            plain_words: 40,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub meta: EssaySetMeta,
    pub records: Vec<EssayRecord>,
    pub examples: Vec<TrainExample>,
    pub provider: HashedProvider,
}


fn sentence(rng: &mut impl Rng, strong_p: f64, cfg: &SyntheticConfig) -> String {
    let len = rng.random_range(5..=11);
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        if rng.random_bool(strong_p) {
            words.push(format!("vivid{}", rng.random_range(0..cfg.strong_words.max(1))));
        } else {
            words.push(format!("plain{}", rng.random_range(0..cfg.plain_words.max(1))));
        }
    }
    let mut s = words.join(" ");
    // capitalise so the segmenter sees sentence starts
    s.replace_range(0..1, &s[0..1].to_uppercase());
    s.push('.');
    s
}

pub fn synthetic_corpus(cfg: SyntheticConfig) -> Result<SyntheticCorpus> {
    let meta = EssaySetMeta {
        set_id: 100,
        grade_level: 8,
        avg_length_words: 60,
        score_min: 0,
        score_max: cfg.classes as i64 - 1,
        essay_count: cfg.essays,
        source_dependent: false,
        description: "Synthetic separable corpus".into(),
        prompt: None,
        passage: None,
    };
    meta.validate()?;
    let provider = HashedProvider::new(derive_seed(cfg.seed, 0xE3B), cfg.dim)?;
    let mut rng = seeded(cfg.seed);
    let mut records = Vec::with_capacity(cfg.essays);
    let mut examples = Vec::with_capacity(cfg.essays);
    for i in 0..cfg.essays {
        // balanced labels, shuffled by the generator order
        let label = (i + rng.random_range(0..cfg.classes)) % cfg.classes;
        let p = (0.15 + 0.25 * label as f64).min(0.95);
        let n = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
        let text = (0..n).map(|_| sentence(&mut rng, p, &cfg)).collect::<Vec<_>>().join(" ");
        let mut rec = EssayRecord::new(&format!("syn-{}", i), &text, label as i64, &meta)?;
        rec.sentences = segment_sentences(&text).sentences;
        rec.embedding = Some(embed_sentences(&provider, &rec.sentences, Some(cfg.dim))?);
        examples.push(TrainExample::from_record(&rec, &meta, None)?);
        records.push(rec);
    }
    Ok(SyntheticCorpus {
        meta,
        records,
        examples,
        provider,
    })
}

/// Generated hyperparameters for `meta` with the overrides used for quick
/// runs on the synthetic corpus: `d_model` 64, at most 30 epochs, a fixed
/// learning rate of 0.005 and light dropout.
pub fn smoke_hyperparams(meta: &EssaySetMeta, mean_classes: f64) -> HyperParams {
    let mut hp = generate_hyperparams(meta, mean_classes);
    hp.d_model = 64;
    hp.epochs = 30;
    hp.patience = 10;
    hp.use_schedule = false;
    hp.learning_rate = 0.005;
    hp.dropout = 0.1;
    hp
}
