//! Essay-set metadata, ASAP-style TSV ingestion, score normalisation, fold
//! planning and stratified training-set reduction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

pub const NUM_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssaySetMeta {
    pub set_id: u32,
    pub grade_level: u32,
    pub avg_length_words: u32,
    pub score_min: i64,
    pub score_max: i64,
    pub essay_count: usize,
    pub source_dependent: bool,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage: Option<String>,
}

impl EssaySetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.score_min >= self.score_max {
            return Err(Error::InvalidMeta(format!(
                "set {}: score_min {} must be below score_max {}",
                self.set_id, self.score_min, self.score_max
            )));
        }
        if self.essay_count == 0 {
            return Err(Error::InvalidMeta(format!("set {}: essay_count is 0", self.set_id)));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        (self.score_max - self.score_min + 1) as usize
    }

    pub fn contains(&self, score: i64) -> bool {
        (self.score_min..=self.score_max).contains(&score)
    }

    /// `(score - min) / (max - min)`
    pub fn normalize(&self, score: i64) -> Result<f64> {
        if !self.contains(score) {
            return Err(Error::LabelOutOfRange {
                label: score,
                min: self.score_min,
                max: self.score_max,
            });
        }
        Ok((score - self.score_min) as f64 / (self.score_max - self.score_min) as f64)
    }

    /// Zero-based class index of an in-range score.
    pub fn class_of(&self, score: i64) -> Result<usize> {
        self.normalize(score)?;
        Ok((score - self.score_min) as usize)
    }
}

/// Inverse of [`EssaySetMeta::normalize`]: rounds and clamps into range.
pub fn denormalize_score(value: f64, meta: &EssaySetMeta) -> i64 {
    let span = (meta.score_max - meta.score_min) as f64;
    let raw = Float::round(meta.score_min as f64 + value * span);
    let lo = meta.score_min as f64;
    let hi = meta.score_max as f64;
    if raw.is_nan() {
        return meta.score_min;
    }
    Float::min(Float::max(raw, lo), hi) as i64
}

fn row(
    set_id: u32,
    grade_level: u32,
    avg_length_words: u32,
    range: (i64, i64),
    essay_count: usize,
    source_dependent: bool,
    description: &str,
) -> EssaySetMeta {
    EssaySetMeta {
        set_id,
        grade_level,
        avg_length_words,
        score_min: range.0,
        score_max: range.1,
        essay_count,
        source_dependent,
        description: description.to_string(),
        prompt: None,
        passage: None,
    }
}

/// The eight ASAP-AES essay sets.
pub fn builtin_sets() -> Vec<EssaySetMeta> {
    alloc::vec![
        row(1, 8, 350, (2, 12), 1785, false, "Persuasive Letter about Technology Use"),
        row(2, 10, 350, (1, 6), 1800, false, "Persuasive Essay about Library Censorship"),
        row(3, 10, 150, (0, 3), 1726, true, "Source-dependent Analysis of Setting"),
        row(4, 10, 150, (0, 3), 1772, true, "Source-dependent Analysis of Author's Purpose"),
        row(5, 8, 150, (0, 4), 1805, true, "Source-dependent Analysis of Mood"),
        row(6, 10, 150, (0, 4), 1800, true, "Source-dependent Demonstration of comprehension of Text"),
        row(7, 7, 250, (0, 30), 1730, false, "Narrative about Patience"),
        row(8, 10, 650, (0, 60), 918, false, "Narrative about Laughter"),
    ]
}

/// A validated collection of essay sets keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    sets: BTreeMap<u32, EssaySetMeta>,
}

impl Catalog {
    pub fn new(sets: Vec<EssaySetMeta>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidMeta("empty essay-set collection".into()));
        }
        let mut map = BTreeMap::new();
        for s in sets {
            s.validate()?;
            let id = s.set_id;
            if map.insert(id, s).is_some() {
                return Err(Error::InvalidMeta(format!("duplicate set id {}", id)));
            }
        }
        Ok(Self { sets: map })
    }

    pub fn builtin() -> Self {
        Self::new(builtin_sets()).expect("built-in metadata is valid")
    }

    /// Replaces or adds the given sets, keeping the others.
    pub fn with_overrides(&self, sets: Vec<EssaySetMeta>) -> Result<Self> {
        let mut map = self.sets.clone();
        for s in sets {
            s.validate()?;
            map.insert(s.set_id, s);
        }
        Ok(Self { sets: map })
    }

    pub fn get(&self, set_id: u32) -> Result<&EssaySetMeta> {
        self.sets.get(&set_id).ok_or(Error::UnknownSet(set_id))
    }

    pub fn sets(&self) -> impl Iterator<Item = &EssaySetMeta> {
        self.sets.values()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Mean class count `n̄_c` across the collection.
    pub fn mean_classes(&self) -> f64 {
        mean_class_count(self.sets.values())
    }
}

pub fn mean_class_count<'a>(sets: impl IntoIterator<Item = &'a EssaySetMeta>) -> f64 {
    let (sum, n) = sets
        .into_iter()
        .fold((0usize, 0usize), |(s, n), m| (s + m.n_classes(), n + 1));
    sum as f64 / n.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssayRecord {
    pub essay_id: String,
    pub set_id: u32,
    pub text: String,
    pub score: i64,
    pub normalized: f64,
    #[serde(default)]
    pub sentences: Vec<String>,
    /// `n_sentences x d_e`, filled by the embeddings stage.
    #[serde(default)]
    pub embedding: Option<Tensor>,
}

impl EssayRecord {
    pub fn new(essay_id: &str, text: &str, score: i64, meta: &EssaySetMeta) -> Result<Self> {
        Ok(Self {
            essay_id: essay_id.to_string(),
            set_id: meta.set_id,
            text: text.to_string(),
            score,
            normalized: meta.normalize(score)?,
            sentences: Vec::new(),
            embedding: None,
        })
    }
}

const REQUIRED_COLUMNS: [&str; 4] = ["essay_id", "essay_set", "essay", "domain1_score"];

/// Parses the tab-separated ASAP release layout. Line numbers in errors are
/// 1-based and count the header.
pub fn parse_asap_tsv(text: &str, catalog: &Catalog) -> Result<Vec<EssayRecord>> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
            None => return Err(Error::MissingColumn(REQUIRED_COLUMNS[0].into())),
        }
    };
    let cols: Vec<&str> = header
        .trim_start_matches('\u{feff}')
        .trim_end_matches('\r')
        .split('\t')
        .map(str::trim)
        .collect();
    let mut idx = [0usize; 4];
    for (k, name) in REQUIRED_COLUMNS.iter().enumerate() {
        idx[k] = cols
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn((*name).into()))?;
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let l = raw.trim_end_matches('\r');
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split('\t').collect();
        let field = |k: usize| -> Result<&str> {
            fields.get(idx[k]).copied().ok_or_else(|| Error::Line {
                line,
                detail: format!("missing value for column {}", REQUIRED_COLUMNS[k]),
            })
        };
        let id = field(0)?.trim();
        let set_id: u32 = field(1)?.trim().parse().map_err(|_| Error::Line {
            line,
            detail: format!("essay_set `{}` is not an integer", field(1).unwrap_or("")),
        })?;
        let meta = catalog.get(set_id).map_err(|e| Error::Line {
            line,
            detail: e.to_string(),
        })?;
        let score_text = field(3)?.trim();
        let score: i64 = score_text.parse().map_err(|_| Error::Line {
            line,
            detail: format!("domain1_score `{}` is not an integer", score_text),
        })?;
        let rec = EssayRecord::new(id, field(2)?, score, meta).map_err(|e| Error::Line {
            line,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub n: usize,
    pub folds: Vec<Fold>,
}

/// Seeded five-way partition. Fold `i` tests on partition `i`, tunes on
/// partition `i + 1 (mod 5)` and trains on the remaining three.
pub fn make_folds(n: usize, seed: u64) -> Result<FoldPlan> {
    if n < NUM_FOLDS {
        return Err(Error::TooFewRecords {
            needed: NUM_FOLDS,
            got: n,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded(derive_seed(seed, 0xF01D)));
    let mut parts = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for p in 0..NUM_FOLDS {
        let size = n / NUM_FOLDS + usize::from(p < n % NUM_FOLDS);
        let mut part = perm[start..start + size].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += size;
    }
    let folds = (0..NUM_FOLDS)
        .map(|i| {
            let dev_p = (i + 1) % NUM_FOLDS;
            let mut train: Vec<usize> = (0..NUM_FOLDS)
                .filter(|&p| p != i && p != dev_p)
                .flat_map(|p| parts[p].iter().copied())
                .collect();
            train.sort_unstable();
            Fold {
                train,
                dev: parts[dev_p].clone(),
                test: parts[i].clone(),
            }
        })
        .collect();
    Ok(FoldPlan { seed, n, folds })
}

/// Label-stratified subsample of `round(fraction * |train|)` indices.
/// `labels[k]` is the label of `train[k]`. Kept indices come back in their
/// original order.
pub fn reduce_training_set(train: &[usize], labels: &[i64], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    if train.len() != labels.len() {
        return Err(Error::LengthMismatch(train.len(), labels.len()));
    }
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    let n = train.len();
    let target = (Float::round(fraction * n as f64) as usize).min(n);

    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (k, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(k);
    }
    // largest-remainder apportionment
    let mut quotas: Vec<(i64, usize, f64)> = groups
        .iter()
        .map(|(&y, g)| {
            let exact = target as f64 * g.len() as f64 / n as f64;
            let fl = Float::floor(exact);
            (y, fl as usize, exact - fl)
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        quotas[b]
            .2
            .partial_cmp(&quotas[a].2)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &q in order.iter().cycle().take(quotas.len() * 2) {
        if assigned >= target {
            break;
        }
        if quotas[q].1 < groups[&quotas[q].0].len() {
            quotas[q].1 += 1;
            assigned += 1;
        }
    }
    // keep every label when the budget allows
    if target >= quotas.len() {
        while let Some(empty) = quotas.iter().position(|q| q.1 == 0) {
            let donor = (0..quotas.len())
                .filter(|&i| quotas[i].1 > 1)
                .max_by(|&a, &b| quotas[a].1.cmp(&quotas[b].1).then(b.cmp(&a)));
            let Some(donor) = donor else { break };
            quotas[donor].1 -= 1;
            quotas[empty].1 += 1;
        }
    }
    let mut keep = alloc::vec![false; n];
    for (y, q, _) in &quotas {
        let mut members = groups[y].clone();
        members.shuffle(&mut seeded(derive_seed(seed, *y as u64)));
        for &k in members.iter().take(*q) {
            keep[k] = true;
        }
    }
    Ok(train
        .iter()
        .zip(keep)
        .filter_map(|(&i, k)| k.then_some(i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn builtin_table() {
        let c = Catalog::builtin();
        assert_eq!(c.len(), 8);
        let s1 = c.get(1).unwrap();
        assert_eq!(
            (s1.grade_level, s1.avg_length_words, s1.score_min, s1.score_max, s1.essay_count, s1.source_dependent),
            (8, 350, 2, 12, 1785, false)
        );
        let s8 = c.get(8).unwrap();
        assert_eq!((s8.score_min, s8.score_max, s8.essay_count), (0, 60, 918));
        assert_eq!(c.mean_classes(), 127.0 / 8.0);
        assert_eq!(c.get(9), Err(Error::UnknownSet(9)));
    }

    #[test]
    fn normalization_roundtrip() {
        let c = Catalog::builtin();
        let s1 = c.get(1).unwrap();
        assert_eq!(s1.normalize(7).unwrap(), 0.5);
        assert_eq!(denormalize_score(0.5, s1), 7);
        assert_eq!(denormalize_score(0.0, s1), 2);
        assert_eq!(denormalize_score(1.0, s1), 12);
        assert_eq!(denormalize_score(1.7, s1), 12);
        assert_eq!(denormalize_score(-3.0, s1), 2);
        for m in c.sets() {
            for s in m.score_min..=m.score_max {
                assert_eq!(denormalize_score(m.normalize(s).unwrap(), m), s);
            }
        }
    }

    #[test]
    fn invalid_meta() {
        let mut m = builtin_sets().remove(0);
        m.score_max = m.score_min;
        assert!(matches!(Catalog::new(vec![m]), Err(Error::InvalidMeta(_))));
    }

    const TSV: &str = "essay_id\tessay_set\tessay\trater1_domain1\tdomain1_score\n\
        1\t1\tDear @CAPS1, computers help.\t4\t7\n\
        2\t3\tThe setting matters.\t1\t2\n";

    #[test]
    fn parse_two_rows() {
        let recs = parse_asap_tsv(TSV, &Catalog::builtin()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].essay_id, "1");
        assert_eq!(recs[0].text, "Dear @CAPS1, computers help.");
        assert_eq!(recs[0].normalized, 0.5);
        assert_eq!((recs[1].set_id, recs[1].score), (3, 2));
    }

    #[test]
    fn parse_errors() {
        let c = Catalog::builtin();
        let bad = "essay_id\tessay_set\tessay\tdomain1_score\n1\t3\tx\t1\n2\t3\ty\t99\n";
        match parse_asap_tsv(bad, &c) {
            Err(Error::Line { line, detail }) => {
                assert_eq!(line, 3);
                assert!(detail.contains("99"));
            }
            other => panic!("{:?}", other),
        }
        let nonint = "essay_id\tessay_set\tessay\tdomain1_score\n1\t3\tx\tthree\n";
        assert!(matches!(parse_asap_tsv(nonint, &c), Err(Error::Line { line: 2, .. })));
        let missing = "essay_id\tessay_set\tessay\n1\t3\tx\n";
        assert_eq!(
            parse_asap_tsv(missing, &c),
            Err(Error::MissingColumn("domain1_score".into()))
        );
    }

    #[test]
    fn folds_of_ten() {
        let plan = make_folds(10, 7).unwrap();
        let mut all = Vec::new();
        for f in &plan.folds {
            assert_eq!((f.test.len(), f.dev.len(), f.train.len()), (2, 2, 6));
            all.extend(f.test.iter().copied());
        }
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(make_folds(10, 7).unwrap(), plan);
        assert_ne!(make_folds(100, 7).unwrap(), make_folds(100, 8).unwrap());
        assert!(matches!(make_folds(4, 0), Err(Error::TooFewRecords { .. })));
    }

    #[test]
    fn reduction_examples() {
        let idx: Vec<usize> = (0..10).collect();
        let one_label = vec![0i64; 10];
        assert_eq!(reduce_training_set(&idx, &one_label, 1.0, 1).unwrap(), idx);
        assert_eq!(reduce_training_set(&idx, &one_label, 0.6, 1).unwrap().len(), 6);
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let kept = reduce_training_set(&idx, &labels, 0.6, 1).unwrap();
        let zeros = kept.iter().filter(|&&i| labels[i] == 0).count();
        assert_eq!((zeros, kept.len() - zeros), (3, 3));
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            reduce_training_set(&idx, &labels, 0.0, 1),
            Err(Error::FractionOutOfRange(_))
        ));
        assert!(reduce_training_set(&idx, &labels, 1.5, 1).is_err());
    }

    #[test]
    fn reduction_keeps_rare_labels() {
        let idx: Vec<usize> = (0..20).collect();
        let mut labels = vec![0i64; 20];
        labels[19] = 5;
        let kept = reduce_training_set(&idx, &labels, 0.3, 4).unwrap();
        assert_eq!(kept.len(), 6);
        assert!(kept.contains(&19));
    }
}
