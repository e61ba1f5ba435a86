//! Quadratic weighted kappa, auxiliary agreement statistics and the
//! five-fold cross-validation harness.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_folds, reduce_training_set};
use crate::error::{Error, Result};
use crate::scorers::data::ExampleSource;

/// Observed score pairs for labels in `[min, max]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub total: u64,
    /// Row-major `classes x classes`, rows = truth.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[i64], pred: &[i64], min: i64, max: i64) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::LengthMismatch(truth.len(), pred.len()));
        }
        if truth.is_empty() {
            return Err(Error::OutOfRange("kappa needs at least one pair".into()));
        }
        if max <= min {
            return Err(Error::OutOfRange(format!("score range [{}, {}] has < 2 classes", min, max)));
        }
        let c = (max - min + 1) as usize;
        let mut counts = vec![0u64; c * c];
        for (&t, &p) in truth.iter().zip(pred) {
            for v in [t, p] {
                if v < min || v > max {
                    return Err(Error::LabelOutOfRange { label: v, min, max });
                }
            }
            counts[(t - min) as usize * c + (p - min) as usize] += 1;
        }
        Ok(Self {
            classes: c,
            total: truth.len() as u64,
            counts,
        })
    }

    pub fn at(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.classes + j]
    }

    pub fn row_marginals(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|i| (0..self.classes).map(|j| self.at(i, j)).sum())
            .collect()
    }

    pub fn col_marginals(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|i| self.at(i, j)).sum())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Set when expected disagreement is zero but observed is not; `value`
    /// is then reported as 0.
    pub degenerate: bool,
}

fn weighted_kappa(cm: &ConfusionMatrix, weight: impl Fn(usize, usize) -> f64) -> Kappa {
    let c = cm.classes;
    let n = cm.total as f64;
    let rows = cm.row_marginals();
    let cols = cm.col_marginals();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = weight(i, j);
            observed += w * cm.at(i, j) as f64;
            expected += w * rows[i] as f64 * cols[j] as f64 / n;
        }
    }
    if expected == 0.0 {
        return if observed == 0.0 {
            Kappa {
                value: 1.0,
                degenerate: false,
            }
        } else {
            Kappa {
                value: 0.0,
                degenerate: true,
            }
        };
    }
    Kappa {
        value: 1.0 - observed / expected,
        degenerate: false,
    }
}

/// QWK with the degenerate-case flag.
pub fn qwk(truth: &[i64], pred: &[i64], min: i64, max: i64) -> Result<Kappa> {
    let cm = ConfusionMatrix::new(truth, pred, min, max)?;
    let denom = ((cm.classes - 1) * (cm.classes - 1)) as f64;
    Ok(weighted_kappa(&cm, |i, j| {
        let d = i as f64 - j as f64;
        d * d / denom
    }))
}

pub fn quadratic_weighted_kappa(truth: &[i64], pred: &[i64], min: i64, max: i64) -> Result<f64> {
    qwk(truth, pred, min, max).map(|k| k.value)
}

/// Unweighted Cohen's kappa. Reporting only.
pub fn cohen_kappa(truth: &[i64], pred: &[i64], min: i64, max: i64) -> Result<f64> {
    let cm = ConfusionMatrix::new(truth, pred, min, max)?;
    Ok(weighted_kappa(&cm, |i, j| if i == j { 0.0 } else { 1.0 }).value)
}

fn check_pairs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::OutOfRange("correlation needs at least two pairs".into()));
    }
    Ok(())
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / Float::sqrt(sxx * syy))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(core::cmp::Ordering::Equal));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

/// Kendall's tau-b.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let denom = Float::sqrt(((conc + disc + tx) * (conc + disc + ty)) as f64);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((conc - disc) as f64 / denom)
}

/// Anything that maps an example to an integer score.
pub trait Scorer {
    fn score(&self, input: &crate::scorers::data::EssayInput) -> Result<i64>;

    fn score_many(&self, inputs: &[&crate::scorers::data::EssayInput]) -> Result<Vec<i64>> {
        inputs.iter().map(|i| self.score(i)).collect()
    }
}

/// Fits a scorer from training and development indices. The harness never
/// hands a learner the test indices.
pub trait Learner {
    type Model: Scorer;
    fn fit(&mut self, data: &dyn ExampleSource, train: &[usize], dev: &[usize], seed: u64) -> Result<Self::Model>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub test_qwk: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub fraction: f64,
    pub folds: Vec<FoldResult>,
    /// Mean of the per-fold test QWKs.
    pub mean_qwk: f64,
}

/// Five-fold protocol: fit on train (early stopping on dev), score test,
/// average the fold QWKs. With `fraction < 1` the train and dev partitions
/// are both reduced by stratified subsampling first.
pub fn cross_validate<L: Learner>(
    learner: &mut L,
    data: &dyn ExampleSource,
    score_min: i64,
    score_max: i64,
    seed: u64,
    fraction: f64,
) -> Result<CvReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let plan = make_folds(data.len(), seed)?;
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, f) in plan.folds.iter().enumerate() {
        let fold_seed = seed.wrapping_add(i as u64);
        let labels = |idx: &[usize]| -> Result<Vec<i64>> {
            idx.iter().map(|&k| data.example(k).map(|e| e.score)).collect()
        };
        let train = reduce_training_set(&f.train, &labels(&f.train)?, fraction, fold_seed)?;
        let dev = reduce_training_set(&f.dev, &labels(&f.dev)?, fraction, fold_seed ^ 0xDEF)?;
        let model = learner.fit(data, &train, &dev, fold_seed)?;
        let mut truth = Vec::with_capacity(f.test.len());
        let mut inputs = Vec::with_capacity(f.test.len());
        for &k in &f.test {
            let e = data.example(k)?;
            truth.push(e.score);
            inputs.push(&e.input);
        }
        let pred = model.score_many(&inputs)?;
        let k = qwk(&truth, &pred, score_min, score_max)?;
        folds.push(FoldResult {
            fold: i,
            seed: fold_seed,
            n_train: train.len(),
            n_dev: dev.len(),
            n_test: f.test.len(),
            test_qwk: k.value,
            degenerate: k.degenerate,
        });
    }
    let mean_qwk = folds.iter().map(|f| f.test_qwk).sum::<f64>() / folds.len() as f64;
    Ok(CvReport {
        fraction,
        folds,
        mean_qwk,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub mean_qwk: f64,
    pub report: CvReport,
}

/// Cross-validation at each training fraction, in ascending order.
pub fn reduced_data_sweep<L: Learner>(
    learner: &mut L,
    data: &dyn ExampleSource,
    score_min: i64,
    score_max: i64,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(&f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::FractionOutOfRange(f));
    }
    let mut fr = fractions.to_vec();
    fr.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    fr.dedup();
    fr.into_iter()
        .map(|f| {
            let report = cross_validate(learner, data, score_min, score_max, seed, f)?;
            Ok(SweepRow {
                fraction: f,
                mean_qwk: report.mean_qwk,
                report,
            })
        })
        .collect()
}

/// One model's QWK per essay set, laid out like a results table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QwkTable {
    pub model: String,
    pub sets: BTreeMap<u32, f64>,
    pub average: f64,
}

impl QwkTable {
    pub fn new(model: &str, sets: BTreeMap<u32, f64>) -> Self {
        let average = if sets.is_empty() {
            0.0
        } else {
            sets.values().sum::<f64>() / sets.len() as f64
        };
        Self {
            model: model.into(),
            sets,
            average,
        }
    }
}

/// Aligned plain-text table with columns for sets 1 to 8, any other set ids
/// present in `rows`, and the average.
pub fn render_table(rows: &[QwkTable]) -> String {
    let mut cols: Vec<u32> = (1..=8).collect();
    for r in rows {
        cols.extend(r.sets.keys().filter(|s| !(1..=8).contains(*s)));
    }
    cols.sort_unstable();
    cols.dedup();
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<w$}", "Model", w = width);
    for s in &cols {
        out.push_str(&format!(" {:>6}", s));
    }
    out.push_str(&format!(" {:>6}\n", "Avg"));
    for r in rows {
        out.push_str(&format!("{:<w$}", r.model, w = width));
        for s in &cols {
            match r.sets.get(s) {
                Some(v) => out.push_str(&format!(" {:>6.3}", v)),
                None => out.push_str(&format!(" {:>6}", "-")),
            }
        }
        out.push_str(&format!(" {:>6.3}\n", r.average));
    }
    out
}
