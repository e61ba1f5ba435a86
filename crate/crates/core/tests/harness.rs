use std::sync::Arc;

use essaylens_core::evaluation::{cross_validate, reduced_data_sweep, Learner, Scorer};
use essaylens_core::hypergen::generate_hyperparams;
use essaylens_core::corpus::Catalog;
use essaylens_core::scorers::data::{EssayInput, ExampleSource, TrainExample};
use essaylens_core::scorers::{ModelKind, ModelSpec, ScoreModel};
use essaylens_core::synthetic::{synthetic_corpus, SyntheticConfig};
use essaylens_core::Result;

fn corpus() -> Vec<TrainExample> {
    synthetic_corpus(SyntheticConfig {
        essays: 60,
        dim: 8,
        max_sentences: 5,
        ..SyntheticConfig::default()
    })
    .unwrap()
    .examples
}

/// Looks the gold score up by exact input equality.
struct Lookup(Vec<TrainExample>);

impl Scorer for Lookup {
    fn score(&self, input: &EssayInput) -> Result<i64> {
        Ok(self.0.iter().find(|e| &e.input == input).expect("known essay").score)
    }
}

struct Oracle(Vec<TrainExample>);

impl Learner for Oracle {
    type Model = Lookup;
    fn fit(&mut self, _: &dyn ExampleSource, _: &[usize], _: &[usize], _: u64) -> Result<Lookup> {
        Ok(Lookup(self.0.clone()))
    }
}

struct Constant(i64);

impl Scorer for Constant {
    fn score(&self, _: &EssayInput) -> Result<i64> {
        Ok(self.0)
    }
}

/// Predicts the most common training score, and records every index it saw.
#[derive(Default)]
struct Majority {
    seen: Vec<usize>,
}

impl Learner for Majority {
    type Model = Constant;
    fn fit(&mut self, data: &dyn ExampleSource, train: &[usize], dev: &[usize], _: u64) -> Result<Constant> {
        self.seen.extend(train.iter().chain(dev));
        let mut counts = std::collections::BTreeMap::new();
        for &i in train {
            *counts.entry(data.example(i)?.score).or_insert(0usize) += 1;
        }
        Ok(Constant(*counts.iter().max_by_key(|(_, &c)| c).unwrap().0))
    }
}

#[test]
fn oracle_scores_one_on_every_fold() {
    let data = corpus();
    let r = cross_validate(&mut Oracle(data.clone()), &data, 0, 3, 11, 1.0).unwrap();
    assert_eq!(r.folds.len(), 5);
    assert!(r.folds.iter().all(|f| f.test_qwk == 1.0));
    assert_eq!(r.mean_qwk, 1.0);
    let total: usize = r.folds.iter().map(|f| f.n_test).sum();
    assert_eq!(total, data.len());
}

#[test]
fn constant_predictor_is_at_most_chance() {
    let data = corpus();
    let r = cross_validate(&mut Majority::default(), &data, 0, 3, 11, 1.0).unwrap();
    assert_eq!(r.folds.len(), 5);
    assert!(r.mean_qwk <= 0.0);
    // a constant column makes observed and expected disagreement equal
    assert!(r.folds.iter().all(|f| f.test_qwk.abs() < 1e-12));
}

#[test]
fn sweep_at_full_fraction_reproduces_cross_validation() {
    let data = corpus();
    let cv = cross_validate(&mut Majority::default(), &data, 0, 3, 5, 1.0).unwrap();
    let rows = reduced_data_sweep(&mut Majority::default(), &data, 0, 3, &[1.0], 5).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].report, cv);
    let rows = reduced_data_sweep(&mut Majority::default(), &data, 0, 3, &[1.0, 0.6], 5).unwrap();
    assert_eq!(rows.iter().map(|r| r.fraction).collect::<Vec<_>>(), vec![0.6, 1.0]);
    assert!(rows[0].report.folds.iter().zip(&rows[1].report.folds).all(|(a, b)| a.n_train < b.n_train));
    assert!(reduced_data_sweep(&mut Majority::default(), &data, 0, 3, &[0.0], 5).is_err());
}

#[test]
fn harness_never_hands_over_test_indices() {
    let data = corpus();
    let plan = essaylens_core::corpus::make_folds(data.len(), 3).unwrap();
    for (i, fold) in plan.folds.iter().enumerate() {
        let mut l = Majority::default();
        // replay just this fold through the learner
        l.fit(&data, &fold.train, &fold.dev, 3 + i as u64).unwrap();
        assert!(l.seen.iter().all(|k| !fold.test.contains(k)));
    }
    let mut l = Majority::default();
    cross_validate(&mut l, &data, 0, 3, 3, 1.0).unwrap();
    // every index is somebody's test item, so each shows up in 4 of 5 fits
    let mut counts = vec![0; data.len()];
    for &k in &l.seen {
        counts[k] += 1;
    }
    assert!(counts.iter().all(|&c| c == 4));
}

#[test]
fn predict_is_pure_across_threads() {
    let data = corpus();
    let c = Catalog::builtin();
    let mut hp = generate_hyperparams(c.get(3).unwrap(), c.mean_classes());
    hp.d_model = 8;
    hp.n_heads = 2;
    hp.d_ff = 16;
    let model = Arc::new(ScoreModel::build(ModelSpec::new(ModelKind::Mha2, hp, 8, 0, 3), 1).unwrap());
    let inputs: Arc<Vec<EssayInput>> = Arc::new(data.iter().take(12).map(|e| e.input.clone()).collect());
    let serial: Vec<_> = inputs.iter().map(|x| model.predict(x).unwrap()).collect();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (m, xs) = (Arc::clone(&model), Arc::clone(&inputs));
            std::thread::spawn(move || xs.iter().map(|x| m.predict(x).unwrap()).collect::<Vec<_>>())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), serial);
    }
}
