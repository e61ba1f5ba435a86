use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use super::*;
use crate::autodiff::gradient_check;
use crate::corpus::make_folds;
use crate::diagnostics::{random_example, tiny_hp, tiny_spec};
use crate::rng::seeded;
use crate::synthetic::{synthetic_corpus, SyntheticConfig};

#[test]
fn build_is_deterministic() {
    for kind in ModelKind::ALL {
        let a = ScoreModel::build(tiny_spec(kind), 5).unwrap();
        let b = ScoreModel::build(tiny_spec(kind), 5).unwrap();
        assert_eq!(a.params, b.params);
        let c = ScoreModel::build(tiny_spec(kind), 6).unwrap();
        assert_ne!(a.params, c.params);
        assert_eq!(a.param_count(), ScoreModel::expected_param_count(&a.spec).unwrap());
    }
}

#[test]
fn heads_must_divide_d_model() {
    let mut hp = tiny_hp();
    hp.d_model = 512;
    hp.n_heads = 3;
    let spec = ModelSpec::new(ModelKind::Mha, hp, 512, 0, 3);
    assert!(matches!(ScoreModel::build(spec, 0), Err(Error::InvalidSpec(_))));
}

#[test]
fn mha_param_count_by_hand() {
    // proj 6*8+8, cls 8, block 4*64 + 3*8 (no key bias) + 2*(64+8) + 4*8, fc1 64+8, heads 8*3+3 and 8+1
    let expected = 56 + 8 + (280 + 144 + 32) + 72 + 27 + 9;
    let m = ScoreModel::build(tiny_spec(ModelKind::Mha), 1).unwrap();
    assert_eq!(m.param_count(), expected);
    // LSTM: proj 56, lstm 4*8*(8+8+1), fc1 72, fc2 72, heads 36
    let l = ScoreModel::build(tiny_spec(ModelKind::Lstm), 1).unwrap();
    assert_eq!(l.param_count(), 56 + 544 + 72 + 72 + 27 + 9);
}

#[test]
fn blend_examples() {
    assert_eq!(blend_score(0.3, 3.0, 3.0, 0, 5), 3);
    assert_eq!(blend_score(0.9, 3.0, 3.0, 0, 5), 3);
    let v: f64 = 0.8986 * 2.4 + 0.1014 * 2.0;
    assert!((v - 2.359).abs() < 1e-3);
    assert_eq!(blend_score(0.8986, 2.4, 2.0, 0, 3), 2);
    assert_eq!(blend_score(0.5, 9.0, 9.0, 0, 3), 3);
    assert_eq!(blend_score(0.5, -2.0, -2.0, 0, 3), 0);
}

#[test]
fn padding_invariance_all_kinds() {
    let mut rng = seeded(11);
    for kind in ModelKind::ALL {
        for readout in [Readout::Cls, Readout::Luong] {
            let mut spec = tiny_spec(kind);
            spec.hp.readout = readout;
            let m = ScoreModel::build(spec, 3).unwrap();
            for t in [0usize, 1, 4] {
                let ex = random_example(&mut rng, t, 0, true);
                let base = m.predict(&ex.input).unwrap();
                for fill in [0.0, 3.7] {
                    let padded = m.predict(&ex.input.padded(3, fill)).unwrap();
                    for (a, b) in base.class_probs.iter().zip(&padded.class_probs) {
                        assert!((a - b).abs() < 1e-10, "{:?} t={}", kind, t);
                    }
                    assert!((base.regression - padded.regression).abs() < 1e-10);
                    assert_eq!(base.score, padded.score);
                }
            }
        }
    }
}

#[test]
fn probabilities_are_distributions() {
    let mut rng = seeded(2);
    let m = ScoreModel::build(tiny_spec(ModelKind::Mha2), 9).unwrap();
    let ex = random_example(&mut rng, 5, 0, false);
    let p = m.predict(&ex.input).unwrap();
    assert!((p.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&p.regression));
    assert!((0..=2).contains(&p.score));
}

#[test]
fn dimension_mismatch_is_reported() {
    let m = ScoreModel::build(tiny_spec(ModelKind::Mha), 0).unwrap();
    let input = EssayInput::new(Tensor::zeros(&[2, 5])).unwrap();
    assert_eq!(
        m.predict(&input).unwrap_err(),
        Error::DimMismatch { expected: 6, got: 5 }
    );
}

#[test]
fn gradient_check_every_kind() {
    let mut rng = seeded(4);
    for kind in ModelKind::ALL {
        for readout in [Readout::Cls, Readout::Luong] {
            if readout == Readout::Luong && matches!(kind, ModelKind::Lstm | ModelKind::MhaBlstm) {
                continue;
            }
            let mut spec = tiny_spec(kind);
            spec.hp.readout = readout;
            let mut m = ScoreModel::build(spec, 21).unwrap();
            let mut padded = random_example(&mut rng, 2, 2, true);
            padded.input = padded.input.padded(1, 0.3);
            padded.target = 1.0;
            let mut mid = random_example(&mut rng, 3, 1, true);
            mid.target = 0.5;
            let exs = [random_example(&mut rng, 3, 0, true), padded, mid];
            // training fits the statistics scaler before any gradient step
            m.stats_norm = StatsNorm::fit(&exs.iter().map(|e| e.input.stats).collect::<Vec<_>>());
            let refs: Vec<&TrainExample> = exs.iter().collect();
            let (g, nodes) = m.loss_graph(&refs, None).unwrap();
            assert!(nodes.used_kappa);
            let names: Vec<String> = m.params.keys().cloned().collect();
            let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
            let report = gradient_check(&g, &m.bindings(), nodes.total, &wrt, 1e-5).unwrap();
            let worst = report.worst().unwrap();
            assert!(
                report.max_rel_error() < 1e-4,
                "{:?}/{:?}: {} rel err {}",
                kind,
                readout,
                worst.name,
                worst.max_rel_error
            );
        }
    }
}

struct Tracking<'a> {
    inner: &'a [TrainExample],
    seen: RefCell<BTreeSet<usize>>,
}

impl ExampleSource for Tracking<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn example(&self, index: usize) -> Result<&TrainExample> {
        self.seen.borrow_mut().insert(index);
        self.inner.example(index)
    }
}

fn small_corpus() -> Vec<TrainExample> {
    synthetic_corpus(SyntheticConfig {
        essays: 40,
        dim: 6,
        max_sentences: 5,
        classes: 3,
        ..SyntheticConfig::default()
    })
    .unwrap()
    .examples
}

#[test]
fn training_never_reads_test_records() {
    let data = small_corpus();
    let fold = &make_folds(data.len(), 3).unwrap().folds[0];
    let src = Tracking {
        inner: &data,
        seen: RefCell::new(BTreeSet::new()),
    };
    let m = ScoreModel::build(tiny_spec(ModelKind::Mha), 1).unwrap();
    train(m, &src, &fold.train, &fold.dev).unwrap();
    let seen = src.seen.borrow();
    assert!(!seen.is_empty());
    assert!(fold.test.iter().all(|i| !seen.contains(i)));
}

#[test]
fn frozen_learning_rate_stops_early() {
    let data = small_corpus();
    let fold = &make_folds(data.len(), 3).unwrap().folds[1];
    let mut spec = tiny_spec(ModelKind::Mha);
    spec.hp.learning_rate = 0.0;
    spec.hp.use_schedule = false;
    spec.hp.patience = 1;
    spec.hp.epochs = 10;
    let m = ScoreModel::build(spec, 1).unwrap();
    let before = m.params.clone();
    let (trained, report) = train(m, &data, &fold.train, &fold.dev).unwrap();
    assert!(report.epochs_run <= 2);
    assert_eq!(report.stop_reason, StopReason::Patience);
    assert_eq!(trained.params, before);
}

#[test]
fn training_is_deterministic() {
    let data = small_corpus();
    let fold = &make_folds(data.len(), 5).unwrap().folds[2];
    let run = || {
        let m = ScoreModel::build(tiny_spec(ModelKind::MhaBlstm), 8).unwrap();
        train(m, &data, &fold.train, &fold.dev).unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert!(ra.best_epoch <= ra.epochs_run);
}

#[test]
fn single_class_training_split_is_degenerate() {
    let mut data = small_corpus();
    for e in &mut data {
        e.label = 1;
        e.score = 1;
    }
    let m = ScoreModel::build(tiny_spec(ModelKind::Lstm), 1).unwrap();
    let r = train(m, &data, &[0, 1, 2, 3], &[4, 5]);
    assert!(matches!(r, Err(Error::DegenerateFold(_))));
}

#[test]
fn single_label_batches_fall_back_to_cce() {
    let mut rng = seeded(1);
    let m = ScoreModel::build(tiny_spec(ModelKind::Mha), 1).unwrap();
    let exs = [random_example(&mut rng, 2, 1, false), random_example(&mut rng, 3, 1, false)];
    let refs: Vec<&TrainExample> = exs.iter().collect();
    let (_, nodes) = m.loss_graph(&refs, None).unwrap();
    assert!(!nodes.used_kappa);
}
