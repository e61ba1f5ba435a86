//! Tiny fixed models and the full finite-difference gradient suite. Used by
//! the unit tests and by the acceptance runner.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{gradient_check, Bindings, Graph, NodeId, Tensor};
use crate::corpus::Catalog;
use crate::error::Result;
use crate::hypergen::{generate_hyperparams, HyperParams, Readout};
use crate::layers::{bind_params, luong_attention, Activation, BiLstm, Dense, LayerNorm, MhaBlock, ParamMap};
use crate::objectives::{cce_node, combined_node, kappa_node, mse_node, smoothed_targets};
use crate::rng::{normal_tensor, seeded, SeededRng};
use crate::scorers::{EssayInput, ModelKind, ModelSpec, ScoreModel, StatsNorm, TrainExample};

pub const FD_STEP: f64 = 1e-5;

/// Set 3's generated hyperparameters shrunk to `d_model` 8 with 2 heads.
pub fn tiny_hp() -> HyperParams {
    let c = Catalog::builtin();
    let mut hp = generate_hyperparams(c.get(3).expect("built-in set 3"), c.mean_classes());
    hp.d_model = 8;
    hp.n_heads = 2;
    hp.d_ff = 8;
    hp.batch_size = 4;
    hp.epochs = 3;
    hp.patience = 2;
    hp.dropout = 0.1;
    hp.p = 0.6;
    hp
}

/// Input width 6, three classes (scores 0 to 2).
pub fn tiny_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec::new(kind, tiny_hp(), 6, 0, 2)
}

/// `t` random sentences of width 6, plausible raw statistics, and
/// optionally a 2-sentence passage.
pub fn random_example(rng: &mut SeededRng, t: usize, label: usize, passage: bool) -> TrainExample {
    let emb = normal_tensor(&[t, 6], 1.0, rng);
    let mut input = EssayInput::new(emb).expect("rank 2");
    if passage {
        input.passage = Some(normal_tensor(&[2, 6], 1.0, rng));
    }
    let jitter = normal_tensor(&[4], 1.0, rng);
    let j = jitter.data();
    input.stats = [3.0 + j[0], 40.0 + 8.0 * j[1], 13.3 + 2.0 * j[2], 0.7 + 0.05 * j[3]];
    TrainExample {
        id: String::from("x"),
        input,
        label,
        score: label as i64,
        target: label as f64 / 2.0,
    }
}

/// Readouts that apply to `kind`.
pub fn readouts(kind: ModelKind) -> &'static [Readout] {
    match kind {
        ModelKind::Lstm | ModelKind::MhaBlstm => &[Readout::Cls],
        _ => &[Readout::Cls, Readout::Luong],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Leaf with the largest error.
    pub worst: String,
}

fn weighted_loss(g: &mut Graph<f64>, out: NodeId, shape: &[usize], seed: u64) -> NodeId {
    let r = g.constant(normal_tensor(shape, 1.0, &mut seeded(seed)));
    let m = g.mul(out, r);
    g.sum(m)
}

fn check(name: &str, g: &Graph<f64>, b: &Bindings, loss: NodeId, wrt: Option<&[&str]>) -> Result<GradCheck> {
    let names: Vec<String> = b.keys().cloned().collect();
    let all: Vec<&str> = names.iter().map(String::as_str).collect();
    let report = gradient_check(g, b, loss, wrt.unwrap_or(&all), FD_STEP)?;
    let worst = report.worst().map(|e| e.name.clone()).unwrap_or_default();
    Ok(GradCheck {
        name: name.into(),
        max_rel_error: report.max_rel_error(),
        worst,
    })
}

pub fn layer_checks() -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();

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
    out.push(check("layer/dense+layer_norm", &g, &b, loss, None)?);

    let mut rng = seeded(22);
    let layer = BiLstm::new("bi", 3, 4);
    let mut p = ParamMap::new();
    layer.init(&mut p, &mut rng);
    let mut g = Graph::new();
    let x = g.input("x");
    let nodes = layer.apply(&mut g, x, &[true, true, false, true]);
    let l1 = weighted_loss(&mut g, nodes.states, &[4, 8], 23);
    let l2 = weighted_loss(&mut g, nodes.final_backward, &[1, 4], 24);
    let loss = g.add(l1, l2);
    let mut b = bind_params(&p);
    b.insert("x".into(), normal_tensor(&[4, 3], 1.0, &mut rng));
    out.push(check("layer/lstm+bilstm", &g, &b, loss, None)?);

    let mut rng = seeded(25);
    let block = MhaBlock::new("blk", 8, 2, 12)?;
    let mut p = ParamMap::new();
    block.init(&mut p, &mut rng);
    let mut g = Graph::new();
    let x = g.input("x");
    let o = block.apply(&mut g, x, &[true, false, true], None);
    let loss = weighted_loss(&mut g, o.output, &[3, 8], 26);
    let mut b = bind_params(&p);
    b.insert("x".into(), normal_tensor(&[3, 8], 1.0, &mut rng));
    out.push(check("layer/mha_block", &g, &b, loss, None)?);

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
    out.push(check("layer/luong_attention", &g, &b, loss, None)?);
    Ok(out)
}

pub fn loss_checks() -> Result<Vec<GradCheck>> {
    let mut rng = seeded(5);
    let y = [0usize, 2, 1, 3, 2];
    let mut g = Graph::new();
    let logits = g.param("logits");
    let probs = g.softmax(logits);
    let reg_raw = g.param("reg");
    let reg = g.sigmoid(reg_raw);
    let cce = cce_node(&mut g, probs, &smoothed_targets(&y, 4, 0.1)?);
    let kappa = kappa_node(&mut g, probs, &y, 4, 0.1)?;
    let mse = mse_node(&mut g, reg, &Tensor::matrix(5, 1, vec![0.0, 0.6, 0.3, 1.0, 0.6])?);
    let both = combined_node(&mut g, kappa, mse, 0.4);
    let mut b = Bindings::new();
    b.insert("logits".into(), normal_tensor(&[5, 4], 1.0, &mut rng));
    b.insert("reg".into(), normal_tensor(&[5, 1], 1.0, &mut rng));
    [("loss/cce", cce), ("loss/kappa", kappa), ("loss/mse", mse), ("loss/combined", both)]
        .into_iter()
        .map(|(n, l)| check(n, &g, &b, l, Some(&["logits", "reg"])))
        .collect()
}

/// Combined loss of every model kind and readout over a 3-essay batch with
/// one padded essay, with respect to every parameter.
pub fn model_checks() -> Result<Vec<GradCheck>> {
    let mut rng = seeded(4);
    let mut out = Vec::new();
    for kind in ModelKind::ALL {
        for &readout in readouts(kind) {
            let mut spec = tiny_spec(kind);
            spec.hp.readout = readout;
            let mut m = ScoreModel::build(spec, 21)?;
            let mut padded = random_example(&mut rng, 2, 2, true);
            padded.input = padded.input.padded(1, 0.3);
            padded.target = 1.0;
            let mut mid = random_example(&mut rng, 3, 1, true);
            mid.target = 0.5;
            let exs = [random_example(&mut rng, 3, 0, true), padded, mid];
            // training fits the statistics scaler before any gradient step
            m.stats_norm = StatsNorm::fit(&exs.iter().map(|e| e.input.stats).collect::<Vec<_>>());
            let refs: Vec<&TrainExample> = exs.iter().collect();
            let (g, nodes) = m.loss_graph(&refs, None)?;
            let names: Vec<String> = m.params.keys().cloned().collect();
            let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
            let name = format!("model/{}/{:?}", kind.as_str(), readout).to_lowercase();
            out.push(check(&name, &g, &m.bindings(), nodes.total, Some(&wrt))?);
        }
    }
    Ok(out)
}

/// Every layer, loss and model check.
pub fn gradient_suite() -> Result<Vec<GradCheck>> {
    let mut all = layer_checks()?;
    all.extend(loss_checks()?);
    all.extend(model_checks()?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_kind_and_passes() {
        let suite = gradient_suite().unwrap();
        for kind in ModelKind::ALL {
            assert!(suite.iter().any(|c| c.name.starts_with(&format!("model/{}/", kind.as_str()))));
        }
        assert_eq!(suite.len(), 4 + 4 + 8);
        for c in &suite {
            assert!(c.max_rel_error < 1e-4, "{} ({}) {}", c.name, c.worst, c.max_rel_error);
        }
    }
}
