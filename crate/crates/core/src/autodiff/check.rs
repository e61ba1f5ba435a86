//! Central finite differences and analytic-vs-numeric gradient reports.

use alloc::string::String;
use alloc::vec::Vec;

use super::graph::{Bindings, Graph, NodeId};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<R: Real>(
    mut f: impl FnMut(&Tensor<R>) -> Result<R>,
    x: &Tensor<R>,
    h: R,
) -> Result<Tensor<R>> {
    if !(h > R::zero()) {
        return Err(Error::OutOfRange("finite-difference step must be > 0".into()));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEvaluation(i));
        }
        out.push((plus - minus) / two_h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error<R: Real>(analytic: R, numeric: R) -> R {
    let denom = analytic
        .abs()
        .max(numeric.abs())
        .max(R::lit(1e-8));
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradientEntry<R = f64> {
    pub name: String,
    pub analytic: Tensor<R>,
    pub numeric: Tensor<R>,
    pub max_rel_error: R,
}

#[derive(Clone, Debug)]
pub struct GradientReport<R = f64> {
    pub entries: Vec<GradientEntry<R>>,
}

impl<R: Real> GradientReport<R> {
    pub fn max_rel_error(&self) -> R {
        self.entries
            .iter()
            .fold(R::zero(), |m, e| m.max(e.max_rel_error))
    }

    pub fn worst(&self) -> Option<&GradientEntry<R>> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.partial_cmp(&b.max_rel_error).unwrap_or(core::cmp::Ordering::Equal))
    }
}

/// Compares [`Graph::backprop`] against finite differences for each named
/// leaf in `wrt`.
pub fn gradient_check<R: Real>(
    graph: &Graph<R>,
    bindings: &Bindings<R>,
    loss: NodeId,
    wrt: &[&str],
    h: R,
) -> Result<GradientReport<R>> {
    let analytic = graph.backprop(bindings, loss)?.gradients;
    let mut entries = Vec::with_capacity(wrt.len());
    for &name in wrt {
        let x = bindings
            .get(name)
            .ok_or_else(|| Error::UnboundInput(name.into()))?;
        let mut probe = bindings.clone();
        let numeric = finite_difference_grad(
            |v| {
                probe.insert(name.into(), v.clone());
                Ok(graph.evaluate(&probe)?.value(loss).item())
            },
            x,
            h,
        )?;
        let a = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let max_rel_error = a
            .data()
            .iter()
            .zip(numeric.data())
            .fold(R::zero(), |m, (&p, &q)| m.max(relative_error(p, q)));
        entries.push(GradientEntry {
            name: name.into(),
            analytic: a,
            numeric,
            max_rel_error,
        });
    }
    Ok(GradientReport { entries })
}
