use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Bindings, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Leaf, flat index, analytic and numeric value at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Magnitude below which gradients are compared absolutely: central
/// differences of an O(1) loss carry roundoff of roughly 1e-10.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRAD_FLOOR)
}

/// Central-difference check of `∂loss/∂leaf` for every element of the named
/// leaves.
pub fn grad_check(
    graph: &Graph,
    loss: NodeId,
    bindings: &Bindings<'_>,
    h: f64,
    which: &[&str],
) -> Result<GradCheckReport> {
    grad_check_sampled(graph, loss, bindings, h, which, None, 0)
}

/// Like [`grad_check`], but checks at most `per_leaf` elements of each leaf,
/// drawn without replacement from `seed`.
pub fn grad_check_sampled(
    graph: &Graph,
    loss: NodeId,
    bindings: &Bindings<'_>,
    h: f64,
    which: &[&str],
    per_leaf: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = graph.grad(loss, bindings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &name in which {
        let base = bindings
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unbound leaf '{name}'")))?;
        let analytic = &grads[name];
        let indices: Vec<usize> = match per_leaf {
            Some(k) if k < base.len() => sample(&mut rng, base.len(), k).into_vec(),
            _ => (0..base.len()).collect(),
        };
        for idx in indices {
            let numeric = central_difference(graph, loss, bindings, name, base, idx, h)?;
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.to_string(), idx, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

fn central_difference(
    graph: &Graph,
    loss: NodeId,
    bindings: &Bindings<'_>,
    name: &str,
    base: &Tensor,
    idx: usize,
    h: f64,
) -> Result<f64> {
    let eval_at = |delta: f64| -> Result<f64> {
        let mut shifted = base.clone();
        shifted.data_mut()[idx] += delta;
        let mut local = bindings.clone();
        local.bind(name, &shifted);
        Ok(graph.eval(&local)?.get(loss).item())
    };
    let plus = eval_at(h)?;
    let minus = eval_at(-h)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Gradients keyed by leaf name, as returned by [`Graph::grad`].
pub type Gradients = BTreeMap<String, Tensor>;
