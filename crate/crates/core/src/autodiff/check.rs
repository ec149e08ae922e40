use std::collections::HashMap;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error. Components whose gradient
/// is smaller than this are effectively compared in absolute terms, since
/// central differences cannot resolve them below round-off.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Per-component comparison of analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDifferenceReport {
    pub max_relative_error: f64,
    /// `(leaf, flat index, analytic, numeric)` of the worst component.
    pub worst: Option<(NodeId, usize, f64, f64)>,
    pub components: usize,
}

/// Compares reverse-mode gradients of `sum(output)` against central
/// differences obtained by replaying the recorded graph.
///
/// The relative error of one component is
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, RELATIVE_FLOOR)`; the maximum over all
/// components of all `wrt` leaves is returned.
pub fn finite_difference_check(
    graph: &Graph,
    output: NodeId,
    wrt: &[NodeId],
    step: f64,
) -> Result<FiniteDifferenceReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let grads = graph.backward(output)?;
    let mut report = FiniteDifferenceReport {
        max_relative_error: 0.0,
        worst: None,
        components: 0,
    };
    let objective = |overrides: &HashMap<NodeId, Tensor>| -> Result<f64> {
        let values = graph.recompute(overrides)?;
        let f: f64 = values[output.index()].data().iter().sum();
        if !f.is_finite() {
            return Err(Error::Numeric("non-finite objective during finite differences".into()));
        }
        Ok(f)
    };

    for &leaf in wrt {
        let analytic = grads.wrt(leaf)?;
        let base = graph.value(leaf).clone();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += step;
            let mut minus = base.clone();
            minus.data_mut()[k] -= step;
            let f_plus = objective(&HashMap::from([(leaf, plus)]))?;
            let f_minus = objective(&HashMap::from([(leaf, minus)]))?;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let exact = analytic.data()[k];
            if !exact.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at node {} component {k}",
                    leaf.index()
                )));
            }
            let denom = exact.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            report.components += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((leaf, k, exact, numeric));
            }
        }
    }
    Ok(report)
}
