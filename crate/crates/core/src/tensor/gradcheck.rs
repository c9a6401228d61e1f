use serde::Serialize;

use super::{Graph, NodeId, ParamStore, TensorError};

/// Central-difference step.
const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so that gradients that are zero
/// up to round-off are compared in absolute terms.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_relative_error < self.tolerance)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares reverse-mode gradients of a scalar fragment against central
/// finite differences, element by element, for every parameter in `store`.
///
/// `fragment` must rebuild the same computation from the store on every call.
pub fn grad_check<F>(store: &mut ParamStore, tolerance: f64, mut fragment: F) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId, TensorError>,
{
    let mut graph = Graph::new();
    let loss = fragment(&mut graph, store)?;
    graph.backward(loss, store)?;
    drop(graph);

    let mut eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let out = fragment(&mut g, store)?;
        Ok(g.value(out).item())
    };

    let mut entries = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = store.grad(id).data().to_vec();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
        }
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            elements: analytic.len(),
            max_relative_error: worst,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}
