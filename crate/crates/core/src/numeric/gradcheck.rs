use super::{DenseArray, Graph, NumericError, Var};

/// Default step for the five-point stencil.
pub const FD_STEP: f64 = 1e-3;

const REL_FLOOR: f64 = 1e-8;

/// Normwise relative disagreement between the reverse-mode gradient of `f`
/// at `x` and the fourth-order central difference
/// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`:
/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)`.
///
/// `f` builds a scalar on a fresh graph from the leaf it is handed. Values
/// produced by `detach` are recorded at `x` and replayed unchanged at every
/// perturbed point, so stop-gradient targets stay constant exactly as the
/// reverse pass assumes. Components far below the gradient's scale carry
/// only rounding noise, so they are not compared on their own scale.
pub fn finite_diff_check<F, E>(mut f: F, x: &DenseArray, step: f64) -> Result<f64, E>
where
    F: FnMut(&mut Graph, Var) -> Result<Var, E>,
    E: From<NumericError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(NumericError::InvalidStep(step).into());
    }
    let mut graph = Graph::new();
    let leaf = graph.leaf(x.clone());
    let root = f(&mut graph, leaf)?;
    let analytic = graph.backward(root)?.get(leaf);
    let frozen = graph.detached_values();

    let mut eval = |point: DenseArray| -> Result<f64, E> {
        let mut g = Graph::with_frozen_detach(frozen.clone());
        let leaf = g.leaf(point);
        let root = f(&mut g, leaf)?;
        Ok(g.value(root).item())
    };

    let mut worst_abs: f64 = 0.0;
    let mut scale = REL_FLOOR;
    for i in 0..x.len() {
        let xi = x.data()[i];
        let mut at = |offset: f64| {
            let mut point = x.clone();
            point.data_mut()[i] = xi + offset;
            eval(point)
        };
        let numeric = (at(-2.0 * step)? - 8.0 * at(-step)? + 8.0 * at(step)? - at(2.0 * step)?) / (12.0 * step);
        let a = analytic.data()[i];
        scale = scale.max(a.abs()).max(numeric.abs());
        worst_abs = worst_abs.max((a - numeric).abs());
    }
    Ok(worst_abs / scale)
}
