use super::{Bindings, DiffError, Gradients, Graph, NodeId, ParamSet};

/// Largest trainable-scalar count accepted by [`finite_diff_check`].
pub const MAX_SWEEP: usize = 10_000;

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry about 1e-11 of roundoff, so structurally zero gradients
/// (e.g. attention key biases) would otherwise read as large errors.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `loss` against central differences
/// for every trainable scalar in `params`.
///
/// Returns `max |g_a - g_n| / max(|g_a|, |g_n|, REL_FLOOR)`, with differences
/// under the quotient's own roundoff bound counted as zero. Parameters are
/// restored before returning; the graph is left evaluated at the original
/// point.
pub fn finite_diff_check(
    graph: &mut Graph<f64>,
    params: &mut ParamSet<f64>,
    inputs: &Bindings<f64>,
    loss: NodeId,
    h: f64,
) -> Result<f64, DiffError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(DiffError::InvalidStep(h));
    }
    let n = params.trainable_numel();
    if n > MAX_SWEEP {
        return Err(DiffError::TooManyParams(n));
    }

    graph.evaluate(params, inputs)?;
    let mut grads = Gradients::new(params);
    graph.backward(loss, &mut grads)?;

    let mut worst = 0.0f64;
    for idx in 0..params.len() {
        if !params.entry(idx).trainable {
            continue;
        }
        let analytic = grads.get(idx).expect("trainable entries have buffers").to_vec();
        for (j, &ga) in analytic.iter().enumerate() {
            let orig = params.entry(idx).value.data()[j];
            params.data_mut(idx)[j] = orig + h;
            let plus = eval_scalar(graph, params, inputs, loss);
            params.data_mut(idx)[j] = orig - h;
            let minus = eval_scalar(graph, params, inputs, loss);
            params.data_mut(idx)[j] = orig;
            let (plus, minus) = (plus?, minus?);
            let gn = (plus - minus) / (2.0 * h);
            // below the roundoff of the difference quotient itself
            let noise = 64.0 * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / (2.0 * h);
            let diff = (ga - gn).abs();
            let rel = if diff <= noise { 0.0 } else { diff / ga.abs().max(gn.abs()).max(REL_FLOOR) };
            worst = worst.max(rel);
        }
    }
    graph.evaluate(params, inputs)?;
    Ok(worst)
}

fn eval_scalar(
    graph: &mut Graph<f64>,
    params: &ParamSet<f64>,
    inputs: &Bindings<f64>,
    loss: NodeId,
) -> Result<f64, DiffError> {
    graph.evaluate(params, inputs)?;
    let v = graph.value(loss).expect("evaluated");
    if !v.is_scalar() {
        return Err(DiffError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}
