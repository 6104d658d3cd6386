use super::graph::{Graph, NodeId, Wrt};
use super::tensor::Tensor;
use super::DiffError;

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|)`, with a floor on the denominator so that
/// gradients that are zero on both sides count as exact.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

pub fn compare_blocks(
    names: &[String],
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    tolerance: f64,
) -> GradCheckReport {
    let blocks = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let max_rel_error = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max);
            BlockReport {
                name: name.clone(),
                max_rel_error,
                passed: max_rel_error <= tolerance,
            }
        })
        .collect();
    GradCheckReport { tolerance, blocks }
}

fn objective(
    graph: &mut Graph<f64>,
    params: &[Tensor<f64>],
    inputs: &[Tensor<f64>],
    output: NodeId,
) -> Result<f64, DiffError> {
    Ok(graph.eval(params, inputs, output)?.sum_f64())
}

/// Parameter gradients and input gradients, in slot order.
pub type NumericGrads = (Vec<Tensor<f64>>, Vec<Tensor<f64>>);

/// Central finite differences of `sum(output)` with respect to every
/// parameter slot and every differentiable input.
pub fn numeric_gradients(
    graph: &mut Graph<f64>,
    params: &[Tensor<f64>],
    inputs: &[Tensor<f64>],
    output: NodeId,
    differentiable_inputs: &[usize],
) -> Result<NumericGrads, DiffError> {
    let mut p = params.to_vec();
    let mut param_grads = Vec::with_capacity(p.len());
    for slot in 0..p.len() {
        let mut g = Tensor::zeros(p[slot].shape());
        for j in 0..p[slot].len() {
            let orig = p[slot].data()[j];
            p[slot].data_mut()[j] = orig + FD_STEP;
            let plus = objective(graph, &p, inputs, output)?;
            p[slot].data_mut()[j] = orig - FD_STEP;
            let minus = objective(graph, &p, inputs, output)?;
            p[slot].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        param_grads.push(g);
    }
    let mut x = inputs.to_vec();
    let mut input_grads = Vec::new();
    for &idx in differentiable_inputs {
        let mut g = Tensor::zeros(x[idx].shape());
        for j in 0..x[idx].len() {
            let orig = x[idx].data()[j];
            x[idx].data_mut()[j] = orig + FD_STEP;
            let plus = objective(graph, params, &x, output)?;
            x[idx].data_mut()[j] = orig - FD_STEP;
            let minus = objective(graph, params, &x, output)?;
            x[idx].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        input_grads.push(g);
    }
    Ok((param_grads, input_grads))
}

/// Compares backpropagated gradients of `sum(output)` against central
/// differences, one block per parameter slot and differentiable input.
pub fn grad_check(
    graph: &mut Graph<f64>,
    params: &[Tensor<f64>],
    inputs: &[Tensor<f64>],
    output: NodeId,
    tolerance: f64,
) -> Result<GradCheckReport, DiffError> {
    graph.forward(params, inputs)?;
    let seed = Tensor::full(graph.value(output)?.shape(), 1.0);
    let grads = graph.backward(output, seed, Wrt::All)?;
    let diff_inputs: Vec<usize> = grads
        .inputs
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|_| i))
        .collect();

    let mut names = Vec::new();
    let mut analytic = Vec::new();
    for (slot, p) in params.iter().enumerate() {
        names.push(format!("param[{slot}]"));
        analytic.push(
            grads
                .params
                .get(&slot)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape())),
        );
    }
    for &i in &diff_inputs {
        names.push(format!("input[{i}]"));
        analytic.push(grads.inputs[i].clone().expect("filtered above"));
    }

    let (pg, ig) = numeric_gradients(graph, params, inputs, output, &diff_inputs)?;
    let numeric: Vec<Tensor<f64>> = pg.into_iter().chain(ig).collect();
    Ok(compare_blocks(&names, &analytic, &numeric, tolerance))
}
