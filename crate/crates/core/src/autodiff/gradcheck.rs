use super::{AdError, Graph, NodeId, Tensor};
use crate::scalar::Scalar;

/// Per-parameter comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|, 1e-8)
    pub rel_err: f64,
    pub abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `build` constructs the loss from leaf nodes bound in the order of
/// `params`; it is invoked fresh for every evaluation, so it must be a pure
/// function of the parameter values.
pub fn gradient_check<T, F>(
    params: &[(String, Tensor<T>)],
    step: f64,
    build: F,
) -> Result<GradCheckReport, AdError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId, AdError>,
{
    // Analytic pass.
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            graph.leaf(&t)
        })
        .collect();
    let loss = build(&mut graph, &ids)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Vec<T>> =
        ids.iter().zip(params).map(|(&id, (_, t))| grads.get_or_zeros(id, t.numel())).collect();

    let eval = |values: &[Tensor<T>]| -> Result<f64, AdError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss)[0].to_f64_lossy())
    };

    let mut work: Vec<Tensor<T>> = params
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.set_requires_grad(false);
            t
        })
        .collect();

    let h = T::of(step);
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let numel = work[pi].numel();
        let mut max_abs = 0.0f64;
        let mut scale_a = 0.0f64;
        let mut scale_n = 0.0f64;
        for j in 0..numel {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi][j].to_f64_lossy();
            max_abs = max_abs.max((a - numeric).abs());
            scale_a = scale_a.max(a.abs());
            scale_n = scale_n.max(numeric.abs());
        }
        let scale = scale_a.max(scale_n).max(1e-8);
        report.push(ParamCheck { name: name.clone(), rel_err: max_abs / scale, abs_err: max_abs });
    }
    Ok(GradCheckReport { per_param: report })
}
