//! Central finite-difference verification of recorded gradients.

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Outcome of a gradient check: the worst element found.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Which input (or parameter name) holds the worst element.
    pub worst: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err;
            self.worst = name.to_string();
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn scalar_loss(g: &Graph<f64>, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", format!("loss has shape {:?}", v.shape())));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::domain("grad_check", "non-finite loss"));
    }
    Ok(x)
}

/// Element indices to probe: all of them, or `limit` evenly spread ones.
fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|i| i * n / k + (n / k) / 2).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks `d f / d inputs` for a function of free tensors.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(inputs, f, step, None)
}

/// [`grad_check`] probing at most `limit` elements per input.
pub fn grad_check_sampled<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    limit: Option<usize>,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        scalar_loss(&g, loss)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    scalar_loss(&g, loss)?;
    let grads = g.backward(loss)?;

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(v).unwrap_or(&zeros);
        for idx in probe_indices(inputs[k].numel(), limit) {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(&format!("input {k}"), idx, analytic.data()[idx], numeric);
        }
    }
    Ok(report)
}

/// Checks `d f / d param` for every parameter of a store (or a sample of
/// `limit` elements per parameter).
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    step: f64,
    limit: Option<usize>,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    scalar_loss(&g, loss)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<(ParamId, Tensor<f64>)> = g
        .param_grads(&grads)
        .into_iter()
        .map(|(id, t)| (id, t.clone()))
        .collect();
    drop(g);

    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut report = GradReport::default();
    for id in ids {
        let zeros = Tensor::zeros(store.value(id).shape());
        let a = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, t)| t.clone())
            .unwrap_or(zeros);
        let name = store.get(id).name.clone();
        for idx in probe_indices(a.numel(), limit) {
            let orig = store.value(id).data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + step;
            let mut gp = Graph::new();
            let lp = f(&mut gp, store)?;
            let plus = scalar_loss(&gp, lp)?;
            store.get_mut(id).value.data_mut()[idx] = orig - step;
            let mut gm = Graph::new();
            let lm = f(&mut gm, store)?;
            let minus = scalar_loss(&gm, lm)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            report.record(&name, idx, a.data()[idx], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let sq = g.square(v).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);

        let report = grad_check(
            &[x],
            |g, v| {
                let s = g.square(v[0])?;
                g.sum(s)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // stop-gradient makes the recorded gradient zero while the function still varies
        let x = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let report = grad_check(
            &[x],
            |g, v| {
                let d = g.detach(v[0]);
                let s = g.square(d)?;
                g.sum(s)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.5);
    }

    #[test]
    fn probe_sampling_spreads_indices() {
        assert_eq!(probe_indices(4, None), vec![0, 1, 2, 3]);
        assert_eq!(probe_indices(10, Some(2)), vec![2, 7]);
        assert_eq!(probe_indices(3, Some(5)), vec![0, 1, 2]);
    }
}
