//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the backward pass of the scalar objective `f` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every entry of every parameter.
///
/// `f` builds the forward pass on a fresh graph from one leaf per parameter,
/// in the order of `params`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_terms(|g, vs| Ok(vec![f(g, vs)?]), params, eps)
}

/// [`grad_check`] for an objective given as a sum of scalar terms. The
/// central difference is taken per term and then summed, so each term is
/// rounded at its own magnitude rather than at the magnitude of the total.
pub fn grad_check_terms<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Vec<Var>>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be positive, got {eps}")));
    }
    let mut eval = |ps: &[Tensor], track: bool| -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p, track)).collect();
        let terms = f(&mut g, &vars)?;
        if terms.is_empty() {
            return Err(Error::Contract("objective has no terms".into()));
        }
        let values = terms.iter().map(|&t| g.scalar(t)).collect::<Result<Vec<f64>>>()?;
        if !track {
            return Ok((values, None));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t)?;
        }
        let grads = g.backward(loss)?;
        let per_param = vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();
        Ok((values, Some(per_param)))
    };

    let (first, analytic) = eval(params, true)?;
    let (second, _) = eval(params, false)?;
    if let Some((a, b)) = first.iter().zip(&second).find(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Determinism { first: *a, second: *b });
    }
    let analytic = analytic.expect("tracked evaluation returns gradients");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.numel() {
            let base = p.data()[e];
            work[pi].data_mut()[e] = base + eps;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[e] = base - eps;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[e] = base;
            let numeric = plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * eps);
            let a = analytic[pi][e];
            let rel = relative_error(a, numeric);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
