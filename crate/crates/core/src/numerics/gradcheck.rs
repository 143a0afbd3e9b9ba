//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the analytic gradient of the scalar `f` with central differences
/// at every coordinate of every parameter.
///
/// Relative error is `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.leaf(p.clone(), true)).collect();
    let root = f(&mut graph, &vars)?;
    graph.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| graph.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let root = f(&mut g, &vars)?;
        g.value(root).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = probe[pi].data()[i];
            probe[pi].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at parameter {pi}, element {i} (analytic {a}, numeric {numeric})"
                )));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3 - 0.7);
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64).cos());
        let r = grad_check(
            |g, p| {
                let y = g.matmul(p[0], p[1])?;
                g.sum_all(y)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let r = grad_check(|g, p| g.sum_all(p[0]), &[Tensor::zeros(&[1])], 0.1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_reported_with_coordinate() {
        let x = Tensor::from_f64(&[2], &[1.0, f64::INFINITY]).unwrap();
        let r = grad_check(
            |g, p| {
                let y = g.mul(p[0], p[0])?;
                g.sum_all(y)
            },
            &[x],
            1e-5,
        );
        match r {
            Err(Error::Numeric(msg)) => assert!(msg.contains("parameter 0"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
