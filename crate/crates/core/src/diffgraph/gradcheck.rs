//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::grid::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Component with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), false);
    let out = f(&mut g, x)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    Ok(g.scalar_value(out))
}

/// Compares the reverse-mode gradient of `f` at `point` with central finite
/// differences over every component.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    grad_check_subset(f, point, &all, h, tol)
}

/// As [`grad_check`], restricted to the listed components.
pub fn grad_check_subset<F>(
    f: F,
    point: &Tensor,
    indices: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let out = f(&mut g, x)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let full = g.grad_or_zeros(x);

    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = indices.first().copied().unwrap_or(0);
    for &i in indices {
        if i >= point.len() {
            return Err(Error::Contract(format!(
                "probe index {i} out of range for {} components",
                point.len()
            )));
        }
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (evaluate(&f, &plus)? - evaluate(&f, &minus)?) / (2.0 * h);
        let ad = full.data()[i];
        let e = relative_error(ad, fd);
        if e > max_rel_error || !e.is_finite() {
            max_rel_error = e;
            worst_index = i;
        }
        analytic.push(ad);
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        pass: max_rel_error < tol,
    })
}
