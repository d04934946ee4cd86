use crate::error::AutodiffError;
use crate::tensor::Tensor;

use super::{Graph, NodeId};

/// Evaluates a scalar graph builder at `point`.
fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Central-difference gradient of the scalar builder `f` at `point`.
pub fn central_difference<F>(f: &F, point: &[Tensor], eps: f64) -> Result<Vec<Tensor>, AutodiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut work = point.to_vec();
    let mut grads = Vec::with_capacity(point.len());
    for leaf in 0..point.len() {
        let mut g = Tensor::zeros(point[leaf].shape());
        for i in 0..point[leaf].len() {
            let orig = point[leaf].data()[i];
            work[leaf].data_mut()[i] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[leaf].data_mut()[i] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[leaf].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest relative discrepancy between the analytic gradient of `f` and
/// central differences with step `eps`, over every component of every
/// input tensor. Relative error is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(AutodiffError::BadStep(eps));
    }
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &leaves)?;
    let analytic = g.grad(loss, &leaves)?;
    let numeric = central_difference(&f, point, eps)?;

    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in g.value(*a).data().iter().zip(n.data()) {
            worst = worst.max((av - nv).abs() / nv.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_outside_range_rejected() {
        let f = |g: &mut Graph, x: &[NodeId]| g.sum(x[0]);
        let p = [Tensor::vector(&[1.0])];
        assert!(matches!(grad_check(f, &p, 1e-2), Err(AutodiffError::BadStep(_))));
        assert!(grad_check(f, &p, 1e-7).is_err());
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let f = |g: &mut Graph, x: &[NodeId]| {
            let big = g.scale(x[0], 1e300)?;
            let sq = g.square(big)?;
            g.sum(sq)
        };
        let err = grad_check(f, &[Tensor::vector(&[1.0])], 1e-5).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { node: 2, .. }));
    }
}
