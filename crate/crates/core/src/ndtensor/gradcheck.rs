use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares reverse-mode gradients with central finite differences.
///
/// Returns the maximum over all leaf entries of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(loss_fn: F, leaves: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let loss = loss_fn(&g, &vars)?;
        let mut grads = g.backward(loss)?;
        vars.iter()
            .zip(leaves)
            .map(|(v, t)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(loss_fn(&g, &vars)?.item())
    };

    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    let mut worst = 0.0f64;
    for (li, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = work[li].data()[j];
            work[li].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[li].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[li].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
