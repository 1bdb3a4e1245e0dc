//! Central finite-difference checks for graph functions.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
/// every input element. `f` must build a scalar from the given leaves.
pub fn max_rel_error(f: impl Fn(&Graph, &[Var]) -> Var, inputs: &[Tensor], eps: f32, floor: f32) -> f32 {
    let g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &leaves);
    let grads = g.backward(out);
    let eval = |ins: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        g.value(f(&g, &vs)).item() as f64
    };
    let mut worst = 0.0f32;
    for (k, t) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(t.shape());
        let analytic = grads.get(leaves[k]).unwrap_or(&zeros);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= eps;
            let numeric = ((eval(&plus) - eval(&minus)) / (2.0 * eps as f64)) as f32;
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
