use crate::tensor::Tensor;

/// Central differences `(f(p + eps e) - f(p - eps e)) / (2 eps)` for every coordinate of every tensor.
pub fn finite_difference_gradients(
    mut f: impl FnMut(&[Tensor]) -> f64,
    params: &[Tensor],
    eps: f64,
) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let up = f(&work);
            work[p].data_mut()[k] = orig - eps;
            let down = f(&work);
            work[p].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Largest element-wise `|a - b| / max(|a|, |b|, floor)` over paired tensors.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let w = Tensor::scalar(3.0);
        let g = finite_difference_gradients(|p| p[0].item().powi(2), &[w], 1e-4);
        assert!((g[0].item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let w = Tensor::from_fn(&[4], |i| i as f64);
        let g = finite_difference_gradients(|_| 7.0, &[w], 1e-3);
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }
}
