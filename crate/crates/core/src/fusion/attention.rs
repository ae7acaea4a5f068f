//! Scaled dot-product attention `softmax(ψ θᵀ / √d) θ`.

use ndarray::{Array2, ArrayView2, Axis};

/// Row-stochastic attention weights, `N × M`.
pub fn attention_weights(psi: ArrayView2<f64>, theta: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(psi.ncols(), theta.ncols(), "token widths differ");
    assert!(theta.nrows() >= 1, "attention needs at least one key");
    let scale = 1.0 / (psi.ncols() as f64).sqrt();
    let mut a = psi.dot(&theta.t()) * scale;
    for mut row in a.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    a
}

/// Each output row is a convex combination of the rows of `theta`.
pub fn attend(psi: ArrayView2<f64>, theta: ArrayView2<f64>) -> Array2<f64> {
    attention_weights(psi, theta).dot(&theta)
}

/// Gradients with respect to `psi` and `theta`, given the weights from the
/// forward pass and the output gradient.
pub fn attend_backward(
    psi: ArrayView2<f64>,
    theta: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    d_out: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (psi.ncols() as f64).sqrt();
    let d_a = d_out.dot(&theta.t());
    let mut d_theta = weights.t().dot(&d_out);
    let row_dot = (&d_a * &weights).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_s = &weights * &(&d_a - &row_dot) * scale;
    let d_psi = d_s.dot(&theta);
    d_theta += &d_s.t().dot(&psi);
    (d_psi, d_theta)
}
