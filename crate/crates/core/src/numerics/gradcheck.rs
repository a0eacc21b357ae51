//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::numerics::tensor::Tensor;

/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every element `i`.
pub fn fd_gradient(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    eps: f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        out.data_mut()[i] = fd_coordinate(&mut f, &mut probe, i, eps);
    }
    out
}

/// Central difference along a single coordinate. `probe` is restored
/// before returning.
pub fn fd_coordinate(
    f: &mut impl FnMut(&Tensor<f64>) -> f64,
    probe: &mut Tensor<f64>,
    i: usize,
    eps: f64,
) -> f64 {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + eps;
    let up = f(probe);
    probe.data_mut()[i] = orig - eps;
    let down = f(probe);
    probe.data_mut()[i] = orig;
    (up - down) / (2.0 * eps)
}

/// Max-norm relative error `max_i |a_i - b_i| / max(‖a‖∞, ‖b‖∞)`.
///
/// Normalizing by the largest entry instead of element by element keeps
/// near-zero gradient entries from dominating through cancellation noise.
/// Two all-zero inputs have error 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}
