use super::Tensor;

/// Central-difference gradient of `f` at `point`.
///
/// Each coordinate is perturbed by `±step` in turn; the estimate has the same
/// shape as `point`.
pub fn finite_difference(mut f: impl FnMut(&Tensor) -> f64, point: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite_difference: step must be positive");
    let mut probe = point.clone();
    let mut out = Tensor::zeros(point.shape());
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let fp = f(&probe);
        probe.data_mut()[i] = x0 - step;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference(|t| t.item() * t.item(), &Tensor::scalar(3.0), 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sum_sin_at_zero() {
        let g = finite_difference(
            |t| t.data().iter().map(|x| x.sin()).sum(),
            &Tensor::zeros([5]),
            1e-5,
        );
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
