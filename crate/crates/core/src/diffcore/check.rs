//! Finite-difference gradient oracle used by the gradient tests.

use super::Array;

/// Central-difference gradient of `f` at `x`: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_gradient<E>(
    mut f: impl FnMut(&Array) -> Result<f64, E>,
    x: &Array,
    h: f64,
) -> Result<Array, E> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Default step for [`finite_diff_gradient`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(
            |x| Ok::<_, Infallible>(x.data()[0] * x.data()[0]),
            &Array::scalar(3.0),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn cube_at_two() {
        let g = finite_diff_gradient(
            |x| Ok::<_, Infallible>(x.data().iter().map(|v| v * v * v).sum()),
            &Array::scalar(2.0),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g.item() - 12.0).abs() < 1e-4);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_gradient(
            |_| Ok::<_, Infallible>(4.2),
            &Array::from_vec(vec![1.0, -2.0]),
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }
}
