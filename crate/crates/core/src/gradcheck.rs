//! Central finite-difference checks for hand-written gradients.

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric derivatives.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.rel_error <= FD_TOLERANCE
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `grad · direction` against the central difference of `f` along
/// `direction` at `x`.
pub fn directional_check(
    x: &[f64],
    direction: &[f64],
    grad: &[f64],
    f: impl Fn(&[f64]) -> f64,
) -> GradCheck {
    assert_eq!(x.len(), direction.len());
    assert_eq!(x.len(), grad.len());
    let shifted = |sign: f64| -> Vec<f64> {
        x.iter().zip(direction).map(|(v, d)| v + sign * FD_STEP * d).collect()
    };
    let numeric = (f(&shifted(1.0)) - f(&shifted(-1.0))) / (2.0 * FD_STEP);
    let analytic = crate::math::dot(grad, direction);
    GradCheck {
        analytic,
        numeric,
        rel_error: relative_error(analytic, numeric),
    }
}

/// Central-difference derivative along coordinate `i`.
pub fn partial(x: &[f64], i: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut y = x.to_vec();
    y[i] = x[i] + FD_STEP;
    let up = f(&y);
    y[i] = x[i] - FD_STEP;
    let down = f(&y);
    (up - down) / (2.0 * FD_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1];
        let x = [0.7, -1.2];
        let grad = [2.0 * x[0] + 3.0 * x[1], 3.0 * x[0]];
        assert!(directional_check(&x, &[0.3, 0.9], &grad, f).passes());
        assert!(!directional_check(&x, &[0.3, 0.9], &[0.0, 0.0], f).passes());
        assert!((partial(&x, 1, f) - grad[1]).abs() < 1e-8);
    }
}
