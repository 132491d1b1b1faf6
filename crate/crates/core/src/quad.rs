//! Gauss-Hermite quadrature for one-dimensional Gaussian expectations, plus
//! standard-normal density/CDF helpers used by the closed-form risk formulas.

use nalgebra::DMatrix;
use std::f64::consts::PI;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Default node count; enough for logit scales up to a few standard
/// deviations, and configurable everywhere it matters.
pub const DEFAULT_NODES: usize = 64;

/// A Gauss-Hermite rule: integrates f against exp(-x^2) over the real line.
///
/// Nodes and weights come from the Golub-Welsch eigenproblem on the Jacobi
/// matrix (symmetric tridiagonal with off-diagonal sqrt(i/2)).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "need at least two quadrature nodes");
        let mut jacobi = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            let off = ((i + 1) as f64 * 0.5).sqrt();
            jacobi[(i, i + 1)] = off;
            jacobi[(i + 1, i)] = off;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let v0 = eig.eigenvectors[(0, i)];
                (x, PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// E[f(Z)] for Z ~ N(0, 1).
    pub fn expect_std_normal(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_std_normal(|xi, w| acc += w * f(xi));
        acc
    }

    /// Visits `(xi, w)` pairs such that `sum w f(xi)` approximates E[f(Z)]
    /// for Z ~ N(0, 1); the weights already include the normalizing constant.
    pub fn for_each_std_normal(&self, mut f: impl FnMut(f64, f64)) {
        let scale = 1.0 / PI.sqrt();
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            f(std::f64::consts::SQRT_2 * x, w * scale);
        }
    }

    /// E[f(Z)] for Z ~ N(mean, sd^2). A zero sd degenerates to f(mean).
    pub fn expect_normal(&self, mean: f64, sd: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        if sd == 0.0 {
            return f(mean);
        }
        self.expect_std_normal(|z| f(mean + sd * z))
    }
}

/// Shared default rule.
pub fn default_rule() -> &'static GaussHermite {
    use std::sync::OnceLock;
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(DEFAULT_NODES))
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn moments_of_standard_normal() {
        let q = GaussHermite::new(32);
        assert_relative_eq!(q.expect_std_normal(|_| 1.0), 1.0, epsilon = 1e-13);
        assert_relative_eq!(q.expect_std_normal(|z| z * z), 1.0, epsilon = 1e-12);
        assert_relative_eq!(q.expect_std_normal(|z| z.powi(4)), 3.0, epsilon = 1e-11);
    }

    #[test]
    fn shifted_gaussian_expectation() {
        let q = GaussHermite::new(64);
        // E[exp(Z)] for Z ~ N(m, s^2) is exp(m + s^2/2)
        let got = q.expect_normal(0.3, 0.7, |t| t.exp());
        assert_relative_eq!(got, (0.3f64 + 0.49 / 2.0).exp(), epsilon = 1e-10);
    }

    #[test]
    fn cdf_reference_values() {
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(normal_cdf(-1.0), 0.15865525393145707, epsilon = 1e-12);
        assert_relative_eq!(normal_cdf(-2.0), 0.022750131948179212, epsilon = 1e-12);
        assert_relative_eq!(normal_cdf(2.0), 0.9772498680518208, epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_and_softplus_are_consistent() {
        for &x in &[-30.0, -3.0, -0.5, 0.0, 0.5, 3.0, 30.0] {
            assert_relative_eq!(sigmoid(x), 1.0 - sigmoid(-x), epsilon = 1e-15);
            // d/dx softplus = sigmoid
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert_relative_eq!(fd, sigmoid(x), epsilon = 1e-8);
        }
    }
}
