//! Gauss–Hermite quadrature for Gaussian expectations.

use nalgebra::DMatrix;

/// Nodes and weights for `∫ f(x) exp(-x^2) dx ≈ Σ w_i f(x_i)`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes from the eigenvalues of the Jacobi matrix, polished by Newton on
    /// the orthonormal Hermite recurrence; weights from the recurrence so the
    /// tail weights keep full relative precision.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        const MAX_NEWTON: usize = 20;
        let n = order;
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i.abs_diff(j) == 1 {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        guesses.sort_by(|a, b| b.total_cmp(a));

        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = guesses[i];
            for _ in 0..MAX_NEWTON {
                let (p, pp, _) = hermite_orthonormal(n, z);
                let z_prev = z;
                z = z_prev - p / pp;
                if (z - z_prev).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            // w = 2 / pp^2 at the root, in logs since pp overflows for large orders
            let (_, pp, log_scale) = hermite_orthonormal(n, z);
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = (std::f64::consts::LN_2 - 2.0 * (pp.abs().ln() + log_scale)).exp();
            weights[n - 1 - i] = weights[i];
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussHermite { nodes, weights }
    }

    /// `E[f(Z)]` for standard normal `Z`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let scale = std::f64::consts::SQRT_2;
        let sum: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(scale * x))
            .sum();
        sum / std::f64::consts::PI.sqrt()
    }
}

/// Orthonormal Hermite polynomial value `p_n(z)` and derivative-like term
/// `sqrt(2n) p_{n-1}(z)` used by the Newton step, both divided by
/// `exp(log_scale)` (the third value) to stay finite at high order.
fn hermite_orthonormal(n: usize, z: f64) -> (f64, f64, f64) {
    const RESCALE: f64 = 1e150;
    let mut p1 = std::f64::consts::PI.powf(-0.25);
    let mut p2 = 0.0;
    let mut log_scale = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        if p1.abs() > RESCALE {
            p1 /= RESCALE;
            p2 /= RESCALE;
            log_scale += RESCALE.ln();
        }
    }
    (p1, (2.0 * n as f64).sqrt() * p2, log_scale)
}
