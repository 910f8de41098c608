//! Gauss-Hermite quadrature for Gaussian expectations.

use std::sync::OnceLock;

/// Nodes and weights for the weight function `exp(-x^2)` on the real line.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const DEFAULT_NODES: usize = 64;

impl GaussHermite {
    /// Roots of the physicists' Hermite polynomial by Newton iteration on
    /// the orthonormal recurrence (Numerical Recipes' `gauher` scheme).
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    pub fn default_rule() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(DEFAULT_NODES))
    }

    /// `E[f(X)]` for `X ~ Normal(mean, sd^2)`.
    pub fn normal_expectation(&self, mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sd;
        let s: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mean + scale * x))
            .sum();
        s / std::f64::consts::PI.sqrt()
    }

    /// `E[f(X, Y)]` for independent `X, Y ~ Normal(mean, sd^2)`.
    pub fn normal_expectation_2d(&self, mean: f64, sd: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sd;
        let mut s = 0.0;
        for (&x, &wx) in self.nodes.iter().zip(&self.weights) {
            for (&y, &wy) in self.nodes.iter().zip(&self.weights) {
                s += wx * wy * f(mean + scale * x, mean + scale * y);
            }
        }
        s / std::f64::consts::PI
    }
}

/// `E[f(X)]` for `X ~ Normal(mean, sd^2)` by composite Simpson on
/// `mean +- 12 sd`, split at `kink` where `f` need not be smooth.
pub fn normal_expectation_split(mean: f64, sd: f64, kink: f64, f: impl Fn(f64) -> f64) -> f64 {
    let lo = mean - 12.0 * sd;
    let hi = mean + 12.0 * sd;
    let dens = |x: f64| {
        let z = (x - mean) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    };
    let g = |x: f64| f(x) * dens(x);
    let mut pieces = vec![lo];
    if kink > lo && kink < hi {
        pieces.push(kink);
    }
    pieces.push(hi);
    let mut total = 0.0;
    for w in pieces.windows(2) {
        let (a, b) = (w[0], w[1]);
        let panels = (((b - a) / sd) * 2000.0).ceil().max(2.0) as usize;
        let h = (b - a) / panels as f64;
        let mut s = 0.0;
        for i in 0..panels {
            let x0 = a + i as f64 * h;
            s += g(x0) + 4.0 * g(x0 + 0.5 * h) + g(x0 + h);
        }
        total += s * h / 6.0;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_sqrt_pi() {
        let r = GaussHermite::new(64);
        let s: f64 = r.weights.iter().sum();
        assert!((s - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_moments_are_exact() {
        let r = GaussHermite::default_rule();
        let m2 = r.normal_expectation(1.0, 2.0, |x| x * x);
        assert!((m2 - 5.0).abs() < 1e-11);
        let m4 = r.normal_expectation(0.0, 1.0, |x| x.powi(4));
        assert!((m4 - 3.0).abs() < 1e-11);
        let mgf = r.normal_expectation(0.5, 0.7, |x| (-x).exp());
        assert!((mgf - (-0.5f64 + 0.245).exp()).abs() < 1e-12);
    }

    #[test]
    fn split_rule_handles_kinks() {
        // E|Z| = sqrt(2 / pi).
        let v = normal_expectation_split(0.0, 1.0, 0.0, f64::abs);
        assert!((v - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }
}
