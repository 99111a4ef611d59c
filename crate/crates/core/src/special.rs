//! Special functions used by the Dirichlet, Gamma and Wishart expectations.

use std::f64::consts::PI;

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Trigamma function ψ′(x) for x > 0, by upward recurrence and the
/// asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut z = x;
    let mut acc = 0.0;
    while z < 12.0 {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let r = 1.0 / z;
    let r2 = r * r;
    // 1/z + 1/(2z²) + Σ B_2k / z^(2k+1)
    let series = r
        + 0.5 * r2
        + r * r2
            * (1.0 / 6.0
                - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 * (1.0 / 30.0 - r2 * (5.0 / 66.0)))));
    acc + series
}

/// Log of the multivariate gamma function Γ_d(x).
pub fn ln_mv_gamma(d: usize, x: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * PI.ln()
        + (1..=d).map(|i| ln_gamma(x + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

/// Log normalizer of a Dirichlet: ln Γ(Στ) − Σ ln Γ(τ_i).
pub fn ln_dirichlet_norm(tau: &[f64]) -> f64 {
    let total: f64 = tau.iter().sum();
    ln_gamma(total) - tau.iter().map(|&t| ln_gamma(t)).sum::<f64>()
}
