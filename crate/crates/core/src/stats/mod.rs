//! Numerical and statistical primitives used by the certification suite.

mod rng;

pub use rng::{derive_seed, fill_gaussian, keyed_gaussian, Purpose, RngKey};
pub use tests::{energy_distance_test, ks_test, kolmogorov_survival, spearman, EnergyTest, KsTest};

use std::f64::consts::SQRT_2;

/// Standard normal CDF, via the complementary error function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
