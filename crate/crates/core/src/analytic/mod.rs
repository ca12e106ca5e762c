//! Closed-form results for a `BatchNorm(W·ReLU(x) + b)` block with Gaussian
//! inputs: rectified-Gaussian moments, the explosion-rate lower bound `C(R)`,
//! the width-dependent upper-bound factor and its failure probability, and the
//! rate for perfectly correlated inputs.
//!
//! Everything here is a pure `f64` function and doubles as an oracle for the
//! Monte-Carlo probes in [`crate::diagnostics`].
//!
//! # Evaluating `C(R)`
//!
//! Written with `R = μ/(√2σ)`, the textbook form of `C(R)` is a ratio whose
//! numerator and denominator both vanish like `erfc(-R)` as `R → -∞`. We
//! instead use `z = √2·R` and the moments of `Y ~ N(z, 1)` conditioned on
//! `Y > 0`:
//!
//! ```text
//! p = Φ(z),  λ = φ(z)/Φ(z),  K = z + λ = E[Y | Y > 0]
//! Var(ReLU(Y)) = p·D,        D = 1 + z·K − p·K²
//! C(R) = p / Var(ReLU(Y)) = 1 / D
//! ```
//!
//! For `z < 0` the inverse Mills ratio `λ` is taken from the scaled function
//! `erfcx(-z/√2)`, so nothing underflows. Below `z = -3` the cancellation in
//! `1 + z·K` is avoided by reading both `K` and `1 + z·K` off the Laplace
//! continued fraction of the Mills ratio.

pub mod special;

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{ensure, Result};

pub use special::{erf, erfc, erfcx, normal_cdf, normal_pdf};

/// Value returned by [`explosion_rate_lower`] when `C(R)` is not
/// representable (only `R = -∞` or `R` below roughly `-1e150`). Callers
/// should read it as "fully blocked".
pub const BLOCKED_SENTINEL: f64 = 1e300;

/// Below `z = -CF_SWITCH` the continued fraction replaces the direct form.
const CF_SWITCH: f64 = 3.0;
const CF_TERMS: u32 = 100;

/// Pre-activation distribution `N(mu, sigma²)` feeding a ReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    mu: f64,
    sigma: f64,
}

impl GaussianSpec {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        ensure!(mu.is_finite(), Domain, "mean must be finite, got {mu}");
        ensure!(sigma.is_finite() && sigma > 0.0, Domain, "sigma must be finite and positive, got {sigma}");
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `R = μ / (√2·σ)`.
    pub fn ratio(&self) -> f64 {
        self.mu / self.sigma * FRAC_1_SQRT_2
    }
}

/// Mean and variance of `max(Y, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluMoments {
    pub mean: f64,
    pub variance: f64,
}

/// `(p, K, D)` for `Y ~ N(z, 1)`; see the module docs.
fn truncated_moments(z: f64) -> (f64, f64, f64) {
    if z < -CF_SWITCH {
        // Laplace continued fraction t_n = n / (a + t_{n+1}). With it
        // K = t_1 and 1 + z·K = t_1·t_2, so D has no cancellation.
        let a = -z;
        let (mut t1, mut t2) = (0.0, 0.0);
        for n in (1..=CF_TERMS).rev() {
            t2 = t1;
            t1 = n as f64 / (a + t1);
        }
        let p = 0.5 * erfc(a * FRAC_1_SQRT_2);
        return (p, t1, t1 * t2 - p * t1 * t1);
    }
    if z < 0.0 {
        let x = -z * FRAC_1_SQRT_2;
        let lambda = (2.0 / PI).sqrt() / erfcx(x);
        let p = 0.5 * erfc(x);
        let k = z + lambda;
        (p, k, 1.0 + z * k - p * k * k)
    } else {
        let q = 0.5 * erfc(z * FRAC_1_SQRT_2); // Φ(−z)
        let p = 1.0 - q;
        let pdf = normal_pdf(z);
        let lambda = pdf / p;
        let k = z + lambda;
        (p, k, 1.0 + k * (q * z - pdf))
    }
}

/// Mean and variance of `ReLU(Y)`, `Y ~ N(μ, σ²)`.
///
/// Algebraically `E = μ·(1 − Φ(−μ/σ)) + σ·φ(μ/σ)` and the matching variance;
/// evaluated through the conditional moments above so that neither value
/// loses precision when `μ/σ` is far from 0.
pub fn relu_moments(spec: GaussianSpec) -> ReluMoments {
    let z = spec.mu / spec.sigma;
    let (p, k, d) = truncated_moments(z);
    ReluMoments {
        mean: spec.sigma * p * k,
        variance: (spec.sigma * spec.sigma * p * d).max(0.0),
    }
}

/// Lower bound `C(R)` on the per-block ratio
/// `Σ Var(xⁿ)Var(gⁿ) / Σ Var(xⁿ⁺¹)Var(gⁿ⁺¹)`.
///
/// Strictly decreasing, `C(0) = π/(π−1)`, `C(+∞) = 1`, `C(−∞) = ∞`.
pub fn explosion_rate_lower(r: f64) -> Result<f64> {
    ensure!(!r.is_nan(), Domain, "explosion rate of NaN");
    if r == f64::INFINITY {
        return Ok(1.0);
    }
    let z = r * std::f64::consts::SQRT_2;
    if !z.is_finite() {
        return Ok(BLOCKED_SENTINEL);
    }
    let (_, _, d) = truncated_moments(z);
    let c = 1.0 / d;
    if !c.is_finite() || c > BLOCKED_SENTINEL {
        return Ok(BLOCKED_SENTINEL);
    }
    // Rounding can leave D a hair above 1 in the pseudo-linear tail.
    Ok(c.max(1.0))
}

/// `C(R) − 1` without the cancellation of subtracting 1, so the
/// pseudo-linear tail stays resolved after `C(R)` itself has rounded to 1
/// (from about `R = 5.9`). Strictly decreasing and positive for finite `R`.
///
/// For `z ≥ 0`, `1 − D = K·φ(z)·(1 − z·m)` with Mills ratio `m = Φ(−z)/φ(z)`.
/// Past `z = 3`, `1 − z·m` comes from the same continued fraction as `m`:
/// with `m = 1/(z + u)`, `1 − z·m = u·m`.
pub fn explosion_rate_excess(r: f64) -> Result<f64> {
    ensure!(!r.is_nan(), Domain, "explosion rate of NaN");
    if r == f64::INFINITY {
        return Ok(0.0);
    }
    let z = r * std::f64::consts::SQRT_2;
    if !(z >= 0.0) || !z.is_finite() {
        return Ok(explosion_rate_lower(r)? - 1.0);
    }
    let pdf = normal_pdf(z);
    let one_minus_zm = if z < CF_SWITCH {
        let m = (PI / 2.0).sqrt() * erfcx(z * FRAC_1_SQRT_2);
        1.0 - z * m
    } else {
        let mut u = 0.0;
        for n in (2..=CF_TERMS).rev() {
            u = n as f64 / (z + u);
        }
        u = 1.0 / (z + u);
        u / (z + u)
    };
    let p = 1.0 - 0.5 * erfc(z * FRAC_1_SQRT_2);
    let k = z + pdf / p;
    let one_minus_d = k * pdf * one_minus_zm;
    Ok(one_minus_d / (1.0 - one_minus_d))
}

/// Rows `(r, C(r), √C(r))` on an evenly spaced grid including both ends.
pub fn explosion_rate_table(r_min: f64, r_max: f64, steps: usize) -> Result<Vec<(f64, f64, f64)>> {
    ensure!(r_min.is_finite() && r_max.is_finite(), Domain, "table bounds must be finite");
    ensure!(steps >= 1, Domain, "need at least one grid point");
    ensure!(steps == 1 || r_max > r_min, Domain, "r_max must exceed r_min");
    (0..steps)
        .map(|i| {
            let r = if steps == 1 {
                r_min
            } else {
                // weighted form keeps grid points like -0.1 exact to rounding
                let n = (steps - 1) as f64;
                (r_min * (n - i as f64) + r_max * i as f64) / n
            };
            let c = explosion_rate_lower(r)?;
            Ok((r, c, c.sqrt()))
        })
        .collect()
}

/// Multiplicative slack `1 + 2(1+ρ)(1+2ρ)/(dₙ³δ³)`, `ρ = μ_w²/σ_w²`, of the
/// upper bound that holds with probability `1 − divergence_probability`.
pub fn upper_bound_factor(mu_w: f64, sigma_w: f64, d_n: u64, delta: f64) -> Result<f64> {
    ensure!(sigma_w.is_finite() && sigma_w > 0.0, Domain, "sigma_w must be positive, got {sigma_w}");
    ensure!(mu_w.is_finite(), Domain, "mu_w must be finite");
    ensure!(d_n >= 1, Domain, "width must be at least 1");
    ensure!(delta > 0.0 && delta < 1.0, Domain, "delta must lie in (0, 1), got {delta}");
    let rho = mu_w * mu_w / (sigma_w * sigma_w);
    let d = d_n as f64;
    Ok(1.0 + 2.0 * (1.0 + rho) * (1.0 + 2.0 * rho) / (d * d * d * delta * delta * delta))
}

/// Probability that the upper bound fails:
/// `min(1, dₙ₊₁ · exp(−(dₙ/2)(δ − 1 − ln δ)))`.
pub fn divergence_probability(d_n: u64, d_n1: u64, delta: f64) -> Result<f64> {
    ensure!(d_n >= 1 && d_n1 >= 1, Domain, "widths must be at least 1");
    ensure!(delta > 0.0 && delta < 1.0, Domain, "delta must lie in (0, 1), got {delta}");
    let exponent = -(d_n as f64 / 2.0) * (delta - 1.0 - delta.ln());
    Ok((d_n1 as f64 * exponent.exp()).min(1.0))
}

/// Ratio `π/(1+π)` for perfectly correlated, zero-centred inputs.
pub fn correlated_rate_zero_centered() -> f64 {
    PI / (1.0 + PI)
}

/// Lower bound, upper-bound slack and failure probability for one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplosionBound {
    pub c_r: f64,
    pub upper_factor: f64,
    pub failure_prob: f64,
}

impl ExplosionBound {
    pub fn new(r: f64, mu_w: f64, sigma_w: f64, d_n: u64, d_n1: u64, delta: f64) -> Result<Self> {
        Ok(Self {
            c_r: explosion_rate_lower(r)?,
            upper_factor: upper_bound_factor(mu_w, sigma_w, d_n, delta)?,
            failure_prob: divergence_probability(d_n, d_n1, delta)?,
        })
    }

    pub fn upper(&self) -> f64 {
        self.c_r * self.upper_factor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    // mpmath, 60 digits, of the textbook erfc form.
    const C_REFERENCE: &[(f64, f64)] = &[
        (-1e6, 1000000000002.4995),
        (-1000.0, 1000002.499997),
        (-30.0, 902.496683220075),
        (-14.2, 204.12544423856522),
        (-14.1, 201.29524155572622),
        (-10.0, 102.47127248303094),
        (-8.0, 66.4561360693979),
        (-7.1, 52.85523314476372),
        (-7.0, 51.44378260477436),
        (-6.5, 44.685615783523346),
        (-6.0, 38.42559929497103),
        (-3.0, 11.269075573522604),
        (-2.2, 6.994617519034677),
        (-2.1, 6.546315468317923),
        (-1.0, 2.898744176040197),
        (-0.25, 1.6937293358028085),
        (0.0, 1.46694220692426),
        (0.5, 1.1869613341349903),
        (1.0, 1.0592266509689818),
        (3.0, 1.0000100653230435),
        (6.0, 1.0),
    ];

    // mpmath, 60 digits, of 1/D - 1.
    const EXCESS_REFERENCE: &[(f64, f64)] = &[
        (0.5, 0.18696133413499022),
        (1.0, 0.059226650968981736),
        (2.0, 0.0019649639830895732),
        (2.5, 0.00017947647243440262),
        (3.0, 1.0065323043566166e-5),
        (4.0, 7.2885671438190339e-9),
        (5.0, 7.4067146684359596e-13),
        (5.9, 3.4986461037125438e-17),
        (6.0, 1.0479850124818577e-17),
        (8.0, 5.5276996714863708e-30),
    ];

    #[test]
    fn excess_resolves_the_pseudo_linear_tail() {
        for &(r, want) in EXCESS_REFERENCE {
            let got = explosion_rate_excess(r).unwrap();
            assert!((got - want).abs() <= 1e-12 * want, "R {r}: {got} vs {want}");
        }
        for r in [-3.0, -0.5, 0.0, 0.3] {
            let c = explosion_rate_lower(r).unwrap();
            assert!((explosion_rate_excess(r).unwrap() - (c - 1.0)).abs() <= 1e-14 * c, "R {r}");
        }
        let grid: Vec<f64> = (0..=240).map(|i| -12.0 + 0.1 * i as f64).collect();
        let ex: Vec<f64> = grid.iter().map(|&r| explosion_rate_excess(r).unwrap()).collect();
        assert!(ex.windows(2).all(|w| w[1] < w[0]) && ex.iter().all(|&v| v > 0.0));
        assert_eq!(explosion_rate_excess(f64::INFINITY).unwrap(), 0.0);
    }

    #[test]
    fn c_matches_high_precision_reference() {
        for &(r, want) in C_REFERENCE {
            let got = explosion_rate_lower(r).unwrap();
            assert!((got - want).abs() <= 1e-12 * want, "C({r}) = {got}, want {want}");
        }
    }

    #[test]
    fn c_zero_centered_and_limits() {
        let c0 = explosion_rate_lower(0.0).unwrap();
        assert!((c0 - PI / (PI - 1.0)).abs() < 1e-12);
        assert!((explosion_rate_lower(20.0).unwrap() - 1.0).abs() < 1e-10);
        assert!((explosion_rate_lower(8.0).unwrap() - 1.0).abs() < 1e-10);
        assert!(explosion_rate_lower(-10.0).unwrap() > 100.0);
        assert_eq!(explosion_rate_lower(f64::NEG_INFINITY).unwrap(), BLOCKED_SENTINEL);
        assert!(matches!(explosion_rate_lower(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn c_strictly_decreasing_on_grid() {
        let table = explosion_rate_table(-6.0, 6.0, 121).unwrap();
        assert_eq!(table.len(), 121);
        for w in table.windows(2) {
            assert!(w[1].1 < w[0].1 || (w[0].1 == 1.0 && w[1].1 == 1.0), "{:?}", w);
        }
        // strict on the part of the grid where C is distinguishable from 1
        for w in table.windows(2).filter(|w| w[0].0 < 5.0) {
            assert!(w[1].1 < w[0].1);
        }
    }

    #[test]
    fn c_is_continuous_at_fraction_switch() {
        let r = -CF_SWITCH * FRAC_1_SQRT_2;
        let below = explosion_rate_lower(r - 1e-14).unwrap();
        let above = explosion_rate_lower(r + 1e-14).unwrap();
        assert!((below - above).abs() < 1e-12 * above, "{below} vs {above}");
    }

    #[test]
    fn relu_moments_closed_cases() {
        let m = relu_moments(GaussianSpec::new(0.0, 1.0).unwrap());
        assert!((m.mean - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((m.variance - (0.5 - 1.0 / (2.0 * PI))).abs() < 1e-15);
        let m = relu_moments(GaussianSpec::new(10.0, 1.0).unwrap());
        assert!((m.mean - 10.0).abs() < 1e-10);
        assert!((m.variance - 1.0).abs() < 1e-10);
        assert!(matches!(GaussianSpec::new(0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(GaussianSpec::new(0.0, f64::NAN), Err(Error::Domain(_))));
    }

    /// Textbook evaluation with Φ, used only as a second route.
    fn relu_moments_textbook(mu: f64, sigma: f64) -> (f64, f64) {
        let pass = 1.0 - normal_cdf(-mu / sigma);
        let bump = sigma / (2.0 * PI).sqrt() * (-mu * mu / (2.0 * sigma * sigma)).exp();
        let mean = mu * pass + bump;
        let var = (sigma * sigma + mu * mu) * pass + mu * bump - mean * mean;
        (mean, var)
    }

    #[test]
    fn relu_moments_agree_with_textbook_form() {
        for &(mu, sigma) in &[(1.0, 2.0), (-1.5, 0.7), (3.0, 1.0), (-0.2, 5.0)] {
            let m = relu_moments(GaussianSpec::new(mu, sigma).unwrap());
            let (mean, var) = relu_moments_textbook(mu, sigma);
            assert!((m.mean - mean).abs() < 1e-13 * (1.0 + mean.abs()));
            assert!((m.variance - var).abs() < 1e-13 * (1.0 + var.abs()));
            assert!(m.mean >= 0.0 && m.variance >= 0.0);
            assert!(m.variance <= sigma * sigma + mu * mu);
        }
    }

    #[test]
    fn pass_probability_identity() {
        // C(r) · Var(ReLU(N(√2 r, 1))) = erfc(−r)/2, with the variance taken
        // from the textbook form.
        for i in 0..=60 {
            let r = -3.0 + 0.1 * i as f64;
            let (_, var) = relu_moments_textbook(std::f64::consts::SQRT_2 * r, 1.0);
            let lhs = explosion_rate_lower(r).unwrap() * var;
            assert!((lhs - erfc(-r) / 2.0).abs() < 1e-10, "r = {r}");
        }
    }

    #[test]
    fn upper_bound_examples() {
        let f = upper_bound_factor(0.0, 1.0, 100, 0.3).unwrap();
        assert!((f - (1.0 + 2.0 / (1e6 * 0.027))).abs() < 1e-15);
        assert!(f <= 1.0 + 1e-4);
        assert!((upper_bound_factor(1.0, 1.0, 10, 0.5).unwrap() - 1.096).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for d in [1u64, 10, 100, 1000, 10_000] {
            let v = upper_bound_factor(0.0, 3.0, d, 0.5).unwrap();
            assert!(v < last && v >= 1.0);
            last = v;
        }
        assert!(matches!(upper_bound_factor(0.0, 1.0, 10, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn divergence_probability_examples() {
        let p = divergence_probability(100, 100, 0.3).unwrap();
        assert!((p - 1.138_595_865_868e-9).abs() < 1e-20, "{p}");
        assert!(p < 1e-8);
        assert_eq!(divergence_probability(1, 1, 1.0 - 1e-12).unwrap(), 1.0);
        assert_eq!(divergence_probability(50, 200, 0.5).unwrap(), 1.0);
        assert!(matches!(divergence_probability(5, 5, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn correlated_rate() {
        let c = correlated_rate_zero_centered();
        assert!((c - 0.758_546_992_994_776_1).abs() < 1e-15);
        assert!(c < 1.0);
        assert!((c.sqrt() - 0.8709).abs() < 1e-4);
    }

    #[test]
    fn bound_bundles_parts() {
        let b = ExplosionBound::new(0.0, 0.0, 1.0, 100, 100, 0.3).unwrap();
        assert!(b.upper() >= b.c_r && b.upper() <= b.c_r * (1.0 + 1e-4));
        assert!((0.0..=1.0).contains(&b.failure_prob));
    }
}
