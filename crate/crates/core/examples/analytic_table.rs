//! The closed-form block quantities: rectified-Gaussian moments, the lower
//! bound `C(R)` across regimes, and the width-dependent upper-bound slack.
//!
//! cargo run --release --example analytic_table

use gradflow::analytic::{
    correlated_rate_zero_centered, divergence_probability, explosion_rate_lower, relu_moments, upper_bound_factor,
    GaussianSpec,
};

fn main() -> gradflow::Result<()> {
    println!("ReLU(N(mu, 1)) moments");
    for mu in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let m = relu_moments(GaussianSpec::new(mu, 1.0)?);
        println!("  mu {mu:+.1}: mean {:.6}, variance {:.6}", m.mean, m.variance);
    }

    println!("\nlower bound C(R) and per-block std gain sqrt(C)");
    for r in [-6.0, -3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0, 8.0] {
        let c = explosion_rate_lower(r)?;
        let regime = match r {
            r if r < -1.0 => "blocked",
            r if r > 1.0 => "pseudo-linear",
            _ => "",
        };
        println!("  R {r:+5.1}: C {c:12.6}  sqrt {:9.6}  {regime}", c.sqrt());
    }
    println!("  C(0) = pi/(pi-1) = {:.12}", std::f64::consts::PI / (std::f64::consts::PI - 1.0));
    println!("  fully correlated, zero-centred constant pi/(1+pi) = {:.6}", correlated_rate_zero_centered());

    println!("\nupper-bound slack and failure probability, delta = 0.5, mu_w = 0");
    for d in [16u64, 64, 256, 1024] {
        let f = upper_bound_factor(0.0, 1.0, d, 0.5)?;
        let p = divergence_probability(d, d, 0.5)?;
        println!("  width {d:5}: factor {f:.8}, P(fail) {p:.3e}");
    }
    Ok(())
}
