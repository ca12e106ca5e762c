//! One update of every layer-wise rule on the same weights and momentum, and
//! how LALC's cap reacts as the momentum grows relative to the weights.
//!
//! cargo run --release --example optimizer_steps

use gradflow::optimizers::{
    agc_unit_ratios, lalc_lambda, lambc_trust_ratio, lars_trust_ratio, step_agc, step_clars, step_lalc, step_lambc,
    step_lars, step_sgd, Phi,
};
use gradflow::tensor::{gaussian, Matrix};
use gradflow::RngStream;

fn moved(w: &Matrix, new_w: &Matrix) -> f64 {
    w.zip_map(new_w, |a, b| a - b).expect("same shape").norm()
}

fn main() -> gradflow::Result<()> {
    let mut rng = RngStream::new(7);
    let w = gaussian(&mut rng, 0.0, 0.1, 16, 8)?;
    let g = gaussian(&mut rng, 0.0, 0.01, 16, 8)?;
    let m = g.scale(1.5);
    let samples: Vec<Matrix> = (0..4).map(|_| gaussian(&mut rng, 0.0, 0.02, 16, 8)).collect::<Result<_, _>>()?;
    let gamma = 0.5;
    println!("|w| {:.4}  |g| {:.4}  |m| {:.4}  gamma {gamma}", w.norm(), g.norm(), m.norm());

    let lars = lars_trust_ratio(w.norm(), g.norm(), 1e-3, 1e-8, 5e-4);
    let lambc = lambc_trust_ratio(w.norm(), m.norm(), 1e-8, 1e-2, Phi::default());
    let agc = agc_unit_ratios(&w, &m, 1e-2, 1e-3)?;
    let (lalc_w, lalc_step) = step_lalc(&w, &m, gamma, 1e3, 1.0)?;
    println!("step length |w - w'|:");
    println!("  sgd    {:.3e}", moved(&w, &step_sgd(&w, &m, gamma)?));
    println!("  lars   {:.3e}  (trust ratio {lars:.3e})", moved(&w, &step_lars(&w, &m, &g, gamma, 1e-3, 1e-8, 5e-4)?));
    println!("  lambc  {:.3e}  (trust ratio {lambc:.3e})", moved(&w, &step_lambc(&w, &m, gamma, 1e-8, 1e-2, Phi::default())?));
    println!("  clars  {:.3e}", moved(&w, &step_clars(&w, &m, &samples, gamma, 1e-3, 1e-8)?));
    println!(
        "  agc    {:.3e}  (unit ratios {:.3}..{:.3})",
        moved(&w, &step_agc(&w, &m, gamma, 1e-2, 1e-3)?),
        agc.iter().cloned().fold(f64::INFINITY, f64::min),
        agc.iter().cloned().fold(0.0, f64::max)
    );
    println!("  lalc   {:.3e}  (applied step {lalc_step:.4})", moved(&w, &lalc_w));

    println!("\nLALC cap 1/(eta |m|^2/|w|^2 + eps), eta 1e3, eps 1:");
    for ratio in [1e-3, 1e-2, 3e-2, 1e-1, 1.0] {
        println!("  |m|/|w| {ratio:7.3}: lambda {:.4}", lalc_lambda(1.0, ratio, 1e3, 1.0));
    }
    Ok(())
}
