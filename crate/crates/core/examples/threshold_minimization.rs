//! Minimizing β_{d,m}(γ) over γ recovers γ* = 1/(m+d−2) and β⁽²⁾(d, m).

use geotomo::identities::{default_gamma_grid, theorem2_scalar_minimizer};

fn main() -> geotomo::Result<()> {
    println!("{:>3} {:>3} {:>14} {:>14} {:>14}", "d", "m", "gamma", "gamma*", "beta");
    let mut worst = 0.0f64;
    for d in 2..=10 {
        for m in 1..=10 {
            let r = theorem2_scalar_minimizer(d, m, &default_gamma_grid(d, m))?;
            worst = worst.max((r.gamma - r.expected_gamma).abs()).max((r.beta - r.expected_beta).abs());
            if m <= 3 && d <= 4 {
                println!("{d:>3} {m:>3} {:>14.10} {:>14.10} {:>14.10}", r.gamma, r.expected_gamma, r.beta);
            }
        }
    }
    println!("largest deviation over d, m in [2,10] x [1,10]: {worst:.2e}");
    Ok(())
}
