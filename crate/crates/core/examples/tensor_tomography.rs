//! Reconstructing the solenoidal part of a tensor field from ray data on the
//! Euclidean disk (32² grid, 64×64 fan), with and without data noise.

use geotomo::geometry::MetricChart;
use geotomo::inversion::{sinjectivity_experiment, ExperimentSpec};

fn main() -> geotomo::Result<()> {
    let chart = MetricChart::euclidean(2, 1.0);
    for (m, noise) in [(0, 0.0), (1, 0.0), (1, 0.01), (2, 0.0)] {
        let spec = ExperimentSpec { m, trials: 3, noise, seed: 1, ..ExperimentSpec::default() };
        let rep = sinjectivity_experiment(&chart, &spec)?;
        let conj = rep.certificates.conjugate.as_ref().map_or("n/a".to_string(), |c| c.free.to_string());
        print!("m = {m}, noise {noise}: median error {:.3e}, max {:.3e}", rep.median_error, rep.max_error);
        if let Some(s) = rep.potential_suppression {
            print!(", potential input reconstructs to {s:.1e} of its norm");
        }
        println!(" (simple: {}, beta2-conjugate-free: {conj})", rep.certificates.simple);
        for t in &rep.trials {
            println!("    trial {}: error {:.3e}, {} iterations, misfit {:.1e}", t.trial, t.solenoidal_error, t.iterations, t.relative_misfit);
        }
    }
    Ok(())
}
