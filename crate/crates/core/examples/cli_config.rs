//! Driving the command runners from a config value, as the `geotomo` binary
//! does, without touching the file system.

use geotomo::cli::{run, Command, ExperimentConfig};

fn main() -> geotomo::Result<()> {
    let cfg: ExperimentConfig = serde_json::from_str(
        r#"{
            "metric": {"family": "sphere_cap", "params": {"k": 1.0}, "radius": 0.6, "dim": 2},
            "m": 1,
            "fields": {"f": {"kind": "components", "components": ["1 + x2", "x1*x2"]}},
            "fan": {"n_boundary": 16, "n_directions": 16, "margin": 0.001},
            "quadrature": {"dt": 0.01},
            "verify": {"suites": ["theorem2"], "d_range": [2, 3], "m_range": [1, 3]}
        }"#,
    )?;
    cfg.validate()?;
    for cmd in [Command::Transform, Command::Tau, Command::Conjugate, Command::Verify] {
        let out = run(cmd, &cfg)?;
        let files: Vec<&str> = out.files.iter().map(|(n, _)| n.as_str()).collect();
        println!("{:<10} exit {} {:?}  {}", cmd.name(), out.exit_code(), files, out.message);
    }
    Ok(())
}
