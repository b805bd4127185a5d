//! Planar hexagon with ranges only: no attitude readings, two sensors per
//! agent, four anchors.

use relstate::harness::{run_solve, RunConfig};

fn main() -> relstate::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let config = RunConfig {
        trials,
        ..RunConfig::hexagon_regime()
    };
    let report = run_solve(&config)?;
    for t in &report.trials {
        println!(
            "seed {}: {} agents, relaxation {:.3} m, refined {:.3} m, {} underdetermined",
            t.seed,
            t.agents,
            t.rmse_common.unwrap_or(f64::NAN),
            t.rmse_body,
            t.underdetermined
        );
    }
    Ok(())
}
