//! Cycle counts and parallel time over growing cubes.

use relstate::harness::{run_scaling_sweep, RunConfig};

fn main() -> relstate::Result<()> {
    let config = RunConfig::scaling_regime();
    for p in run_scaling_sweep(&config, &config.scaling.sizes)? {
        println!(
            "side {}: {} agents, {} colors, relaxation {:.1} cycles, refinement {:.1} cycles, PT/ST {:.2}",
            p.side,
            p.agents,
            p.colors,
            p.mean_esdp_cycles.unwrap_or(f64::NAN),
            p.mean_refine_cycles.unwrap_or(f64::NAN),
            p.pt_st_ratio
        );
    }
    Ok(())
}
