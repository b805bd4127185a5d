//! Relaxation plus refinement on the 125-agent cube with 8 imperfect anchors.
//!
//! Usage: `cargo run --release --example pipeline_cube -- [trials] [seed]`

use relstate::harness::{run_solve, RunConfig};

fn main() -> relstate::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let trials = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let config = RunConfig {
        trials,
        seed,
        ..RunConfig::cube_regime()
    };
    let report = run_solve(&config)?;
    for t in &report.trials {
        println!(
            "seed {:>3}  body {:.3} m  common {:.3} m  esdp {:>3} cycles  refine {:>4} cycles  pt {:.2} s  st {:.2} s",
            t.seed,
            t.rmse_body,
            t.rmse_common.unwrap_or(f64::NAN),
            t.esdp_cycles.unwrap_or(0),
            t.refine_cycles.unwrap_or(0),
            t.pt,
            t.st
        );
    }
    let s = &report.summary;
    println!(
        "mean body {:.3} m, mean common {:.3} m, pt {:.2} s, st {:.2} s",
        s.mean_rmse_body,
        s.mean_rmse_common.unwrap_or(f64::NAN),
        s.mean_pt,
        s.mean_st
    );
    Ok(())
}
