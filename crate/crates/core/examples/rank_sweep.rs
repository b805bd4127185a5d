//! Failure rate of the local search per factor rank from poor guesses.
//!
//! Usage: `cargo run --release --example rank_sweep -- [rho] [trials]`

use relstate::harness::{run_rank_sweep, RunConfig};

fn main() -> relstate::Result<()> {
    let mut args = std::env::args().skip(1);
    let rho = args.next().and_then(|s| s.parse().ok()).unwrap_or(8.0);
    let mut config = RunConfig::rank_sweep_regime();
    config.rank_sweep.trials = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let d = config.scenario.shape.dim();
    let ranks: Vec<usize> = (d..=d + 3).collect();
    for p in run_rank_sweep(&config, &ranks, rho)? {
        println!(
            "rank {}: failure rate {:.2} over {} trials, {:.1} cycles, mean RMSE {:.3} m",
            p.rank, p.failure_rate, p.trials, p.mean_cycles, p.mean_rmse_body
        );
    }
    Ok(())
}
