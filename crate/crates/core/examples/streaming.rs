//! Two-process tracking of drifting parasites around a mothership.

use relstate::harness::{run_stream, RunConfig, Source, StreamTrace};

fn main() -> relstate::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = RunConfig { seed, ..RunConfig::default() };
    let trace = run_stream(&config)?;
    for (c, p) in trace.combined.iter().zip(&trace.p1_only).step_by(25) {
        println!(
            "t {:5.1} s  {:?}  eta combined {:.4}  eta process 1 {:.4}",
            c.time, c.source, c.mean_eta, p.mean_eta
        );
    }
    let from_relaxation = trace.combined.iter().filter(|f| f.source == Source::Process2).count();
    println!(
        "{} relaxation runs, {} frames taken from them; final-quarter eta {:.4} vs {:.4}",
        trace.esdp_runs,
        from_relaxation,
        StreamTrace::final_quarter_eta(&trace.combined),
        StreamTrace::final_quarter_eta(&trace.p1_only)
    );
    Ok(())
}
