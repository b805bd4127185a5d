//! Low-rank local search from a poor guess, then rank-d refinement.

use relstate::bm::{self, BmModel, BmOptions, Freeze, RefineOptions};
use relstate::harness::{build_instance, RunConfig};
use relstate::recover::{recover_states, rmse_body};
use relstate::scenario::{sample_initial_guess, Shape};

fn main() -> relstate::Result<()> {
    let mut config = RunConfig::default();
    config.scenario.shape = Shape::Pyramid { levels: 6, spacing: 4.0 };
    config.anchors.count = 0;
    let inst = build_instance(&config, 1)?;
    let problem = &inst.problem;
    let d = problem.dim;

    let guess = sample_initial_guess(&inst.scenario, &inst.readings, 2.0, 7)?;
    let model = BmModel::new(problem, d + 1, None, None, Freeze::Nothing)?;
    let state = bm::lift_init(&model, &guess, 0.5, 7)?;
    let search = bm::solve(&model, state, &BmOptions::default())?;
    for r in search.trace.iter().step_by(5) {
        println!("rank {}: cycle {:3} objective {:.4e}", d + 1, r.cycle, r.objective);
    }

    let refined = bm::refine(problem, &search.realization, &RefineOptions::default())?;
    println!("rank {d}: {} cycles, objective {:.4e}", refined.cycles, refined.trace.last().map_or(f64::NAN, |r| r.objective));

    let est = recover_states(problem, &refined.realization)?;
    println!(
        "body-frame RMSE {:.3} m over {} edges",
        rmse_body(&est.poses, &inst.scenario.poses, &inst.scenario.edges),
        inst.scenario.edges.len()
    );
    Ok(())
}
