//! Block partitions and colorings for both solvers on the same cube.
//! Blocks of one color share no variables and no objective terms, so a
//! whole color class can be updated at once.

use relstate::harness::{build_instance, RunConfig};
use relstate::partition::{schedule, SolverKind};

fn main() -> relstate::Result<()> {
    let inst = build_instance(&RunConfig::default(), 0)?;
    let problem = &inst.problem;
    let frozen: Vec<bool> = (0..problem.agent_count()).map(|a| problem.is_anchored_agent(a)).collect();
    for kind in [SolverKind::Esdp, SolverKind::Bm] {
        let (partition, graph, coloring) = schedule(problem, kind, &frozen)?;
        let sizes: Vec<usize> = coloring.sweep_classes(&partition).iter().map(Vec::len).collect();
        println!(
            "{kind:?}: {} blocks, max dependency degree {}, {} colors, proper {}, class sizes {:?}",
            partition.len(),
            graph.max_degree(),
            coloring.count(),
            coloring.is_proper(&graph),
            sizes
        );
    }
    Ok(())
}
