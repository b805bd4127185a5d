//! Builds the 125-agent cube, designates imperfect anchors and prints a
//! short summary followed by the scenario JSON.

use relstate::harness::{anchored_scenario, RunConfig};
use relstate::scenario::scenario_to_json;

fn main() -> relstate::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = RunConfig::default();
    let scenario = anchored_scenario(&config, seed)?;
    let degrees = scenario.degrees();
    eprintln!(
        "{} agents, {} edges, degree {}..{}, {} anchors",
        scenario.agent_count(),
        scenario.edges.len(),
        degrees.iter().min().unwrap_or(&0),
        degrees.iter().max().unwrap_or(&0),
        scenario.anchors.len()
    );
    println!("{}", scenario_to_json(&scenario)?);
    Ok(())
}
