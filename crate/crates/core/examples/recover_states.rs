//! Poses from sensor coordinates, and the closed-form rigid registration.

use nalgebra::DVector;
use relstate::geometry::{rotation_from_rpy, ProprioMode};
use relstate::harness::{build_instance, RunConfig};
use relstate::recover::{horn_registration, recover_states};
use relstate::scenario::{GeneratorSpec, Shape};

fn main() -> relstate::Result<()> {
    let mut config = RunConfig::default();
    config.sigma = 0.0;
    config.attitude_error = 0.0;
    config.anchors.count = 0;
    config.scenario = GeneratorSpec::with_pair(Shape::Cube { side: 2, spacing: 3.0 }, 3, ProprioMode::FourAxis);
    let inst = build_instance(&config, 0)?;
    let est = recover_states(&inst.problem, &inst.scenario.ground_truth())?;
    for (a, (pose, truth)) in est.poses.iter().zip(&inst.scenario.poses).enumerate() {
        println!(
            "agent {a}: {:?}, translation error {:.1e}, rotation error {:.1e}",
            est.methods[a],
            (&pose.translation - &truth.translation).norm(),
            (&pose.rotation - &truth.rotation).norm()
        );
    }

    let r = rotation_from_rpy(0.1, -0.2, 1.0);
    let t = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let body: Vec<DVector<f64>> = [[0.0, 0.35, 0.0], [0.0, -0.35, 0.0], [0.35, 0.0, 0.0], [0.0, 0.0, 0.2]]
        .iter()
        .map(|p| DVector::from_row_slice(p))
        .collect();
    let world: Vec<DVector<f64>> = body.iter().map(|b| &r * b + &t).collect();
    let pose = horn_registration(&body, &world)?;
    println!(
        "registration: rotation error {:.1e}, translation error {:.1e}",
        (&pose.rotation - &r).norm(),
        (&pose.translation - &t).norm()
    );
    Ok(())
}
