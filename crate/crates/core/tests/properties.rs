use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use relstate::bm::{self, BmModel, BmOptions, Freeze};
use relstate::esdp::{self, EsdpModel, EsdpOptions};
use relstate::geometry::{
    quadratic_surrogate, rotation_from_rpy, rpy_from_rotation, rot_z, transform_point, Pose, ProprioMode,
    Realization,
};
use relstate::harness::{build_instance, run_trial, Instance, RunConfig};
use relstate::model::{self, check_feasibility};
use relstate::partition::{schedule, SolverKind};
use relstate::recover::{horn_registration, rebuild, recover_states, rmse_body};
use relstate::scenario::{is_connected, sample_initial_guess, GeneratorSpec, Shape};

fn vec3(v: [f64; 3]) -> DVector<f64> {
    DVector::from_row_slice(&v)
}

fn coord() -> impl Strategy<Value = [f64; 3]> {
    [-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64]
}

fn angles() -> impl Strategy<Value = (f64, f64, f64)> {
    (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64)
}

fn instance(n: usize, mode: ProprioMode, sigma: f64, anchors: usize, seed: u64) -> Instance {
    let mut cfg = RunConfig::default();
    cfg.sigma = sigma;
    cfg.attitude_error = if sigma == 0.0 { 0.0 } else { cfg.attitude_error };
    cfg.scenario = GeneratorSpec::with_pair(
        Shape::RandomBox {
            count: n,
            extents: vec![8.0; 3],
        },
        3.min(n - 1),
        mode,
    );
    cfg.anchors.count = anchors;
    cfg.anchors.partner_fraction = Some(1.0);
    // Sparse random boxes are sometimes disconnected; take the next seed.
    (seed..seed + 100)
        .find_map(|s| build_instance(&cfg, s).ok())
        .expect("a connected instance")
}

fn global_yaw_shift(p: &Realization, yaw: f64, shift: &DVector<f64>) -> Realization {
    let r = rot_z(yaw);
    let mut coords = &r * &p.coords;
    for mut c in coords.column_iter_mut() {
        c += shift;
    }
    Realization::new(coords)
}

proptest! {
    #[test]
    fn rigid_transforms_preserve_distances(a in coord(), b in coord(), (r, p, y) in angles(), t in coord()) {
        let pose = Pose::new(rotation_from_rpy(r, p, y), vec3(t)).unwrap();
        let (a, b) = (vec3(a), vec3(b));
        let ta = transform_point(&pose, &a).unwrap();
        let tb = transform_point(&pose, &b).unwrap();
        prop_assert!(((ta - tb).norm() - (a - b).norm()).abs() < 1e-9);
    }

    #[test]
    fn surrogate_is_exact_without_noise(d in 0.0..50.0f64, sigma in 1e-3..1.0f64) {
        let (q, sq) = quadratic_surrogate(d, sigma).unwrap();
        prop_assert!((q + sigma * sigma - d * d).abs() <= 1e-12 * (1.0 + d * d));
        prop_assert!(sq > 0.0);
    }

    #[test]
    fn yaw_survives_angle_extraction(roll in -3.1..3.1f64, pitch in -1.56..1.56f64, yaw in -3.1..3.1f64) {
        let (_, _, y) = rpy_from_rotation(&rotation_from_rpy(roll, pitch, yaw));
        prop_assert!((y - yaw).abs() < 1e-9);
    }

    #[test]
    fn registration_is_always_proper(pts in proptest::collection::vec(coord(), 3..8), reflect in any::<bool>()) {
        let body: Vec<DVector<f64>> = pts.iter().map(|p| vec3(*p)).collect();
        let world: Vec<DVector<f64>> = body
            .iter()
            .map(|b| if reflect { DVector::from_vec(vec![-b[0], b[1], b[2]]) } else { b.clone() })
            .collect();
        if let Ok(pose) = horn_registration(&body, &world) {
            prop_assert!((pose.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn topologies_are_connected_and_sorted(n in 4usize..20, seed in 0u64..1000) {
        let inst = instance(n, ProprioMode::FourAxis, 0.1, 0, seed);
        let edges = &inst.scenario.edges;
        prop_assert!(is_connected(n, edges));
        prop_assert!(edges.iter().all(|&(i, j)| i < j));
        prop_assert!(edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn truth_is_optimal_without_noise(n in 3usize..10, seed in 0u64..1000) {
        let inst = instance(n, ProprioMode::FourAxis, 0.0, 0, seed);
        let truth = inst.scenario.ground_truth();
        prop_assert!(model::objective(&inst.problem, &truth) < 1e-9);
        prop_assert!(check_feasibility(&inst.problem, &truth).is_feasible(1e-9));
    }

    #[test]
    fn objective_has_yaw_and_translation_gauge(n in 3usize..10, seed in 0u64..1000, yaw in -3.0..3.0f64, t in coord()) {
        let inst = instance(n, ProprioMode::FourAxis, 0.1, 0, seed);
        let p = sample_initial_guess(&inst.scenario, &inst.readings, 1.0, seed).unwrap();
        let f0 = model::objective(&inst.problem, &p);
        let f1 = model::objective(&inst.problem, &global_yaw_shift(&p, yaw, &vec3(t)));
        prop_assert!((f0 - f1).abs() <= 1e-8 * (1.0 + f0));
    }

    #[test]
    fn colorings_are_proper_and_bounded(n in 3usize..15, seed in 0u64..1000, anchors in 0usize..3) {
        let inst = instance(n, ProprioMode::FourAxis, 0.1, anchors.min(n - 1), seed);
        let prob = &inst.problem;
        let frozen: Vec<bool> = (0..n).map(|a| prob.is_anchored_agent(a)).collect();
        for kind in [SolverKind::Esdp, SolverKind::Bm] {
            let (partition, graph, coloring) = schedule(prob, kind, &frozen).unwrap();
            prop_assert!(coloring.is_proper(&graph));
            prop_assert!(coloring.count() <= graph.max_degree() + 1);
            prop_assert!(graph.edges().iter().all(|&(a, b)| a != b));
            // Blocks of one kind cover every sensor column exactly once.
            let mut seen = vec![0usize; prob.sensor_count()];
            for b in &partition.blocks {
                if kind == SolverKind::Bm && b.kind != relstate::partition::BlockKind::BmU {
                    continue;
                }
                for c in b.columns.clone() {
                    seen[c] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn recovery_round_trip(n in 2usize..8, seed in 0u64..1000, six in any::<bool>()) {
        let mode = if six { ProprioMode::SixAxis } else { ProprioMode::FourAxis };
        let inst = instance(n, mode, 0.0, 0, seed);
        let truth = inst.scenario.ground_truth();
        let est = recover_states(&inst.problem, &truth).unwrap();
        let again = rebuild(&inst.problem, &est.poses).unwrap();
        prop_assert!((&again.coords - &truth.coords).amax() < 1e-6);
    }

    #[test]
    fn body_rmse_is_gauge_invariant(n in 3usize..8, seed in 0u64..1000, (r, p, y) in angles(), t in coord()) {
        let inst = instance(n, ProprioMode::FourAxis, 0.1, 0, seed);
        let guess = sample_initial_guess(&inst.scenario, &inst.readings, 1.0, seed).unwrap();
        let est = recover_states(&inst.problem, &guess).unwrap().poses;
        let g = Pose::new(rotation_from_rpy(r, p, y), vec3(t)).unwrap();
        let moved: Vec<Pose> = est
            .iter()
            .map(|e| Pose::new(&g.rotation * &e.rotation, &g.rotation * &e.translation + &g.translation).unwrap())
            .collect();
        let edges = &inst.scenario.edges;
        let a = rmse_body(&est, &inst.scenario.poses, edges);
        let b = rmse_body(&moved, &inst.scenario.poses, edges);
        prop_assert!((a - b).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rank_d_lift_reproduces_the_point_objective(n in 3usize..8, seed in 0u64..1000) {
        let inst = instance(n, ProprioMode::FourAxis, 0.1, 0, seed);
        let prob = &inst.problem;
        let bmm = BmModel::new(prob, prob.dim, None, None, Freeze::Nothing).unwrap();
        let p = sample_initial_guess(&inst.scenario, &inst.readings, 1.0, seed).unwrap();
        let st = bm::lift_init(&bmm, &p, 0.0, 0).unwrap();
        let lambda = prob.sensor_weight();
        let calib: f64 = prob
            .calibrations
            .iter()
            .map(|c| ((p.point(c.a) - p.point(c.b)).norm_squared() - c.target).powi(2))
            .sum();
        let expect = model::objective(prob, &p) + lambda * calib;
        let got = bmm.objective(&st.u, &st.v);
        prop_assert!((got - expect).abs() <= 1e-9 * (1.0 + expect));
    }

    #[test]
    fn frozen_anchor_columns_never_move(n in 4usize..9, seed in 0u64..1000) {
        let inst = instance(n, ProprioMode::FourAxis, 0.1, 2, seed);
        let prob = &inst.problem;
        let bmm = BmModel::new(prob, prob.dim + 1, None, None, Freeze::Anchors).unwrap();
        let p = sample_initial_guess(&inst.scenario, &inst.readings, 2.0, seed).unwrap();
        let st = bm::lift_init(&bmm, &p, 0.3, seed).unwrap();
        let before = st.u.clone();
        let sol = bm::solve(&bmm, st, &BmOptions { max_cycles: 20, ..BmOptions::default() }).unwrap();
        for c in 0..prob.sensor_count() {
            if prob.anchor_coords[c].is_some() {
                prop_assert_eq!(sol.state.u.column(c), before.column(c));
                prop_assert_eq!(sol.state.v.column(c), before.column(c));
            }
        }
    }

    #[test]
    fn class_order_does_not_change_results(n in 3usize..9, seed in 0u64..1000) {
        let inst = instance(n, ProprioMode::FourAxis, 0.1, 1, seed);
        let prob = &inst.problem;
        let model = EsdpModel::new(prob);
        prop_assume!(model.is_ok());
        let model = model.unwrap();
        let classes = model.coloring().sweep_classes(model.partition());
        let reversed: Vec<Vec<usize>> = classes.iter().map(|c| c.iter().rev().copied().collect()).collect();
        let opts = EsdpOptions { max_cycles: 5, ..EsdpOptions::default() };
        let a = esdp::solve_with_classes(&model, esdp::init_state(&model, None, 1.0), &opts, &classes).unwrap();
        let b = esdp::solve_with_classes(&model, esdp::init_state(&model, None, 1.0), &opts, &reversed).unwrap();
        prop_assert!((&a.state.p - &b.state.p).amax() <= 1e-12);
    }

    #[test]
    fn relaxation_stays_feasible(n in 3usize..9, seed in 0u64..1000) {
        let inst = instance(n, ProprioMode::FourAxis, 0.1, 2, seed);
        let model = EsdpModel::new(&inst.problem).unwrap();
        let opts = EsdpOptions { max_cycles: 3, ..EsdpOptions::default() };
        let sol = esdp::solve(&model, esdp::init_state(&model, None, 1.0), &opts).unwrap();
        prop_assert!(sol.state.slacks().iter().all(|s| *s >= -1e-9), "slacks {:?}", sol.state.slacks());
        prop_assert!(model.max_violation(&sol.state) <= 1e-9, "violation {:e}", model.max_violation(&sol.state));
    }

    #[test]
    fn parallel_time_never_exceeds_serial(seed in 0u64..1000) {
        let mut cfg = RunConfig::default();
        cfg.scenario.shape = Shape::Cube { side: 2, spacing: 3.0 };
        cfg.anchors.count = 2;
        let (report, _) = run_trial(&cfg, 0, seed).unwrap();
        prop_assert!(report.pt <= report.st + 1e-12);
    }
}

#[test]
fn gauge_helper_is_rigid() {
    let p = Realization::new(DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
    let q = global_yaw_shift(&p, 0.5, &vec3([1.0, 2.0, 3.0]));
    assert!(((q.point(0) - q.point(1)).norm() - 1.0).abs() < 1e-12);
}
