//! Pose recovery from sensor coordinates and relative accuracy metrics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::geometry::{rot_2d, rot_x, rot_y, rot_z, Pose, ProprioReading, Realization};
use crate::model::RealizationProblem;

/// Horizontal baselines shorter than this (squared) leave yaw undetermined.
pub const YAW_BASELINE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RecoveryMethod {
    YawFormula,
    Registration,
    Underdetermined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimateSet {
    pub poses: Vec<Pose>,
    pub methods: Vec<RecoveryMethod>,
}

impl PoseEstimateSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn underdetermined(&self) -> usize {
        self.methods.iter().filter(|m| **m == RecoveryMethod::Underdetermined).count()
    }
}

/// Yaw from one sensor pair given roll and pitch.
pub fn recover_yaw(
    p_u: &DVector<f64>,
    p_v: &DVector<f64>,
    nu_u: &DVector<f64>,
    nu_v: &DVector<f64>,
    roll: f64,
    pitch: f64,
) -> Result<f64> {
    let (s, c, den) = yaw_terms(&(p_u - p_v), &(nu_u - nu_v), roll, pitch);
    if den <= YAW_BASELINE_TOL {
        return Err(Error::UnderdeterminedYaw(den));
    }
    Ok((s / den).atan2(c / den))
}

/// Unnormalized sine and cosine numerators and the common denominator.
fn yaw_terms(dp: &DVector<f64>, dnu: &DVector<f64>, roll: f64, pitch: f64) -> (f64, f64, f64) {
    let a = rot_y(pitch) * rot_x(roll) * dnu;
    let s = a[0] * dp[1] - a[1] * dp[0];
    let c = a[0] * dp[0] + a[1] * dp[1];
    (s, c, a[0] * a[0] + a[1] * a[1])
}

/// Least-squares yaw over every sensor pair of an agent.
fn agent_yaw(problem: &RealizationProblem, agent: usize, p: &Realization, roll: f64, pitch: f64) -> Option<f64> {
    let cols: Vec<usize> = problem.index.columns(agent).collect();
    let layout = &problem.layouts[agent];
    let (mut s, mut c, mut den) = (0.0, 0.0, 0.0);
    for u in 0..cols.len() {
        for v in u + 1..cols.len() {
            let dp = p.point(cols[u]) - p.point(cols[v]);
            let (su, cu, du) = yaw_terms(&dp, &(&layout.points[u] - &layout.points[v]), roll, pitch);
            s += su;
            c += cu;
            den += du;
        }
    }
    (den > YAW_BASELINE_TOL && (s != 0.0 || c != 0.0)).then(|| s.atan2(c))
}

/// Heading suggested by `p` for an agent, used to orient initial points.
pub fn yaw_hint(problem: &RealizationProblem, agent: usize, p: &Realization) -> Option<f64> {
    if problem.index.count(agent) < 2 {
        return None;
    }
    match &problem.readings[agent] {
        ProprioReading::FourAxis { roll, pitch } => agent_yaw(problem, agent, p, *roll, *pitch),
        ProprioReading::DistanceOnly if problem.dim == 3 => agent_yaw(problem, agent, p, 0.0, 0.0),
        ProprioReading::DistanceOnly => {
            let cols: Vec<usize> = problem.index.columns(agent).collect();
            let layout = &problem.layouts[agent];
            let dp = p.point(cols[1]) - p.point(cols[0]);
            let dnu = &layout.points[1] - &layout.points[0];
            if dp.norm() < 1e-12 || dnu.norm() < 1e-12 {
                return None;
            }
            Some(dp[1].atan2(dp[0]) - dnu[1].atan2(dnu[0]))
        }
        ProprioReading::SixAxis { .. } => None,
    }
}

/// Least-squares rigid registration mapping `body` onto `world`, with the
/// rotation forced proper.
pub fn horn_registration(body: &[DVector<f64>], world: &[DVector<f64>]) -> Result<Pose> {
    if body.len() != world.len() {
        return Err(Error::DimensionMismatch {
            expected: body.len(),
            got: world.len(),
        });
    }
    if body.len() < 3 {
        return Err(Error::DegenerateRegistration("fewer than three correspondences".into()));
    }
    let d = body[0].len();
    let n = body.len() as f64;
    let cb = body.iter().sum::<DVector<f64>>() / n;
    let cw = world.iter().sum::<DVector<f64>>() / n;
    let mut h = DMatrix::zeros(d, d);
    for (b, w) in body.iter().zip(world) {
        h += (b - &cb) * (w - &cw).transpose();
    }
    if collinearity(body) <= 1e-9 {
        return Err(Error::DegenerateRegistration("body points are collinear".into()));
    }
    let r = proper_rotation(&h)?;
    let t = &cw - &r * &cb;
    Pose::new(r, t)
}

/// Largest singular value product measuring spread beyond a line.
fn collinearity(points: &[DVector<f64>]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().sum::<DVector<f64>>() / n;
    let d = points[0].len();
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let x = p - &c;
        cov += &x * x.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[1].max(0.0)
}

/// Rotation maximizing `tr(R H)` for correlation matrix `H = sum b w^T`.
fn proper_rotation(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = h.nrows();
    let svd = h.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateRegistration("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::DegenerateRegistration("svd failed".into()))?;
    let v = vt.transpose();
    let mut s = DMatrix::identity(d, d);
    if (&v * u.transpose()).determinant() < 0.0 {
        s[(d - 1, d - 1)] = -1.0;
    }
    Ok(v * s * u.transpose())
}

fn mean_translation(problem: &RealizationProblem, agent: usize, p: &Realization, r: &DMatrix<f64>) -> DVector<f64> {
    let layout = &problem.layouts[agent];
    let cols = problem.index.columns(agent);
    let n = cols.len() as f64;
    cols.enumerate()
        .map(|(u, c)| p.point(c) - r * &layout.points[u])
        .sum::<DVector<f64>>()
        / n
}

/// Poses from a realization: attitude readings first, then the yaw
/// formula, then rigid registration; anything else is tagged
/// underdetermined and placed at the sensor centroid with identity attitude.
pub fn recover_states(problem: &RealizationProblem, p: &Realization) -> Result<PoseEstimateSet> {
    if p.dim() != problem.dim || p.len() != problem.sensor_count() {
        return Err(Error::DimensionMismatch {
            expected: problem.sensor_count(),
            got: p.len(),
        });
    }
    let d = problem.dim;
    let mut poses = Vec::with_capacity(problem.agent_count());
    let mut methods = Vec::with_capacity(problem.agent_count());
    for agent in 0..problem.agent_count() {
        let layout = &problem.layouts[agent];
        let cols: Vec<usize> = problem.index.columns(agent).collect();
        let rotation = match &problem.readings[agent] {
            ProprioReading::SixAxis { rotation } => Some((rotation.clone(), RecoveryMethod::Registration)),
            ProprioReading::FourAxis { roll, pitch } if cols.len() >= 2 => agent_yaw(problem, agent, p, *roll, *pitch)
                .map(|yaw| (rot_z(yaw) * rot_y(*pitch) * rot_x(*roll), RecoveryMethod::YawFormula)),
            _ => None,
        };
        let rotation = rotation.or_else(|| {
            if cols.len() >= 3 {
                let world: Vec<DVector<f64>> = cols.iter().map(|&c| p.point(c)).collect();
                horn_registration(&layout.points, &world)
                    .ok()
                    .map(|pose| (pose.rotation, RecoveryMethod::Registration))
            } else if d == 2 && cols.len() == 2 {
                yaw_hint(problem, agent, p).map(|a| (rot_2d(a), RecoveryMethod::Registration))
            } else {
                None
            }
        });
        let (r, method) = rotation.unwrap_or((DMatrix::identity(d, d), RecoveryMethod::Underdetermined));
        let t = mean_translation(problem, agent, p, &r);
        poses.push(Pose::new(r, t)?);
        methods.push(method);
    }
    Ok(PoseEstimateSet { poses, methods })
}

/// Sensor coordinates implied by poses and layouts.
pub fn rebuild(problem: &RealizationProblem, poses: &[Pose]) -> Result<Realization> {
    Realization::from_poses(poses, &problem.layouts)
}

/// Body-frame relative translation error over both orientations of every edge.
pub fn rmse_body(estimates: &[Pose], truth: &[Pose], edges: &[(usize, usize)]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(i, j) in edges {
        for (a, b) in [(i, j), (j, i)] {
            let e = estimates[a].relative_translation(&estimates[b]) - truth[a].relative_translation(&truth[b]);
            sum += e.norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Relative translation error in the common frame, ignoring attitude.
pub fn rmse_common(estimates: &[Pose], truth: &[Pose], edges: &[(usize, usize)]) -> f64 {
    let mut sum = 0.0;
    for &(i, j) in edges {
        let e = (&estimates[j].translation - &estimates[i].translation) - (&truth[j].translation - &truth[i].translation);
        sum += e.norm_squared();
    }
    if edges.is_empty() {
        0.0
    } else {
        (sum / edges.len() as f64).sqrt()
    }
}

/// Relative error of one pair normalized by its true separation.
pub fn eta_metric(estimates: &[Pose], truth: &[Pose], pair: (usize, usize)) -> Result<f64> {
    let (i, j) = pair;
    let dist = (&truth[j].translation - &truth[i].translation).norm();
    if dist <= 0.0 {
        return Err(invalid("agents coincide; relative error is undefined"));
    }
    Ok(rmse_body(estimates, truth, &[pair]) / dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_from_rpy, SensorIndex, SensorLayout};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn yaw_quarter_turn() {
        let z = v(&[0.0, 0.0, 0.0]);
        let yaw = recover_yaw(&v(&[-0.7, 0.0, 0.0]), &z, &v(&[0.0, 0.7, 0.0]), &z, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(yaw, FRAC_PI_2, epsilon = 1e-12);
        let yaw = recover_yaw(&v(&[0.3, 0.2, 0.1]), &z, &v(&[0.3, 0.2, 0.1]), &z, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(yaw, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn vertical_baseline_is_underdetermined() {
        let z = v(&[0.0, 0.0, 0.0]);
        let up = v(&[0.0, 0.0, 1.0]);
        assert!(matches!(recover_yaw(&up, &z, &up, &z, 0.0, 0.0), Err(Error::UnderdeterminedYaw(_))));
    }

    #[test]
    fn yaw_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (roll, pitch, yaw) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-3.1..3.1));
            let r = rotation_from_rpy(roll, pitch, yaw);
            let nu_u = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.1]);
            let nu_v = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -0.2]);
            let t = v(&[1.0, -2.0, 0.5]);
            let got = recover_yaw(&(&r * &nu_u + &t), &(&r * &nu_v + &t), &nu_u, &nu_v, roll, pitch).unwrap();
            assert_abs_diff_eq!(crate::geometry::wrap_angle(got - yaw), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn registration_examples() {
        let body = vec![v(&[0.0, 0.0, 0.0]), v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])];
        let pose = horn_registration(&body, &body).unwrap();
        assert_abs_diff_eq!(pose.rotation, DMatrix::identity(3, 3), epsilon = 1e-12);
        let shifted: Vec<_> = body.iter().map(|b| b + v(&[1.0, 2.0, 3.0])).collect();
        let pose = horn_registration(&body, &shifted).unwrap();
        assert_abs_diff_eq!(pose.translation, v(&[1.0, 2.0, 3.0]), epsilon = 1e-12);
        let line = vec![v(&[0.0, 0.0, 0.0]), v(&[1.0, 0.0, 0.0]), v(&[2.0, 0.0, 0.0])];
        assert!(matches!(horn_registration(&line, &line), Err(Error::DegenerateRegistration(_))));
    }

    #[test]
    fn registration_round_trip_and_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let body = vec![v(&[0.0, 0.0, 0.0]), v(&[1.0, 0.2, 0.0]), v(&[0.1, 1.0, 0.3]), v(&[0.2, -0.3, 1.0])];
        for _ in 0..50 {
            let r = rotation_from_rpy(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
            let t = v(&[rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
            let world: Vec<_> = body.iter().map(|b| &r * b + &t).collect();
            let pose = horn_registration(&body, &world).unwrap();
            assert_abs_diff_eq!(pose.rotation, r, epsilon = 1e-9);
            assert_abs_diff_eq!(pose.translation, t, epsilon = 1e-9);
        }
        let mirrored: Vec<_> = body.iter().map(|b| v(&[-b[0], b[1], b[2]])).collect();
        let pose = horn_registration(&body, &mirrored).unwrap();
        assert_abs_diff_eq!(pose.rotation.determinant(), 1.0, epsilon = 1e-9);
    }

    fn two_agent_problem(readings: Vec<ProprioReading>) -> RealizationProblem {
        let layout = SensorLayout::symmetric_pair(3, 0.5);
        RealizationProblem {
            dim: 3,
            index: SensorIndex::from_counts([2, 2]),
            layouts: vec![layout.clone(), layout],
            readings,
            terms: vec![],
            calibrations: vec![],
            linear: vec![],
            anchor_coords: vec![None; 4],
            edges: vec![(0, 1)],
        }
    }

    #[test]
    fn ground_truth_round_trip() {
        let poses = vec![
            Pose::new(rotation_from_rpy(0.1, -0.05, 0.7), v(&[0.0, 0.0, 0.0])).unwrap(),
            Pose::new(rotation_from_rpy(-0.1, 0.15, -2.0), v(&[3.0, 1.0, 0.2])).unwrap(),
        ];
        let readings = vec![
            ProprioReading::FourAxis { roll: 0.1, pitch: -0.05 },
            ProprioReading::FourAxis { roll: -0.1, pitch: 0.15 },
        ];
        let problem = two_agent_problem(readings);
        let p = rebuild(&problem, &poses).unwrap();
        let est = recover_states(&problem, &p).unwrap();
        for (e, t) in est.poses.iter().zip(&poses) {
            assert_abs_diff_eq!(e.rotation, t.rotation, epsilon = 1e-9);
            assert_abs_diff_eq!(e.translation, t.translation, epsilon = 1e-9);
        }
        assert_eq!(est.methods, vec![RecoveryMethod::YawFormula; 2]);
    }

    #[test]
    fn distance_only_pair_is_underdetermined() {
        let problem = two_agent_problem(vec![ProprioReading::DistanceOnly; 2]);
        let poses = vec![Pose::identity(3), Pose::new(DMatrix::identity(3, 3), v(&[2.0, 0.0, 0.0])).unwrap()];
        let p = rebuild(&problem, &poses).unwrap();
        let est = recover_states(&problem, &p).unwrap();
        assert_eq!(est.underdetermined(), 2);
    }

    #[test]
    fn metric_examples() {
        let truth = vec![Pose::identity(3), Pose::new(DMatrix::identity(3, 3), v(&[2.0, 0.0, 0.0])).unwrap()];
        assert_eq!(rmse_body(&truth, &truth, &[(0, 1)]), 0.0);
        let mut est = truth.clone();
        est[1].translation = v(&[2.0, 0.1, 0.0]);
        // Offset seen from agent 0 and its mirror from agent 1.
        assert_abs_diff_eq!(rmse_body(&est, &truth, &[(0, 1)]), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(eta_metric(&est, &truth, (0, 1)).unwrap(), 0.05, epsilon = 1e-12);
        let same = vec![Pose::identity(3), Pose::identity(3)];
        assert!(eta_metric(&same, &same, (0, 1)).is_err());
    }

    #[test]
    fn rmse_is_gauge_invariant() {
        let truth = vec![Pose::identity(3), Pose::new(rotation_from_rpy(0.0, 0.0, 1.0), v(&[2.0, 0.0, 0.0])).unwrap()];
        let est = vec![
            Pose::new(rotation_from_rpy(0.0, 0.0, 0.1), v(&[0.1, 0.0, 0.0])).unwrap(),
            Pose::new(rotation_from_rpy(0.0, 0.0, 1.0), v(&[2.0, 0.3, 0.0])).unwrap(),
        ];
        let g = rotation_from_rpy(0.3, -0.2, 2.0);
        let gt = v(&[5.0, -1.0, 2.0]);
        let moved: Vec<Pose> = est
            .iter()
            .map(|p| Pose::new(&g * &p.rotation, &g * &p.translation + &gt).unwrap())
            .collect();
        assert_abs_diff_eq!(rmse_body(&est, &truth, &[(0, 1)]), rmse_body(&moved, &truth, &[(0, 1)]), epsilon = 1e-12);
    }
}
