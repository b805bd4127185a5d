//! The generalized graph realization problem: weighted squared-distance
//! terms over sensor coordinates, subject to per-agent calibration and
//! proprioception constraints.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    gravity_row, rot_x, rot_y, Pose, ProprioMode, ProprioReading, Realization, SensorIndex,
    SensorLayout,
};
use crate::linalg::independent_rows;
use crate::scenario::{MeasurementGraph, Scenario};

/// Horizontal baselines shorter than this (squared) are skipped when
/// instantiating yaw-consistency rows.
const YAW_BASELINE_TOL: f64 = 1e-9;
/// Determinant threshold for choosing reference sensors during reduction.
const REFERENCE_DET_TOL: f64 = 1e-6;
/// Rank threshold for dropping dependent linear rows.
const RANK_TOL: f64 = 1e-10;

/// `w (|p_a - p_b|^2 - q)^2` between two sensor columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Term {
    pub a: usize,
    pub b: usize,
    pub q: f64,
    pub weight: f64,
    pub from_anchor: bool,
}

/// `|p_a - p_b|^2 = target` for two sensors on one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub agent: usize,
    pub a: usize,
    pub b: usize,
    pub target: f64,
}

/// A linear equality over one agent's sensor coordinates. Coefficients are
/// indexed `local_sensor * d + axis`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearRow {
    pub agent: usize,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizationProblem {
    pub dim: usize,
    pub index: SensorIndex,
    pub layouts: Vec<SensorLayout>,
    pub readings: Vec<ProprioReading>,
    pub terms: Vec<Term>,
    pub calibrations: Vec<Calibration>,
    pub linear: Vec<LinearRow>,
    /// Known (possibly perturbed) world coordinates per sensor column.
    pub anchor_coords: Vec<Option<DVector<f64>>>,
    /// Topology edges between agents, `i < j`.
    pub edges: Vec<(usize, usize)>,
}

impl RealizationProblem {
    pub fn agent_count(&self) -> usize {
        self.index.agents()
    }

    pub fn sensor_count(&self) -> usize {
        self.index.total()
    }

    pub fn is_anchored_agent(&self, agent: usize) -> bool {
        self.index.columns(agent).all(|c| self.anchor_coords[c].is_some())
    }

    pub fn has_anchors(&self) -> bool {
        self.anchor_coords.iter().any(|a| a.is_some())
    }

    pub fn mean_weight(&self) -> f64 {
        if self.terms.is_empty() {
            return 1.0;
        }
        self.terms.iter().map(|t| t.weight).sum::<f64>() / self.terms.len() as f64
    }

    /// Total measurement weight touching a sensor, averaged over sensors.
    pub fn sensor_weight(&self) -> f64 {
        let n = self.sensor_count();
        if self.terms.is_empty() || n == 0 {
            return 1.0;
        }
        2.0 * self.terms.iter().map(|t| t.weight).sum::<f64>() / n as f64
    }

    pub fn calibrations_of(&self, agent: usize) -> impl Iterator<Item = &Calibration> {
        self.calibrations.iter().filter(move |c| c.agent == agent)
    }

    pub fn linear_of(&self, agent: usize) -> impl Iterator<Item = &LinearRow> {
        self.linear.iter().filter(move |r| r.agent == agent)
    }

    /// Stacked linear rows of one agent as `(C, e)` over its local coordinates.
    pub fn linear_system(&self, agent: usize) -> (DMatrix<f64>, DVector<f64>) {
        let rows: Vec<&LinearRow> = self.linear_of(agent).collect();
        let n = self.index.count(agent) * self.dim;
        let mut c = DMatrix::zeros(rows.len(), n);
        let mut e = DVector::zeros(rows.len());
        for (k, r) in rows.iter().enumerate() {
            for (j, v) in r.coeffs.iter().enumerate() {
                c[(k, j)] = *v;
            }
            e[k] = r.rhs;
        }
        (c, e)
    }

    /// Anchored sensor columns with their coordinates.
    pub fn anchor_realization(&self) -> Vec<(usize, DVector<f64>)> {
        self.anchor_coords
            .iter()
            .enumerate()
            .filter_map(|(c, a)| a.as_ref().map(|a| (c, a.clone())))
            .collect()
    }

    /// JSON dump of the constraint set for inspection.
    pub fn constraints_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            dim: usize,
            calibrations: &'a [Calibration],
            linear: &'a [LinearRow],
        }
        Ok(serde_json::to_string_pretty(&Dump {
            dim: self.dim,
            calibrations: &self.calibrations,
            linear: &self.linear,
        })?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintViolationReport {
    pub calibration: Vec<f64>,
    pub linear: Vec<f64>,
    pub max: f64,
    pub mean: f64,
}

impl ConstraintViolationReport {
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max <= tol
    }
}

fn sub(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    a - b
}

/// Coefficients of `sum_k w_k * (p_u - p_v)_k` for a given weight vector.
fn diff_row(n_local: usize, d: usize, u: usize, v: usize, w: &[f64]) -> Vec<f64> {
    let mut row = vec![0.0; n_local * d];
    for k in 0..d {
        row[u * d + k] += w[k];
        row[v * d + k] -= w[k];
    }
    row
}

/// Calibration and proprioception constraints for one agent.
pub fn agent_constraints(
    agent: usize,
    index: &SensorIndex,
    layout: &SensorLayout,
    reading: &ProprioReading,
) -> Result<(Vec<Calibration>, Vec<LinearRow>)> {
    let nb = layout.len();
    let d = layout.dim();
    let col = |u: usize| index.column(agent, u);
    let nu = &layout.points;
    let mut cal = Vec::new();
    let mut lin = Vec::new();
    let all_calibrations = |cal: &mut Vec<Calibration>| {
        for u in 0..nb {
            for v in (u + 1)..nb {
                cal.push(Calibration {
                    agent,
                    a: col(u),
                    b: col(v),
                    target: (&nu[u] - &nu[v]).norm_squared(),
                });
            }
        }
    };
    match reading {
        ProprioReading::DistanceOnly => {
            if !layout.is_coplanar(1e-9) {
                return Err(Error::ModelRejected(format!(
                    "agent {agent}: distance-only sensors must be coplanar (handedness is not modeled)"
                )));
            }
            all_calibrations(&mut cal);
        }
        ProprioReading::FourAxis { roll, pitch } => {
            if d != 3 {
                return Err(Error::ModelRejected(format!(
                    "agent {agent}: roll/pitch readings need a 3D layout"
                )));
            }
            all_calibrations(&mut cal);
            let g = gravity_row(*roll, *pitch);
            let tilt = rot_y(*pitch) * rot_x(*roll);
            for u in 0..nb {
                for v in (u + 1)..nb {
                    lin.push(LinearRow {
                        agent,
                        coeffs: diff_row(nb, d, u, v, &[0.0, 0.0, 1.0]),
                        rhs: g.iter().zip(sub(&nu[u], &nu[v]).iter()).map(|(a, b)| a * b).sum(),
                    });
                }
            }
            // Yaw consistency: the sine and cosine implied by pair (u, v)
            // must match those implied by pair (v, w).
            for u in 0..nb {
                for v in (u + 1)..nb {
                    for w in (v + 1)..nb {
                        let a = &tilt * sub(&nu[u], &nu[v]);
                        let b = &tilt * sub(&nu[v], &nu[w]);
                        let na = a[0] * a[0] + a[1] * a[1];
                        let nbh = b[0] * b[0] + b[1] * b[1];
                        if na < YAW_BASELINE_TOL || nbh < YAW_BASELINE_TOL {
                            continue;
                        }
                        let sin_uv = diff_row(nb, d, u, v, &[-a[1] / na, a[0] / na, 0.0]);
                        let sin_vw = diff_row(nb, d, v, w, &[-b[1] / nbh, b[0] / nbh, 0.0]);
                        let cos_uv = diff_row(nb, d, u, v, &[a[0] / na, a[1] / na, 0.0]);
                        let cos_vw = diff_row(nb, d, v, w, &[b[0] / nbh, b[1] / nbh, 0.0]);
                        lin.push(LinearRow {
                            agent,
                            coeffs: sin_uv.iter().zip(&sin_vw).map(|(x, y)| x - y).collect(),
                            rhs: 0.0,
                        });
                        lin.push(LinearRow {
                            agent,
                            coeffs: cos_uv.iter().zip(&cos_vw).map(|(x, y)| x - y).collect(),
                            rhs: 0.0,
                        });
                    }
                }
            }
        }
        ProprioReading::SixAxis { rotation } => {
            if rotation.nrows() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: rotation.nrows(),
                });
            }
            for u in 0..nb {
                for v in (u + 1)..nb {
                    let target = rotation * sub(&nu[u], &nu[v]);
                    for k in 0..d {
                        let mut e = vec![0.0; d];
                        e[k] = 1.0;
                        lin.push(LinearRow {
                            agent,
                            coeffs: diff_row(nb, d, u, v, &e),
                            rhs: target[k],
                        });
                    }
                }
            }
        }
    }
    Ok((cal, lin))
}

/// Assembles the problem from a scenario, its measurements and readings.
pub fn build_problem(
    scenario: &Scenario,
    graph: &MeasurementGraph,
    readings: &[ProprioReading],
) -> Result<RealizationProblem> {
    let n = scenario.agent_count();
    if readings.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: readings.len(),
        });
    }
    let index = scenario.sensor_index();
    for (k, (r, m)) in readings.iter().zip(&scenario.modes).enumerate() {
        if r.mode() != *m {
            return Err(Error::ModelRejected(format!(
                "agent {k}: reading mode {:?} does not match configured mode {:?}",
                r.mode(),
                m
            )));
        }
    }
    let mut calibrations = Vec::new();
    let mut linear = Vec::new();
    for k in 0..n {
        let (c, l) = agent_constraints(k, &index, &scenario.layouts[k], &readings[k])?;
        calibrations.extend(c);
        linear.extend(l);
    }
    let terms = graph
        .measurements
        .iter()
        .map(|m| Term {
            a: index.column(m.agent_a, m.sensor_a),
            b: index.column(m.agent_b, m.sensor_b),
            q: m.q,
            weight: m.weight(),
            from_anchor: m.from_anchor,
        })
        .collect();
    let mut anchor_coords = vec![None; index.total()];
    for a in &scenario.anchors {
        for (u, p) in a.coords.iter().enumerate() {
            anchor_coords[index.column(a.agent, u)] = Some(p.clone());
        }
    }
    Ok(RealizationProblem {
        dim: scenario.dim,
        index,
        layouts: scenario.layouts.clone(),
        readings: readings.to_vec(),
        terms,
        calibrations,
        linear,
        anchor_coords,
        edges: scenario.edges.clone(),
    })
}

fn first_noncollinear(points: &[DVector<f64>]) -> Option<[usize; 3]> {
    let n = points.len();
    for a in 0..n {
        for b in (a + 1)..n {
            for c in (b + 1)..n {
                let u = &points[b] - &points[a];
                let v = &points[c] - &points[a];
                let area = if u.len() == 2 {
                    (u[0] * v[1] - u[1] * v[0]).abs()
                } else {
                    let u3 = nalgebra::Vector3::new(u[0], u[1], u[2]);
                    let v3 = nalgebra::Vector3::new(v[0], v[1], v[2]);
                    u3.cross(&v3).norm()
                };
                if area > REFERENCE_DET_TOL {
                    return Some([a, b, c]);
                }
            }
        }
    }
    None
}

fn first_noncoplanar(points: &[DVector<f64>]) -> Option<[usize; 4]> {
    let n = points.len();
    if points.first().map(|p| p.len()) != Some(3) {
        return None;
    }
    for a in 0..n {
        for b in (a + 1)..n {
            for c in (b + 1)..n {
                for e in (c + 1)..n {
                    let m = DMatrix::from_columns(&[
                        &points[b] - &points[a],
                        &points[c] - &points[a],
                        &points[e] - &points[a],
                    ]);
                    if m.determinant().abs() > REFERENCE_DET_TOL {
                        return Some([a, b, c, e]);
                    }
                }
            }
        }
    }
    None
}

fn first_distinct_pair(points: &[DVector<f64>]) -> Option<[usize; 2]> {
    let n = points.len();
    for a in 0..n {
        for b in (a + 1)..n {
            if (&points[a] - &points[b]).norm() > REFERENCE_DET_TOL {
                return Some([a, b]);
            }
        }
    }
    None
}

/// Drops constraints implied by the rest: calibration pairs not touching a
/// small set of reference sensors, proprioception rows outside the reference
/// set, and linearly dependent rows.
pub fn reduce_constraints(problem: &RealizationProblem) -> RealizationProblem {
    let mut calibrations = Vec::new();
    let mut linear = Vec::new();
    for agent in 0..problem.agent_count() {
        let layout = &problem.layouts[agent];
        let nb = layout.len();
        let d = problem.dim;
        let base = problem.index.columns(agent).start;
        let cals: Vec<Calibration> = problem.calibrations_of(agent).copied().collect();
        let rows: Vec<LinearRow> = problem.linear_of(agent).cloned().collect();
        let mode = problem.readings[agent].mode();

        let reference: Option<Vec<usize>> = match mode {
            ProprioMode::DistanceOnly if nb >= 4 => first_noncollinear(&layout.points)
                .map(|r| r.to_vec())
                .or_else(|| first_distinct_pair(&layout.points).map(|r| r.to_vec())),
            ProprioMode::FourAxis if nb >= 5 => first_noncoplanar(&layout.points).map(|r| r.to_vec()),
            _ => None,
        };

        match &reference {
            Some(refs) => {
                let is_ref = |c: usize| refs.contains(&(c - base));
                calibrations.extend(cals.iter().filter(|c| is_ref(c.a) || is_ref(c.b)).copied());
                let touches_only_refs = |r: &LinearRow| {
                    (0..nb).all(|s| refs.contains(&s) || r.coeffs[s * d..(s + 1) * d].iter().all(|v| *v == 0.0))
                };
                let kept: Vec<LinearRow> = rows.into_iter().filter(|r| touches_only_refs(r)).collect();
                linear.extend(filter_dependent(kept));
            }
            None => {
                calibrations.extend(cals);
                linear.extend(filter_dependent(rows));
            }
        }
    }
    RealizationProblem {
        calibrations,
        linear,
        ..problem.clone()
    }
}

fn filter_dependent(rows: Vec<LinearRow>) -> Vec<LinearRow> {
    // Include the right-hand side so inconsistent duplicates survive and
    // surface as infeasibility instead of being silently dropped.
    let vecs: Vec<DVector<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = r.coeffs.clone();
            v.push(r.rhs);
            DVector::from_vec(v)
        })
        .collect();
    let keep = independent_rows(&vecs, RANK_TOL);
    keep.into_iter().map(|k| rows[k].clone()).collect()
}

/// Weighted sum of squared residuals of the squared distances.
pub fn objective(problem: &RealizationProblem, p: &Realization) -> f64 {
    problem
        .terms
        .iter()
        .map(|t| {
            let r = (p.coords.column(t.a) - p.coords.column(t.b)).norm_squared() - t.q;
            t.weight * r * r
        })
        .sum()
}

/// Analytic gradient of [`objective`] with respect to every coordinate.
pub fn gradient(problem: &RealizationProblem, p: &Realization) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(p.dim(), p.len());
    for t in &problem.terms {
        let delta = p.coords.column(t.a) - p.coords.column(t.b);
        let r = delta.norm_squared() - t.q;
        let s = 4.0 * t.weight * r;
        for k in 0..p.dim() {
            g[(k, t.a)] += s * delta[k];
            g[(k, t.b)] -= s * delta[k];
        }
    }
    g
}

pub fn check_feasibility(problem: &RealizationProblem, p: &Realization) -> ConstraintViolationReport {
    let calibration: Vec<f64> = problem
        .calibrations
        .iter()
        .map(|c| ((p.coords.column(c.a) - p.coords.column(c.b)).norm_squared() - c.target).abs())
        .collect();
    let d = problem.dim;
    let linear: Vec<f64> = problem
        .linear
        .iter()
        .map(|r| {
            let base = problem.index.columns(r.agent).start;
            let mut lhs = 0.0;
            for (k, v) in r.coeffs.iter().enumerate() {
                lhs += v * p.coords[(k % d, base + k / d)];
            }
            (lhs - r.rhs).abs()
        })
        .collect();
    let all = calibration.iter().chain(&linear);
    let count = calibration.len() + linear.len();
    let max = all.clone().fold(0.0f64, |m, v| m.max(*v));
    let mean = if count == 0 {
        0.0
    } else {
        all.sum::<f64>() / count as f64
    };
    ConstraintViolationReport {
        calibration,
        linear,
        max,
        mean,
    }
}

/// Pose-based objective of the original estimation problem, used to check
/// that the point formulation reproduces it.
pub fn pose_objective(problem: &RealizationProblem, poses: &[Pose]) -> f64 {
    let idx = &problem.index;
    let place = |c: usize| {
        let agent = idx.owner(c);
        let u = c - idx.columns(agent).start;
        &poses[agent].rotation * &problem.layouts[agent].points[u] + &poses[agent].translation
    };
    problem
        .terms
        .iter()
        .map(|t| {
            let r = (place(t.a) - place(t.b)).norm_squared() - t.q;
            t.weight * r * r
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_rpy;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn single_edge(q: f64) -> RealizationProblem {
        let layout = SensorLayout::new(vec![v(&[0.0, 0.0])]).unwrap();
        RealizationProblem {
            dim: 2,
            index: SensorIndex::from_counts([1, 1]),
            layouts: vec![layout.clone(), layout],
            readings: vec![ProprioReading::DistanceOnly; 2],
            terms: vec![Term {
                a: 0,
                b: 1,
                q,
                weight: 1.0,
                from_anchor: false,
            }],
            calibrations: vec![],
            linear: vec![],
            anchor_coords: vec![None, None],
            edges: vec![(0, 1)],
        }
    }

    #[test]
    fn single_edge_objective() {
        let p = Realization::new(DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]));
        assert_eq!(objective(&single_edge(4.0), &p), 0.0);
        assert_eq!(objective(&single_edge(5.0), &p), 1.0);
    }

    #[test]
    fn single_edge_gradient_by_hand() {
        let p = Realization::new(DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]));
        let g = gradient(&single_edge(5.0), &p);
        // 4 w (|d|^2 - q) d with d = p_a - p_b = [-2, 0].
        assert_abs_diff_eq!(g[(0, 0)], 4.0 * (4.0 - 5.0) * -2.0);
        assert_abs_diff_eq!(g[(0, 1)], -4.0 * (4.0 - 5.0) * -2.0);
        assert_eq!(g[(1, 0)], 0.0);
    }

    fn layout(points: &[&[f64]]) -> SensorLayout {
        SensorLayout::new(points.iter().map(|p| v(p)).collect()).unwrap()
    }

    #[test]
    fn four_axis_pair_has_one_vertical_row() {
        let l = SensorLayout::symmetric_pair(3, 0.35);
        let idx = SensorIndex::from_counts([2]);
        let (cal, lin) = agent_constraints(0, &idx, &l, &ProprioReading::FourAxis { roll: 0.1, pitch: -0.05 }).unwrap();
        assert_eq!(cal.len(), 1);
        assert_eq!(lin.len(), 1);
    }

    #[test]
    fn six_axis_pair_has_d_rows() {
        let l = SensorLayout::symmetric_pair(3, 0.35);
        let idx = SensorIndex::from_counts([2]);
        let r = ProprioReading::SixAxis { rotation: rotation_from_rpy(0.1, 0.2, 0.3) };
        let (cal, lin) = agent_constraints(0, &idx, &l, &r).unwrap();
        assert!(cal.is_empty());
        assert_eq!(lin.len(), 3);
    }

    #[test]
    fn non_coplanar_distance_only_is_rejected() {
        let l = layout(&[&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let idx = SensorIndex::from_counts([4]);
        assert!(matches!(
            agent_constraints(0, &idx, &l, &ProprioReading::DistanceOnly),
            Err(Error::ModelRejected(_))
        ));
    }

    fn lone_agent(l: SensorLayout, reading: ProprioReading) -> RealizationProblem {
        let idx = SensorIndex::from_counts([l.len()]);
        let (calibrations, linear) = agent_constraints(0, &idx, &l, &reading).unwrap();
        let n = l.len();
        RealizationProblem {
            dim: l.dim(),
            index: idx,
            layouts: vec![l],
            readings: vec![reading],
            terms: vec![],
            calibrations,
            linear,
            anchor_coords: vec![None; n],
            edges: vec![],
        }
    }

    #[test]
    fn five_coplanar_sensors_keep_nine_pairs() {
        let l = layout(&[
            &[0.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[1.0, 1.0, 0.0],
            &[2.0, 0.5, 0.0],
        ]);
        let p = lone_agent(l, ProprioReading::DistanceOnly);
        assert_eq!(p.calibrations.len(), 10);
        assert_eq!(reduce_constraints(&p).calibrations.len(), 9);
    }

    #[test]
    fn two_sensor_agents_are_unchanged() {
        let p = lone_agent(SensorLayout::symmetric_pair(3, 0.35), ProprioReading::FourAxis { roll: 0.0, pitch: 0.0 });
        assert_eq!(reduce_constraints(&p), p);
    }

    #[test]
    fn dependent_vertical_rows_are_dropped() {
        let l = layout(&[&[0.0, 0.3, 0.0], &[0.0, -0.3, 0.0], &[0.4, 0.0, 0.1]]);
        let p = lone_agent(l, ProprioReading::FourAxis { roll: 0.05, pitch: 0.02 });
        // Three vertical rows (one redundant) and two yaw rows.
        assert_eq!(p.linear.len(), 5);
        assert_eq!(reduce_constraints(&p).linear.len(), 4);
    }

    #[test]
    fn perturbed_sensor_residual() {
        let l = SensorLayout::symmetric_pair(3, 0.35);
        let p = lone_agent(l.clone(), ProprioReading::DistanceOnly);
        let mut coords = DMatrix::from_columns(&l.points);
        coords[(0, 0)] += 0.1;
        let report = check_feasibility(&p, &Realization::new(coords));
        // |(0.1, 0.7, 0)|^2 - 0.49 = 0.01.
        assert_abs_diff_eq!(report.calibration[0], 0.01, epsilon = 1e-12);
    }
}
