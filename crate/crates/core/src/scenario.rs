//! Ground-truth scenario generation and measurement simulation.
//!
//! A [`Scenario`] holds agent poses, body-frame sensor layouts, the
//! measurement topology and anchor designations. Measurements and
//! proprioceptive readings are simulated from it with seeded RNG streams so
//! every output is reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    quadratic_surrogate_floored, rot_2d, rotation_from_rpy, DistanceMeasurement, Pose,
    ProprioMode, ProprioReading, Realization, SensorIndex, SensorLayout,
};

/// Lattice or random placement of agent centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// `side^3` agents on a cubic lattice.
    Cube { side: usize, spacing: f64 },
    /// Tetrahedral stack with `levels` layers, `levels (levels+1) (levels+2) / 6` agents.
    Pyramid { levels: usize, spacing: f64 },
    /// Planar hexagonal patch with `rings` rings around a center agent.
    Hexagon { rings: usize, spacing: f64 },
    /// Uniform positions in `[0, extents]`; the extent count sets the dimension.
    RandomBox { count: usize, extents: Vec<f64> },
}

impl Shape {
    pub fn dim(&self) -> usize {
        match self {
            Shape::Hexagon { .. } => 2,
            Shape::RandomBox { extents, .. } => extents.len(),
            _ => 3,
        }
    }

    fn spacing(&self) -> Option<f64> {
        match self {
            Shape::Cube { spacing, .. }
            | Shape::Pyramid { spacing, .. }
            | Shape::Hexagon { spacing, .. } => Some(*spacing),
            Shape::RandomBox { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub shape: Shape,
    /// Every agent links to at least this many nearest agents.
    pub neighbors: usize,
    /// Agents closer than this are always linked. Defaults to
    /// `sqrt(3) * spacing` on lattices and to none for random boxes.
    #[serde(default)]
    pub link_radius: Option<f64>,
    /// Body-frame sensor coordinates shared by every agent, meters.
    pub sensors: Vec<Vec<f64>>,
    pub proprio_mode: ProprioMode,
    /// Ground-truth roll and pitch are drawn uniformly from `+-tilt_bound` rad.
    #[serde(default = "default_tilt")]
    pub tilt_bound: f64,
}

fn default_tilt() -> f64 {
    0.2
}

impl GeneratorSpec {
    /// Lattice spec with the two-sensor layout at `+-0.35 m` on the body y axis.
    pub fn with_pair(shape: Shape, neighbors: usize, proprio_mode: ProprioMode) -> Self {
        let dim = shape.dim();
        let sensors = SensorLayout::symmetric_pair(dim, 0.35)
            .points
            .iter()
            .map(|p| p.iter().copied().collect())
            .collect();
        Self {
            shape,
            neighbors,
            link_radius: None,
            sensors,
            proprio_mode,
            tilt_bound: default_tilt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.shape.dim();
        if dim != 2 && dim != 3 {
            return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
        }
        if let Some(s) = self.shape.spacing() {
            if !(s > 0.0) {
                return Err(invalid("spacing must be positive"));
            }
        }
        if let Shape::RandomBox { extents, count } = &self.shape {
            if extents.iter().any(|e| !(*e > 0.0)) || *count == 0 {
                return Err(invalid("random box needs positive extents and agents"));
            }
        }
        if self.neighbors == 0 {
            return Err(invalid("neighbor count must be at least 1"));
        }
        if self.sensors.is_empty() || self.sensors.iter().any(|s| s.len() != dim) {
            return Err(invalid(format!("sensor layout must have {dim}-dimensional entries")));
        }
        if dim == 2 && self.proprio_mode == ProprioMode::FourAxis {
            return Err(invalid("roll/pitch proprioception is undefined in 2D"));
        }
        Ok(())
    }

    pub fn layout(&self) -> SensorLayout {
        SensorLayout::new(self.sensors.iter().map(|s| DVector::from_vec(s.clone())).collect())
            .expect("validated layout")
    }
}

/// An anchor agent: all of its sensors have (noisy) known world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub agent: usize,
    /// Perturbed world coordinates, one per sensor of the agent.
    pub coords: Vec<DVector<f64>>,
    /// Agents this anchor ranges to in addition to the topology.
    pub partners: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub dim: usize,
    pub poses: Vec<Pose>,
    pub layouts: Vec<SensorLayout>,
    pub modes: Vec<ProprioMode>,
    /// Undirected topology edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub anchors: Vec<Anchor>,
    pub seed: u64,
}

impl Scenario {
    pub fn agent_count(&self) -> usize {
        self.poses.len()
    }

    pub fn sensor_index(&self) -> SensorIndex {
        SensorIndex::from_counts(self.layouts.iter().map(|l| l.len()))
    }

    pub fn ground_truth(&self) -> Realization {
        Realization::from_poses(&self.poses, &self.layouts).expect("consistent scenario")
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.agent_count()];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn is_anchor(&self, agent: usize) -> bool {
        self.anchors.iter().any(|a| a.agent == agent)
    }

    pub fn anchor_sensor_count(&self) -> usize {
        self.anchors.iter().map(|a| a.coords.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agent_count();
        if self.layouts.len() != n || self.modes.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.layouts.len().min(self.modes.len()),
            });
        }
        for (k, (p, l)) in self.poses.iter().zip(&self.layouts).enumerate() {
            if p.dim() != self.dim || l.dim() != self.dim {
                return Err(invalid(format!("agent {k} has the wrong dimension")));
            }
            if p.rotation_defect() > 1e-9 {
                return Err(invalid(format!("agent {k} rotation is not proper")));
            }
        }
        for &(i, j) in &self.edges {
            if i >= j || j >= n {
                return Err(invalid(format!("bad edge ({i}, {j})")));
            }
        }
        for a in &self.anchors {
            if a.agent >= n || a.coords.len() != self.layouts[a.agent].len() {
                return Err(invalid(format!("bad anchor {}", a.agent)));
            }
            if a.partners.iter().any(|&p| p >= n || p == a.agent) {
                return Err(invalid(format!("bad partner list for anchor {}", a.agent)));
            }
        }
        if !is_connected(n, &self.edges) {
            return Err(Error::Generation("topology graph is disconnected".into()));
        }
        Ok(())
    }
}

/// Noisy ranges between sensors, including anchor measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementGraph {
    pub sigma: f64,
    pub measurements: Vec<DistanceMeasurement>,
}

impl MeasurementGraph {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }
}

fn centers(shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    match shape {
        Shape::Cube { side, spacing } => {
            let mut out = Vec::with_capacity(side.pow(3));
            for x in 0..*side {
                for y in 0..*side {
                    for z in 0..*side {
                        out.push(DVector::from_vec(vec![
                            x as f64 * spacing,
                            y as f64 * spacing,
                            z as f64 * spacing,
                        ]));
                    }
                }
            }
            out
        }
        Shape::Pyramid { levels, spacing } => {
            let s = *spacing;
            let e1 = [s, 0.0, 0.0];
            let e2 = [s / 2.0, s * 3f64.sqrt() / 2.0, 0.0];
            let e3 = [s / 2.0, s * 3f64.sqrt() / 6.0, s * (2.0f64 / 3.0).sqrt()];
            let mut out = Vec::new();
            for l in 0..*levels {
                for j in 0..(*levels - l) {
                    for i in 0..(*levels - l - j) {
                        let (a, b, c) = (i as f64, j as f64, l as f64);
                        out.push(DVector::from_fn(3, |k, _| a * e1[k] + b * e2[k] + c * e3[k]));
                    }
                }
            }
            out
        }
        Shape::Hexagon { rings, spacing } => {
            let r = *rings as i64;
            let mut out = Vec::new();
            for q in -r..=r {
                for s in -r..=r {
                    if (q + s).abs() > r {
                        continue;
                    }
                    let (qf, sf) = (q as f64, s as f64);
                    out.push(DVector::from_vec(vec![
                        spacing * (qf + sf / 2.0),
                        spacing * sf * 3f64.sqrt() / 2.0,
                    ]));
                }
            }
            out
        }
        Shape::RandomBox { count, extents } => (0..*count)
            .map(|_| DVector::from_fn(extents.len(), |k, _| rng.random::<f64>() * extents[k]))
            .collect(),
    }
}

/// Links agents within `radius` and every agent to its `k` nearest
/// (ties broken toward the lower index).
pub fn build_topology(centers: &[DVector<f64>], k: usize, radius: Option<f64>) -> Vec<(usize, usize)> {
    let n = centers.len();
    let mut set = std::collections::BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((&centers[i] - &centers[j]).norm(), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (rank, &(dist, j)) in others.iter().enumerate() {
            let within = radius.map(|r| dist <= r).unwrap_or(false);
            if rank < k || within {
                set.insert((i.min(j), i.max(j)));
            } else if radius.map(|r| dist > r).unwrap_or(true) {
                break;
            }
        }
    }
    set.into_iter().collect()
}

pub fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return true;
    }
    let adj = adjacency(n, edges);
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

fn random_rotation(dim: usize, tilt: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let yaw = rng.random::<f64>() * std::f64::consts::TAU;
    if dim == 2 {
        return rot_2d(yaw);
    }
    let roll = (rng.random::<f64>() * 2.0 - 1.0) * tilt;
    let pitch = (rng.random::<f64>() * 2.0 - 1.0) * tilt;
    rotation_from_rpy(roll, pitch, yaw)
}

/// Places agents, draws ground-truth attitudes and builds the topology.
pub fn generate_scenario(spec: &GeneratorSpec, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.shape.dim();
    let cs = centers(&spec.shape, &mut rng);
    if cs.len() < 2 {
        return Err(Error::Generation("need at least two agents".into()));
    }
    let radius = spec
        .link_radius
        .or_else(|| spec.shape.spacing().map(|s| s * 3f64.sqrt() * (1.0 + 1e-9)));
    let edges = build_topology(&cs, spec.neighbors, radius);
    if !is_connected(cs.len(), &edges) {
        let comps = components(cs.len(), &edges);
        return Err(Error::Generation(format!(
            "topology with k={} and radius {:?} splits into {} components",
            spec.neighbors, radius, comps
        )));
    }
    let layout = spec.layout();
    let poses = cs
        .into_iter()
        .map(|t| Pose {
            rotation: random_rotation(dim, spec.tilt_bound, &mut rng),
            translation: t,
        })
        .collect::<Vec<_>>();
    let n = poses.len();
    Ok(Scenario {
        dim,
        poses,
        layouts: vec![layout; n],
        modes: vec![spec.proprio_mode; n],
        edges,
        anchors: Vec::new(),
        seed,
    })
}

fn components(n: usize, edges: &[(usize, usize)]) -> usize {
    let adj = adjacency(n, edges);
    let mut seen = vec![false; n];
    let mut count = 0;
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    count
}

/// `count` agents spread out by farthest-point sampling from agent 0.
pub fn spread_anchor_ids(scenario: &Scenario, count: usize) -> Vec<usize> {
    let n = scenario.agent_count();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let t = |k: usize| &scenario.poses[k].translation;
    let mut chosen = vec![0usize];
    let mut best: Vec<f64> = (0..n).map(|k| (t(k) - t(0)).norm()).collect();
    while chosen.len() < count {
        let mut pick = 0;
        let mut far = -1.0;
        for k in 0..n {
            if best[k] > far + 1e-12 {
                far = best[k];
                pick = k;
            }
        }
        chosen.push(pick);
        for k in 0..n {
            best[k] = best[k].min((t(k) - t(pick)).norm());
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Marks `anchor_ids` as anchors with coordinates perturbed by isotropic
/// Gaussian noise and assigns each `per_anchor` partner agents.
pub fn designate_anchors(
    scenario: &Scenario,
    anchor_ids: &[usize],
    per_anchor: usize,
    anchor_noise: f64,
    seed: u64,
) -> Result<Scenario> {
    let n = scenario.agent_count();
    if let Some(&bad) = anchor_ids.iter().find(|&&a| a >= n) {
        return Err(invalid(format!("anchor {bad} is not an agent")));
    }
    if !(anchor_noise >= 0.0) {
        return Err(invalid("anchor noise must be non-negative"));
    }
    let mut ids = anchor_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1c4_0e55);
    let normal = Normal::new(0.0, anchor_noise.max(0.0)).expect("finite");
    let candidates: Vec<usize> = (0..n).filter(|k| ids.binary_search(k).is_err()).collect();
    let truth = scenario.ground_truth();
    let idx = scenario.sensor_index();
    let mut anchors = Vec::with_capacity(ids.len());
    for &a in &ids {
        let coords = idx
            .columns(a)
            .map(|c| {
                let mut p = truth.point(c);
                if anchor_noise > 0.0 {
                    for v in p.iter_mut() {
                        *v += normal.sample(&mut rng);
                    }
                }
                p
            })
            .collect();
        let take = per_anchor.min(candidates.len());
        let mut partners: Vec<usize> = sample(&mut rng, candidates.len(), take)
            .into_iter()
            .map(|k| candidates[k])
            .collect();
        partners.sort_unstable();
        anchors.push(Anchor {
            agent: a,
            coords,
            partners,
        });
    }
    let out = Scenario {
        anchors,
        ..scenario.clone()
    };
    if out.anchor_sensor_count() < out.dim + 1 {
        warn!(
            "only {} anchor sensors; at least {} are needed for a unique anchored solution",
            out.anchor_sensor_count(),
            out.dim + 1
        );
    }
    Ok(out)
}

/// Sensor pairs measured across topology edges, then anchor pairs, in a
/// fixed order.
pub fn measurement_pairs(scenario: &Scenario) -> Vec<(usize, usize, usize, usize, bool)> {
    let mut out = Vec::new();
    for &(i, j) in &scenario.edges {
        for u in 0..scenario.layouts[i].len() {
            for v in 0..scenario.layouts[j].len() {
                out.push((i, u, j, v, false));
            }
        }
    }
    for a in &scenario.anchors {
        for &j in &a.partners {
            for u in 0..scenario.layouts[a.agent].len() {
                for v in 0..scenario.layouts[j].len() {
                    out.push((a.agent, u, j, v, true));
                }
            }
        }
    }
    out
}

/// Simulates every range with additive Gaussian noise and converts it to a
/// quadratic surrogate.
pub fn simulate_measurements(scenario: &Scenario, sigma: f64, seed: u64) -> Result<MeasurementGraph> {
    if !(sigma >= 0.0) {
        return Err(invalid("noise level must be non-negative"));
    }
    let truth = scenario.ground_truth();
    simulate_on(scenario, &truth, sigma, seed)
}

/// As [`simulate_measurements`] but against an arbitrary realization.
pub fn simulate_on(
    scenario: &Scenario,
    truth: &Realization,
    sigma: f64,
    seed: u64,
) -> Result<MeasurementGraph> {
    let idx = scenario.sensor_index();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let measurements = measurement_pairs(scenario)
        .into_iter()
        .map(|(i, u, j, v, from_anchor)| {
            let a = idx.column(i, u);
            let b = idx.column(j, v);
            let d = (truth.coords.column(a) - truth.coords.column(b)).norm();
            let noise: f64 = if sigma > 0.0 {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let distance = (d + noise).max(0.0);
            let (q, sigma_q) = quadratic_surrogate_floored(distance, sigma);
            DistanceMeasurement {
                agent_a: i,
                sensor_a: u,
                agent_b: j,
                sensor_b: v,
                distance,
                q,
                sigma_q,
                from_anchor,
            }
        })
        .collect();
    Ok(MeasurementGraph { sigma, measurements })
}

/// Attitude readings with uniform angle errors in `+-bound`.
pub fn simulate_proprioception(scenario: &Scenario, bound: f64, seed: u64) -> Vec<ProprioReading> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1f0_5eed);
    let mut err = || {
        if bound > 0.0 {
            (rng.random::<f64>() * 2.0 - 1.0) * bound
        } else {
            0.0
        }
    };
    scenario
        .poses
        .iter()
        .zip(&scenario.modes)
        .map(|(pose, mode)| match mode {
            ProprioMode::DistanceOnly => ProprioReading::DistanceOnly,
            ProprioMode::FourAxis => {
                let (roll, pitch, _) = crate::geometry::rpy_from_rotation(&pose.rotation);
                ProprioReading::FourAxis {
                    roll: roll + err(),
                    pitch: pitch + err(),
                }
            }
            ProprioMode::SixAxis => {
                if pose.dim() == 2 {
                    let yaw = pose.rotation[(1, 0)].atan2(pose.rotation[(0, 0)]);
                    ProprioReading::SixAxis {
                        rotation: rot_2d(yaw + err()),
                    }
                } else {
                    let (roll, pitch, yaw) = crate::geometry::rpy_from_rotation(&pose.rotation);
                    ProprioReading::SixAxis {
                        rotation: rotation_from_rpy(roll + err(), pitch + err(), yaw + err()),
                    }
                }
            }
        })
        .collect()
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Attitude consistent with the reading, with unobserved angles drawn at random.
pub fn rotation_guess(reading: &ProprioReading, dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let yaw = rng.random::<f64>() * std::f64::consts::TAU;
    match reading {
        ProprioReading::SixAxis { rotation } => rotation.clone(),
        ProprioReading::FourAxis { roll, pitch } => rotation_from_rpy(*roll, *pitch, yaw),
        ProprioReading::DistanceOnly if dim == 2 => rot_2d(yaw),
        ProprioReading::DistanceOnly => {
            let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q));
            let m = uq.to_rotation_matrix();
            DMatrix::from_fn(3, 3, |r, c| m[(r, c)])
        }
    }
}

/// Realization whose agent centers sit at distance `rho` from the truth in a
/// uniformly random direction, with attitudes consistent with the readings.
pub fn sample_initial_guess(
    scenario: &Scenario,
    readings: &[ProprioReading],
    rho: f64,
    seed: u64,
) -> Result<Realization> {
    if !(rho >= 0.0) {
        return Err(invalid("rho must be non-negative"));
    }
    if rho == 0.0 {
        return Ok(scenario.ground_truth());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1417_0000);
    let poses: Vec<Pose> = scenario
        .poses
        .iter()
        .zip(readings)
        .map(|(pose, reading)| {
            let dir = random_unit(scenario.dim, &mut rng);
            Pose {
                rotation: rotation_guess(reading, scenario.dim, &mut rng),
                translation: &pose.translation + dir * rho,
            }
        })
        .collect();
    Realization::from_poses(&poses, &scenario.layouts)
}

// ---------------------------------------------------------------------------
// Bias calibration

/// One row of a recorded range log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub timestamp: f64,
    pub i: usize,
    pub u: usize,
    pub j: usize,
    pub v: usize,
    pub d_measured: f64,
    pub d_truth: f64,
}

/// Unordered sensor pair key.
pub type PairKey = ((usize, usize), (usize, usize));

pub fn pair_key(i: usize, u: usize, j: usize, v: usize) -> PairKey {
    let a = (i, u);
    let b = (j, v);
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BiasTable {
    pub biases: BTreeMap<PairKey, f64>,
}

impl BiasTable {
    pub fn get(&self, i: usize, u: usize, j: usize, v: usize) -> Option<f64> {
        self.biases.get(&pair_key(i, u, j, v)).copied()
    }
}

/// Mean of `measured - truth` per unordered sensor pair.
pub fn calibrate_bias(log: &[LogRecord]) -> BiasTable {
    let mut acc: BTreeMap<PairKey, (f64, usize)> = BTreeMap::new();
    for r in log {
        let e = acc.entry(pair_key(r.i, r.u, r.j, r.v)).or_insert((0.0, 0));
        e.0 += r.d_measured - r.d_truth;
        e.1 += 1;
    }
    BiasTable {
        biases: acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
    }
}

/// Subtracts per-pair biases and recomputes surrogates. Returns the corrected
/// graph and the indices of measurements that had no table entry.
pub fn apply_bias_correction(graph: &MeasurementGraph, table: &BiasTable) -> (MeasurementGraph, Vec<usize>) {
    let mut missing = Vec::new();
    let measurements = graph
        .measurements
        .iter()
        .enumerate()
        .map(|(k, m)| match table.get(m.agent_a, m.sensor_a, m.agent_b, m.sensor_b) {
            Some(b) => {
                let distance = (m.distance - b).max(0.0);
                let (q, sigma_q) = quadratic_surrogate_floored(distance, graph.sigma);
                DistanceMeasurement {
                    distance,
                    q,
                    sigma_q,
                    ..*m
                }
            }
            None => {
                missing.push(k);
                *m
            }
        })
        .collect();
    (
        MeasurementGraph {
            sigma: graph.sigma,
            measurements,
        },
        missing,
    )
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_log_csv(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Synthetic calibration log: `samples` ranges per measured pair with a
/// per-pair constant offset from `offsets` and Gaussian jitter `sigma`.
pub fn synthetic_log(
    scenario: &Scenario,
    offsets: &BTreeMap<PairKey, f64>,
    samples: usize,
    sigma: f64,
    seed: u64,
) -> Vec<LogRecord> {
    let truth = scenario.ground_truth();
    let idx = scenario.sensor_index();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, u, j, v, _) in measurement_pairs(scenario) {
        let key = pair_key(i, u, j, v);
        let Some(&off) = offsets.get(&key) else { continue };
        let d = (truth.coords.column(idx.column(i, u)) - truth.coords.column(idx.column(j, v))).norm();
        for s in 0..samples {
            let jitter = if sigma > 0.0 {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            out.push(LogRecord {
                timestamp: s as f64 * 0.1,
                i,
                u,
                j,
                v,
                d_measured: d + off + jitter,
                d_truth: d,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scenario files

#[derive(Debug, Serialize, Deserialize)]
struct PoseDto {
    rotation: Vec<Vec<f64>>,
    translation: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentDto {
    id: usize,
    pose: PoseDto,
    sensors: Vec<Vec<f64>>,
    proprio_mode: ProprioMode,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnchorDto {
    agent: usize,
    coords: Vec<Vec<f64>>,
    partners: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioDto {
    length_unit: String,
    angle_unit: String,
    dimension: usize,
    seed: u64,
    agents: Vec<AgentDto>,
    edges: Vec<[usize; 2]>,
    anchors: Vec<AnchorDto>,
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn scenario_to_json(s: &Scenario) -> Result<String> {
    let dto = ScenarioDto {
        length_unit: "m".into(),
        angle_unit: "rad".into(),
        dimension: s.dim,
        seed: s.seed,
        agents: (0..s.agent_count())
            .map(|k| AgentDto {
                id: k,
                pose: PoseDto {
                    rotation: mat_rows(&s.poses[k].rotation),
                    translation: s.poses[k].translation.iter().copied().collect(),
                },
                sensors: s.layouts[k].points.iter().map(|p| p.iter().copied().collect()).collect(),
                proprio_mode: s.modes[k],
            })
            .collect(),
        edges: s.edges.iter().map(|&(i, j)| [i, j]).collect(),
        anchors: s
            .anchors
            .iter()
            .map(|a| AnchorDto {
                agent: a.agent,
                coords: a.coords.iter().map(|p| p.iter().copied().collect()).collect(),
                partners: a.partners.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&dto)?)
}

pub fn scenario_from_json(text: &str) -> Result<Scenario> {
    let dto: ScenarioDto = serde_json::from_str(text)?;
    if dto.length_unit != "m" || dto.angle_unit != "rad" {
        return Err(Error::Config("scenario files must use meters and radians".into()));
    }
    let d = dto.dimension;
    let mut agents = dto.agents;
    agents.sort_by_key(|a| a.id);
    if agents.iter().enumerate().any(|(k, a)| a.id != k) {
        return Err(Error::Config("agent ids must be contiguous from 0".into()));
    }
    let mut poses = Vec::new();
    let mut layouts = Vec::new();
    let mut modes = Vec::new();
    for a in agents {
        if a.pose.rotation.len() != d || a.pose.rotation.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: a.pose.rotation.len(),
            });
        }
        let rot = DMatrix::from_fn(d, d, |r, c| a.pose.rotation[r][c]);
        poses.push(Pose::new(rot, DVector::from_vec(a.pose.translation))?);
        layouts.push(SensorLayout::new(a.sensors.into_iter().map(DVector::from_vec).collect())?);
        modes.push(a.proprio_mode);
    }
    let mut edges: Vec<(usize, usize)> = dto
        .edges
        .into_iter()
        .map(|[i, j]| (i.min(j), i.max(j)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    let s = Scenario {
        dim: d,
        poses,
        layouts,
        modes,
        edges,
        anchors: dto
            .anchors
            .into_iter()
            .map(|a| Anchor {
                agent: a.agent,
                coords: a.coords.into_iter().map(DVector::from_vec).collect(),
                partners: a.partners,
            })
            .collect(),
        seed: dto.seed,
    };
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cube(side: usize, spacing: f64, k: usize) -> GeneratorSpec {
        GeneratorSpec::with_pair(Shape::Cube { side, spacing }, k, ProprioMode::FourAxis)
    }

    #[test]
    fn cube_of_two_is_the_unit_lattice() {
        let s = generate_scenario(&cube(2, 3.0, 3), 1).unwrap();
        assert_eq!(s.agent_count(), 8);
        for p in &s.poses {
            for v in p.translation.iter() {
                assert!(*v == 0.0 || *v == 3.0);
            }
        }
    }

    #[test]
    fn cube_degrees() {
        let s = generate_scenario(&cube(5, 3.0, 9), 1).unwrap();
        let deg = s.degrees();
        assert_eq!(s.agent_count(), 125);
        assert_eq!((*deg.iter().max().unwrap(), *deg.iter().min().unwrap()), (26, 9));
    }

    #[test]
    fn hexagon_degrees() {
        let spec = GeneratorSpec::with_pair(
            Shape::Hexagon { rings: 8, spacing: 3.0 },
            5,
            ProprioMode::DistanceOnly,
        );
        let s = generate_scenario(&spec, 1).unwrap();
        let deg = s.degrees();
        assert_eq!(s.agent_count(), 217);
        assert_eq!((*deg.iter().max().unwrap(), *deg.iter().min().unwrap()), (12, 5));
    }

    #[test]
    fn pyramid_count() {
        let spec = GeneratorSpec::with_pair(Shape::Pyramid { levels: 8, spacing: 4.0 }, 6, ProprioMode::FourAxis);
        assert_eq!(generate_scenario(&spec, 0).unwrap().agent_count(), 120);
    }

    #[test]
    fn disconnected_topology_is_reported() {
        let mut spec = GeneratorSpec::with_pair(
            Shape::RandomBox { count: 2, extents: vec![100.0, 100.0, 100.0] },
            1,
            ProprioMode::FourAxis,
        );
        spec.neighbors = 1;
        // Two agents with k=1 are always connected; three far clusters are not.
        assert!(generate_scenario(&spec, 3).is_ok());
        let cs = vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![50.0, 0.0]),
            DVector::from_vec(vec![51.0, 0.0]),
        ];
        assert!(!is_connected(4, &build_topology(&cs, 1, None)));
    }

    #[test]
    fn zero_noise_surrogate_is_exact() {
        let s = generate_scenario(&cube(2, 3.0, 3), 4).unwrap();
        let g = simulate_measurements(&s, 0.0, 9).unwrap();
        let truth = s.ground_truth();
        let idx = s.sensor_index();
        for m in &g.measurements {
            let d = (truth.coords.column(idx.column(m.agent_a, m.sensor_a))
                - truth.coords.column(idx.column(m.agent_b, m.sensor_b)))
            .norm();
            assert_abs_diff_eq!(m.q, d * d, epsilon = 1e-12);
        }
    }

    #[test]
    fn measurements_are_deterministic_and_weighted() {
        let s = generate_scenario(&cube(3, 3.0, 6), 2).unwrap();
        let a = simulate_measurements(&s, 0.1, 5).unwrap();
        let b = simulate_measurements(&s, 0.1, 5).unwrap();
        assert_eq!(a, b);
        for m in &a.measurements {
            let (q, sq) = crate::geometry::quadratic_surrogate(m.distance, 0.1).unwrap();
            assert_eq!(m.q, q);
            assert_eq!(m.sigma_q, sq);
        }
        let expected: usize = s.edges.len() * 4;
        assert_eq!(a.len(), expected);
    }

    #[test]
    fn proprioception_error_bounds() {
        let s = generate_scenario(&cube(3, 3.0, 6), 2).unwrap();
        let bound = 1.5f64.to_radians();
        let r = simulate_proprioception(&s, bound, 1);
        for (pose, reading) in s.poses.iter().zip(&r) {
            let (roll, pitch, _) = crate::geometry::rpy_from_rotation(&pose.rotation);
            match reading {
                ProprioReading::FourAxis { roll: r, pitch: p } => {
                    assert!((r - roll).abs() <= bound && (p - pitch).abs() <= bound);
                }
                _ => panic!("wrong mode"),
            }
        }
        let exact = simulate_proprioception(&s, 0.0, 1);
        for (pose, reading) in s.poses.iter().zip(&exact) {
            let (roll, pitch, _) = crate::geometry::rpy_from_rotation(&pose.rotation);
            assert_eq!(reading, &ProprioReading::FourAxis { roll, pitch });
        }
    }

    #[test]
    fn initial_guess_radius() {
        let s = generate_scenario(&cube(3, 3.0, 6), 2).unwrap();
        let r = simulate_proprioception(&s, 0.0, 1);
        assert_eq!(sample_initial_guess(&s, &r, 0.0, 3).unwrap(), s.ground_truth());
        let g = sample_initial_guess(&s, &r, 6.0, 3).unwrap();
        let idx = s.sensor_index();
        for (k, pose) in s.poses.iter().enumerate() {
            let c = (g.point(idx.column(k, 0)) + g.point(idx.column(k, 1))) / 2.0;
            assert!((c - &pose.translation).norm() <= 6.0 + 1e-9);
            let sep = (g.point(idx.column(k, 0)) - g.point(idx.column(k, 1))).norm();
            assert_abs_diff_eq!(sep, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn anchors_pick_partners_outside_the_anchor_set() {
        let s = generate_scenario(&cube(3, 3.0, 6), 2).unwrap();
        let ids = spread_anchor_ids(&s, 2);
        let a = designate_anchors(&s, &ids, 10, 0.0, 7).unwrap();
        assert_eq!(a.anchors.len(), 2);
        for an in &a.anchors {
            assert_eq!(an.partners.len(), 10);
            assert!(an.partners.iter().all(|p| !ids.contains(p)));
        }
        let g = simulate_measurements(&a, 0.1, 1).unwrap();
        assert_eq!(g.len(), s.edges.len() * 4 + 2 * 10 * 4);
    }

    #[test]
    fn bias_calibration_constant_offset() {
        let s = generate_scenario(&cube(2, 3.0, 3), 1).unwrap();
        let mut offsets = BTreeMap::new();
        offsets.insert(pair_key(0, 0, 1, 0), 0.2);
        let log = synthetic_log(&s, &offsets, 50, 0.0, 3);
        let t = calibrate_bias(&log);
        assert_abs_diff_eq!(t.get(1, 0, 0, 0).unwrap(), 0.2, epsilon = 1e-12);
        assert!(calibrate_bias(&[]).biases.is_empty());
    }

    #[test]
    fn bias_correction_flags_missing_pairs() {
        let s = generate_scenario(&cube(2, 3.0, 3), 1).unwrap();
        let g = simulate_measurements(&s, 0.1, 1).unwrap();
        let (same, missing) = apply_bias_correction(&g, &BiasTable::default());
        assert_eq!(same, g);
        assert_eq!(missing.len(), g.len());
    }

    #[test]
    fn json_round_trip() {
        let s = generate_scenario(&cube(2, 3.0, 3), 1).unwrap();
        let s = designate_anchors(&s, &[0], 3, 0.05, 2).unwrap();
        let back = scenario_from_json(&scenario_to_json(&s).unwrap()).unwrap();
        assert_eq!(back.edges, s.edges);
        assert_eq!(back.anchors, s.anchors);
        for (a, b) in back.poses.iter().zip(&s.poses) {
            assert_abs_diff_eq!(a.rotation, b.rotation, epsilon = 0.0);
        }
    }
}
