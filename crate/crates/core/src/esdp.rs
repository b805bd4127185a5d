//! Anchored edge-based semidefinite relaxation solved by block coordinate
//! descent.
//!
//! The lifted Gram matrix is only kept along measurement edges: each sensor
//! has a diagonal entry `X_ss`, each intra-agent calibration pair an entry
//! `X_uv`, and each measured sensor pair across agents an entry `X_st`. The
//! positive semidefinite conditions on the retained principal submatrices
//! reduce, per block, to scalar conic inequalities handled by a log barrier
//! and an equality-constrained Newton method.
//!
//! Cross entries belong to both endpoint blocks and are re-optimized by
//! whichever endpoint is swept; adjacent agents never share a color, so
//! concurrent sweeps never write the same entry.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot_x, rot_y, rot_z, ProprioReading, Realization};
use crate::linalg::solve_kkt;
use crate::model::RealizationProblem;
use crate::partition::{schedule, BlockPartition, Coloring, SolverKind};
use crate::schedule::{sweep, SweepTiming};

/// Neighbor slacks are floored here so the edge inequality stays defined.
pub const SLACK_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
struct CrossPair {
    /// Column with the smaller index.
    s: usize,
    t: usize,
    weight: f64,
    q_bar: f64,
    /// `sum w q^2 - W q_bar^2`, so the merged square reproduces the raw sum.
    offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct AnchorTerm {
    s: usize,
    a: DVector<f64>,
    weight: f64,
    q: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct IntraPair {
    a: usize,
    b: usize,
    target: f64,
}

#[derive(Debug, Clone, Default)]
struct AgentBlock {
    cols: Vec<usize>,
    intra: Vec<usize>,
    cross: Vec<usize>,
    anchor_terms: Vec<usize>,
    linear: (DMatrix<f64>, DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct EsdpModel {
    pub problem: RealizationProblem,
    fixed: Vec<bool>,
    cross: Vec<CrossPair>,
    anchor_terms: Vec<AnchorTerm>,
    intra: Vec<IntraPair>,
    /// Constant contribution of measurements between two anchored sensors.
    constant: f64,
    weight_scale: f64,
    blocks: Vec<AgentBlock>,
    partition: BlockPartition,
    coloring: Coloring,
}

impl EsdpModel {
    /// Builds the relaxation. Anchored sensors are fixed to their anchor
    /// coordinates with `X_ss = |a|^2`; at least one anchor is required.
    pub fn new(problem: &RealizationProblem) -> Result<Self> {
        if !problem.has_anchors() {
            return Err(Error::ModelRejected(
                "the relaxation needs anchors: without absolute information the coordinate block collapses to a trivial point".into(),
            ));
        }
        let idx = &problem.index;
        let agents = problem.agent_count();
        for a in 0..agents {
            let anchored = idx.columns(a).filter(|&c| problem.anchor_coords[c].is_some()).count();
            if anchored != 0 && anchored != idx.count(a) {
                return Err(Error::ModelRejected(format!("agent {a} is only partially anchored")));
            }
        }
        let anchor_sensors = problem.anchor_coords.iter().filter(|a| a.is_some()).count();
        if anchor_sensors < problem.dim + 1 {
            warn!(
                "{anchor_sensors} anchor sensors; at least {} are needed for a unique anchored solution",
                problem.dim + 1
            );
        }
        let fixed: Vec<bool> = problem.anchor_coords.iter().map(|a| a.is_some()).collect();
        let weight_scale = 1.0 / problem.mean_weight();

        let mut pair_terms: std::collections::BTreeMap<(usize, usize), Vec<(f64, f64)>> = Default::default();
        let mut anchor_terms = Vec::new();
        let mut constant = 0.0;
        for t in &problem.terms {
            let (i, j) = (idx.owner(t.a), idx.owner(t.b));
            if i == j {
                return Err(Error::ModelRejected(format!(
                    "measurement between sensors {} and {} of the same agent",
                    t.a, t.b
                )));
            }
            match (fixed[t.a], fixed[t.b]) {
                (true, true) => {
                    let a = problem.anchor_coords[t.a].as_ref().unwrap();
                    let b = problem.anchor_coords[t.b].as_ref().unwrap();
                    let r = (a - b).norm_squared() - t.q;
                    constant += t.weight * r * r;
                }
                (false, true) | (true, false) => {
                    let (s, fixed_col) = if fixed[t.b] { (t.a, t.b) } else { (t.b, t.a) };
                    anchor_terms.push(AnchorTerm {
                        s,
                        a: problem.anchor_coords[fixed_col].clone().unwrap(),
                        weight: t.weight,
                        q: t.q,
                    });
                }
                (false, false) => {
                    pair_terms
                        .entry((t.a.min(t.b), t.a.max(t.b)))
                        .or_default()
                        .push((t.weight, t.q));
                }
            }
        }
        let cross: Vec<CrossPair> = pair_terms
            .into_iter()
            .map(|((s, t), list)| {
                let w: f64 = list.iter().map(|(w, _)| w).sum();
                let q_bar = list.iter().map(|(w, q)| w * q).sum::<f64>() / w;
                let offset = list.iter().map(|(w, q)| w * q * q).sum::<f64>() - w * q_bar * q_bar;
                CrossPair {
                    s,
                    t,
                    weight: w,
                    q_bar,
                    offset,
                }
            })
            .collect();
        let intra: Vec<IntraPair> = problem
            .calibrations
            .iter()
            .filter(|c| !fixed[c.a])
            .map(|c| IntraPair {
                a: c.a,
                b: c.b,
                target: c.target,
            })
            .collect();

        let mut blocks: Vec<AgentBlock> = (0..agents)
            .map(|a| AgentBlock {
                cols: idx.columns(a).collect(),
                linear: problem.linear_system(a),
                ..Default::default()
            })
            .collect();
        for (k, p) in intra.iter().enumerate() {
            blocks[idx.owner(p.a)].intra.push(k);
        }
        for (k, c) in cross.iter().enumerate() {
            blocks[idx.owner(c.s)].cross.push(k);
            blocks[idx.owner(c.t)].cross.push(k);
        }
        for (k, a) in anchor_terms.iter().enumerate() {
            blocks[idx.owner(a.s)].anchor_terms.push(k);
        }
        let frozen: Vec<bool> = (0..agents).map(|a| problem.is_anchored_agent(a)).collect();
        let (partition, _, coloring) = schedule(problem, SolverKind::Esdp, &frozen)?;
        Ok(Self {
            problem: problem.clone(),
            fixed,
            cross,
            anchor_terms,
            intra,
            constant,
            weight_scale,
            blocks,
            partition,
            coloring,
        })
    }

    pub fn dim(&self) -> usize {
        self.problem.dim
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn coloring(&self) -> &Coloring {
        &self.coloring
    }

    pub fn cross_count(&self) -> usize {
        self.cross.len()
    }

    pub fn intra_count(&self) -> usize {
        self.intra.len()
    }

    /// Weighted objective of the relaxation at `state` (raw weights).
    pub fn objective(&self, state: &EsdpState) -> f64 {
        let mut f = self.constant;
        for c in &self.cross {
            let l = state.xdiag[c.s] + state.xdiag[c.t] - 2.0 * state.xcross[self.cross_index(c)] - c.q_bar;
            f += c.weight * l * l + c.offset;
        }
        for a in &self.anchor_terms {
            let r = state.xdiag[a.s] - 2.0 * a.a.dot(&state.p.column(a.s)) + a.a.norm_squared() - a.q;
            f += a.weight * r * r;
        }
        f
    }

    fn cross_index(&self, c: &CrossPair) -> usize {
        // Pairs are stored sorted, so binary search recovers the index.
        self.cross
            .binary_search_by(|x| (x.s, x.t).cmp(&(c.s, c.t)))
            .expect("pair exists")
    }

    fn slack(&self, state: &EsdpState, col: usize) -> f64 {
        state.xdiag[col] - state.p.column(col).norm_squared()
    }

    /// Largest violation over all conic and equality constraints.
    pub fn max_violation(&self, state: &EsdpState) -> f64 {
        let n = self.problem.sensor_count();
        let mut worst = 0.0f64;
        for c in 0..n {
            if !self.fixed[c] {
                worst = worst.max(-self.slack(state, c));
            }
        }
        for (k, c) in self.cross.iter().enumerate() {
            let m = edge_matrix(state, c.s, c.t, state.xcross[k]);
            worst = worst.max(-crate::linalg::min_eigenvalue(&m));
        }
        for (k, ip) in self.intra.iter().enumerate() {
            // Anchored pairs are data, not decision variables.
            if self.fixed[ip.a] && self.fixed[ip.b] {
                continue;
            }
            let m = edge_matrix(state, ip.a, ip.b, state.xintra[k]);
            worst = worst.max(-crate::linalg::min_eigenvalue(&m));
            let eq = state.xdiag[ip.a] + state.xdiag[ip.b] - 2.0 * state.xintra[k] - ip.target;
            worst = worst.max(eq.abs());
        }
        let d = self.dim();
        for r in &self.problem.linear {
            let cols = self.problem.index.columns(r.agent);
            if cols.clone().all(|c| self.fixed[c]) {
                continue;
            }
            let base = cols.start;
            let lhs: f64 = r
                .coeffs
                .iter()
                .enumerate()
                .map(|(k, v)| v * state.p[(k % d, base + k / d)])
                .sum();
            worst = worst.max((lhs - r.rhs).abs());
        }
        worst
    }
}

/// The `(d+2) x (d+2)` principal submatrix of the lifted matrix for sensors `a, b`.
pub fn edge_matrix(state: &EsdpState, a: usize, b: usize, xab: f64) -> DMatrix<f64> {
    let d = state.p.nrows();
    let mut m = DMatrix::zeros(d + 2, d + 2);
    for k in 0..d {
        m[(k, k)] = 1.0;
        m[(k, d)] = state.p[(k, a)];
        m[(d, k)] = state.p[(k, a)];
        m[(k, d + 1)] = state.p[(k, b)];
        m[(d + 1, k)] = state.p[(k, b)];
    }
    m[(d, d)] = state.xdiag[a];
    m[(d + 1, d + 1)] = state.xdiag[b];
    m[(d, d + 1)] = xab;
    m[(d + 1, d)] = xab;
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsdpState {
    pub p: DMatrix<f64>,
    pub xdiag: DVector<f64>,
    pub xintra: Vec<f64>,
    pub xcross: Vec<f64>,
}

impl EsdpState {
    pub fn realization(&self) -> Realization {
        Realization::new(self.p.clone())
    }

    pub fn slacks(&self) -> DVector<f64> {
        DVector::from_fn(self.p.ncols(), |c, _| self.xdiag[c] - self.p.column(c).norm_squared())
    }
}

/// Horizontal shrink applied to each agent's layout at initialization so the
/// calibration pairs start strictly inside the relaxation.
const INIT_SHRINK: f64 = 0.9;

/// Strictly feasible starting point. Each free agent is placed at the
/// centroid of its `p0` columns (or the origin) with an attitude consistent
/// with its reading and the yaw suggested by `p0`, its layout shrunk
/// horizontally, and every diagonal slack set to `s0`.
pub fn init_state(model: &EsdpModel, p0: Option<&Realization>, s0: f64) -> EsdpState {
    let prob = &model.problem;
    let d = prob.dim;
    let n = prob.sensor_count();
    let mut p = DMatrix::zeros(d, n);
    for (agent, blk) in model.blocks.iter().enumerate() {
        if model.fixed[blk.cols[0]] {
            for &c in &blk.cols {
                p.set_column(c, prob.anchor_coords[c].as_ref().unwrap());
            }
            continue;
        }
        let layout = &prob.layouts[agent];
        let center = match p0 {
            Some(p0) => blk.cols.iter().map(|&c| p0.point(c)).sum::<DVector<f64>>() / blk.cols.len() as f64,
            None => DVector::zeros(d),
        };
        let nu_center = layout.points.iter().sum::<DVector<f64>>() / layout.len() as f64;
        let yaw = p0
            .and_then(|p0| crate::recover::yaw_hint(prob, agent, p0))
            .unwrap_or(0.0);
        for (u, &c) in blk.cols.iter().enumerate() {
            let body = &layout.points[u] - &nu_center;
            let world = match &prob.readings[agent] {
                ProprioReading::SixAxis { rotation } => rotation * &body,
                ProprioReading::FourAxis { roll, pitch } => {
                    let mut tilted = rot_y(*pitch) * rot_x(*roll) * &body;
                    tilted[0] *= INIT_SHRINK;
                    tilted[1] *= INIT_SHRINK;
                    rot_z(yaw) * tilted
                }
                ProprioReading::DistanceOnly => {
                    let r = if d == 2 {
                        crate::geometry::rot_2d(yaw)
                    } else {
                        rot_z(yaw)
                    };
                    r * &body * INIT_SHRINK
                }
            };
            p.set_column(c, &(&center + world));
        }
    }
    let xdiag = DVector::from_fn(n, |c, _| {
        let base = p.column(c).norm_squared();
        if model.fixed[c] {
            base
        } else {
            base + s0
        }
    });
    let xintra = model
        .intra
        .iter()
        .map(|ip| (xdiag[ip.a] + xdiag[ip.b] - ip.target) / 2.0)
        .collect();
    let xcross = model
        .cross
        .iter()
        .map(|c| p.column(c.s).dot(&p.column(c.t)))
        .collect();
    EsdpState {
        p,
        xdiag,
        xintra,
        xcross,
    }
}

#[derive(Debug, Clone)]
struct CrossSlot {
    local: usize,
    p_hat: DVector<f64>,
    x_hat: f64,
    s_hat: f64,
    weight: f64,
    q_bar: f64,
}

#[derive(Debug, Clone)]
struct AnchorSlot {
    local: usize,
    a: DVector<f64>,
    a_sq: f64,
    weight: f64,
    q: f64,
}

#[derive(Debug, Clone)]
struct IntraSlot {
    u: usize,
    v: usize,
}

/// One agent's convex subproblem with every other block fixed.
///
/// Core variables are ordered `[p_0 .. p_{nb-1}, X_00 .. X_{nb-1}, X_pairs]`;
/// cross entries form a separate vector and are eliminated in the Newton
/// system since each only couples to its own sensor's core variables.
#[derive(Debug, Clone)]
pub struct BlockSubproblem {
    pub agent: usize,
    dim: usize,
    nb: usize,
    cross: Vec<CrossSlot>,
    anchors: Vec<AnchorSlot>,
    intra: Vec<IntraSlot>,
    eq_c: DMatrix<f64>,
    eq_e: DVector<f64>,
    pub core: DVector<f64>,
    pub cross_values: DVector<f64>,
    /// Number of neighbor slacks that had to be floored.
    pub floored: usize,
}

impl BlockSubproblem {
    pub fn core_len(&self) -> usize {
        self.nb * self.dim + self.nb + self.intra.len()
    }

    pub fn cross_len(&self) -> usize {
        self.cross.len()
    }

    pub fn equality_rows(&self) -> usize {
        self.eq_c.nrows()
    }

    /// Largest equality residual at `z`.
    pub fn equality_residual(&self, z: &DVector<f64>) -> f64 {
        (&self.eq_c * z - &self.eq_e).amax()
    }

    /// Counts of (diagonal, edge, pair) conic constraints.
    pub fn constraint_counts(&self) -> (usize, usize, usize) {
        (self.nb, self.cross.len(), self.intra.len())
    }

    fn p(&self, z: &DVector<f64>, s: usize) -> DVector<f64> {
        z.rows(s * self.dim, self.dim).into_owned()
    }

    fn xd(&self, z: &DVector<f64>, s: usize) -> f64 {
        z[self.nb * self.dim + s]
    }

    fn xi(&self, z: &DVector<f64>, k: usize) -> f64 {
        z[self.nb * self.dim + self.nb + k]
    }

    /// Smooth objective in normalized weights.
    pub fn objective(&self, z: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let mut f = 0.0;
        for (m, c) in self.cross.iter().enumerate() {
            let l = self.xd(z, c.local) + c.x_hat - 2.0 * x[m] - c.q_bar;
            f += c.weight * l * l;
        }
        for a in &self.anchors {
            let r = self.xd(z, a.local) - 2.0 * a.a.dot(&self.p(z, a.local)) + a.a_sq - a.q;
            f += a.weight * r * r;
        }
        f
    }

    /// Values of every conic constraint function; all must be positive.
    pub fn constraint_values(&self, z: &DVector<f64>, x: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nb + self.cross.len() + self.intra.len());
        let slack: Vec<f64> = (0..self.nb)
            .map(|s| self.xd(z, s) - self.p(z, s).norm_squared())
            .collect();
        out.extend(slack.iter().copied());
        for (m, c) in self.cross.iter().enumerate() {
            let h = x[m] - self.p(z, c.local).dot(&c.p_hat);
            out.push(c.s_hat * slack[c.local] - h * h);
        }
        for (k, ip) in self.intra.iter().enumerate() {
            let s12 = self.xi(z, k) - self.p(z, ip.u).dot(&self.p(z, ip.v));
            out.push(slack[ip.u] * slack[ip.v] - s12 * s12);
        }
        out
    }

    /// `objective + mu * barrier`, or infinity outside the domain.
    pub fn barrier_objective(&self, z: &DVector<f64>, x: &DVector<f64>, mu: f64) -> f64 {
        let g = self.constraint_values(z, x);
        if g.iter().any(|v| !(*v > 0.0)) {
            return f64::INFINITY;
        }
        self.objective(z, x) - mu * g.iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Gradient and Hessian pieces of the barrier objective: core gradient,
    /// core Hessian, cross gradient, cross diagonal and core-cross coupling.
    fn derivatives(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        mu: f64,
    ) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>, Vec<(usize, DVector<f64>)>) {
        let d = self.dim;
        let nb = self.nb;
        let nc = self.core_len();
        let xd_at = |s: usize| nb * d + s;
        let xi_at = |k: usize| nb * d + nb + k;
        let mut gc = DVector::zeros(nc);
        let mut hc = DMatrix::zeros(nc, nc);
        let mut gx = DVector::zeros(self.cross.len());
        let mut dx = DVector::zeros(self.cross.len());
        let mut hcx = Vec::with_capacity(self.cross.len());

        // Objective: cross terms w (X_ss + c - 2 X_m - q)^2.
        for (m, c) in self.cross.iter().enumerate() {
            let l = self.xd(z, c.local) + c.x_hat - 2.0 * x[m] - c.q_bar;
            let i = xd_at(c.local);
            gc[i] += 2.0 * c.weight * l;
            gx[m] += -4.0 * c.weight * l;
            hc[(i, i)] += 2.0 * c.weight;
            dx[m] += 8.0 * c.weight;
        }
        // Objective: anchor terms w (X_ss - 2 a.p + |a|^2 - q)^2.
        for a in &self.anchors {
            let ps = self.p(z, a.local);
            let r = self.xd(z, a.local) - 2.0 * a.a.dot(&ps) + a.a_sq - a.q;
            let mut grad = DVector::zeros(nc);
            for k in 0..d {
                grad[a.local * d + k] = -2.0 * a.a[k];
            }
            grad[xd_at(a.local)] = 1.0;
            gc.axpy(2.0 * a.weight * r, &grad, 1.0);
            hc.ger(2.0 * a.weight, &grad, &grad, 1.0);
        }

        // Barrier: diagonal slacks X_ss - |p_s|^2.
        let mut slack = vec![0.0; nb];
        let mut slack_grad = Vec::with_capacity(nb);
        for s in 0..nb {
            let ps = self.p(z, s);
            slack[s] = self.xd(z, s) - ps.norm_squared();
            let mut g = DVector::zeros(nc);
            for k in 0..d {
                g[s * d + k] = -2.0 * ps[k];
            }
            g[xd_at(s)] = 1.0;
            let v = slack[s];
            gc.axpy(-mu / v, &g, 1.0);
            hc.ger(mu / (v * v), &g, &g, 1.0);
            for k in 0..d {
                hc[(s * d + k, s * d + k)] += mu * 2.0 / v;
            }
            slack_grad.push(g);
        }

        // Barrier: edge inequalities s_hat (X_ss - |p_s|^2) - (X_m - p_s.p_hat)^2.
        for (m, c) in self.cross.iter().enumerate() {
            let s = c.local;
            let ps = self.p(z, s);
            let h = x[m] - ps.dot(&c.p_hat);
            let g = c.s_hat * slack[s] - h * h;
            let mut gcore = &slack_grad[s] * c.s_hat;
            for k in 0..d {
                gcore[s * d + k] += 2.0 * h * c.p_hat[k];
            }
            let gm = -2.0 * h;
            gc.axpy(-mu / g, &gcore, 1.0);
            gx[m] += -mu * gm / g;
            // Outer-product part.
            hc.ger(mu / (g * g), &gcore, &gcore, 1.0);
            // Curvature part: -mu/g * Hess(g) on the p_s block.
            for k in 0..d {
                for l in 0..d {
                    let hess = -2.0 * c.s_hat * ((k == l) as u8 as f64) - 2.0 * c.p_hat[k] * c.p_hat[l];
                    hc[(s * d + k, s * d + l)] -= mu / g * hess;
                }
            }
            let mut coupling = &gcore * (mu * gm / (g * g));
            for k in 0..d {
                coupling[s * d + k] -= mu / g * 2.0 * c.p_hat[k];
            }
            coupling[xd_at(s)] -= 4.0 * c.weight;
            dx[m] += mu * (gm * gm / (g * g) + 2.0 / g);
            hcx.push((m, coupling));
        }

        // Barrier: pair determinants S11 S22 - S12^2.
        for (k, ip) in self.intra.iter().enumerate() {
            let (u, v) = (ip.u, ip.v);
            let pu = self.p(z, u);
            let pv = self.p(z, v);
            let s11 = slack[u];
            let s22 = slack[v];
            let s12 = self.xi(z, k) - pu.dot(&pv);
            let det = s11 * s22 - s12 * s12;
            let g11 = &slack_grad[u];
            let g22 = &slack_grad[v];
            let mut g12 = DVector::zeros(nc);
            for a in 0..d {
                g12[u * d + a] = -pv[a];
                g12[v * d + a] = -pu[a];
            }
            g12[xi_at(k)] = 1.0;
            let grad = g11 * s22 + g22 * s11 - &g12 * (2.0 * s12);
            gc.axpy(-mu / det, &grad, 1.0);
            hc.ger(mu / (det * det), &grad, &grad, 1.0);
            // -mu/det * Hess(det).
            let mut hd = DMatrix::zeros(nc, nc);
            hd.ger(1.0, g11, g22, 1.0);
            hd.ger(1.0, g22, g11, 1.0);
            hd.ger(-2.0, &g12, &g12, 1.0);
            for a in 0..d {
                hd[(u * d + a, u * d + a)] += -2.0 * s22;
                hd[(v * d + a, v * d + a)] += -2.0 * s11;
                hd[(u * d + a, v * d + a)] += 2.0 * s12;
                hd[(v * d + a, u * d + a)] += 2.0 * s12;
            }
            hc -= hd * (mu / det);
        }
        (gc, hc, gx, dx, hcx)
    }

    /// Newton direction with cross entries eliminated. Returns the core and
    /// cross steps and the squared Newton decrement.
    fn newton_step(&self, z: &DVector<f64>, x: &DVector<f64>, mu: f64) -> (DVector<f64>, DVector<f64>, f64, bool) {
        let (gc, hc, gx, dx, hcx) = self.derivatives(z, x, mu);
        let mut hr = hc;
        let mut gr = gc.clone();
        for (m, col) in &hcx {
            let inv = 1.0 / dx[*m];
            hr.ger(-inv, col, col, 1.0);
            gr.axpy(-gx[*m] * inv, col, 1.0);
        }
        let zeros = DVector::zeros(self.eq_c.nrows());
        let sol = solve_kkt(&hr, &self.eq_c, &(-&gr), &zeros);
        let dz = sol.x;
        let mut dxv = DVector::zeros(x.len());
        for (m, col) in &hcx {
            dxv[*m] = (-gx[*m] - col.dot(&dz)) / dx[*m];
        }
        let decrement = -(gc.dot(&dz) + gx.dot(&dxv));
        (dz, dxv, decrement, sol.degenerate)
    }
}

/// Assembles agent `agent`'s subproblem from the current state.
pub fn block_subproblem(model: &EsdpModel, state: &EsdpState, agent: usize) -> BlockSubproblem {
    let prob = &model.problem;
    let d = prob.dim;
    let blk = &model.blocks[agent];
    let nb = blk.cols.len();
    let base = blk.cols[0];
    let scale = model.weight_scale;
    let mut floored = 0;
    let cross = blk
        .cross
        .iter()
        .map(|&k| {
            let c = &model.cross[k];
            let (own, other) = if prob.index.owner(c.s) == agent { (c.s, c.t) } else { (c.t, c.s) };
            let raw = model.slack(state, other);
            if raw < SLACK_FLOOR {
                floored += 1;
            }
            CrossSlot {
                local: own - base,
                p_hat: state.p.column(other).into_owned(),
                x_hat: state.xdiag[other],
                s_hat: raw.max(SLACK_FLOOR),
                weight: c.weight * scale,
                q_bar: c.q_bar,
            }
        })
        .collect();
    let anchors = blk
        .anchor_terms
        .iter()
        .map(|&k| {
            let a = &model.anchor_terms[k];
            AnchorSlot {
                local: a.s - base,
                a_sq: a.a.norm_squared(),
                a: a.a.clone(),
                weight: a.weight * scale,
                q: a.q,
            }
        })
        .collect();
    let intra: Vec<IntraSlot> = blk
        .intra
        .iter()
        .map(|&k| IntraSlot {
            u: model.intra[k].a - base,
            v: model.intra[k].b - base,
        })
        .collect();
    let nk = intra.len();
    let nc = nb * d + nb + nk;
    let (lc, le) = &blk.linear;
    let rows = lc.nrows() + nk;
    let mut eq_c = DMatrix::zeros(rows, nc);
    let mut eq_e = DVector::zeros(rows);
    for r in 0..lc.nrows() {
        for j in 0..nb * d {
            eq_c[(r, j)] = lc[(r, j)];
        }
        eq_e[r] = le[r];
    }
    for (k, &gk) in blk.intra.iter().enumerate() {
        let row = lc.nrows() + k;
        eq_c[(row, nb * d + intra[k].u)] = 1.0;
        eq_c[(row, nb * d + intra[k].v)] = 1.0;
        eq_c[(row, nb * d + nb + k)] = -2.0;
        eq_e[row] = model.intra[gk].target;
    }
    let mut core = DVector::zeros(nc);
    for s in 0..nb {
        for k in 0..d {
            core[s * d + k] = state.p[(k, base + s)];
        }
        core[nb * d + s] = state.xdiag[base + s];
    }
    for (k, &gk) in blk.intra.iter().enumerate() {
        core[nb * d + nb + k] = state.xintra[gk];
    }
    let cross_values = DVector::from_iterator(blk.cross.len(), blk.cross.iter().map(|&k| state.xcross[k]));
    BlockSubproblem {
        agent,
        dim: d,
        nb,
        cross,
        anchors,
        intra,
        eq_c,
        eq_e,
        core,
        cross_values,
        floored,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarrierOptions {
    pub mu0: f64,
    pub mu_factor: f64,
    pub mu_min: f64,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            mu_factor: 0.2,
            mu_min: 1e-8,
            newton_tol: 1e-9,
            max_newton: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockSolution {
    pub core: DVector<f64>,
    pub cross: DVector<f64>,
    pub newton_steps: usize,
    /// Barrier stages that hit the Newton iteration cap.
    pub stalled_stages: usize,
}

/// Path-following barrier method: Newton with backtracking at each barrier
/// weight, from `mu0` down to `mu_min`.
pub fn solve_block_barrier(sub: &BlockSubproblem, opts: &BarrierOptions) -> BlockSolution {
    let mut z = sub.core.clone();
    let mut x = sub.cross_values.clone();
    // Start where the barrier and the objective have comparable weight, so
    // the first centering is short.
    let m = (sub.nb + sub.cross.len() + sub.intra.len()) as f64;
    let mut mu = opts.mu0.max(sub.objective(&z, &x) / m);
    let mut steps = 0;
    let mut stalled = 0;
    loop {
        let mut converged = false;
        for _ in 0..opts.max_newton {
            let (dz, dxv, dec, _) = sub.newton_step(&z, &x, mu);
            if !(dec.is_finite()) || dec / 2.0 <= opts.newton_tol {
                converged = true;
                break;
            }
            let f0 = sub.barrier_objective(&z, &x, mu);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let zt = &z + &dz * t;
                let xt = &x + &dxv * t;
                let ft = sub.barrier_objective(&zt, &xt, mu);
                if ft <= f0 - 0.25 * t * dec {
                    z = zt;
                    x = xt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            steps += 1;
            if !accepted {
                // No progress possible at working precision.
                converged = true;
                break;
            }
        }
        if !converged {
            stalled += 1;
        }
        if mu <= opts.mu_min {
            break;
        }
        mu = (mu * opts.mu_factor).max(opts.mu_min);
    }
    BlockSolution {
        core: z,
        cross: x,
        newton_steps: steps,
        stalled_stages: stalled,
    }
}

fn apply_block(model: &EsdpModel, state: &mut EsdpState, agent: usize, sol: &BlockSolution) {
    let blk = &model.blocks[agent];
    let d = model.dim();
    let nb = blk.cols.len();
    for (s, &c) in blk.cols.iter().enumerate() {
        for k in 0..d {
            state.p[(k, c)] = sol.core[s * d + k];
        }
        state.xdiag[c] = sol.core[nb * d + s];
    }
    for (k, &gk) in blk.intra.iter().enumerate() {
        state.xintra[gk] = sol.core[nb * d + nb + k];
    }
    for (m, &gk) in blk.cross.iter().enumerate() {
        state.xcross[gk] = sol.cross[m];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsdpOptions {
    pub epsilon: f64,
    pub max_cycles: usize,
    pub barrier: BarrierOptions,
}

impl Default for EsdpOptions {
    fn default() -> Self {
        Self {
            epsilon: 5e-3,
            max_cycles: 500,
            barrier: BarrierOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EsdpCycleRecord {
    pub cycle: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub relative_change: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct EsdpSolution {
    pub state: EsdpState,
    pub trace: Vec<EsdpCycleRecord>,
    pub cycles: usize,
    pub converged: bool,
    pub timing: SweepTiming,
    pub floored_slacks: usize,
    pub stalled_stages: usize,
    pub objective: f64,
}

/// Sweeps the color classes until the relative change of the coordinate
/// block falls below `epsilon`.
pub fn solve(model: &EsdpModel, init: EsdpState, options: &EsdpOptions) -> Result<EsdpSolution> {
    let classes = model.coloring.sweep_classes(&model.partition);
    solve_with_classes(model, init, options, &classes)
}

/// As [`solve`] with an explicit class order.
pub fn solve_with_classes(
    model: &EsdpModel,
    init: EsdpState,
    options: &EsdpOptions,
    classes: &[Vec<usize>],
) -> Result<EsdpSolution> {
    let mut state = init;
    let mut trace = Vec::new();
    let mut timing = SweepTiming::default();
    let mut floored = 0;
    let mut stalled = 0;
    let mut converged = false;
    let start = Instant::now();
    let mut cycles = 0;
    while cycles < options.max_cycles {
        let before = state.p.clone();
        let t = sweep(
            classes,
            &mut state,
            |s, b| {
                let agent = model.partition.blocks[b].agent;
                let sub = block_subproblem(model, s, agent);
                let sol = solve_block_barrier(&sub, &options.barrier);
                (agent, sub.floored, sol)
            },
            |s, _, (agent, fl, sol)| {
                floored += fl;
                stalled += sol.stalled_stages;
                apply_block(model, s, agent, &sol);
            },
        );
        timing += t;
        cycles += 1;
        if !state.p.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver("non-finite coordinates after a sweep".into()));
        }
        let change = (&state.p - &before).norm() / before.norm().max(1e-12);
        trace.push(EsdpCycleRecord {
            cycle: cycles,
            objective: model.objective(&state),
            max_violation: model.max_violation(&state),
            relative_change: change,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if change <= options.epsilon {
            converged = true;
            break;
        }
    }
    let objective = model.objective(&state);
    Ok(EsdpSolution {
        state,
        trace,
        cycles,
        converged,
        timing,
        floored_slacks: floored,
        stalled_stages: stalled,
        objective,
    })
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub realization: Realization,
    /// Set when the coordinates collapsed to the origin while the objective
    /// is small, which carries no information.
    pub trivial: bool,
}

/// The coordinate block of the relaxed solution.
pub fn extract_realization(solution: &EsdpSolution) -> Extraction {
    let p = solution.state.realization();
    let scale = solution.state.xdiag.iter().map(|v| v.abs()).sum::<f64>().sqrt().max(1.0);
    let trivial = p.coords.norm() <= 1e-6 * scale && solution.objective <= 1e-6 * scale;
    Extraction {
        realization: p,
        trivial,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TightnessReport {
    pub tight_rate: f64,
    pub near_tight_rate: f64,
    pub errors: Vec<f64>,
}

pub const TIGHT_THRESHOLD: f64 = 1e-3;
pub const NEAR_TIGHT_THRESHOLD: f64 = 5e-2;

/// Share of non-anchored sensors whose coordinates are within 1 mm (tight)
/// and 5 cm (near tight) of the truth.
pub fn tightness_report(problem: &RealizationProblem, p: &Realization, truth: &Realization) -> TightnessReport {
    let cols: Vec<usize> = (0..p.len()).filter(|&c| problem.anchor_coords[c].is_none()).collect();
    let cols = if cols.is_empty() { (0..p.len()).collect() } else { cols };
    let errors: Vec<f64> = cols
        .iter()
        .map(|&c| (p.coords.column(c) - truth.coords.column(c)).norm())
        .collect();
    let n = errors.len().max(1) as f64;
    TightnessReport {
        tight_rate: errors.iter().filter(|e| **e < TIGHT_THRESHOLD).count() as f64 / n,
        near_tight_rate: errors.iter().filter(|e| **e < NEAR_TIGHT_THRESHOLD).count() as f64 / n,
        errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{SensorIndex, SensorLayout};
    use crate::model::{Calibration, Term};
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    /// One free single-sensor agent ranging to three anchors in the plane.
    fn trilateration(target: &[f64]) -> RealizationProblem {
        let anchors = [[0.0, 0.0], [4.0, 0.0], [0.0, 3.0]];
        let t = v(target);
        let single = SensorLayout::new(vec![v(&[0.0, 0.0])]).unwrap();
        let mut anchor_coords = vec![None];
        let mut terms = Vec::new();
        for (k, a) in anchors.iter().enumerate() {
            anchor_coords.push(Some(v(a)));
            terms.push(Term { a: 0, b: k + 1, q: (&t - v(a)).norm_squared(), weight: 1.0, from_anchor: true });
        }
        RealizationProblem {
            dim: 2,
            index: SensorIndex::from_counts([1, 1, 1, 1]),
            layouts: vec![single; 4],
            readings: vec![ProprioReading::DistanceOnly; 4],
            terms,
            calibrations: vec![],
            linear: vec![],
            anchor_coords,
            edges: vec![(0, 1), (0, 2), (0, 3)],
        }
    }

    #[test]
    fn anchors_are_required() {
        let mut p = trilateration(&[1.0, 1.0]);
        p.anchor_coords = vec![None; 4];
        assert!(matches!(EsdpModel::new(&p), Err(Error::ModelRejected(_))));
    }

    #[test]
    fn single_sensor_trilateration_is_exact() {
        let p = trilateration(&[1.0, 2.0]);
        let model = EsdpModel::new(&p).unwrap();
        let state = init_state(&model, None, 1.0);
        let sub = block_subproblem(&model, &state, 0);
        let opts = BarrierOptions { mu_min: 1e-12, ..Default::default() };
        let sol = solve_block_barrier(&sub, &opts);
        assert_abs_diff_eq!(sol.core.rows(0, 2).into_owned(), v(&[1.0, 2.0]), epsilon = 1e-6);
        let slack = sol.core[2] - sol.core.rows(0, 2).norm_squared();
        assert!(slack < 1e-5 && slack > 0.0, "slack {slack}");
    }

    /// Two-sensor agent with a calibration pair and a free neighbor.
    fn pair_problem() -> RealizationProblem {
        let pair = SensorLayout::symmetric_pair(2, 0.5);
        let single = SensorLayout::new(vec![v(&[0.0, 0.0])]).unwrap();
        let index = SensorIndex::from_counts([2, 1, 1]);
        RealizationProblem {
            dim: 2,
            index,
            layouts: vec![pair, single.clone(), single],
            readings: vec![ProprioReading::DistanceOnly; 3],
            terms: vec![
                Term { a: 0, b: 2, q: 4.0, weight: 1.0, from_anchor: false },
                Term { a: 1, b: 3, q: 5.0, weight: 2.0, from_anchor: true },
                Term { a: 0, b: 3, q: 3.0, weight: 1.0, from_anchor: true },
            ],
            calibrations: vec![Calibration { agent: 0, a: 0, b: 1, target: 1.0 }],
            linear: vec![],
            anchor_coords: vec![None, None, None, Some(v(&[2.0, 1.0]))],
            edges: vec![(0, 1), (0, 2)],
        }
    }

    #[test]
    fn subproblem_counts() {
        let p = pair_problem();
        let model = EsdpModel::new(&p).unwrap();
        let state = init_state(&model, None, 1.0);
        let sub = block_subproblem(&model, &state, 0);
        // Two diagonal rows, one edge row (the anchored neighbor is an
        // affine term), one pair determinant.
        assert_eq!(sub.constraint_counts(), (2, 1, 1));
        assert_eq!(sub.equality_rows(), 1);
    }

    #[test]
    fn init_is_strictly_feasible() {
        let p = pair_problem();
        let model = EsdpModel::new(&p).unwrap();
        let state = init_state(&model, None, 1.0);
        for a in 0..2 {
            let sub = block_subproblem(&model, &state, a);
            assert!(sub.constraint_values(&sub.core, &sub.cross_values).iter().all(|g| *g > 0.0));
        }
        assert!(model.max_violation(&state) < 1e-12);
    }

    #[test]
    fn block_objective_is_the_agent_dependent_part() {
        let p = pair_problem();
        let model = EsdpModel::new(&p).unwrap();
        let state = init_state(&model, None, 1.0);
        let sub = block_subproblem(&model, &state, 0);
        let mut moved = state.clone();
        moved.p[(0, 0)] += 0.3;
        moved.xdiag[1] += 0.7;
        moved.xcross[0] -= 0.2;
        let sub_moved = block_subproblem(&model, &moved, 0);
        let full_delta = model.objective(&moved) - model.objective(&state);
        let block_delta = (sub_moved.objective(&sub_moved.core, &sub_moved.cross_values)
            - sub.objective(&sub.core, &sub.cross_values))
            / model.weight_scale;
        assert_abs_diff_eq!(full_delta, block_delta, epsilon = 1e-9);
    }

    #[test]
    fn newton_derivatives_match_finite_differences() {
        let p = pair_problem();
        let model = EsdpModel::new(&p).unwrap();
        let state = init_state(&model, None, 1.0);
        let sub = block_subproblem(&model, &state, 0);
        let mu = 0.3;
        let (gc, hc, gx, _, _) = sub.derivatives(&sub.core, &sub.cross_values, mu);
        let h = 1e-6;
        for i in 0..sub.core_len() {
            let mut zp = sub.core.clone();
            let mut zm = sub.core.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (sub.barrier_objective(&zp, &sub.cross_values, mu) - sub.barrier_objective(&zm, &sub.cross_values, mu)) / (2.0 * h);
            assert_abs_diff_eq!(gc[i], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
            let (gp, ..) = sub.derivatives(&zp, &sub.cross_values, mu);
            let (gm, ..) = sub.derivatives(&zm, &sub.cross_values, mu);
            for j in 0..sub.core_len() {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert_abs_diff_eq!(hc[(i, j)], fd, epsilon = 1e-4 * (1.0 + fd.abs()));
            }
        }
        let mut xp = sub.cross_values.clone();
        let mut xm = sub.cross_values.clone();
        xp[0] += h;
        xm[0] -= h;
        let fd = (sub.barrier_objective(&sub.core, &xp, mu) - sub.barrier_objective(&sub.core, &xm, mu)) / (2.0 * h);
        assert_abs_diff_eq!(gx[0], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
        let (_, _, _, dx, hcx) = sub.derivatives(&sub.core, &sub.cross_values, mu);
        let (gcp, _, gxp, ..) = sub.derivatives(&sub.core, &xp, mu);
        let (gcm, _, gxm, ..) = sub.derivatives(&sub.core, &xm, mu);
        assert_abs_diff_eq!(dx[0], (gxp[0] - gxm[0]) / (2.0 * h), epsilon = 1e-4 * (1.0 + dx[0].abs()));
        let fd_coupling = (gcp - gcm) / (2.0 * h);
        assert_abs_diff_eq!(hcx[0].1, fd_coupling, epsilon = 1e-4 * (1.0 + fd_coupling.amax()));
    }

    #[test]
    fn barrier_solve_keeps_equalities_and_descends() {
        let p = pair_problem();
        let model = EsdpModel::new(&p).unwrap();
        let state = init_state(&model, None, 1.0);
        let sub = block_subproblem(&model, &state, 0);
        let opts = BarrierOptions::default();
        let sol = solve_block_barrier(&sub, &opts);
        assert!(sub.equality_residual(&sol.core) < 1e-9);
        assert!(sub.constraint_values(&sol.core, &sol.cross).iter().all(|g| *g > 0.0));
        let mu = opts.mu_min;
        assert!(sub.barrier_objective(&sol.core, &sol.cross, mu) <= sub.barrier_objective(&sub.core, &sub.cross_values, mu));
    }

    #[test]
    fn tightness_rates() {
        let p = trilateration(&[1.0, 2.0]);
        let truth = Realization::new(DMatrix::from_column_slice(2, 4, &[1.0, 2.0, 0.0, 0.0, 4.0, 0.0, 0.0, 3.0]));
        let r = tightness_report(&p, &truth, &truth);
        assert_eq!((r.tight_rate, r.near_tight_rate), (1.0, 1.0));
        let zero = Realization::zeros(2, 4);
        let r = tightness_report(&p, &zero, &truth);
        assert_eq!((r.tight_rate, r.near_tight_rate), (0.0, 0.0));
    }
}
