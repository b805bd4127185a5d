//! Low-rank bi-convex local search.
//!
//! The lifted Gram matrix is written as `U^T V` with `U, V` of size `r x N`
//! and a coupling penalty `gamma |U - V|^2`. With one factor fixed every
//! residual is affine in the other, so each agent's U (or V) columns can be
//! updated by an equality-constrained linear least-squares solve. Sensor
//! coordinates are the first `d` rows of `U`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Realization;
use crate::linalg::{max_eigenvalue, project_affine, solve_kkt};
use crate::model::RealizationProblem;
use crate::partition::{schedule, BlockKind, BlockPartition, Coloring, SolverKind};
use crate::schedule::{sweep, SweepTiming};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Exact,
    ProxLinear,
}

/// Which sensor columns stay fixed during the search.
#[derive(Debug, Clone, PartialEq)]
pub enum Freeze {
    Nothing,
    /// Anchored sensors, pinned to their anchor coordinates.
    Anchors,
    /// Explicit columns, pinned to their lifted initial values.
    Columns(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct BmModel {
    pub problem: RealizationProblem,
    pub rank: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Per sensor column: fixed coordinate if frozen.
    pub frozen: Vec<bool>,
    pins: Vec<Option<DVector<f64>>>,
    agent_terms: Vec<Vec<usize>>,
    agent_cals: Vec<Vec<usize>>,
    agent_linear: Vec<(DMatrix<f64>, DVector<f64>)>,
    partition: BlockPartition,
    coloring: Coloring,
}

impl BmModel {
    /// Model with `lambda` and `gamma` defaulting to the mean total
    /// measurement weight per sensor, so the penalties keep pace with the
    /// data terms acting on each column.
    pub fn new(
        problem: &RealizationProblem,
        rank: usize,
        lambda: Option<f64>,
        gamma: Option<f64>,
        freeze: Freeze,
    ) -> Result<Self> {
        let d = problem.dim;
        if rank < d {
            return Err(invalid(format!("rank {rank} is below the dimension {d}")));
        }
        let scale = problem.sensor_weight();
        let lambda = lambda.unwrap_or(scale);
        let gamma = gamma.unwrap_or(scale);
        if !(lambda > 0.0) || !(gamma > 0.0) {
            return Err(invalid("lambda and gamma must be positive"));
        }
        let n = problem.sensor_count();
        let mut frozen = vec![false; n];
        let mut pins = vec![None; n];
        match &freeze {
            Freeze::Nothing => {}
            Freeze::Anchors => {
                for (c, a) in problem.anchor_coords.iter().enumerate() {
                    if let Some(a) = a {
                        frozen[c] = true;
                        pins[c] = Some(a.clone());
                    }
                }
            }
            Freeze::Columns(cols) => {
                for &c in cols {
                    if c >= n {
                        return Err(invalid(format!("column {c} out of range")));
                    }
                    frozen[c] = true;
                }
            }
        }
        let agents = problem.agent_count();
        let mut agent_terms = vec![Vec::new(); agents];
        for (k, t) in problem.terms.iter().enumerate() {
            let (i, j) = (problem.index.owner(t.a), problem.index.owner(t.b));
            agent_terms[i].push(k);
            if j != i {
                agent_terms[j].push(k);
            }
        }
        let mut agent_cals = vec![Vec::new(); agents];
        for (k, c) in problem.calibrations.iter().enumerate() {
            agent_cals[c.agent].push(k);
        }
        let agent_linear = (0..agents).map(|a| problem.linear_system(a)).collect();
        let frozen_agents: Vec<bool> = (0..agents)
            .map(|a| problem.index.columns(a).all(|c| frozen[c]))
            .collect();
        let (partition, _, coloring) = schedule(problem, SolverKind::Bm, &frozen_agents)?;
        Ok(Self {
            problem: problem.clone(),
            rank,
            lambda,
            gamma,
            frozen,
            pins,
            agent_terms,
            agent_cals,
            agent_linear,
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

    /// `Q = [I_d; 0]`.
    pub fn projector(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.rank, self.dim());
        for k in 0..self.dim() {
            q[(k, k)] = 1.0;
        }
        q
    }

    /// Full objective: weighted squared-distance residuals, the calibration
    /// penalty and the coupling penalty.
    pub fn objective(&self, u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
        let p = &self.problem;
        let inner = |a: usize, b: usize| (u.column(a) - u.column(b)).dot(&(v.column(a) - v.column(b)));
        let mut f = 0.0;
        for t in &p.terms {
            let r = inner(t.a, t.b) - t.q;
            f += t.weight * r * r;
        }
        for c in &p.calibrations {
            let r = inner(c.a, c.b) - c.target;
            f += self.lambda * r * r;
        }
        f + self.gamma * (u - v).norm_squared()
    }
}

#[derive(Debug, Clone)]
pub struct BmState {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub cycle: usize,
    /// Block values before their latest update, for extrapolation.
    u_prev: DMatrix<f64>,
    v_prev: DMatrix<f64>,
    lipschitz: Vec<f64>,
    momentum: Vec<f64>,
    updates: Vec<usize>,
}

impl BmState {
    pub fn realization(&self, dim: usize) -> Realization {
        Realization::new(self.u.rows(0, dim).into_owned())
    }
}

/// Embeds `p` as `U = V = [p; 0]`, optionally with uniform jitter of the
/// given size in the extra rows.
pub fn lift_init(model: &BmModel, p: &Realization, jitter: f64, seed: u64) -> Result<BmState> {
    let d = model.dim();
    if p.dim() != d || p.len() != model.problem.sensor_count() {
        return Err(Error::DimensionMismatch {
            expected: model.problem.sensor_count(),
            got: p.len(),
        });
    }
    let r = model.rank;
    let n = p.len();
    let mut u = DMatrix::zeros(r, n);
    u.rows_mut(0, d).copy_from(&p.coords);
    for c in 0..n {
        if let Some(pin) = &model.pins[c] {
            u.column_mut(c).rows_mut(0, d).copy_from(pin);
        }
    }
    if jitter > 0.0 && r > d {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in 0..n {
            if model.frozen[c] {
                continue;
            }
            for k in d..r {
                u[(k, c)] = (rng.random::<f64>() * 2.0 - 1.0) * jitter;
            }
        }
    }
    let blocks = model.partition.len();
    Ok(BmState {
        v: u.clone(),
        u_prev: u.clone(),
        v_prev: u.clone(),
        u,
        cycle: 0,
        lipschitz: vec![0.0; blocks],
        momentum: vec![1.0; blocks],
        updates: vec![0; blocks],
    })
}

/// The block objective `x^T H x - 2 g^T x + const` over one agent's free
/// columns of one factor, with its linear equalities `C x = e`.
#[derive(Debug, Clone)]
pub struct BlockQuadratic {
    /// Local sensor indices of the free columns.
    pub free: Vec<usize>,
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: DMatrix<f64>,
    pub e: DVector<f64>,
    pub x: DVector<f64>,
}

impl BlockQuadratic {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.h * x)) - 2.0 * self.g.dot(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.h * x - &self.g) * 2.0
    }
}

/// Builds the block quadratic for `agent`, treating `own` as the variable
/// factor and `other` as fixed.
pub fn block_quadratic(model: &BmModel, own: &DMatrix<f64>, other: &DMatrix<f64>, agent: usize) -> BlockQuadratic {
    let p = &model.problem;
    let r = model.rank;
    let d = model.dim();
    let cols = p.index.columns(agent);
    let base = cols.start;
    let nb = cols.len();
    let mut slot = vec![usize::MAX; nb];
    let mut free = Vec::new();
    for s in 0..nb {
        if !model.frozen[base + s] {
            slot[s] = free.len();
            free.push(s);
        }
    }
    let nv = free.len() * r;
    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    let slot_of = |c: usize| -> Option<usize> {
        if cols.contains(&c) && slot[c - base] != usize::MAX {
            Some(slot[c - base])
        } else {
            None
        }
    };

    let mut add_residual = |a_col: usize, b_col: usize, target: f64, weight: f64| {
        // residual = (X_a - X_b) . (Y_a - Y_b) - target
        let av: DVector<f64> = other.column(a_col) - other.column(b_col);
        let sa = slot_of(a_col);
        let sb = slot_of(b_col);
        let mut y = target;
        if sa.is_none() {
            y -= av.dot(&own.column(a_col));
        }
        if sb.is_none() {
            y += av.dot(&own.column(b_col));
        }
        let entries: [(Option<usize>, f64); 2] = [(sa, 1.0), (sb, -1.0)];
        for &(s1, c1) in &entries {
            let Some(s1) = s1 else { continue };
            for k in 0..r {
                g[s1 * r + k] += weight * c1 * av[k] * y;
            }
            for &(s2, c2) in &entries {
                let Some(s2) = s2 else { continue };
                let f = weight * c1 * c2;
                for k in 0..r {
                    for l in 0..r {
                        h[(s1 * r + k, s2 * r + l)] += f * av[k] * av[l];
                    }
                }
            }
        }
    };

    for &k in &model.agent_terms[agent] {
        let t = &p.terms[k];
        add_residual(t.a, t.b, t.q, t.weight);
    }
    for &k in &model.agent_cals[agent] {
        let c = &p.calibrations[k];
        add_residual(c.a, c.b, c.target, model.lambda);
    }
    let mut x = DVector::zeros(nv);
    for (fi, &s) in free.iter().enumerate() {
        for k in 0..r {
            h[(fi * r + k, fi * r + k)] += model.gamma;
            g[fi * r + k] += model.gamma * other[(k, base + s)];
            x[fi * r + k] = own[(k, base + s)];
        }
    }

    let (cl, el) = &model.agent_linear[agent];
    let mut c = DMatrix::zeros(cl.nrows(), nv);
    let mut e = el.clone();
    for row in 0..cl.nrows() {
        for s in 0..nb {
            for k in 0..d {
                let coef = cl[(row, s * d + k)];
                if coef == 0.0 {
                    continue;
                }
                if slot[s] == usize::MAX {
                    e[row] -= coef * own[(k, base + s)];
                } else {
                    c[(row, slot[s] * r + k)] = coef;
                }
            }
        }
    }
    // Rows that only touch frozen columns carry no information.
    let keep: Vec<usize> = (0..c.nrows()).filter(|&k| c.row(k).amax() > 0.0).collect();
    let c = DMatrix::from_fn(keep.len(), nv, |i, j| c[(keep[i], j)]);
    let e = DVector::from_fn(keep.len(), |i, _| e[keep[i]]);
    BlockQuadratic { free, h, g, c, e, x }
}

/// Result of one block update.
#[derive(Debug, Clone)]
pub struct BlockUpdate {
    /// New values for the free columns, `r x free.len()`.
    pub values: DMatrix<f64>,
    pub free: Vec<usize>,
    pub lipschitz: f64,
    pub momentum: f64,
    pub degenerate: bool,
}

fn factors<'a>(state: &'a BmState, kind: BlockKind) -> (&'a DMatrix<f64>, &'a DMatrix<f64>, &'a DMatrix<f64>) {
    match kind {
        BlockKind::BmU => (&state.u, &state.v, &state.u_prev),
        BlockKind::BmV => (&state.v, &state.u, &state.v_prev),
        BlockKind::Esdp => unreachable!("not a low-rank block"),
    }
}

fn unpack(x: &DVector<f64>, r: usize, nfree: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(r, nfree, x.as_slice())
}

/// Exact minimization of the block objective under the block's equalities.
pub fn block_update_exact(model: &BmModel, state: &BmState, block: usize) -> BlockUpdate {
    let b = &model.partition.blocks[block];
    let (own, other, _) = factors(state, b.kind);
    let quad = block_quadratic(model, own, other, b.agent);
    let sol = solve_kkt(&quad.h, &quad.c, &quad.g, &quad.e);
    BlockUpdate {
        values: unpack(&sol.x, model.rank, quad.free.len()),
        free: quad.free,
        lipschitz: 0.0,
        momentum: 1.0,
        degenerate: sol.degenerate,
    }
}

/// Projected gradient step from an extrapolated point with step `1/L`.
pub fn block_update_proxlinear(model: &BmModel, state: &BmState, block: usize, delta: f64) -> Result<BlockUpdate> {
    let b = &model.partition.blocks[block];
    let (own, other, prev) = factors(state, b.kind);
    let quad = block_quadratic(model, own, other, b.agent);
    let lip = max_eigenvalue(&(&quad.h * 2.0));
    if !(lip > 0.0) {
        return Err(Error::Solver(format!("block {block}: Lipschitz estimate {lip} is not positive")));
    }
    let r = model.rank;
    let base = b.columns.start;
    let mut x_prev = DVector::zeros(quad.x.len());
    for (fi, &s) in quad.free.iter().enumerate() {
        for k in 0..r {
            x_prev[fi * r + k] = prev[(k, base + s)];
        }
    }
    let t_prev = state.momentum[block];
    let t_next = (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt()) / 2.0;
    let mut w = if state.updates[block] == 0 {
        0.0
    } else {
        let nesterov = (t_prev - 1.0) / t_next;
        let l_prev = state.lipschitz[block];
        let cap = if l_prev > 0.0 { delta * (l_prev / lip).sqrt() } else { 0.0 };
        nesterov.min(cap)
    };
    let step = |w: f64| {
        let xh = &quad.x + (&quad.x - &x_prev) * w;
        let target = &xh - quad.gradient(&xh) / lip;
        project_affine(&target, &quad.c, &quad.e)
    };
    let mut x = step(w);
    if quad.value(&x) > quad.value(&quad.x) && w > 0.0 {
        w = 0.0;
        x = step(w);
    }
    Ok(BlockUpdate {
        values: unpack(&x, r, quad.free.len()),
        free: quad.free,
        lipschitz: lip,
        momentum: if w == 0.0 { 1.0 } else { t_next },
        degenerate: false,
    })
}

fn apply_update(model: &BmModel, state: &mut BmState, block: usize, upd: BlockUpdate) {
    let b = &model.partition.blocks[block];
    let base = b.columns.start;
    let (cur, prev) = match b.kind {
        BlockKind::BmU => (&mut state.u, &mut state.u_prev),
        BlockKind::BmV => (&mut state.v, &mut state.v_prev),
        BlockKind::Esdp => unreachable!(),
    };
    for (fi, &s) in upd.free.iter().enumerate() {
        let c = base + s;
        prev.set_column(c, &cur.column(c));
        cur.set_column(c, &upd.values.column(fi));
    }
    state.lipschitz[block] = upd.lipschitz;
    state.momentum[block] = upd.momentum;
    state.updates[block] += 1;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BmOptions {
    /// Relative change of the sensor coordinates that ends the search.
    pub epsilon: f64,
    pub max_cycles: usize,
    pub update: UpdateKind,
    /// Extrapolation cap factor for prox-linear updates.
    pub delta: f64,
    /// Record the objective after every single block update.
    pub trace_updates: bool,
}

impl Default for BmOptions {
    fn default() -> Self {
        Self {
            epsilon: 5e-4,
            max_cycles: 2000,
            update: UpdateKind::Exact,
            delta: 0.99,
            trace_updates: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub objective: f64,
    pub relative_change: f64,
    pub coupling_gap: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct BmSolution {
    pub state: BmState,
    pub realization: Realization,
    pub trace: Vec<CycleRecord>,
    pub update_trace: Vec<f64>,
    pub cycles: usize,
    pub converged: bool,
    pub timing: SweepTiming,
    pub degenerate_solves: usize,
}

/// Cyclic block coordinate descent over the color classes until the
/// relative change of the coordinates falls below `epsilon`.
pub fn solve(model: &BmModel, init: BmState, options: &BmOptions) -> Result<BmSolution> {
    let d = model.dim();
    let classes = model.coloring.sweep_classes(&model.partition);
    let mut state = init;
    let mut trace = Vec::new();
    let mut update_trace = Vec::new();
    let mut timing = SweepTiming::default();
    let mut degenerate = 0usize;
    let mut converged = false;
    let start = Instant::now();
    if options.trace_updates {
        update_trace.push(model.objective(&state.u, &state.v));
    }
    let mut cycles = 0;
    while cycles < options.max_cycles {
        let p_before = state.u.rows(0, d).into_owned();
        let mut failure: Option<Error> = None;
        let t = sweep(
            &classes,
            &mut state,
            |s, b| match options.update {
                UpdateKind::Exact => Ok(block_update_exact(model, s, b)),
                UpdateKind::ProxLinear => block_update_proxlinear(model, s, b, options.delta),
            },
            |s, b, r: Result<BlockUpdate>| match r {
                Ok(upd) => {
                    degenerate += upd.degenerate as usize;
                    apply_update(model, s, b, upd);
                    if options.trace_updates {
                        update_trace.push(model.objective(&s.u, &s.v));
                    }
                }
                Err(e) => failure = Some(e),
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        timing += t;
        cycles += 1;
        state.cycle = cycles;
        let p_after = state.u.rows(0, d);
        let change = (&p_after - &p_before).norm() / p_before.norm().max(1e-12);
        trace.push(CycleRecord {
            cycle: cycles,
            objective: model.objective(&state.u, &state.v),
            relative_change: change,
            coupling_gap: (&state.u - &state.v).norm(),
            wall_time: start.elapsed().as_secs_f64(),
        });
        if change <= options.epsilon {
            converged = true;
            break;
        }
    }
    Ok(BmSolution {
        realization: state.realization(d),
        state,
        trace,
        update_trace,
        cycles,
        converged,
        timing,
        degenerate_solves: degenerate,
    })
}

/// Norm of the objective gradient projected onto the null space of every
/// block's equality constraints, over all free columns of both factors.
pub fn projected_gradient_norm(model: &BmModel, u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for agent in 0..model.problem.agent_count() {
        for (own, other) in [(u, v), (v, u)] {
            let q = block_quadratic(model, own, other, agent);
            if q.x.is_empty() {
                continue;
            }
            let grad = q.gradient(&q.x);
            // Projecting x + g onto {C y = C x} and subtracting x leaves g
            // restricted to the null space of C.
            let pg = project_affine(&(&q.x + &grad), &q.c, &(&q.c * &q.x)) - &q.x;
            total += pg.norm_squared();
        }
    }
    total.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub bm: BmOptions,
    /// Pin anchored sensors during refinement.
    pub freeze_anchors: bool,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            bm: BmOptions::default(),
            freeze_anchors: false,
            lambda: None,
            gamma: None,
        }
    }
}

/// Rank-`d` search started from `p_init`; returns the refined coordinates.
pub fn refine(problem: &RealizationProblem, p_init: &Realization, options: &RefineOptions) -> Result<BmSolution> {
    let freeze = if options.freeze_anchors { Freeze::Anchors } else { Freeze::Nothing };
    let model = BmModel::new(problem, problem.dim, options.lambda, options.gamma, freeze)?;
    let init = lift_init(&model, p_init, 0.0, 0)?;
    solve(&model, init, &options.bm)
}
