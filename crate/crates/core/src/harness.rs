//! Experiment harness: run configuration, end-to-end trials, scaling and
//! rank sweeps, the two-process streaming simulation and report export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bm::{self, BmModel, BmOptions, Freeze, RefineOptions, UpdateKind};
use crate::error::{Error, Result};
use crate::esdp::{self, EsdpModel, EsdpOptions};
use crate::geometry::{rotation_from_rpy, Pose, ProprioMode, ProprioReading, Realization, SensorLayout};
use crate::model::{self, build_problem, reduce_constraints, RealizationProblem};
use crate::recover::{eta_metric, recover_states, rmse_body, rmse_common};
use crate::scenario::{
    self, adjacency, build_topology, designate_anchors, generate_scenario, sample_initial_guess,
    scenario_from_json, simulate_measurements, simulate_proprioception, spread_anchor_ids, Anchor,
    GeneratorSpec, Scenario, Shape,
};
use crate::schedule::{pool, SweepTiming};

/// Independent seed for one consumer of a trial seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_MEASURE: u64 = 1;
const STREAM_ATTITUDE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_ANCHOR: u64 = 4;
const STREAM_LIFT: u64 = 5;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPlacement {
    /// Farthest-point sampling starting at agent 0.
    Spread,
    /// Agent 0 and its topology neighbors in breadth-first order.
    Neighbors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub count: usize,
    pub per_anchor: usize,
    /// When set, each anchor measures this share of the other agents
    /// instead of `per_anchor`.
    pub partner_fraction: Option<f64>,
    /// Standard deviation of the anchor coordinate error, meters.
    pub noise: f64,
    pub placement: AnchorPlacement,
    /// Overrides `count` and `placement` when set.
    pub ids: Option<Vec<usize>>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            count: 8,
            per_anchor: 15,
            partner_fraction: None,
            noise: 0.05,
            placement: AnchorPlacement::Spread,
            ids: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverSelection {
    /// Low-rank local search from a radius-`rho` guess; rank defaults to `d + 1`.
    Bm { rank: Option<usize>, update: UpdateKind },
    Esdp,
    /// Relaxation, then rank-`d` refinement.
    Pipeline,
}

/// Starting point of the relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsdpInit {
    /// Every free agent at the origin.
    Origin,
    /// The radius-`rho` initial guess also given to the local search.
    Guess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    pub sizes: Vec<usize>,
    pub spacing: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            sizes: vec![2, 3, 4],
            spacing: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankSweepConfig {
    /// Defaults to `d, d+1, d+2, d+3`.
    pub ranks: Option<Vec<usize>>,
    pub rho: f64,
    pub trials: usize,
    /// Body-frame RMSE above which a trial counts as failed, meters.
    pub fail_threshold: f64,
}

impl Default for RankSweepConfig {
    fn default() -> Self {
        Self {
            ranks: None,
            rho: 8.0,
            trials: 30,
            fail_threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub duration: f64,
    pub rate_hz: f64,
    /// Spacing of the frames replayed by the catch-up stage, seconds.
    pub catchup_interval: f64,
    /// Simulated time one relaxation solve takes, seconds.
    pub esdp_latency: f64,
    pub parasites: usize,
    /// Body coordinates of the mothership sensors, used as anchors.
    pub mothership_sensors: Vec<Vec<f64>>,
    pub parasite_half_baseline: f64,
    /// Each parasite ranges to this many nearest parasites.
    pub neighbors: usize,
    pub sigma: f64,
    /// Radius of the ring the parasites start on, meters.
    pub radius: f64,
    /// Amplitude of the periodic motion, meters.
    pub amplitude: f64,
    /// Speed of the secular drift, meters per second.
    pub drift_speed: f64,
    /// Yaw rate of the parasites, radians per second.
    pub spin_rate: f64,
    /// Amplitude of the roll and pitch oscillation, radians.
    pub tilt_amplitude: f64,
    /// Radius of the random offset applied to the initial estimate, meters.
    pub init_perturbation: f64,
    pub bm: BmOptions,
    pub esdp: EsdpOptions,
    pub lift_jitter: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            duration: 30.0,
            rate_hz: 10.0,
            catchup_interval: 0.3,
            esdp_latency: 0.5,
            parasites: 8,
            mothership_sensors: vec![
                vec![0.0, 2.0, 0.0],
                vec![0.0, -2.0, 0.0],
                vec![2.0, 0.0, 0.0],
                vec![0.0, 0.0, 2.0],
            ],
            parasite_half_baseline: 0.35,
            neighbors: 3,
            sigma: 0.1,
            radius: 5.0,
            amplitude: 1.5,
            drift_speed: 0.1,
            spin_rate: 0.1,
            tilt_amplitude: 0.05,
            init_perturbation: 0.0,
            bm: BmOptions {
                epsilon: 5e-4,
                max_cycles: 30,
                ..BmOptions::default()
            },
            esdp: EsdpOptions {
                epsilon: 5e-3,
                max_cycles: 100,
                ..EsdpOptions::default()
            },
            lift_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Recorded range log; a synthetic one is generated when absent.
    pub log: Option<PathBuf>,
    /// Largest synthetic per-pair offset, meters.
    pub max_offset: f64,
    pub samples: usize,
    pub sigma: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            log: None,
            max_offset: 0.3,
            samples: 50,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario: GeneratorSpec,
    /// Scenario file written by `generate`; replaces `scenario` when set.
    pub scenario_file: Option<PathBuf>,
    /// Range noise standard deviation, meters.
    pub sigma: f64,
    /// Attitude angle errors are uniform in `+-attitude_error`, radians.
    pub attitude_error: f64,
    pub anchors: AnchorConfig,
    pub solver: SolverSelection,
    /// Radius of the initial guess around the truth for local search, meters.
    pub rho: f64,
    /// Size of the random extra rows when lifting to rank above `d`.
    pub lift_jitter: f64,
    pub bm: BmOptions,
    /// Calibration and coupling weights of the search stage; `None` takes the model default.
    pub bm_lambda: Option<f64>,
    pub bm_gamma: Option<f64>,
    pub esdp: EsdpOptions,
    pub esdp_init: EsdpInit,
    /// Initial slack of the relaxation's diagonal entries.
    pub esdp_slack: f64,
    pub refine: RefineOptions,
    pub seed: u64,
    pub trials: usize,
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
    pub scaling: ScalingConfig,
    pub rank_sweep: RankSweepConfig,
    pub stream: StreamConfig,
    pub calibration: CalibrationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: GeneratorSpec::with_pair(
                Shape::Cube {
                    side: 5,
                    spacing: 3.0,
                },
                9,
                ProprioMode::FourAxis,
            ),
            scenario_file: None,
            sigma: 0.1,
            attitude_error: 1.5f64.to_radians(),
            anchors: AnchorConfig::default(),
            solver: SolverSelection::Pipeline,
            rho: 2.0,
            lift_jitter: 0.5,
            bm: BmOptions::default(),
            bm_lambda: None,
            bm_gamma: None,
            esdp: EsdpOptions::default(),
            esdp_init: EsdpInit::Origin,
            esdp_slack: 1.0,
            refine: RefineOptions::default(),
            seed: 0,
            trials: 20,
            workers: 1,
            out_dir: None,
            scaling: ScalingConfig::default(),
            rank_sweep: RankSweepConfig::default(),
            stream: StreamConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{name} must be non-negative, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Noiseless 27-agent cube in `[0, 12]^3` with two adjacent exact anchors
    /// seeing every other agent, solved by the relaxation alone.
    pub fn tightness_regime() -> Self {
        let mut cfg = Self::default();
        cfg.scenario.shape = Shape::Cube { side: 3, spacing: 6.0 };
        cfg.sigma = 0.0;
        cfg.attitude_error = 0.0;
        cfg.anchors = AnchorConfig {
            count: 2,
            partner_fraction: Some(1.0),
            noise: 0.0,
            placement: AnchorPlacement::Neighbors,
            ..AnchorConfig::default()
        };
        cfg.solver = SolverSelection::Esdp;
        cfg.esdp.epsilon = 1e-6;
        cfg.esdp.max_cycles = 1200;
        cfg.esdp.barrier.mu_min = 1e-10;
        cfg.trials = 1;
        cfg
    }

    /// 125-agent cube with 8 imperfect anchors. Anchor positions are off by
    /// up to 1 m, which puts the pre-refinement common-frame error near 1 m.
    pub fn cube_regime() -> Self {
        let mut cfg = Self::default();
        cfg.anchors.noise = 1.0;
        cfg
    }

    /// 217-agent planar hexagon, ranges only, 4 anchors.
    pub fn hexagon_regime() -> Self {
        let mut cfg = Self::default();
        cfg.scenario = GeneratorSpec::with_pair(Shape::Hexagon { rings: 8, spacing: 3.0 }, 5, ProprioMode::DistanceOnly);
        cfg.anchors.count = 4;
        cfg
    }

    /// Growing ranges-only cubes with three sensors per agent and two anchors
    /// seeing 60% of the agents; the relaxation starts from the initial guess.
    pub fn scaling_regime() -> Self {
        let mut cfg = Self::default();
        cfg.scenario.proprio_mode = ProprioMode::DistanceOnly;
        cfg.scenario.sensors = vec![vec![0.0, 0.35, 0.0], vec![0.0, -0.35, 0.0], vec![0.35, 0.0, 0.0]];
        cfg.anchors.count = 2;
        cfg.anchors.partner_fraction = Some(0.6);
        cfg.esdp_init = EsdpInit::Guess;
        cfg.trials = 4;
        cfg
    }

    /// 120-agent pyramid at 4 m spacing, local search from poor guesses.
    pub fn rank_sweep_regime() -> Self {
        let mut cfg = Self::default();
        cfg.scenario.shape = Shape::Pyramid { levels: 8, spacing: 4.0 };
        cfg.solver = SolverSelection::Bm {
            rank: None,
            update: UpdateKind::Exact,
        };
        cfg.rank_sweep.rho = 8.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if let Some(path) = &self.scenario_file {
            if !path.is_file() {
                return Err(config_err(format!("scenario file {} does not exist", path.display())));
            }
        }
        if let Some(path) = &self.calibration.log {
            if !path.is_file() {
                return Err(config_err(format!("log file {} does not exist", path.display())));
            }
        }
        non_negative("sigma", self.sigma)?;
        non_negative("attitude_error", self.attitude_error)?;
        non_negative("anchors.noise", self.anchors.noise)?;
        if let Some(f) = self.anchors.partner_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_err("anchors.partner_fraction must lie in (0, 1]"));
            }
        }
        non_negative("rho", self.rho)?;
        non_negative("lift_jitter", self.lift_jitter)?;
        positive("bm.epsilon", self.bm.epsilon)?;
        positive("esdp.epsilon", self.esdp.epsilon)?;
        positive("refine.bm.epsilon", self.refine.bm.epsilon)?;
        positive("esdp_slack", self.esdp_slack)?;
        let b = &self.esdp.barrier;
        positive("esdp.barrier.mu0", b.mu0)?;
        positive("esdp.barrier.mu_min", b.mu_min)?;
        positive("esdp.barrier.newton_tol", b.newton_tol)?;
        if !(b.mu_factor > 0.0 && b.mu_factor < 1.0) {
            return Err(config_err("esdp.barrier.mu_factor must lie in (0, 1)"));
        }
        if self.bm.max_cycles == 0 || self.esdp.max_cycles == 0 || self.refine.bm.max_cycles == 0 {
            return Err(config_err("max_cycles must be at least 1"));
        }
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        if let SolverSelection::Bm { rank: Some(r), .. } = self.solver {
            let d = self.scenario.shape.dim();
            if r < d {
                return Err(config_err(format!("rank {r} is below the dimension {d}")));
            }
        }
        if self.scaling.sizes.iter().any(|&l| l < 2) {
            return Err(config_err("scaling sizes must be at least 2"));
        }
        positive("scaling.spacing", self.scaling.spacing)?;
        non_negative("rank_sweep.rho", self.rank_sweep.rho)?;
        positive("rank_sweep.fail_threshold", self.rank_sweep.fail_threshold)?;
        let s = &self.stream;
        positive("stream.duration", s.duration)?;
        positive("stream.rate_hz", s.rate_hz)?;
        positive("stream.catchup_interval", s.catchup_interval)?;
        non_negative("stream.esdp_latency", s.esdp_latency)?;
        non_negative("stream.sigma", s.sigma)?;
        non_negative("stream.init_perturbation", s.init_perturbation)?;
        if s.parasites == 0 {
            return Err(config_err("stream.parasites must be at least 1"));
        }
        if s.mothership_sensors.len() < 4 || s.mothership_sensors.iter().any(|p| p.len() != 3) {
            return Err(config_err("the mothership needs at least four 3D sensors"));
        }
        positive("calibration.max_offset", self.calibration.max_offset)?;
        Ok(())
    }

    fn dim(&self) -> usize {
        self.scenario.shape.dim()
    }
}

// ---------------------------------------------------------------------------
// Reports

/// One trial of [`run_solve`]. Times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub agents: usize,
    pub blocks: usize,
    pub colors: usize,
    /// Body-frame relative translation RMSE of the final estimate.
    pub rmse_body: f64,
    /// Common-frame RMSE of the relaxation estimate before refinement.
    pub rmse_common: Option<f64>,
    pub tight_rate: Option<f64>,
    pub near_tight_rate: Option<f64>,
    pub esdp_cycles: Option<usize>,
    pub bm_cycles: Option<usize>,
    pub refine_cycles: Option<usize>,
    pub converged: bool,
    /// Final value of the weighted range objective.
    pub objective: f64,
    pub underdetermined: usize,
    pub pt: f64,
    pub st: f64,
    pub wall_setup: f64,
    pub wall_esdp: f64,
    pub wall_bm: f64,
    pub wall_recover: f64,
    pub wall_total: f64,
}

/// Per-cycle objective in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub trial: usize,
    pub stage: String,
    pub cycle: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub converged_trials: usize,
    pub mean_rmse_body: f64,
    pub std_rmse_body: f64,
    pub mean_rmse_common: Option<f64>,
    pub std_rmse_common: Option<f64>,
    pub mean_tight_rate: Option<f64>,
    pub mean_esdp_cycles: Option<f64>,
    pub mean_bm_cycles: Option<f64>,
    pub mean_refine_cycles: Option<f64>,
    pub mean_pt: f64,
    pub mean_st: f64,
    pub mean_wall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub solver: SolverSelection,
    pub seed: u64,
    pub workers: usize,
    pub converged: bool,
    pub summary: Summary,
    pub trials: Vec<TrialReport>,
    pub traces: Vec<TracePoint>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn mean_opt<T: Copy + Into<f64>>(xs: impl Iterator<Item = Option<T>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().map(Into::into).collect();
    (!v.is_empty()).then(|| mean(&v))
}

fn usize_f64(x: usize) -> f64 {
    x as f64
}

/// Means over trials.
pub fn summarize(trials: &[TrialReport]) -> Summary {
    let body: Vec<f64> = trials.iter().map(|t| t.rmse_body).collect();
    let common: Vec<f64> = trials.iter().filter_map(|t| t.rmse_common).collect();
    Summary {
        trials: trials.len(),
        converged_trials: trials.iter().filter(|t| t.converged).count(),
        mean_rmse_body: mean(&body),
        std_rmse_body: std_dev(&body),
        mean_rmse_common: (!common.is_empty()).then(|| mean(&common)),
        std_rmse_common: (!common.is_empty()).then(|| std_dev(&common)),
        mean_tight_rate: mean_opt(trials.iter().map(|t| t.tight_rate)),
        mean_esdp_cycles: mean_opt(trials.iter().map(|t| t.esdp_cycles.map(usize_f64))),
        mean_bm_cycles: mean_opt(trials.iter().map(|t| t.bm_cycles.map(usize_f64))),
        mean_refine_cycles: mean_opt(trials.iter().map(|t| t.refine_cycles.map(usize_f64))),
        mean_pt: mean(&trials.iter().map(|t| t.pt).collect::<Vec<_>>()),
        mean_st: mean(&trials.iter().map(|t| t.st).collect::<Vec<_>>()),
        mean_wall: mean(&trials.iter().map(|t| t.wall_total).collect::<Vec<_>>()),
    }
}

// ---------------------------------------------------------------------------
// Trials

/// Everything a solver needs for one seeded trial.
#[derive(Debug, Clone)]
pub struct Instance {
    pub scenario: Scenario,
    pub readings: Vec<ProprioReading>,
    pub problem: RealizationProblem,
}

/// Anchor agents chosen by the configured placement rule.
pub fn anchor_ids(config: &AnchorConfig, scenario: &Scenario) -> Vec<usize> {
    if let Some(ids) = &config.ids {
        return ids.clone();
    }
    match config.placement {
        AnchorPlacement::Spread => spread_anchor_ids(scenario, config.count),
        AnchorPlacement::Neighbors => {
            let adj = adjacency(scenario.agent_count(), &scenario.edges);
            let mut order = vec![0usize];
            let mut seen = vec![false; adj.len()];
            seen[0] = true;
            let mut head = 0;
            while head < order.len() && order.len() < config.count {
                let k = order[head];
                head += 1;
                for &j in &adj[k] {
                    if !seen[j] {
                        seen[j] = true;
                        order.push(j);
                    }
                }
            }
            order.truncate(config.count);
            order
        }
    }
}

fn base_scenario(config: &RunConfig, seed: u64) -> Result<Scenario> {
    match &config.scenario_file {
        Some(path) => scenario_from_json(&fs::read_to_string(path)?),
        None => generate_scenario(&config.scenario, seed),
    }
}

/// Scenario for one trial seed with the configured anchors designated.
pub fn anchored_scenario(config: &RunConfig, seed: u64) -> Result<Scenario> {
    let mut sc = base_scenario(config, seed)?;
    if sc.anchors.is_empty() && config.anchors.count > 0 || config.anchors.ids.is_some() {
        let ids = anchor_ids(&config.anchors, &sc);
        let per_anchor = match config.anchors.partner_fraction {
            Some(f) => (f * (sc.agent_count() - ids.len()) as f64).ceil() as usize,
            None => config.anchors.per_anchor,
        };
        sc = designate_anchors(
            &sc,
            &ids,
            per_anchor,
            config.anchors.noise,
            sub_seed(seed, STREAM_ANCHOR),
        )?;
    }
    Ok(sc)
}

/// Scenario, readings and reduced problem for one trial seed.
pub fn build_instance(config: &RunConfig, seed: u64) -> Result<Instance> {
    let sc = anchored_scenario(config, seed)?;
    let graph = simulate_measurements(&sc, config.sigma, sub_seed(seed, STREAM_MEASURE))?;
    let readings = simulate_proprioception(&sc, config.attitude_error, sub_seed(seed, STREAM_ATTITUDE));
    let problem = reduce_constraints(&build_problem(&sc, &graph, &readings)?);
    Ok(Instance {
        scenario: sc,
        readings,
        problem,
    })
}

fn trace_points(trial: usize, stage: &str, objectives: impl Iterator<Item = (usize, f64)>) -> Vec<TracePoint> {
    objectives
        .map(|(cycle, objective)| TracePoint {
            trial,
            stage: stage.to_string(),
            cycle,
            objective,
        })
        .collect()
}

/// Runs one seeded trial of the configured solver.
pub fn run_trial(config: &RunConfig, trial: usize, seed: u64) -> Result<(TrialReport, Vec<TracePoint>)> {
    let start = Instant::now();
    let inst = build_instance(config, seed)?;
    let problem = &inst.problem;
    let truth = &inst.scenario.poses;
    let edges = &inst.scenario.edges;
    let wall_setup = start.elapsed().as_secs_f64();
    let mut timing = SweepTiming::default();
    let mut traces = Vec::new();
    let mut report = TrialReport {
        trial,
        seed,
        agents: inst.scenario.agent_count(),
        blocks: 0,
        colors: 0,
        rmse_body: 0.0,
        rmse_common: None,
        tight_rate: None,
        near_tight_rate: None,
        esdp_cycles: None,
        bm_cycles: None,
        refine_cycles: None,
        converged: true,
        objective: 0.0,
        underdetermined: 0,
        pt: 0.0,
        st: 0.0,
        wall_setup,
        wall_esdp: 0.0,
        wall_bm: 0.0,
        wall_recover: 0.0,
        wall_total: 0.0,
    };

    let p_final = match &config.solver {
        SolverSelection::Esdp | SolverSelection::Pipeline => {
            let t0 = Instant::now();
            let model = EsdpModel::new(problem)?;
            report.blocks = model.partition().len();
            report.colors = model.coloring().count();
            let guess = match config.esdp_init {
                EsdpInit::Origin => None,
                EsdpInit::Guess => Some(sample_initial_guess(
                    &inst.scenario,
                    &inst.readings,
                    config.rho,
                    sub_seed(seed, STREAM_INIT),
                )?),
            };
            let init = esdp::init_state(&model, guess.as_ref(), config.esdp_slack);
            let sol = esdp::solve(&model, init, &config.esdp)?;
            report.wall_esdp = t0.elapsed().as_secs_f64();
            timing += sol.timing;
            report.esdp_cycles = Some(sol.cycles);
            report.converged &= sol.converged;
            traces.extend(trace_points(trial, "esdp", sol.trace.iter().map(|r| (r.cycle, r.objective))));
            let ext = esdp::extract_realization(&sol);
            if ext.trivial {
                warn!("trial {trial}: relaxation returned the trivial solution");
            }
            let tight = esdp::tightness_report(problem, &ext.realization, &inst.scenario.ground_truth());
            report.tight_rate = Some(tight.tight_rate);
            report.near_tight_rate = Some(tight.near_tight_rate);
            let t1 = Instant::now();
            let est = recover_states(problem, &ext.realization)?;
            report.wall_recover += t1.elapsed().as_secs_f64();
            report.rmse_common = Some(rmse_common(&est.poses, truth, edges));
            if config.solver == SolverSelection::Pipeline {
                let t2 = Instant::now();
                let refined = bm::refine(problem, &ext.realization, &config.refine)?;
                report.wall_bm = t2.elapsed().as_secs_f64();
                timing += refined.timing;
                report.refine_cycles = Some(refined.cycles);
                report.converged &= refined.converged;
                traces.extend(trace_points(trial, "refine", refined.trace.iter().map(|r| (r.cycle, r.objective))));
                refined.realization
            } else {
                ext.realization
            }
        }
        SolverSelection::Bm { rank, update } => {
            let d = problem.dim;
            let rank = rank.unwrap_or(d + 1);
            let t0 = Instant::now();
            let init = sample_initial_guess(&inst.scenario, &inst.readings, config.rho, sub_seed(seed, STREAM_INIT))?;
            let model = BmModel::new(problem, rank, config.bm_lambda, config.bm_gamma, Freeze::Nothing)?;
            report.blocks = model.partition().len();
            report.colors = model.coloring().count();
            let state = bm::lift_init(&model, &init, config.lift_jitter, sub_seed(seed, STREAM_LIFT))?;
            let opts = BmOptions {
                update: *update,
                ..config.bm.clone()
            };
            let sol = bm::solve(&model, state, &opts)?;
            timing += sol.timing;
            report.bm_cycles = Some(sol.cycles);
            report.converged &= sol.converged;
            traces.extend(trace_points(trial, "bm", sol.trace.iter().map(|r| (r.cycle, r.objective))));
            let p = if rank > d {
                let refined = bm::refine(problem, &sol.realization, &config.refine)?;
                timing += refined.timing;
                report.refine_cycles = Some(refined.cycles);
                report.converged &= refined.converged;
                traces.extend(trace_points(trial, "refine", refined.trace.iter().map(|r| (r.cycle, r.objective))));
                refined.realization
            } else {
                sol.realization
            };
            report.wall_bm = t0.elapsed().as_secs_f64();
            p
        }
    };

    let t3 = Instant::now();
    let est = recover_states(problem, &p_final)?;
    report.wall_recover += t3.elapsed().as_secs_f64();
    report.underdetermined = est.underdetermined();
    report.rmse_body = rmse_body(&est.poses, truth, edges);
    report.objective = model::objective(problem, &p_final);
    report.pt = timing.parallel;
    report.st = timing.serial;
    report.wall_total = start.elapsed().as_secs_f64();
    Ok((report, traces))
}

fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add(trial as u64)
}

/// Runs `config.trials` seeded trials on a pool of `config.workers` threads.
pub fn run_solve(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let workers = pool(config.workers);
    let mut trials = Vec::with_capacity(config.trials);
    let mut traces = Vec::new();
    for t in 0..config.trials {
        let seed = trial_seed(config.seed, t);
        let (report, trace) = workers.install(|| run_trial(config, t, seed))?;
        info!(
            "trial {t}: rmse body {:.4} common {:?} cycles esdp {:?} bm {:?} refine {:?}",
            report.rmse_body, report.rmse_common, report.esdp_cycles, report.bm_cycles, report.refine_cycles
        );
        trials.push(report);
        traces.extend(trace);
    }
    let summary = summarize(&trials);
    Ok(RunReport {
        solver: config.solver.clone(),
        seed: config.seed,
        workers: config.workers,
        converged: trials.iter().all(|t| t.converged),
        summary,
        trials,
        traces,
    })
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub side: usize,
    pub agents: usize,
    pub blocks: usize,
    pub colors: usize,
    pub mean_pt: f64,
    pub mean_st: f64,
    pub pt_st_ratio: f64,
    pub mean_esdp_cycles: Option<f64>,
    pub mean_bm_cycles: Option<f64>,
    pub mean_refine_cycles: Option<f64>,
    pub mean_rmse_body: f64,
}

/// [`run_solve`] over `side^3`-agent cubes.
pub fn run_scaling_sweep(config: &RunConfig, sizes: &[usize]) -> Result<Vec<ScalingPoint>> {
    if sizes.iter().any(|&l| l < 2) {
        return Err(config_err("cube sides must be at least 2"));
    }
    let mut out = Vec::with_capacity(sizes.len());
    for &side in sizes {
        let mut cfg = config.clone();
        cfg.scenario_file = None;
        cfg.scenario.shape = Shape::Cube {
            side,
            spacing: config.scaling.spacing,
        };
        let report = run_solve(&cfg)?;
        let first = &report.trials[0];
        let s = &report.summary;
        info!("side {side}: pt {:.3} st {:.3}", s.mean_pt, s.mean_st);
        out.push(ScalingPoint {
            side,
            agents: first.agents,
            blocks: first.blocks,
            colors: first.colors,
            mean_pt: s.mean_pt,
            mean_st: s.mean_st,
            pt_st_ratio: if s.mean_st > 0.0 { s.mean_pt / s.mean_st } else { 1.0 },
            mean_esdp_cycles: s.mean_esdp_cycles,
            mean_bm_cycles: s.mean_bm_cycles,
            mean_refine_cycles: s.mean_refine_cycles,
            mean_rmse_body: s.mean_rmse_body,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub rank: usize,
    pub trials: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_cycles: f64,
    pub mean_rmse_body: f64,
}

/// Failure rate and mean cycle count of the local search per rank, each
/// rank run on the same seeded instances and initial guesses.
pub fn run_rank_sweep(config: &RunConfig, ranks: &[usize], rho: f64) -> Result<Vec<RankPoint>> {
    let d = config.dim();
    if let Some(&r) = ranks.iter().find(|&&r| r < d || r > d + 3) {
        return Err(config_err(format!("rank {r} is outside d..=d+3")));
    }
    let mut out = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let mut cfg = config.clone();
        cfg.solver = SolverSelection::Bm {
            rank: Some(rank),
            update: match &config.solver {
                SolverSelection::Bm { update, .. } => *update,
                _ => UpdateKind::Exact,
            },
        };
        cfg.rho = rho;
        cfg.trials = config.rank_sweep.trials;
        let report = run_solve(&cfg)?;
        let failures = report
            .trials
            .iter()
            .filter(|t| t.rmse_body > config.rank_sweep.fail_threshold)
            .count();
        let cycles: Vec<f64> = report
            .trials
            .iter()
            .map(|t| usize_f64(t.bm_cycles.unwrap_or(0) + t.refine_cycles.unwrap_or(0)))
            .collect();
        info!("rank {rank}: {failures}/{} failed", report.trials.len());
        out.push(RankPoint {
            rank,
            trials: report.trials.len(),
            failures,
            failure_rate: failures as f64 / report.trials.len() as f64,
            mean_cycles: mean(&cycles),
            mean_rmse_body: report.summary.mean_rmse_body,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Streaming

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Process1,
    Process2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    pub frame: usize,
    pub time: f64,
    pub source: Source,
    pub objective_p1: f64,
    /// Present on frames where the relaxation branch delivers an estimate.
    pub objective_p2: Option<f64>,
    pub objective_fused: f64,
    /// Relative error of every mothership-parasite pair.
    pub eta: Vec<f64>,
    pub mean_eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTrace {
    /// Both processes with min-objective fusion.
    pub combined: Vec<StreamFrame>,
    /// Local search alone; `objective_p2` is always empty.
    pub p1_only: Vec<StreamFrame>,
    pub esdp_runs: usize,
    /// Frames whose measurements the relaxation branch never saw.
    pub skipped_frames: usize,
}

impl StreamTrace {
    pub fn final_quarter_eta(frames: &[StreamFrame]) -> f64 {
        let start = frames.len() - frames.len() / 4;
        mean(&frames[start.min(frames.len().saturating_sub(1))..].iter().map(|f| f.mean_eta).collect::<Vec<_>>())
    }
}

/// Time-parameterized poses of the mothership (agent 0, static at the
/// origin) and parasites circling it with a slow outward drift.
#[derive(Debug, Clone)]
pub struct Trajectory {
    phases: Vec<[f64; 6]>,
    config: StreamConfig,
}

impl Trajectory {
    pub fn new(config: &StreamConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = (0..config.parasites)
            .map(|_| std::array::from_fn(|_| rng.random::<f64>() * std::f64::consts::TAU))
            .collect();
        Self {
            phases,
            config: config.clone(),
        }
    }

    pub fn agent_count(&self) -> usize {
        self.phases.len() + 1
    }

    pub fn poses(&self, t: f64) -> Vec<Pose> {
        let c = &self.config;
        let n = self.phases.len() as f64;
        let mut out = vec![Pose::identity(3)];
        for (k, ph) in self.phases.iter().enumerate() {
            let base = std::f64::consts::TAU * k as f64 / n;
            let r = c.radius + c.drift_speed * t;
            let a = c.amplitude;
            let x = r * base.cos() + a * (0.2 * t + ph[0]).sin();
            let y = r * base.sin() + a * (0.15 * t + ph[1]).cos();
            let z = 0.5 * a * (0.1 * t + ph[2]).sin() + if k % 2 == 0 { 1.0 } else { -1.0 };
            let yaw = ph[3] + c.spin_rate * t;
            let roll = c.tilt_amplitude * (0.3 * t + ph[4]).sin();
            let pitch = c.tilt_amplitude * (0.25 * t + ph[5]).cos();
            out.push(Pose {
                rotation: rotation_from_rpy(roll, pitch, yaw),
                translation: DVector::from_vec(vec![x, y, z]),
            });
        }
        out
    }
}

/// Fixed scenario skeleton of the streaming system; only poses change.
fn stream_scenario(config: &StreamConfig, traj: &Trajectory, seed: u64) -> Result<Scenario> {
    let n = traj.agent_count();
    let poses = traj.poses(0.0);
    let ship = SensorLayout::new(config.mothership_sensors.iter().map(|p| DVector::from_column_slice(p)).collect())?;
    let mut layouts = vec![ship];
    layouts.extend((1..n).map(|_| SensorLayout::symmetric_pair(3, config.parasite_half_baseline)));
    let centers: Vec<DVector<f64>> = poses[1..].iter().map(|p| p.translation.clone()).collect();
    let mut edges: Vec<(usize, usize)> = build_topology(&centers, config.neighbors.min(n - 2), None)
        .into_iter()
        .map(|(i, j)| (i + 1, j + 1))
        .collect();
    edges.extend((1..n).map(|j| (0, j)));
    edges.sort_unstable();
    let mut sc = Scenario {
        dim: 3,
        poses,
        layouts,
        modes: vec![ProprioMode::FourAxis; n],
        edges,
        anchors: Vec::new(),
        seed,
    };
    sc.anchors = vec![Anchor {
        agent: 0,
        coords: (0..sc.layouts[0].len()).map(|u| sc.layouts[0].points[u].clone()).collect(),
        partners: Vec::new(),
    }];
    sc.validate()?;
    Ok(sc)
}

struct FrameData {
    problem: RealizationProblem,
    truth: Vec<Pose>,
}

fn frame_data(skeleton: &Scenario, traj: &Trajectory, cfg: &RunConfig, k: usize, seed: u64) -> Result<FrameData> {
    let s = &cfg.stream;
    let t = k as f64 / s.rate_hz;
    let sc = Scenario {
        poses: traj.poses(t),
        ..skeleton.clone()
    };
    let frame_seed = sub_seed(seed, 1000 + k as u64);
    let graph = simulate_measurements(&sc, s.sigma, sub_seed(frame_seed, STREAM_MEASURE))?;
    let readings = simulate_proprioception(&sc, cfg.attitude_error, sub_seed(frame_seed, STREAM_ATTITUDE));
    Ok(FrameData {
        problem: reduce_constraints(&build_problem(&sc, &graph, &readings)?),
        truth: sc.poses,
    })
}

fn track(cfg: &StreamConfig, problem: &RealizationProblem, init: &Realization, seed: u64) -> Result<Realization> {
    let model = BmModel::new(problem, problem.dim + 1, None, None, Freeze::Anchors)?;
    let state = bm::lift_init(&model, init, cfg.lift_jitter, seed)?;
    Ok(bm::solve(&model, state, &cfg.bm)?.realization)
}

fn frame_report(
    k: usize,
    rate: f64,
    frame: &FrameData,
    p: &Realization,
    source: Source,
    f1: f64,
    f2: Option<f64>,
) -> Result<StreamFrame> {
    let est = recover_states(&frame.problem, p)?;
    let eta = (1..frame.truth.len())
        .map(|j| eta_metric(&est.poses, &frame.truth, (0, j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StreamFrame {
        frame: k,
        time: k as f64 / rate,
        source,
        objective_p1: f1,
        objective_p2: f2,
        objective_fused: model::objective(&frame.problem, p),
        mean_eta: mean(&eta),
        eta,
    })
}

struct PendingRelaxation {
    ready: usize,
    estimate: Realization,
}

/// Simulates the frame stream with the tracking process alone and with the
/// relaxation branch added, on identical measurements.
///
/// Process 2 is simulated with a fixed latency so traces do not depend on the
/// host: a relaxation started at frame `k` becomes available
/// `ceil(esdp_latency * rate)` frames later, after catching up on frames
/// sampled every `catchup_interval` seconds.
pub fn run_stream(config: &RunConfig) -> Result<StreamTrace> {
    config.validate()?;
    let s = &config.stream;
    let seed = config.seed;
    let traj = Trajectory::new(s, sub_seed(seed, 900));
    let skeleton = stream_scenario(s, &traj, seed)?;
    let frames = ((s.duration * s.rate_hz).round() as usize).max(1);
    let latency = ((s.esdp_latency * s.rate_hz).ceil() as usize).max(1);
    let stride = ((s.catchup_interval * s.rate_hz).round() as usize).max(1);

    let first = frame_data(&skeleton, &traj, config, 0, seed)?;
    let mut init = Realization::from_poses(&first.truth, &skeleton.layouts)?;
    if s.init_perturbation > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_INIT));
        let idx = skeleton.sensor_index();
        for agent in 1..skeleton.agent_count() {
            let offset = DVector::from_fn(3, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * s.init_perturbation);
            for c in idx.columns(agent) {
                let moved = init.point(c) + &offset;
                init.coords.set_column(c, &moved);
            }
        }
    }

    let workers = pool(config.workers);
    workers.install(|| {
        let mut data: BTreeMap<usize, FrameData> = BTreeMap::new();
        data.insert(0, first);
        let mut p1_only = Vec::with_capacity(frames);
        let mut combined = Vec::with_capacity(frames);
        let mut prev_solo = init.clone();
        let mut prev_fused = init;
        let mut pending: Option<PendingRelaxation> = None;
        let mut esdp_runs = 0;
        let mut seen = vec![false; frames];
        for k in 0..frames {
            if !data.contains_key(&k) {
                data.insert(k, frame_data(&skeleton, &traj, config, k, seed)?);
            }
            let lift_seed = sub_seed(seed, 5000 + k as u64);
            let frame = &data[&k];

            let solo = track(s, &frame.problem, &prev_solo, lift_seed)?;
            let f_solo = model::objective(&frame.problem, &solo);
            p1_only.push(frame_report(k, s.rate_hz, frame, &solo, Source::Process1, f_solo, None)?);
            prev_solo = solo;

            let p1 = track(s, &frame.problem, &prev_fused, lift_seed)?;
            let f1 = model::objective(&frame.problem, &p1);
            let mut fused = (p1, Source::Process1, f1, None);
            if let Some(job) = pending.take_if(|j| j.ready == k) {
                let f2 = model::objective(&frame.problem, &job.estimate);
                if f2 < f1 {
                    fused = (job.estimate, Source::Process2, f2, Some(f2));
                } else {
                    fused.3 = Some(f2);
                }
            }
            let (p, source, _, f2) = fused;
            combined.push(frame_report(k, s.rate_hz, frame, &p, source, f1, f2)?);
            prev_fused = p;

            if pending.is_none() && k + latency < frames {
                // Relaxation on the newest frame, warm-started from the newest estimate.
                let model = EsdpModel::new(&frame.problem)?;
                let init = esdp::init_state(&model, Some(&prev_fused), config.esdp_slack);
                let sol = esdp::solve(&model, init, &s.esdp)?;
                esdp_runs += 1;
                seen[k] = true;
                let mut estimate = esdp::extract_realization(&sol).realization;
                let ready = k + latency;
                let mut j = k + stride;
                loop {
                    let j_eff = j.min(ready);
                    if !data.contains_key(&j_eff) {
                        data.insert(j_eff, frame_data(&skeleton, &traj, config, j_eff, seed)?);
                    }
                    estimate = track(s, &data[&j_eff].problem, &estimate, sub_seed(seed, 9000 + j_eff as u64))?;
                    seen[j_eff] = true;
                    if j_eff == ready {
                        break;
                    }
                    j += stride;
                }
                pending = Some(PendingRelaxation { ready, estimate });
            }
            data.retain(|&key, _| key > k);
        }
        let skipped = seen.iter().filter(|v| !**v).count();
        if esdp_runs > 0 {
            info!("stream: {esdp_runs} relaxation runs, {skipped} frames never seen by process 2");
        }
        Ok(StreamTrace {
            combined,
            p1_only,
            esdp_runs,
            skipped_frames: skipped,
        })
    })
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub agent_a: usize,
    pub sensor_a: usize,
    pub agent_b: usize,
    pub sensor_b: usize,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub pairs: usize,
    pub samples: usize,
    /// Mean absolute range error before and after correction, meters.
    pub error_before: f64,
    pub error_after: f64,
    pub table: Vec<BiasRow>,
}

/// Estimates per-pair range biases from a log, synthesizing one from the
/// configured scenario when no log file is given.
pub fn run_calibrate(config: &RunConfig) -> Result<CalibrationReport> {
    config.validate()?;
    let c = &config.calibration;
    let log = match &c.log {
        Some(path) => scenario::read_log_csv(path)?,
        None => {
            let sc = base_scenario(config, config.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 77));
            let offsets = scenario::measurement_pairs(&sc)
                .into_iter()
                .map(|(i, u, j, v, _)| {
                    (scenario::pair_key(i, u, j, v), (rng.random::<f64>() * 2.0 - 1.0) * c.max_offset)
                })
                .collect();
            scenario::synthetic_log(&sc, &offsets, c.samples, c.sigma, sub_seed(config.seed, STREAM_MEASURE))
        }
    };
    let table = scenario::calibrate_bias(&log);
    let n = log.len().max(1) as f64;
    let error_before = log.iter().map(|r| (r.d_measured - r.d_truth).abs()).sum::<f64>() / n;
    let error_after = log
        .iter()
        .map(|r| (r.d_measured - table.get(r.i, r.u, r.j, r.v).unwrap_or(0.0) - r.d_truth).abs())
        .sum::<f64>()
        / n;
    Ok(CalibrationReport {
        pairs: table.biases.len(),
        samples: log.len(),
        error_before,
        error_after,
        table: table
            .biases
            .iter()
            .map(|(&((agent_a, sensor_a), (agent_b, sensor_b)), &bias)| BiasRow {
                agent_a,
                sensor_a,
                agent_b,
                sensor_b,
                bias,
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Export

/// Rows with a fixed column list, so empty tables still get a header.
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

impl CsvRow for TrialReport {
    const HEADER: &'static [&'static str] = &[
        "trial",
        "seed",
        "agents",
        "blocks",
        "colors",
        "rmse_body",
        "rmse_common",
        "tight_rate",
        "near_tight_rate",
        "esdp_cycles",
        "bm_cycles",
        "refine_cycles",
        "converged",
        "objective",
        "underdetermined",
        "pt",
        "st",
        "wall_setup",
        "wall_esdp",
        "wall_bm",
        "wall_recover",
        "wall_total",
    ];
}

impl CsvRow for TracePoint {
    const HEADER: &'static [&'static str] = &["trial", "stage", "cycle", "objective"];
}

impl CsvRow for ScalingPoint {
    const HEADER: &'static [&'static str] = &[
        "side",
        "agents",
        "blocks",
        "colors",
        "mean_pt",
        "mean_st",
        "pt_st_ratio",
        "mean_esdp_cycles",
        "mean_bm_cycles",
        "mean_refine_cycles",
        "mean_rmse_body",
    ];
}

impl CsvRow for RankPoint {
    const HEADER: &'static [&'static str] =
        &["rank", "trials", "failures", "failure_rate", "mean_cycles", "mean_rmse_body"];
}

impl CsvRow for BiasRow {
    const HEADER: &'static [&'static str] = &["agent_a", "sensor_a", "agent_b", "sensor_b", "bias"];
}

/// One stream frame flattened to long format, one row per tracked pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRow {
    pub pipeline: String,
    pub frame: usize,
    pub time: f64,
    pub source: Source,
    pub objective_p1: f64,
    pub objective_p2: Option<f64>,
    pub objective_fused: f64,
    pub pair: usize,
    pub eta: f64,
}

impl CsvRow for StreamRow {
    const HEADER: &'static [&'static str] = &[
        "pipeline",
        "frame",
        "time",
        "source",
        "objective_p1",
        "objective_p2",
        "objective_fused",
        "pair",
        "eta",
    ];
}

pub fn stream_rows(trace: &StreamTrace) -> Vec<StreamRow> {
    let mut rows = Vec::new();
    for (name, frames) in [("combined", &trace.combined), ("p1_only", &trace.p1_only)] {
        for f in frames {
            for (k, &eta) in f.eta.iter().enumerate() {
                rows.push(StreamRow {
                    pipeline: name.to_string(),
                    frame: f.frame,
                    time: f.time,
                    source: f.source,
                    objective_p1: f.objective_p1,
                    objective_p2: f.objective_p2,
                    objective_fused: f.objective_fused,
                    pair: k + 1,
                    eta,
                });
            }
        }
    }
    rows
}

/// CSV bytes with the header always present.
pub fn csv_bytes<T: CsvRow>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(T::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<()> {
    fs::write(path, csv_bytes(rows)?)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Writes `trials.csv`, `trace.csv` and `summary.json` into `dir`.
pub fn export_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let trials = dir.join("trials.csv");
    let trace = dir.join("trace.csv");
    let summary = dir.join("summary.json");
    write_csv(&trials, &report.trials)?;
    write_csv(&trace, &report.traces)?;
    #[derive(Serialize)]
    struct SummaryDoc<'a> {
        solver: &'a SolverSelection,
        seed: u64,
        workers: usize,
        converged: bool,
        summary: &'a Summary,
    }
    write_json(
        &summary,
        &SummaryDoc {
            solver: &report.solver,
            seed: report.seed,
            workers: report.workers,
            converged: report.converged,
            summary: &report.summary,
        },
    )?;
    Ok(vec![trials, trace, summary])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig {
            scenario: GeneratorSpec::with_pair(
                Shape::Cube {
                    side: 2,
                    spacing: 3.0,
                },
                3,
                ProprioMode::FourAxis,
            ),
            anchors: AnchorConfig {
                count: 2,
                per_anchor: 6,
                ..AnchorConfig::default()
            },
            trials: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"sigma": 0.2, "solver": {"kind": "esdp"}}"#).unwrap();
        assert_eq!(cfg.sigma, 0.2);
        assert_eq!(cfg.solver, SolverSelection::Esdp);
        assert_eq!(cfg.trials, 20);
    }

    #[test]
    fn invalid_options_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.sigma = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.scenario_file = Some(PathBuf::from("/nonexistent/scenario.json"));
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.esdp.barrier.mu_factor = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sub_seeds_differ_by_stream() {
        assert_ne!(sub_seed(1, 1), sub_seed(1, 2));
        assert_eq!(sub_seed(7, 3), sub_seed(7, 3));
    }

    #[test]
    fn neighbor_anchors_are_adjacent_to_agent_zero() {
        let cfg = small_config();
        let sc = generate_scenario(&cfg.scenario, 0).unwrap();
        let ids = anchor_ids(
            &AnchorConfig {
                count: 2,
                placement: AnchorPlacement::Neighbors,
                ..AnchorConfig::default()
            },
            &sc,
        );
        assert_eq!(ids[0], 0);
        assert!(sc.edges.contains(&(0, ids[1])));
    }

    #[test]
    fn pipeline_trial_reports_consistent_times() {
        let cfg = small_config();
        let report = run_solve(&cfg).unwrap();
        assert_eq!(report.trials.len(), 2);
        for t in &report.trials {
            assert!(t.pt <= t.st + 1e-12);
            assert!(t.pt >= 0.0);
            assert!(t.esdp_cycles.is_some() && t.refine_cycles.is_some());
            assert!(t.rmse_body.is_finite());
        }
    }

    #[test]
    fn bm_from_truth_without_noise_is_exact() {
        let mut cfg = small_config();
        cfg.solver = SolverSelection::Bm {
            rank: Some(3),
            update: UpdateKind::Exact,
        };
        cfg.sigma = 0.0;
        cfg.attitude_error = 0.0;
        cfg.anchors.count = 0;
        cfg.rho = 0.0;
        cfg.trials = 1;
        let report = run_solve(&cfg).unwrap();
        assert!(report.trials[0].rmse_body < 1e-6, "{}", report.trials[0].rmse_body);
    }

    #[test]
    fn empty_tables_have_headers_only() {
        let bytes = csv_bytes::<TrialReport>(&[]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("trial,seed,agents"));
    }

    #[test]
    fn headers_match_serialized_fields() {
        fn check<T: CsvRow>(row: T) {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.serialize(&row).unwrap();
            let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
            assert_eq!(text.lines().next().unwrap(), T::HEADER.join(","));
        }
        let cfg = small_config();
        let (trial, trace) = run_trial(&cfg, 0, 0).unwrap();
        check(trial);
        check(trace[0].clone());
        check(RankPoint {
            rank: 3,
            trials: 1,
            failures: 0,
            failure_rate: 0.0,
            mean_cycles: 1.0,
            mean_rmse_body: 0.0,
        });
        check(BiasRow {
            agent_a: 0,
            sensor_a: 0,
            agent_b: 1,
            sensor_b: 0,
            bias: 0.1,
        });
        check(StreamRow {
            pipeline: "combined".into(),
            frame: 0,
            time: 0.0,
            source: Source::Process1,
            objective_p1: 1.0,
            objective_p2: None,
            objective_fused: 1.0,
            pair: 1,
            eta: 0.0,
        });
    }

    #[test]
    fn static_noiseless_stream_locks_to_truth() {
        let mut cfg = RunConfig::default();
        cfg.attitude_error = 0.0;
        cfg.stream.sigma = 0.0;
        cfg.stream.duration = 1.0;
        cfg.stream.amplitude = 0.0;
        cfg.stream.drift_speed = 0.0;
        cfg.stream.spin_rate = 0.0;
        cfg.stream.tilt_amplitude = 0.0;
        cfg.stream.lift_jitter = 0.0;
        let trace = run_stream(&cfg).unwrap();
        assert_eq!(trace.combined.len(), 10);
        assert!(trace.esdp_runs >= 1);
        for f in trace.combined.iter().chain(&trace.p1_only) {
            assert!(f.mean_eta < 1e-6, "frame {} eta {}", f.frame, f.mean_eta);
        }
    }

    #[test]
    fn fusion_never_picks_the_higher_objective() {
        let mut cfg = RunConfig::default();
        cfg.stream.duration = 3.0;
        let trace = run_stream(&cfg).unwrap();
        for f in &trace.combined {
            assert!(f.objective_fused <= f.objective_p1 + 1e-12);
            if let Some(f2) = f.objective_p2 {
                assert!(f.objective_fused <= f2 + 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_calibration_removes_offsets() {
        let mut cfg = small_config();
        cfg.calibration.sigma = 0.0;
        let report = run_calibrate(&cfg).unwrap();
        assert!(report.error_before > 0.01);
        assert!(report.error_after < 1e-9);
        assert_eq!(report.pairs, report.table.len());
    }
}
