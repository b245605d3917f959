//! Parameter identification: gradient refinement through a frozen surrogate,
//! a simulated-annealing baseline over true-simulator replays, and evaluation.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{self, EpisodeSet};
use crate::error::{Error, Result};
use crate::metrics::{self, TrajErrorReport};
use crate::mlp::{Adam, AdamConfig};
use crate::plant::{self, EePose, ParamBounds, PhysParams, PlantConfig};
use crate::seed;
use crate::surrogate::{self, MlpCheckpoint, SurrogateObjective, TrainConfig};

/// Differentiable loss over `(f, p, d)`.
pub trait ParamObjective {
    fn loss_and_grad(&self, params: &PhysParams) -> Result<(f64, [f64; 3])>;

    fn loss(&self, params: &PhysParams) -> Result<f64> {
        self.loss_and_grad(params).map(|(l, _)| l)
    }
}

impl ParamObjective for SurrogateObjective<'_> {
    fn loss_and_grad(&self, params: &PhysParams) -> Result<(f64, [f64; 3])> {
        SurrogateObjective::loss_and_grad(self, params)
    }

    fn loss(&self, params: &PhysParams) -> Result<f64> {
        SurrogateObjective::loss(self, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineInit {
    BoundsMidpoint,
    /// The candidate with the lowest loss among the sampled parameter sets.
    BestSampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub init: RefineInit,
    /// Stop once `|L_k − L_{k−window}|` falls below this.
    pub convergence_tol: f64,
    pub convergence_window: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_steps: 500,
            init: RefineInit::BestSampled,
            convergence_tol: 1e-8,
            convergence_window: 20,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("refine learning_rate must be > 0".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("refine max_steps must be >= 1".into()));
        }
        if self.convergence_window == 0 {
            return Err(Error::InvalidConfig("convergence_window must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    /// Iterate with the lowest recorded loss.
    pub params: PhysParams,
    pub best_loss: f64,
    pub initial: PhysParams,
    /// Loss of every iterate, starting with the initial point.
    pub loss_curve: Vec<f64>,
    pub iterates: Vec<PhysParams>,
}

/// Projected Adam on `objective` in min-max normalized parameter coordinates.
pub fn refine_with<O: ParamObjective + ?Sized>(
    objective: &O,
    start: PhysParams,
    bounds: &ParamBounds,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    cfg.validate()?;
    bounds.validate()?;
    let start = bounds.clamp(start);
    let widths = bounds.intervals().map(|iv| iv.width());

    let mut adam = Adam::new(3, AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
    let mut unit = bounds.to_unit(&start);
    let mut current = start;
    let (mut loss, mut grad) = objective.loss_and_grad(&current)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let mut curve = vec![loss];
    let mut iterates = vec![current];
    let mut best = (current, loss);

    for step in 1..=cfg.max_steps {
        let grad_unit: [f64; 3] = std::array::from_fn(|k| grad[k] * widths[k]);
        adam.step(&mut unit, &grad_unit);
        unit.iter_mut().for_each(|u| *u = u.clamp(0.0, 1.0));
        current = bounds.clamp(bounds.from_unit(unit));
        (loss, grad) = objective.loss_and_grad(&current)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        curve.push(loss);
        iterates.push(current);
        if loss < best.1 {
            best = (current, loss);
        }
        let w = cfg.convergence_window;
        if curve.len() > w && (curve[curve.len() - 1] - curve[curve.len() - 1 - w]).abs() < cfg.convergence_tol {
            break;
        }
    }

    Ok(RefineResult { params: best.0, best_loss: best.1, initial: start, loss_curve: curve, iterates })
}

/// Picks the start point for refinement; ties go to the earliest candidate.
pub fn initial_params<O: ParamObjective + ?Sized>(
    objective: &O,
    init: RefineInit,
    bounds: &ParamBounds,
    candidates: &[PhysParams],
) -> Result<PhysParams> {
    match init {
        RefineInit::BoundsMidpoint => Ok(bounds.midpoint()),
        RefineInit::BestSampled => {
            let mut best: Option<(PhysParams, f64)> = None;
            for c in candidates {
                let c = bounds.clamp(*c);
                let l = objective.loss(&c)?;
                if best.is_none_or(|(_, b)| l < b) {
                    best = Some((c, l));
                }
            }
            best.map(|(p, _)| p).ok_or(Error::Empty("sampled parameter sets"))
        }
    }
}

/// Refines `(f, p, d)` against real transitions through the frozen surrogate.
pub fn refine_params(
    model: &MlpCheckpoint,
    episodes: &EpisodeSet,
    bounds: &ParamBounds,
    cfg: &RefineConfig,
    sampled: &[PhysParams],
) -> Result<RefineResult> {
    cfg.validate()?;
    let objective = SurrogateObjective::new(model, episodes)?;
    let start = initial_params(&objective, cfg.init, bounds, sampled)?;
    refine_with(&objective, start, bounds, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    pub steps: usize,
    pub initial_temperature: f64,
    /// Geometric cooling factor: `T_k = T_0 * gamma^k`.
    pub gamma: f64,
    /// Proposal standard deviation as a fraction of each bound's width.
    pub proposal_fraction: f64,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self { steps: 400, initial_temperature: 1.0, gamma: 0.99, proposal_fraction: 0.1, seed: 0 }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("anneal steps must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig("anneal gamma must lie in (0, 1)".into()));
        }
        if !(self.initial_temperature > 0.0 && self.initial_temperature.is_finite()) {
            return Err(Error::InvalidConfig("anneal temperature must be > 0".into()));
        }
        if !(self.proposal_fraction >= 0.0 && self.proposal_fraction.is_finite()) {
            return Err(Error::InvalidConfig("proposal_fraction must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealResult {
    pub params: PhysParams,
    pub best_energy: f64,
    /// Best-ever energy after each step, starting with the initial candidate.
    pub best_curve: Vec<f64>,
    /// Energy of the chain's current state after each step.
    pub energy_curve: Vec<f64>,
    pub accepted: usize,
    pub uphill_accepted: usize,
    /// Every proposed candidate, in order.
    pub proposals: Vec<PhysParams>,
}

/// Metropolis simulated annealing with clipped Gaussian proposals.
pub fn anneal_with<F>(mut energy: F, init: PhysParams, bounds: &ParamBounds, cfg: &AnnealConfig) -> Result<AnnealResult>
where
    F: FnMut(&PhysParams) -> Result<f64>,
{
    cfg.validate()?;
    bounds.validate()?;
    let mut rng = seed::rng(cfg.seed, &[0x5341]);
    let stds = bounds.intervals().map(|iv| cfg.proposal_fraction * iv.width());

    let mut current = bounds.clamp(init);
    let mut e_current = energy(&current)?;
    if !e_current.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let mut best = (current, e_current);
    let mut best_curve = vec![e_current];
    let mut energy_curve = vec![e_current];
    let mut proposals = Vec::with_capacity(cfg.steps);
    let (mut accepted, mut uphill) = (0, 0);

    for k in 0..cfg.steps {
        let temperature = cfg.initial_temperature * cfg.gamma.powi(k as i32);
        let mut cand = current.to_array();
        for (c, sd) in cand.iter_mut().zip(stds) {
            if sd > 0.0 {
                *c += Normal::new(0.0, sd).expect("finite std").sample(&mut rng);
            }
        }
        let cand = bounds.clamp(PhysParams::from_array(cand));
        proposals.push(cand);
        let e_cand = energy(&cand)?;
        if !e_cand.is_finite() {
            return Err(Error::NonFiniteLoss { step: k + 1 });
        }
        let delta = e_cand - e_current;
        // always draw so the stream does not depend on the energy landscape
        let u: f64 = rng.random();
        let accept = delta < 0.0 || u < (-delta / temperature).exp();
        if accept {
            accepted += 1;
            if delta > 0.0 {
                uphill += 1;
            }
            current = cand;
            e_current = e_cand;
        }
        if e_current < best.1 {
            best = (current, e_current);
        }
        best_curve.push(best.1);
        energy_curve.push(e_current);
    }

    Ok(AnnealResult {
        params: best.0,
        best_energy: best.1,
        best_curve,
        energy_curve,
        accepted,
        uphill_accepted: uphill,
        proposals,
    })
}

fn observed_poses(ep: &datagen::Episode, cfg: &PlantConfig) -> Vec<EePose> {
    ep.observed[1..].iter().map(|s| plant::fk_unchecked(&s.q, &cfg.link_lengths)).collect()
}

/// Teacher-forced one-step replay error of every episode, averaged across episodes.
pub fn replay_error(params: &PhysParams, episodes: &EpisodeSet, cfg: &PlantConfig) -> Result<TrajErrorReport> {
    cfg.validate()?;
    episodes.check(cfg.n_joints)?;
    let reports = episodes
        .episodes
        .iter()
        .map(|ep| {
            let pred: Vec<EePose> = ep
                .actions
                .iter()
                .enumerate()
                .map(|(t, a)| {
                    let mut s = ep.observed[t].clone();
                    plant::step_in_place(params, &mut s, a, cfg);
                    plant::fk(&s.q, cfg)
                })
                .collect::<Result<_>>()?;
            metrics::trajectory_error(&pred, &observed_poses(ep, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajErrorReport::mean(&reports)
}

/// Annealing baseline whose energy is the true-simulator replay error.
pub fn anneal_params(
    episodes: &EpisodeSet,
    bounds: &ParamBounds,
    cfg: &AnnealConfig,
    plant_cfg: &PlantConfig,
) -> Result<AnnealResult> {
    episodes.check(plant_cfg.n_joints)?;
    anneal_with(
        |p| replay_error(p, episodes, plant_cfg).map(|r| r.trajectory_error),
        bounds.midpoint(),
        bounds,
        cfg,
    )
}

/// Open-loop rollout error of `params` against the observed poses, averaged across episodes.
pub fn evaluate_params(params: &PhysParams, episodes: &EpisodeSet, cfg: &PlantConfig) -> Result<TrajErrorReport> {
    params.check_physical()?;
    cfg.validate()?;
    episodes.check(cfg.n_joints)?;
    let reports = episodes
        .episodes
        .iter()
        .map(|ep| {
            let traj = plant::rollout(params, &ep.init, &ep.actions, cfg, None)?;
            metrics::trajectory_error(&traj.poses[1..], &observed_poses(ep, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajErrorReport::mean(&reports)
}

/// Per-coordinate `|identified − truth| / |truth|`.
pub fn recovery_error(identified: &PhysParams, truth: &PhysParams) -> [f64; 3] {
    let (a, b) = (identified.to_array(), truth.to_array());
    std::array::from_fn(|k| {
        if b[k] == 0.0 {
            (a[k] - b[k]).abs()
        } else {
            ((a[k] - b[k]) / b[k]).abs()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SimulatedAnnealing")]
    Annealing,
    #[serde(rename = "SurrogateGradient")]
    Gradient,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Annealing => "SimulatedAnnealing",
            Method::Gradient => "SurrogateGradient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub method: Method,
    pub params: PhysParams,
    pub trajectory_error: f64,
    pub rotation_error: f64,
    pub translation_error: f64,
    pub wall_clock_seconds: f64,
    pub param_recovery_error: Option<[f64; 3]>,
}

impl IdentifyReport {
    pub fn new(
        method: Method,
        params: PhysParams,
        errors: &TrajErrorReport,
        wall_clock_seconds: f64,
        truth: Option<&PhysParams>,
    ) -> Self {
        Self {
            method,
            params,
            trajectory_error: errors.trajectory_error,
            rotation_error: errors.rotation_error,
            translation_error: errors.translation_error,
            wall_clock_seconds: wall_clock_seconds.max(f64::MIN_POSITIVE),
            param_recovery_error: truth.map(|t| recovery_error(&params, t)),
        }
    }
}

/// Settings shared by both pipelines in [`compare`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub plant: PlantConfig,
    pub bounds: ParamBounds,
    pub n_param_sets: usize,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub anneal: AnnealConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            bounds: ParamBounds::default(),
            n_param_sets: 50,
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            anneal: AnnealConfig::default(),
            seed: 0,
        }
    }
}

/// Everything the gradient pipeline produced, for inspection.
#[derive(Debug, Clone)]
pub struct GradientRun {
    pub sampled: Vec<PhysParams>,
    pub checkpoint: MlpCheckpoint,
    pub train_report: surrogate::TrainReport,
    pub refine: RefineResult,
    pub datagen_seconds: f64,
    pub train_seconds: f64,
    pub refine_seconds: f64,
}

impl GradientRun {
    pub fn total_seconds(&self) -> f64 {
        self.datagen_seconds + self.train_seconds + self.refine_seconds
    }
}

/// Sample → simulate → fit surrogate → refine, all on `fit`.
pub fn run_gradient_pipeline(fit: &EpisodeSet, cfg: &PipelineConfig) -> Result<GradientRun> {
    let t0 = Instant::now();
    let sampled = datagen::sample_params(cfg.n_param_sets, &cfg.bounds, seed::derive(cfg.seed, &[1]))?;
    let records = datagen::generate_transitions(fit, &sampled, &cfg.plant)?;
    let datagen_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let init = MlpCheckpoint::for_records(&records, seed::derive(cfg.seed, &[2]))?;
    let (checkpoint, train_report) = surrogate::train(&init, &records, &cfg.train)?;
    let train_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let refine = refine_params(&checkpoint, fit, &cfg.bounds, &cfg.refine, &sampled)?;
    let refine_seconds = t2.elapsed().as_secs_f64();

    Ok(GradientRun { sampled, checkpoint, train_report, refine, datagen_seconds, train_seconds, refine_seconds })
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub gradient: GradientRun,
    pub anneal: AnnealResult,
    pub anneal_seconds: f64,
    /// Annealing row first, then the gradient row.
    pub reports: Vec<IdentifyReport>,
}

/// Runs both pipelines on `fit` and scores them on `eval`.
pub fn compare(fit: &EpisodeSet, eval: &EpisodeSet, cfg: &PipelineConfig, truth: Option<&PhysParams>) -> Result<Comparison> {
    let gradient = run_gradient_pipeline(fit, cfg)?;

    let t = Instant::now();
    let anneal = anneal_params(fit, &cfg.bounds, &cfg.anneal, &cfg.plant)?;
    let anneal_seconds = t.elapsed().as_secs_f64();

    let sa_eval = evaluate_params(&anneal.params, eval, &cfg.plant)?;
    let grad_eval = evaluate_params(&gradient.refine.params, eval, &cfg.plant)?;
    let reports = vec![
        IdentifyReport::new(Method::Annealing, anneal.params, &sa_eval, anneal_seconds, truth),
        IdentifyReport::new(Method::Gradient, gradient.refine.params, &grad_eval, gradient.total_seconds(), truth),
    ];
    Ok(Comparison { gradient, anneal, anneal_seconds, reports })
}
