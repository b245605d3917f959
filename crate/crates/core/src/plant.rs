//! Reference plant: a decoupled PD-controlled planar arm with smoothed Coulomb friction.
//!
//! Every joint is an independent double integrator driven by
//! `tau = p * (target - q) - d * qd - f * tanh(qd / eps_v)`, integrated with
//! semi-implicit Euler. The same plant plays both the simulator and, with a
//! hidden parameter set and optional observation noise, the "real" robot.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::seed;

/// Friction, stiffness and damping shared by all joints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    /// Coulomb friction magnitude (N·m).
    pub f: f64,
    /// Proportional gain (N·m/rad).
    pub p: f64,
    /// Derivative gain (N·m·s/rad).
    pub d: f64,
}

impl PhysParams {
    pub const NAMES: [&'static str; 3] = ["f", "p", "d"];

    pub fn new(f: f64, p: f64, d: f64) -> Self {
        Self { f, p, d }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.f, self.p, self.d]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Physical admissibility independent of any particular bounds.
    pub fn check_physical(&self) -> Result<()> {
        ensure_finite("params", &self.to_array())?;
        if self.f < 0.0 {
            return Err(Error::InvalidConfig(format!("friction must be >= 0, got {}", self.f)));
        }
        if self.p <= 0.0 || self.d <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "stiffness and damping must be > 0, got p={} d={}",
                self.p, self.d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

/// Box constraints on [`PhysParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamBounds {
    pub f: Interval,
    pub p: Interval,
    pub d: Interval,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            f: Interval::new(0.0, 10.0),
            p: Interval::new(1.0, 500.0),
            d: Interval::new(0.1, 50.0),
        }
    }
}

impl ParamBounds {
    pub fn intervals(&self) -> [Interval; 3] {
        [self.f, self.p, self.d]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, iv) in PhysParams::NAMES.iter().zip(self.intervals()) {
            if !iv.min.is_finite() || !iv.max.is_finite() {
                return Err(Error::NonFinite("bounds"));
            }
            if iv.min > iv.max {
                return Err(Error::InvalidBounds { name, min: iv.min, max: iv.max });
            }
        }
        if self.f.min < 0.0 || self.p.min <= 0.0 || self.d.min <= 0.0 {
            return Err(Error::InvalidConfig(
                "bounds must keep f >= 0, p > 0 and d > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn check(&self, params: &PhysParams) -> Result<()> {
        for ((name, iv), v) in PhysParams::NAMES.iter().zip(self.intervals()).zip(params.to_array()) {
            if !v.is_finite() {
                return Err(Error::NonFinite("params"));
            }
            if !iv.contains(v) {
                return Err(Error::OutOfBounds { name, value: v, min: iv.min, max: iv.max });
            }
        }
        Ok(())
    }

    pub fn contains(&self, params: &PhysParams) -> bool {
        self.check(params).is_ok()
    }

    pub fn clamp(&self, params: PhysParams) -> PhysParams {
        let iv = self.intervals();
        let a = params.to_array();
        PhysParams::from_array([iv[0].clamp(a[0]), iv[1].clamp(a[1]), iv[2].clamp(a[2])])
    }

    pub fn midpoint(&self) -> PhysParams {
        let iv = self.intervals();
        PhysParams::from_array(iv.map(|i| 0.5 * (i.min + i.max)))
    }

    /// Min-max coordinates in `[0, 1]`; collapsed intervals map to 0.
    pub fn to_unit(&self, params: &PhysParams) -> [f64; 3] {
        let iv = self.intervals();
        let a = params.to_array();
        std::array::from_fn(|k| {
            let w = iv[k].width();
            if w > 0.0 {
                (a[k] - iv[k].min) / w
            } else {
                0.0
            }
        })
    }

    pub fn from_unit(&self, u: [f64; 3]) -> PhysParams {
        let iv = self.intervals();
        PhysParams::from_array(std::array::from_fn(|k| iv[k].min + u[k] * iv[k].width()))
    }
}

/// Geometry, inertia and integration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub n_joints: usize,
    pub link_lengths: Vec<f64>,
    pub inertias: Vec<f64>,
    pub dt: f64,
    pub substeps_per_action: usize,
    /// Velocity scale of the tanh friction smoothing (rad/s).
    pub friction_smoothing: f64,
    /// Std of additive noise on recorded q and qd of noisy rollouts.
    pub obs_noise_std: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self::with_joints(2)
    }
}

impl PlantConfig {
    pub fn with_joints(n: usize) -> Self {
        Self {
            n_joints: n,
            link_lengths: vec![1.0; n],
            inertias: vec![1.0; n],
            dt: 0.01,
            substeps_per_action: 5,
            friction_smoothing: 0.01,
            obs_noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_joints == 0 {
            return bad("n_joints must be >= 1");
        }
        ensure_len("link_lengths", self.n_joints, self.link_lengths.len())?;
        ensure_len("inertias", self.n_joints, self.inertias.len())?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        if self.substeps_per_action == 0 {
            return bad("substeps_per_action must be >= 1");
        }
        if !(self.friction_smoothing > 0.0 && self.friction_smoothing.is_finite()) {
            return bad("friction_smoothing must be > 0");
        }
        if !(self.obs_noise_std >= 0.0 && self.obs_noise_std.is_finite()) {
            return bad("obs_noise_std must be >= 0");
        }
        if self.link_lengths.iter().chain(&self.inertias).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("link lengths and inertias must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl JointState {
    pub fn new(q: Vec<f64>, qd: Vec<f64>) -> Self {
        Self { q, qd }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n], vec![0.0; n])
    }

    pub fn n_joints(&self) -> usize {
        self.q.len()
    }

    /// Concatenated `(q, qd)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.q.len());
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.qd);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let n = v.len() / 2;
        Self::new(v[..n].to_vec(), v[n..2 * n].to_vec())
    }

    pub fn check(&self, n: usize) -> Result<()> {
        ensure_len("state.q", n, self.q.len())?;
        ensure_len("state.qd", n, self.qd.len())?;
        ensure_finite("state", &self.q)?;
        ensure_finite("state", &self.qd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub target_q: Vec<f64>,
}

impl Action {
    pub fn new(target_q: Vec<f64>) -> Self {
        Self { target_q }
    }

    pub fn check(&self, n: usize) -> Result<()> {
        ensure_len("action", n, self.target_q.len())?;
        ensure_finite("action", &self.target_q)
    }
}

/// End-effector position and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EePose {
    pub x: Vector3<f64>,
    pub r: Matrix3<f64>,
}

impl EePose {
    pub fn new(x: Vector3<f64>, r: Matrix3<f64>) -> Self {
        Self { x, r }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Matrix3::identity())
    }
}

/// Rotation about the z axis.
pub fn rot_z(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<JointState>,
    pub actions: Vec<Action>,
    pub poses: Vec<EePose>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn is_consistent(&self) -> bool {
        let t = self.actions.len();
        t >= 1 && self.states.len() == t + 1 && self.poses.len() == t + 1
    }
}

/// Coulomb friction smoothed with `tanh`; opposes `qd`.
#[inline]
pub fn friction_torque(f: f64, qd: f64, eps_v: f64) -> f64 {
    -f * (qd / eps_v).tanh()
}

/// Advances one action interval (`substeps_per_action` semi-implicit Euler substeps).
pub fn step(params: &PhysParams, state: &JointState, action: &Action, cfg: &PlantConfig) -> Result<JointState> {
    let n = cfg.n_joints;
    state.check(n)?;
    action.check(n)?;
    ensure_finite("params", &params.to_array())?;

    let mut next = state.clone();
    step_in_place(params, &mut next, action, cfg);
    Ok(next)
}

/// Unchecked kernel of [`step`]; callers guarantee dimensions and finiteness.
pub(crate) fn step_in_place(params: &PhysParams, state: &mut JointState, action: &Action, cfg: &PlantConfig) {
    let dt = cfg.dt;
    for _ in 0..cfg.substeps_per_action {
        for i in 0..cfg.n_joints {
            let q = state.q[i];
            let qd = state.qd[i];
            let tau = params.p * (action.target_q[i] - q) - params.d * qd
                + friction_torque(params.f, qd, cfg.friction_smoothing);
            let qd_new = qd + dt * tau / cfg.inertias[i];
            state.qd[i] = qd_new;
            state.q[i] = q + dt * qd_new;
        }
    }
}

/// Planar forward kinematics; the end-effector frame is rotated by the summed joint angle.
pub fn fk(q: &[f64], cfg: &PlantConfig) -> Result<EePose> {
    ensure_len("fk.q", cfg.n_joints, q.len())?;
    ensure_finite("fk.q", q)?;
    Ok(fk_unchecked(q, &cfg.link_lengths))
}

pub(crate) fn fk_unchecked(q: &[f64], lengths: &[f64]) -> EePose {
    let mut theta = 0.0;
    let mut x = 0.0;
    let mut y = 0.0;
    for (qi, li) in q.iter().zip(lengths) {
        theta += qi;
        let (s, c) = theta.sin_cos();
        x += li * c;
        y += li * s;
    }
    EePose::new(Vector3::new(x, y, 0.0), rot_z(theta))
}

/// Chains [`step`] over `actions`. Noise, when enabled, perturbs only the recorded states.
pub fn rollout(
    params: &PhysParams,
    init: &JointState,
    actions: &[Action],
    cfg: &PlantConfig,
    noise_seed: Option<u64>,
) -> Result<Trajectory> {
    if actions.is_empty() {
        return Err(Error::Empty("actions"));
    }
    let n = cfg.n_joints;
    init.check(n)?;
    ensure_finite("params", &params.to_array())?;
    for a in actions {
        a.check(n)?;
    }

    let mut clean = init.clone();
    let mut clean_states = Vec::with_capacity(actions.len() + 1);
    clean_states.push(clean.clone());
    for a in actions {
        step_in_place(params, &mut clean, a, cfg);
        if clean.q.iter().chain(&clean.qd).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rollout state"));
        }
        clean_states.push(clean.clone());
    }

    let states = match noise_seed {
        Some(s) if cfg.obs_noise_std > 0.0 => {
            let mut rng = seed::rng(s, &[]);
            add_noise(clean_states, cfg.obs_noise_std, &mut rng)
        }
        _ => clean_states,
    };
    let poses = states.iter().map(|s| fk_unchecked(&s.q, &cfg.link_lengths)).collect();
    Ok(Trajectory { states, actions: actions.to_vec(), poses })
}

fn add_noise<R: Rng>(mut states: Vec<JointState>, std: f64, rng: &mut R) -> Vec<JointState> {
    let normal = Normal::new(0.0, std).expect("noise std validated by PlantConfig");
    for s in &mut states {
        for v in s.q.iter_mut().chain(s.qd.iter_mut()) {
            *v += normal.sample(rng);
        }
    }
    states
}
