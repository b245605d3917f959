//! Trajectory preference optimisation of a small reaching policy.
//!
//! A trajectory's log-likelihood under a policy is `−½ Σ_t ‖â_t − a_t‖²`, where
//! `â_t` is the policy's mean action at the recorded state and `a_t` the
//! executed (noised) action. Pairs of high- and low-reward rollouts train the
//! policy with the logistic preference loss `−log σ(β Δ)` against a frozen
//! reference copy.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::mlp::{Adam, AdamConfig, Mlp};
use crate::plant::{self, Action, JointState, PhysParams, PlantConfig, Trajectory};
use crate::seed;

/// Gaussian reaching policy: `(q, qd, goal) -> target_q` mean plus exploration noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub network: Mlp,
    pub exploration_std: Vec<f64>,
}

impl PolicyNet {
    pub fn init(n_joints: usize, hidden: usize, exploration_std: f64, seed: u64) -> Result<Self> {
        if !(exploration_std >= 0.0 && exploration_std.is_finite()) {
            return Err(Error::InvalidConfig("exploration_std must be >= 0".into()));
        }
        let network = Mlp::init(&[2 * n_joints + 2, hidden, hidden, n_joints], seed)?;
        Ok(Self { network, exploration_std: vec![exploration_std; n_joints] })
    }

    pub fn new(network: Mlp, exploration_std: Vec<f64>) -> Result<Self> {
        let n = network.output_dim();
        ensure_len("policy input", 2 * n + 2, network.input_dim())?;
        ensure_len("exploration_std", n, exploration_std.len())?;
        if exploration_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("exploration_std must be >= 0".into()));
        }
        Ok(Self { network, exploration_std })
    }

    pub fn n_joints(&self) -> usize {
        self.network.output_dim()
    }

    fn observation(state: &JointState, goal: [f64; 2], out: &mut Vec<f64>) {
        out.extend_from_slice(&state.q);
        out.extend_from_slice(&state.qd);
        out.extend_from_slice(&goal);
    }

    fn observations(states: &[JointState], goal: [f64; 2]) -> Array2<f64> {
        let n = states.first().map(|s| s.q.len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(states.len() * (2 * n + 2));
        for s in states {
            Self::observation(s, goal, &mut flat);
        }
        Array2::from_shape_vec((states.len(), 2 * n + 2), flat).expect("observation layout")
    }

    /// Deterministic mean action.
    pub fn mean_action(&self, state: &JointState, goal: [f64; 2]) -> Result<Action> {
        state.check(self.n_joints())?;
        let obs = Self::observations(std::slice::from_ref(state), goal);
        let out = self.network.forward(obs.view())?;
        Ok(Action::new(out.row(0).to_vec()))
    }

    /// Mean actions for the first `T` states of a trajectory, one row per step.
    fn mean_actions(&self, traj: &RankedTrajectory) -> Result<Array2<f64>> {
        let states = &traj.trajectory.states[..traj.trajectory.horizon()];
        self.network.forward(Self::observations(states, traj.goal).view())
    }
}

/// A rollout together with what is needed to score and re-weight it.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedTrajectory {
    /// Recorded states and poses; `trajectory.actions` are the executed actions.
    pub trajectory: Trajectory,
    /// Policy means `â_t` of the policy that generated the rollout.
    pub policy_means: Vec<Action>,
    pub goal: [f64; 2],
    /// Negative terminal end-effector distance to the goal (m).
    pub reward: f64,
}

impl RankedTrajectory {
    pub fn executed_actions(&self) -> &[Action] {
        &self.trajectory.actions
    }
}

pub fn terminal_reward(traj: &Trajectory, goal: [f64; 2]) -> f64 {
    let x = traj.poses.last().expect("trajectory has poses").x;
    -((x[0] - goal[0]).powi(2) + (x[1] - goal[1]).powi(2) + x[2].powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub chosen: RankedTrajectory,
    pub rejected: RankedTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GoalDistribution {
    Fixed { x: f64, y: f64 },
    /// Uniform over an axis-aligned box.
    Uniform { min: [f64; 2], max: [f64; 2] },
}

impl GoalDistribution {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        match *self {
            GoalDistribution::Fixed { x, y } => [x, y],
            GoalDistribution::Uniform { min, max } => {
                std::array::from_fn(|k| if max[k] > min[k] { rng.random_range(min[k]..max[k]) } else { min[k] })
            }
        }
    }
}

impl Default for GoalDistribution {
    fn default() -> Self {
        GoalDistribution::Fixed { x: 1.2, y: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpoConfig {
    pub beta: f64,
    /// Pairs per cycle.
    pub m: usize,
    pub epochs_per_cycle: usize,
    pub cycles: usize,
    pub rollouts_per_cycle: usize,
    pub learning_rate: f64,
    pub horizon: usize,
    pub policy_hidden: usize,
    pub exploration_std: f64,
    pub goal: GoalDistribution,
    pub seed: u64,
}

impl Default for TpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            m: 25,
            epochs_per_cycle: 80,
            cycles: 5,
            rollouts_per_cycle: 100,
            learning_rate: 1e-3,
            horizon: 30,
            policy_hidden: 4,
            exploration_std: 0.3,
            goal: GoalDistribution::default(),
            seed: 0,
        }
    }
}

impl TpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("tpo beta must be > 0");
        }
        if self.m == 0 || 2 * self.m > self.rollouts_per_cycle {
            return bad("tpo needs m >= 1 and 2m <= rollouts_per_cycle");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("tpo learning_rate must be >= 0");
        }
        if self.horizon == 0 || self.policy_hidden == 0 {
            return bad("tpo horizon and policy_hidden must be >= 1");
        }
        if !(self.exploration_std >= 0.0 && self.exploration_std.is_finite()) {
            return bad("exploration_std must be >= 0");
        }
        Ok(())
    }
}

/// `−½ Σ_t ‖â_t − a_t‖²` with `â_t` recomputed under `policy`.
pub fn traj_log_prob(policy: &PolicyNet, traj: &RankedTrajectory) -> Result<f64> {
    check_trajectory(policy, traj)?;
    let means = policy.mean_actions(traj)?;
    Ok(log_prob_from_means(&means, traj))
}

fn log_prob_from_means(means: &Array2<f64>, traj: &RankedTrajectory) -> f64 {
    let mut sq = 0.0;
    for (row, a) in means.rows().into_iter().zip(traj.executed_actions()) {
        sq += row.iter().zip(&a.target_q).map(|(m, x)| (m - x) * (m - x)).sum::<f64>();
    }
    -0.5 * sq
}

fn check_trajectory(policy: &PolicyNet, traj: &RankedTrajectory) -> Result<()> {
    let t = &traj.trajectory;
    if !t.is_consistent() {
        return Err(Error::InvalidConfig("inconsistent trajectory lengths".into()));
    }
    if traj.policy_means.len() != t.horizon() {
        return Err(Error::DimensionMismatch { what: "policy_means", expected: t.horizon(), got: traj.policy_means.len() });
    }
    let n = policy.n_joints();
    for s in &t.states {
        s.check(n)?;
    }
    for a in &t.actions {
        a.check(n)?;
    }
    Ok(())
}

/// Log-probability advantage from the four log-likelihoods of a pair.
pub fn delta_from_log_probs(chosen_theta: f64, chosen_ref: f64, rejected_theta: f64, rejected_ref: f64) -> f64 {
    (chosen_theta - chosen_ref) - (rejected_theta - rejected_ref)
}

pub fn tpo_delta(policy: &PolicyNet, reference: &PolicyNet, pair: &PreferencePair) -> Result<f64> {
    Ok(delta_from_log_probs(
        traj_log_prob(policy, &pair.chosen)?,
        traj_log_prob(reference, &pair.chosen)?,
        traj_log_prob(policy, &pair.rejected)?,
        traj_log_prob(reference, &pair.rejected)?,
    ))
}

/// `−log σ(x)`, computed without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `−log σ(β Δ_i)`.
pub fn loss_from_deltas(deltas: &[f64], beta: f64) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    Ok(deltas.iter().map(|d| neg_log_sigmoid(beta * d)).sum::<f64>() / deltas.len() as f64)
}

/// Preference loss and its gradient with respect to the policy's flat weights.
pub fn tpo_loss(policy: &PolicyNet, reference: &PolicyNet, pairs: &[PreferencePair], beta: f64) -> Result<(f64, Vec<f64>)> {
    let ref_lp = reference_log_probs(reference, pairs)?;
    loss_and_grad(policy, &ref_lp, pairs, beta)
}

fn reference_log_probs(reference: &PolicyNet, pairs: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| Ok((traj_log_prob(reference, &p.chosen)?, traj_log_prob(reference, &p.rejected)?)))
        .collect()
}

fn loss_and_grad(policy: &PolicyNet, ref_lp: &[(f64, f64)], pairs: &[PreferencePair], beta: f64) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig("beta must be > 0".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut grad = vec![0.0; policy.network.param_count()];
    let mut loss = 0.0;
    for (pair, (ref_w, ref_l)) in pairs.iter().zip(ref_lp) {
        check_trajectory(policy, &pair.chosen)?;
        check_trajectory(policy, &pair.rejected)?;
        let cw = policy.network.forward_cached(PolicyNet::observations(
            &pair.chosen.trajectory.states[..pair.chosen.trajectory.horizon()],
            pair.chosen.goal,
        ).view())?;
        let cl = policy.network.forward_cached(PolicyNet::observations(
            &pair.rejected.trajectory.states[..pair.rejected.trajectory.horizon()],
            pair.rejected.goal,
        ).view())?;
        let lw = log_prob_from_means(cw.output(), &pair.chosen);
        let ll = log_prob_from_means(cl.output(), &pair.rejected);
        let delta = delta_from_log_probs(lw, *ref_w, ll, *ref_l);
        loss += scale * neg_log_sigmoid(beta * delta);

        // d loss / d delta = −β σ(−β Δ)
        let dl_ddelta = -beta * sigmoid(-beta * delta) * scale;
        for (cache, traj, sign) in [(&cw, &pair.chosen, 1.0), (&cl, &pair.rejected, -1.0)] {
            // d log π / d â_t = −(â_t − a_t)
            let executed = traj.executed_actions();
            let out = cache.output();
            let g_out = Array2::from_shape_fn(out.raw_dim(), |(t, j)| {
                -sign * dl_ddelta * (out[[t, j]] - executed[t].target_q[j])
            });
            let g = policy.network.backward(cache, g_out.view(), true);
            for (acc, v) in grad.iter_mut().zip(g.flat()) {
                *acc += v;
            }
        }
    }
    if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tpo loss"));
    }
    Ok((loss, grad))
}

/// Indices of `(chosen, rejected)`: best with worst, second best with second worst, ...
///
/// Sorting is stable by reward descending, so ties keep input order.
pub fn rank_pairs(rewards: &[f64], m: usize) -> Result<Vec<(usize, usize)>> {
    if m == 0 || rewards.len() < 2 * m {
        return Err(Error::InvalidConfig(format!(
            "ranking needs at least 2m = {} trajectories, got {}",
            2 * m,
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| r.is_nan()) {
        return Err(Error::NonFinite("rewards"));
    }
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[b].partial_cmp(&rewards[a]).expect("no NaN"));
    let n = order.len();
    Ok((0..m).map(|i| (order[i], order[n - 1 - i])).collect())
}

pub fn rank_and_pair(trajectories: &[RankedTrajectory], m: usize) -> Result<Vec<PreferencePair>> {
    let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
    Ok(rank_pairs(&rewards, m)?
        .into_iter()
        .map(|(w, l)| PreferencePair { chosen: trajectories[w].clone(), rejected: trajectories[l].clone() })
        .collect())
}

/// Closed-loop rollout with Gaussian exploration around the policy mean.
pub fn policy_rollout<R: Rng>(
    policy: &PolicyNet,
    params: &PhysParams,
    init: &JointState,
    goal: [f64; 2],
    horizon: usize,
    cfg: &PlantConfig,
    rng: &mut R,
) -> Result<RankedTrajectory> {
    let n = policy.n_joints();
    ensure_len("policy joints", cfg.n_joints, n)?;
    init.check(n)?;
    let mut states = vec![init.clone()];
    let mut actions = Vec::with_capacity(horizon);
    let mut means = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let state = states.last().expect("non-empty");
        let mean = policy.mean_action(state, goal)?;
        let executed = Action::new(
            mean.target_q
                .iter()
                .zip(&policy.exploration_std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect(),
        );
        let next = plant::step(params, state, &executed, cfg)?;
        states.push(next);
        actions.push(executed);
        means.push(mean);
    }
    let poses = states.iter().map(|s| plant::fk(&s.q, cfg)).collect::<Result<Vec<_>>>()?;
    let trajectory = Trajectory { states, actions, poses };
    let reward = terminal_reward(&trajectory, goal);
    Ok(RankedTrajectory { trajectory, policy_means: means, goal, reward })
}

fn rollout_batch(
    policy: &PolicyNet,
    params: &PhysParams,
    cfg: &TpoConfig,
    plant_cfg: &PlantConfig,
    cycle: usize,
) -> Result<Vec<RankedTrajectory>> {
    let init = JointState::zeros(plant_cfg.n_joints);
    (0..cfg.rollouts_per_cycle)
        .map(|i| {
            let mut rng = seed::rng(cfg.seed, &[cycle as u64, i as u64]);
            let goal = cfg.goal.sample(&mut rng);
            policy_rollout(policy, params, &init, goal, cfg.horizon, plant_cfg, &mut rng)
        })
        .collect()
}

fn mean_reward(batch: &[RankedTrajectory]) -> f64 {
    batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub mean_reward_before: f64,
    /// Same noise streams as the "before" batch, replayed under the updated policy.
    pub mean_reward_after: f64,
    pub loss_first: f64,
    pub loss_last: f64,
}

/// One fine-tuning cycle: roll out, rank, and take `epochs_per_cycle` Adam steps.
pub fn tpo_cycle(
    policy: &PolicyNet,
    params: &PhysParams,
    cfg: &TpoConfig,
    plant_cfg: &PlantConfig,
    cycle: usize,
) -> Result<(PolicyNet, CycleReport)> {
    cfg.validate()?;
    let reference = policy.clone();
    let batch = rollout_batch(&reference, params, cfg, plant_cfg, cycle)?;
    let before = mean_reward(&batch);
    let pairs = rank_and_pair(&batch, cfg.m)?;
    let ref_lp = reference_log_probs(&reference, &pairs)?;

    let mut current = policy.clone();
    let mut adam = Adam::new(current.network.param_count(), AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() });
    let mut flat = current.network.flat_params();
    let (mut loss_first, mut loss_last) = (f64::NAN, f64::NAN);
    for epoch in 0..cfg.epochs_per_cycle {
        let (loss, grad) = loss_and_grad(&current, &ref_lp, &pairs, cfg.beta).map_err(|_| Error::TpoDivergence { cycle })?;
        if epoch == 0 {
            loss_first = loss;
        }
        loss_last = loss;
        adam.step(&mut flat, &grad);
        current.network.set_flat_params(&flat)?;
    }
    if cfg.epochs_per_cycle == 0 {
        let (loss, _) = loss_and_grad(&current, &ref_lp, &pairs, cfg.beta)?;
        loss_first = loss;
        loss_last = loss;
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::TpoDivergence { cycle });
    }

    let after = mean_reward(&rollout_batch(&current, params, cfg, plant_cfg, cycle)?);
    Ok((current, CycleReport { cycle, mean_reward_before: before, mean_reward_after: after, loss_first, loss_last }))
}

/// Runs `cfg.cycles` consecutive cycles.
pub fn run_tpo(
    policy: &PolicyNet,
    params: &PhysParams,
    cfg: &TpoConfig,
    plant_cfg: &PlantConfig,
) -> Result<(PolicyNet, Vec<CycleReport>)> {
    cfg.validate()?;
    let mut current = policy.clone();
    let mut reports = Vec::with_capacity(cfg.cycles);
    for cycle in 0..cfg.cycles {
        let (next, report) = tpo_cycle(&current, params, cfg, plant_cfg, cycle)?;
        current = next;
        reports.push(report);
    }
    Ok((current, reports))
}
