//! Simulation dataset generation.
//!
//! Real episodes (here: a hidden-truth plant) provide states and actions; each
//! sampled parameter set replays every recorded action from the recorded state,
//! producing one-step transitions for surrogate training.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::plant::{self, Action, JointState, ParamBounds, PhysParams, PlantConfig};
use crate::seed;

/// Minimum standard deviation kept by [`NormStats`].
pub const STD_FLOOR: f64 = 1e-8;

/// Action steps between re-sampled excitation targets.
pub const EXCITATION_HOLD: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub params: PhysParams,
    pub state: JointState,
    pub action: Action,
    pub next_state: JointState,
}

/// Width of a flattened record: `params | q | qd | target | next_q | next_qd`.
pub fn record_dim(n_joints: usize) -> usize {
    3 + 5 * n_joints
}

/// Width of the surrogate input `params | q | qd | target`.
pub fn input_dim(n_joints: usize) -> usize {
    3 + 3 * n_joints
}

pub fn output_dim(n_joints: usize) -> usize {
    2 * n_joints
}

/// Writes `params | q | qd | target` into `out`.
pub fn write_input(params: &PhysParams, state: &JointState, action: &Action, out: &mut Vec<f64>) {
    out.extend_from_slice(&params.to_array());
    out.extend_from_slice(&state.q);
    out.extend_from_slice(&state.qd);
    out.extend_from_slice(&action.target_q);
}

impl TransitionRecord {
    pub fn n_joints(&self) -> usize {
        self.state.q.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(record_dim(self.n_joints()));
        write_input(&self.params, &self.state, &self.action, &mut v);
        v.extend_from_slice(&self.next_state.q);
        v.extend_from_slice(&self.next_state.qd);
        v
    }
}

/// Per-dimension z-score statistics over the flattened record layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_len("norm_stats.std", self.mean.len(), self.std.len())?;
        if self.mean.iter().any(|v| !v.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("norm stats must be finite with std > 0".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, offset: usize, v: f64) -> f64 {
        (v - self.mean[offset]) / self.std[offset]
    }

    pub fn denormalize(&self, offset: usize, z: f64) -> f64 {
        z * self.std[offset] + self.mean[offset]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeSource {
    SyntheticReal,
    Simulated,
}

/// One recorded episode; `observed[0]` is the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub init: JointState,
    pub actions: Vec<Action>,
    pub observed: Vec<JointState>,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn check(&self, n_joints: usize) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::Empty("episode actions"));
        }
        ensure_len("episode.observed", self.actions.len() + 1, self.observed.len())?;
        self.init.check(n_joints)?;
        for s in &self.observed {
            s.check(n_joints)?;
        }
        for a in &self.actions {
            a.check(n_joints)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSet {
    pub source: EpisodeSource,
    pub episodes: Vec<Episode>,
}

impl EpisodeSet {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(Episode::horizon).sum()
    }

    pub fn check(&self, n_joints: usize) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(Error::Empty("episode set"));
        }
        self.episodes.iter().try_for_each(|e| e.check(n_joints))
    }

    /// Splits off the trailing `fraction` of episodes (at least one stays in each part
    /// when there are two or more episodes).
    pub fn split_holdout(&self, fraction: f64) -> (EpisodeSet, EpisodeSet) {
        let n = self.episodes.len();
        let mut held = ((n as f64) * fraction).round() as usize;
        if n >= 2 {
            held = held.clamp(1, n - 1);
        } else {
            held = 0;
        }
        let (fit, eval) = self.episodes.split_at(n - held);
        let eval = if eval.is_empty() { fit } else { eval };
        (
            EpisodeSet { source: self.source, episodes: fit.to_vec() },
            EpisodeSet { source: self.source, episodes: eval.to_vec() },
        )
    }
}

/// Draws `n` parameter triples uniformly and independently per coordinate.
pub fn sample_params(n: usize, bounds: &ParamBounds, seed: u64) -> Result<Vec<PhysParams>> {
    if n == 0 {
        return Err(Error::InvalidConfig("number of parameter sets must be >= 1".into()));
    }
    bounds.validate()?;
    let mut rng = seed::rng(seed, &[0x5A_4D_50]);
    let iv = bounds.intervals();
    Ok((0..n)
        .map(|_| {
            PhysParams::from_array(std::array::from_fn(|k| {
                if iv[k].width() == 0.0 {
                    iv[k].min
                } else {
                    rng.random_range(iv[k].min..=iv[k].max)
                }
            }))
        })
        .collect())
}

/// Piecewise-constant random joint targets held for [`EXCITATION_HOLD`] steps.
pub fn excitation_actions<R: Rng>(n_joints: usize, horizon: usize, rng: &mut R) -> Vec<Action> {
    let mut actions = Vec::with_capacity(horizon);
    let mut current = Vec::new();
    for t in 0..horizon {
        if t % EXCITATION_HOLD == 0 {
            current = (0..n_joints).map(|_| rng.random_range(-PI..=PI)).collect();
        }
        actions.push(Action::new(current.clone()));
    }
    actions
}

/// Rolls out `n_episodes` excitation episodes under the hidden `theta_star`.
pub fn make_synthetic_real(
    theta_star: &PhysParams,
    n_episodes: usize,
    horizon: usize,
    cfg: &PlantConfig,
    seed: u64,
) -> Result<EpisodeSet> {
    if horizon < 1 {
        return Err(Error::InvalidConfig("horizon must be >= 1".into()));
    }
    if n_episodes < 1 {
        return Err(Error::InvalidConfig("n_episodes must be >= 1".into()));
    }
    cfg.validate()?;
    theta_star.check_physical()?;

    let n = cfg.n_joints;
    let episodes = (0..n_episodes as u64)
        .map(|e| {
            let mut rng = seed::rng(seed, &[e, 0]);
            let init = JointState::new(
                (0..n).map(|_| rng.random_range(-FRAC_PI_2..=FRAC_PI_2)).collect(),
                (0..n).map(|_| rng.random_range(-0.5..=0.5)).collect(),
            );
            let actions = excitation_actions(n, horizon, &mut rng);
            let traj = plant::rollout(theta_star, &init, &actions, cfg, Some(seed::derive(seed, &[e, 1])))?;
            Ok(Episode { init: traj.states[0].clone(), actions, observed: traj.states })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeSet { source: EpisodeSource::SyntheticReal, episodes })
}

/// Teacher-forced one-step replay of every recorded transition under every parameter set.
///
/// Records are ordered parameter set, then episode, then time step.
pub fn generate_transitions(
    episodes: &EpisodeSet,
    param_sets: &[PhysParams],
    cfg: &PlantConfig,
) -> Result<Vec<TransitionRecord>> {
    if param_sets.is_empty() {
        return Err(Error::Empty("parameter sets"));
    }
    cfg.validate()?;
    episodes.check(cfg.n_joints)?;
    for p in param_sets {
        crate::error::ensure_finite("params", &p.to_array())?;
    }

    let mut records = Vec::with_capacity(episodes.transitions() * param_sets.len());
    for params in param_sets {
        for ep in &episodes.episodes {
            for (t, action) in ep.actions.iter().enumerate() {
                let state = &ep.observed[t];
                let mut next = state.clone();
                plant::step_in_place(params, &mut next, action, cfg);
                records.push(TransitionRecord {
                    params: *params,
                    state: state.clone(),
                    action: action.clone(),
                    next_state: next,
                });
            }
        }
    }
    Ok(records)
}

/// Population mean and standard deviation per flattened dimension.
pub fn compute_norm_stats(records: &[TransitionRecord]) -> Result<NormStats> {
    if records.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 records for normalization, got {}",
            records.len()
        )));
    }
    let dim = record_dim(records[0].n_joints());
    let mut sum = vec![0.0; dim];
    let rows: Vec<Vec<f64>> = records.iter().map(TransitionRecord::flatten).collect();
    for row in &rows {
        ensure_len("record", dim, row.len())?;
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut var = vec![0.0; dim];
    for row in &rows {
        for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collapsed_f() -> ParamBounds {
        ParamBounds { f: crate::plant::Interval::new(1.0, 1.0), ..ParamBounds::default() }
    }

    #[test]
    fn sample_params_counts_and_bounds() {
        let b = ParamBounds::default();
        let ps = sample_params(50, &b, 1).unwrap();
        assert_eq!(ps.len(), 50);
        assert!(ps.iter().all(|p| b.contains(p)));
        assert_eq!(ps, sample_params(50, &b, 1).unwrap());
        assert_ne!(ps, sample_params(50, &b, 2).unwrap());

        let ps = sample_params(20, &collapsed_f(), 3).unwrap();
        assert!(ps.iter().all(|p| p.f == 1.0));
    }

    #[test]
    fn sample_params_rejects_inverted_bounds() {
        let b = ParamBounds { p: crate::plant::Interval::new(5.0, 1.0), ..ParamBounds::default() };
        assert!(matches!(sample_params(3, &b, 0), Err(Error::InvalidBounds { name: "p", .. })));
        assert!(sample_params(0, &ParamBounds::default(), 0).is_err());
    }

    #[test]
    fn sampled_params_cover_bounds() {
        let b = ParamBounds::default();
        let ps = sample_params(10_000, &b, 11).unwrap();
        for (k, iv) in b.intervals().iter().enumerate() {
            let vals: Vec<f64> = ps.iter().map(|p| p.to_array()[k]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo - iv.min <= 0.01 * iv.width());
            assert!(iv.max - hi <= 0.01 * iv.width());
        }
    }

    #[test]
    fn synthetic_real_shapes_and_reproducibility() {
        let cfg = PlantConfig::default();
        let truth = PhysParams::new(4.0, 60.0, 5.0);
        let set = make_synthetic_real(&truth, 20, 50, &cfg, 9).unwrap();
        assert_eq!(set.len(), 20);
        assert!(set.episodes.iter().all(|e| e.horizon() == 50 && e.observed.len() == 51));
        for ep in &set.episodes {
            let traj = plant::rollout(&truth, &ep.init, &ep.actions, &cfg, None).unwrap();
            assert_eq!(traj.states, ep.observed);
        }
        let other = make_synthetic_real(&truth, 20, 50, &cfg, 10).unwrap();
        assert_ne!(other.episodes[0].init, set.episodes[0].init);
        assert!(make_synthetic_real(&truth, 1, 0, &cfg, 9).is_err());
    }

    #[test]
    fn excitation_is_piecewise_constant_within_range() {
        let mut rng = seed::rng(4, &[]);
        let acts = excitation_actions(2, 35, &mut rng);
        for (t, a) in acts.iter().enumerate() {
            assert!(a.target_q.iter().all(|v| (-PI..=PI).contains(v)));
            if t % EXCITATION_HOLD != 0 {
                assert_eq!(a, &acts[t - 1]);
            }
        }
        assert_ne!(acts[0], acts[10]);
    }

    #[test]
    fn transitions_count_and_teacher_forcing() {
        let cfg = PlantConfig::default();
        let truth = PhysParams::new(4.0, 60.0, 5.0);
        let set = make_synthetic_real(&truth, 3, 7, &cfg, 2).unwrap();
        let ps = sample_params(4, &ParamBounds::default(), 5).unwrap();
        let recs = generate_transitions(&set, &ps, &cfg).unwrap();
        assert_eq!(recs.len(), 3 * 7 * 4);
        for r in &recs {
            assert!(set.episodes.iter().any(|e| e.observed.contains(&r.state)));
            assert_eq!(r.next_state, plant::step(&r.params, &r.state, &r.action, &cfg).unwrap());
        }

        let own = generate_transitions(&set, &[truth], &cfg).unwrap();
        let mut k = 0;
        for ep in &set.episodes {
            for t in 0..ep.horizon() {
                assert_eq!(own[k].next_state, ep.observed[t + 1]);
                k += 1;
            }
        }
        assert!(matches!(generate_transitions(&set, &[], &cfg), Err(Error::Empty(_))));
    }

    fn record(v: f64) -> TransitionRecord {
        TransitionRecord {
            params: PhysParams::new(1.0, 2.0, 3.0),
            state: JointState::new(vec![v], vec![0.0]),
            action: Action::new(vec![0.0]),
            next_state: JointState::new(vec![0.0], vec![0.0]),
        }
    }

    #[test]
    fn norm_stats_by_hand() {
        let stats = compute_norm_stats(&[record(0.0), record(2.0)]).unwrap();
        assert_eq!(stats.mean[3], 1.0);
        assert_eq!(stats.std[3], 1.0);
        // constant columns are floored, including the params block
        assert_eq!(&stats.mean[..3], &[1.0, 2.0, 3.0]);
        assert!(stats.std.iter().enumerate().all(|(i, s)| i == 3 || *s == STD_FLOOR));

        let same = compute_norm_stats(&[record(0.5), record(0.5)]).unwrap();
        assert_eq!(same.mean, record(0.5).flatten());
        assert!(same.std.iter().all(|s| *s == STD_FLOOR));
        assert!(compute_norm_stats(&[record(0.0)]).is_err());
    }

    #[test]
    fn holdout_split_takes_trailing_quarter() {
        let cfg = PlantConfig::default();
        let set = make_synthetic_real(&PhysParams::new(1.0, 10.0, 1.0), 20, 3, &cfg, 0).unwrap();
        let (fit, eval) = set.split_holdout(0.25);
        assert_eq!((fit.len(), eval.len()), (15, 5));
        assert_eq!(eval.episodes[0], set.episodes[15]);
    }
}
