//! Monte Carlo estimation of step-level rewards.
//!
//! The reward of a (state, action) pair is the expected terminal outcome of
//! continuing from that pair with the rollout policy: N independent
//! continuations are sampled to termination and their binary outcomes
//! averaged. Rollout i draws its RNG from `child(base_seed, task_id, t, i)`,
//! so the outcomes vector is deterministic regardless of scheduling.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::env::{replay_prefix, WorldSpec};
use crate::error::Result;
use crate::policy::{rollout, Policy};
use crate::rng::SeedPath;
use crate::trajectory::{ActionStep, Step, SubTrajectory};

/// Monte Carlo sampling configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub base_seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { n_samples: 5, temperature: 1.0, base_seed: 0 }
    }
}

/// Estimated step reward for one (state, action) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRewardEstimate {
    pub task_id: String,
    /// 1-based index of the action under evaluation.
    pub t: usize,
    pub action: ActionStep,
    pub outcomes: Vec<u8>,
    pub mean: f64,
}

/// Estimates the step reward of the last action in `prefix`.
///
/// `prefix` is the executed history `e_{1:t-1} ⊕ a_t`; rollouts continue from
/// the state it reaches. A prefix that already terminated returns its outcome
/// as a constant estimate, which keeps the deviation detector total near
/// trajectory ends.
pub fn estimate_step_reward<P: Policy + ?Sized>(
    spec: &WorldSpec,
    prefix: &[Step],
    rollout_policy: &mut P,
    cfg: &McConfig,
) -> Result<StepRewardEstimate> {
    let t = prefix.len();
    let action = prefix
        .last()
        .map(Step::action_step)
        .unwrap_or_else(|| ActionStep::new("", "<initial state>"));
    let base = replay_prefix(spec, prefix, t)?;
    let mut outcomes = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let outcome = if base.terminated() {
            base.state().outcome.expect("terminated env has an outcome")
        } else {
            let mut env = base.clone();
            let mut rng = SeedPath::new(cfg.base_seed)
                .text("mc-rollout")
                .text(&spec.task_id)
                .index(t as u64)
                .index(i as u64)
                .rng();
            let (_, outcome) = rollout(&mut env, prefix, rollout_policy, cfg.temperature, &mut rng)?;
            outcome
        };
        outcomes.push(outcome);
    }
    let mean = outcomes.iter().map(|&o| f64::from(o)).sum::<f64>() / cfg.n_samples as f64;
    Ok(StepRewardEstimate { task_id: spec.task_id.clone(), t, action, outcomes, mean })
}

/// Estimate addressed by an explicit sub-trajectory (`e_{1:t-1} ⊕ a_t` as a
/// prefix slice of a stored trajectory).
pub fn estimate_for_subtrajectory<P: Policy + ?Sized>(
    spec: &WorldSpec,
    prefix: &SubTrajectory,
    rollout_policy: &mut P,
    cfg: &McConfig,
) -> Result<StepRewardEstimate> {
    estimate_step_reward(spec, &prefix.steps, rollout_policy, cfg)
}
