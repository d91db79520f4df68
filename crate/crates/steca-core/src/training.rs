//! Supervised warm-up, reward-weighted training, and evaluation metrics.
//!
//! Both stages minimize a negative weighted log-likelihood with plain
//! mini-batch gradient descent at a constant learning rate; the warm-up is
//! the special case where every weight is 1 and every target is a single
//! step. Batches are normalized by their size, and the shuffle order is a
//! pure function of the seed, so training is bitwise reproducible.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, WeightedExample};
use crate::env::{replay_prefix, Env, WorldSpec};
use crate::error::{CoreError, Result};
use crate::policy::{
    rollout, segment_logprob, segment_logprob_grad, FeatureMap, Policy, PolicyParams,
};
use crate::rng::{uniform_index, SeedPath};
use crate::trajectory::{Step, SubTrajectory, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub sft_epochs: usize,
    pub rt_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.5, sft_epochs: 3, rt_epochs: 1, batch_size: 32, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Which terms of the reinforced objective are active; all on by default,
/// individual terms can be dropped for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMask {
    pub d_c: bool,
    pub d_s: bool,
    pub d_e: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        TermMask { d_c: true, d_s: true, d_e: true }
    }
}

/// Evaluation summary for one policy over one task suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_final_reward: f64,
    pub calibration_rate: f64,
    pub affordance_rate: f64,
    pub n_tasks: usize,
    pub seed: u64,
}

/// One (prefix, target, weight) item of the weighted likelihood.
struct TrainItem<'a> {
    spec: &'a WorldSpec,
    prefix: SubTrajectory,
    target: SubTrajectory,
    reward: f64,
}

/// Mean negative weighted log-likelihood and its gradient over a batch.
/// Items whose target contains an out-of-grammar action are skipped and
/// counted; a batch with no usable items is an error.
fn weighted_nll<F: FeatureMap>(
    params: &PolicyParams,
    feature_map: &F,
    items: &[&TrainItem<'_>],
    with_grad: bool,
) -> Result<(f64, Vec<f64>, usize)> {
    let mut value = 0.0;
    let mut grad = alloc::vec![0.0; params.feature_dim];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for item in items {
        let lp = segment_logprob(params, feature_map, item.spec, &item.prefix, &item.target, 1.0);
        match lp {
            Err(CoreError::InvalidSegment { .. }) => {
                skipped += 1;
                continue;
            }
            Err(other) => return Err(other),
            Ok(lp) => {
                value -= item.reward * lp;
                if with_grad {
                    let g = segment_logprob_grad(
                        params,
                        feature_map,
                        item.spec,
                        &item.prefix,
                        &item.target,
                        1.0,
                    )?;
                    for (gi, v) in grad.iter_mut().zip(g) {
                        *gi -= item.reward * v;
                    }
                }
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(CoreError::EmptyBatch);
    }
    let n = used as f64;
    value /= n;
    for g in &mut grad {
        *g /= n;
    }
    Ok((value, grad, skipped))
}

fn descend<F: FeatureMap>(
    mut params: PolicyParams,
    feature_map: &F,
    items: &[TrainItem<'_>],
    epochs: usize,
    cfg: &TrainConfig,
    shuffle_label: &str,
) -> Result<(PolicyParams, Vec<f64>)> {
    cfg.validate()?;
    params.validate()?;
    let mut epoch_losses = Vec::with_capacity(epochs);
    if items.is_empty() {
        return Ok((params, epoch_losses));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..epochs {
        let mut rng = SeedPath::new(cfg.seed).text(shuffle_label).index(epoch as u64).rng();
        // Fisher-Yates with the epoch's child stream
        for i in (1..order.len()).rev() {
            order.swap(i, uniform_index(&mut rng, i + 1));
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainItem<'_>> = chunk.iter().map(|&i| &items[i]).collect();
            let (value, grad, _) = weighted_nll(&params, feature_map, &batch, true)?;
            loss_sum += value;
            batches += 1;
            for (w, g) in params.weights.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok((params, epoch_losses))
}

/// Supervised warm-up on expert trajectories: one (prefix, single-step
/// target) pair per expert step, weight 1. Returns the warmed-up parameters
/// and the mean loss per epoch.
pub fn sft_warmup<F: FeatureMap>(
    params0: PolicyParams,
    feature_map: &F,
    experts: &[Trajectory],
    specs: &BTreeMap<String, WorldSpec>,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, Vec<f64>)> {
    let mut items = Vec::new();
    for expert in experts {
        let spec = specs
            .get(&expert.task_id)
            .ok_or_else(|| CoreError::Config(alloc::format!("no spec for task {}", expert.task_id)))?;
        for t in 1..=expert.len() {
            items.push(TrainItem {
                spec,
                prefix: expert.prefix(t - 1)?,
                target: expert.slice(t, t)?,
                reward: 1.0,
            });
        }
    }
    descend(params0, feature_map, &items, cfg.sft_epochs, cfg, "sft-shuffle")
}

fn bundle_items<'a>(
    bundle: &'a DatasetBundle,
    specs: &'a BTreeMap<String, WorldSpec>,
    mask: TermMask,
) -> Result<Vec<TrainItem<'a>>> {
    let mut items = Vec::new();
    let selected: Vec<&Vec<WeightedExample>> = [
        (mask.d_c, &bundle.d_c),
        (mask.d_s, &bundle.d_s),
        (mask.d_e, &bundle.d_e),
    ]
    .into_iter()
    .filter(|(on, _)| *on)
    .map(|(_, set)| set)
    .collect();
    for set in selected {
        for ex in set {
            let spec = specs
                .get(&ex.task_id)
                .ok_or_else(|| CoreError::Config(alloc::format!("no spec for task {}", ex.task_id)))?;
            items.push(TrainItem {
                spec,
                prefix: ex.prefix.clone(),
                target: ex.target.clone(),
                reward: ex.reward,
            });
        }
    }
    Ok(items)
}

/// Value and gradient of the reward-weighted objective over one batch of
/// examples (the negation of the maximization objective, normalized by batch
/// size). Examples with out-of-grammar targets are excluded and counted.
pub fn reinforced_loss<F: FeatureMap>(
    params: &PolicyParams,
    feature_map: &F,
    batch: &[WeightedExample],
    specs: &BTreeMap<String, WorldSpec>,
) -> Result<(f64, Vec<f64>, usize)> {
    let mut items = Vec::with_capacity(batch.len());
    for ex in batch {
        let spec = specs
            .get(&ex.task_id)
            .ok_or_else(|| CoreError::Config(alloc::format!("no spec for task {}", ex.task_id)))?;
        items.push(TrainItem {
            spec,
            prefix: ex.prefix.clone(),
            target: ex.target.clone(),
            reward: ex.reward,
        });
    }
    let refs: Vec<&TrainItem<'_>> = items.iter().collect();
    weighted_nll(params, feature_map, &refs, true)
}

/// Reward-weighted training over the bundle; deterministic in the seed.
pub fn reinforced_train<F: FeatureMap>(
    params: PolicyParams,
    feature_map: &F,
    bundle: &DatasetBundle,
    specs: &BTreeMap<String, WorldSpec>,
    mask: TermMask,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, Vec<f64>)> {
    let items = bundle_items(bundle, specs, mask)?;
    descend(params, feature_map, &items, cfg.rt_epochs, cfg, "rt-shuffle")
}

/// Runs one greedy episode (temperature 0) from the initial state.
pub fn greedy_episode<P: Policy + ?Sized>(spec: &WorldSpec, policy: &mut P) -> Result<Trajectory> {
    let (mut env, _) = Env::reset(spec);
    let mut rng = SeedPath::new(0).text("greedy-eval").rng();
    let (steps, outcome) = rollout(&mut env, &[], policy, 0.0, &mut rng)?;
    Ok(Trajectory {
        task_id: spec.task_id.clone(),
        instruction: spec.instruction(),
        steps,
        outcome,
        source: crate::trajectory::TrajectorySource::Explored,
    })
}

/// Average final reward: mean binary outcome over greedy episodes.
pub fn evaluate_success<P: Policy + ?Sized>(policy: &mut P, specs: &[WorldSpec]) -> Result<f64> {
    if specs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for spec in specs {
        total += f64::from(greedy_episode(spec, policy)?.outcome);
    }
    Ok(total / specs.len() as f64)
}

/// Fraction of emitted actions that execute (do not bounce off the world)
/// across greedy episodes.
pub fn affordance_rate<P: Policy + ?Sized>(policy: &mut P, specs: &[WorldSpec]) -> Result<f64> {
    let mut applicable = 0usize;
    let mut total = 0usize;
    for spec in specs {
        let traj = greedy_episode(spec, policy)?;
        for step in &traj.steps {
            total += 1;
            if !step.observation.starts_with("Nothing happens") {
                applicable += 1;
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(applicable as f64 / total as f64)
}

/// A stored evaluation prefix: the task and the steps to replay before the
/// policy takes over. The last step is the deviated action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPrefix {
    pub task_id: String,
    pub steps: Vec<Step>,
}

/// Result of the calibration evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEval {
    pub rate: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Replays each stored prefix (optionally omitting the trailing deviated
/// action), lets the policy continue greedily, and reports the success
/// fraction. Prefixes that fail to replay are skipped and counted.
pub fn evaluate_calibration<P: Policy + ?Sized>(
    policy: &mut P,
    prefixes: &[(WorldSpec, CalibrationPrefix)],
    include_deviated: bool,
) -> Result<CalibrationEval> {
    let mut successes = 0usize;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (spec, prefix) in prefixes {
        let steps: &[Step] = if include_deviated || prefix.steps.is_empty() {
            &prefix.steps
        } else {
            &prefix.steps[..prefix.steps.len() - 1]
        };
        let mut env = match replay_prefix(spec, steps, steps.len()) {
            Ok(env) => env,
            Err(CoreError::ReplayDivergence { .. }) => {
                skipped += 1;
                continue;
            }
            Err(other) => return Err(other),
        };
        let mut rng = SeedPath::new(0).text("calibration-eval").rng();
        let (_, outcome) = rollout(&mut env, steps, policy, 0.0, &mut rng)?;
        evaluated += 1;
        successes += usize::from(outcome == 1);
    }
    let rate = if evaluated == 0 { 0.0 } else { successes as f64 / evaluated as f64 };
    Ok(CalibrationEval { rate, evaluated, skipped })
}
