//! Deviation detection along expert prefixes and calibrated-trajectory
//! construction.
//!
//! The scan walks an expert trajectory position by position. At each position
//! it estimates the step reward of the expert action, samples one explored
//! action from the agent, estimates its step reward, and stops at the first
//! position where the explored reward drops below the expert reward by more
//! than the threshold. Non-deviated explored actions are discarded; the scan
//! always advances along the expert prefix.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::env::{action_candidates, replay_prefix, WorldSpec};
use crate::error::{CoreError, Result};
use crate::policy::{rollout, EnvView, Policy};
use crate::rng::Rng;
use crate::stepreward::{estimate_step_reward, McConfig};
use crate::trajectory::{ActionStep, Step, SubTrajectory, Trajectory, TrajectorySource};

/// Deviation detector configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Detection threshold; an explored action is deviated when
    /// `r_explored - r_prev < delta`.
    pub delta: f64,
    pub mc: McConfig,
    /// Sampling temperature for the explored action itself.
    pub explore_temperature: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { delta: 0.0, mc: McConfig::default(), explore_temperature: 1.0 }
    }
}

/// True iff the explored step reward drops below the previous expert step
/// reward by more than `delta`.
pub fn detect_deviation(r_prev: f64, r_explored: f64, delta: f64) -> bool {
    r_explored - r_prev < delta
}

/// First deviated action found while scanning one expert trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationEvent {
    pub task_id: String,
    /// 1-based position of the deviated action.
    pub t: usize,
    /// The explored action together with the observation it produced.
    pub explored_step: Step,
    /// Step reward of the preceding expert action (of the initial state when
    /// `t = 1`).
    pub r_prev: f64,
    pub r_explored: f64,
    /// Greedy continuation of the agent after the deviated action.
    pub deviated_continuation: SubTrajectory,
    /// Outcome of the deviated rollout.
    pub deviated_outcome: u8,
}

impl DeviationEvent {
    /// The full deviated trajectory `e_{1:t-1} ⊕ â_t ⊕ ê_{t+1:..}`.
    pub fn deviated_trajectory(&self, spec: &WorldSpec, expert: &Trajectory) -> Trajectory {
        let mut steps: Vec<Step> = expert.steps[..self.t - 1].to_vec();
        steps.push(self.explored_step.clone());
        steps.extend(self.deviated_continuation.steps.iter().cloned());
        Trajectory {
            task_id: spec.task_id.clone(),
            instruction: spec.instruction(),
            steps,
            outcome: self.deviated_outcome,
            source: TrajectorySource::Explored,
        }
    }

    /// The deviated suffix `â_t ⊕ ê_{t+1:..}` as action texts.
    pub fn deviated_suffix_actions(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(1 + self.deviated_continuation.len());
        out.push(self.explored_step.action.clone());
        out.extend(self.deviated_continuation.steps.iter().map(|s| s.action.clone()));
        out
    }
}

/// Scans expert prefixes with one agent-sampled explored action per position
/// and returns the first deviation, if any.
///
/// `agent` samples explored actions and rolls out the deviated continuation
/// greedily; `rollout_policy` drives the MC reward estimates (the paper's
/// default is the agent itself, injectable for oracle tests).
pub fn scan_expert_prefixes<A, R>(
    spec: &WorldSpec,
    expert: &Trajectory,
    agent: &mut A,
    rollout_policy: &mut R,
    cfg: &DetectorConfig,
    rng: &mut Rng,
) -> Result<Option<DeviationEvent>>
where
    A: Policy + ?Sized,
    R: Policy + ?Sized,
{
    if expert.outcome != 1 {
        return Err(CoreError::Config("scan requires a successful expert trajectory".into()));
    }
    let instruction = spec.instruction();
    let candidates = action_candidates(spec);
    let m = expert.len();
    for t in 1..m {
        let prefix = &expert.steps[..t - 1];
        let r_prev = estimate_step_reward(spec, prefix, rollout_policy, &cfg.mc)
            .map_err(|e| scan_context(e, t))?
            .mean;
        let mut env = replay_prefix(spec, &expert.steps, t - 1).map_err(|e| scan_context(e, t))?;
        let explored = {
            let view = EnvView {
                instruction: &instruction,
                history: prefix,
                candidates: &candidates,
                spec,
                state: Some(env.state()),
            };
            agent.act(&view, cfg.explore_temperature, rng)?
        };
        let result = env.step(&explored.action)?;
        let explored_step = Step::new(explored, result.observation);
        let mut explored_prefix: Vec<Step> = prefix.to_vec();
        explored_prefix.push(explored_step.clone());
        let r_explored =
            estimate_step_reward(spec, &explored_prefix, rollout_policy, &cfg.mc)
                .map_err(|e| scan_context(e, t))?
                .mean;
        if detect_deviation(r_prev, r_explored, cfg.delta) {
            let (cont_steps, outcome) =
                rollout(&mut env, &explored_prefix, agent, 0.0, rng)?;
            return Ok(Some(DeviationEvent {
                task_id: spec.task_id.clone(),
                t,
                explored_step,
                r_prev,
                r_explored,
                deviated_continuation: SubTrajectory {
                    parent_task_id: spec.task_id.clone(),
                    start: t + 1,
                    steps: cont_steps,
                },
                deviated_outcome: outcome,
            }));
        }
    }
    Ok(None)
}

fn scan_context(err: CoreError, t: usize) -> CoreError {
    match err {
        CoreError::Config(msg) => CoreError::Config(alloc::format!("at scan position {t}: {msg}")),
        other => other,
    }
}

/// Produces the reflective thought that turns a deviated action into the
/// ground-truth action.
pub trait Reflector {
    fn reflect(
        &mut self,
        instruction: &str,
        prefix: &[Step],
        deviated_action: &ActionStep,
        ground_truth_action: &ActionStep,
    ) -> Result<String>;
}

/// Deterministic offline reflector; an external LLM-backed reflector with the
/// same contract lives in the companion crate.
pub struct TemplateReflector;

/// Deterministic template fill. The goal clause is lifted from the task
/// instruction so the thought stays tied to the objective.
pub fn template_reflect(
    instruction: &str,
    _prefix: &[Step],
    deviated_action: &ActionStep,
    ground_truth_action: &ActionStep,
) -> String {
    let goal_clause = instruction
        .split_once("Your task: ")
        .map(|(_, rest)| rest.trim_end_matches('.'))
        .unwrap_or("the task goal must still be met");
    alloc::format!(
        "The last action '{}' moves away from the goal. I should instead '{}' because the task still requires me to {}.",
        deviated_action.action,
        ground_truth_action.action,
        goal_clause
    )
}

impl Reflector for TemplateReflector {
    fn reflect(
        &mut self,
        instruction: &str,
        prefix: &[Step],
        deviated_action: &ActionStep,
        ground_truth_action: &ActionStep,
    ) -> Result<String> {
        Ok(template_reflect(instruction, prefix, deviated_action, ground_truth_action))
    }
}

/// One calibrated trajectory: the reflective step plus the expert suffix,
/// paired with the deviated trajectory it replaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub task_id: String,
    /// 1-based position of the deviated/calibrated step.
    pub t: usize,
    /// Expert prefix `e_{1:t-1}`.
    pub prefix: SubTrajectory,
    pub deviated_step: Step,
    /// Reflection thought plus the ground-truth expert action.
    pub reflective_step: ActionStep,
    /// `a'_t ⊕ e_{t+1:m}`.
    pub calibrated_suffix: SubTrajectory,
    /// `e_{1:t-1} ⊕ â_t ⊕ ê_{t+1:..}`.
    pub deviated_trajectory: Trajectory,
}

impl CalibrationRecord {
    pub fn calibrated_suffix_actions(&self) -> Vec<String> {
        self.calibrated_suffix.steps.iter().map(|s| s.action.clone()).collect()
    }

    pub fn deviated_suffix_actions(&self) -> Vec<String> {
        self.deviated_trajectory.steps[self.t - 1..].iter().map(|s| s.action.clone()).collect()
    }

    /// Re-validates that `prefix ⊕ calibrated actions` replays to success.
    /// The replay may terminate early when the step budget runs out on a
    /// world that already satisfies the goal (the trailing `done` is then
    /// unreachable but redundant).
    pub fn validate_replay(&self, spec: &WorldSpec) -> Result<()> {
        let mut steps: Vec<Step> = self.prefix.steps.clone();
        steps.extend(self.calibrated_suffix.steps.iter().cloned());
        let (mut env, _) = crate::env::Env::reset(spec);
        for (idx, step) in steps.iter().enumerate() {
            if env.terminated() {
                break;
            }
            let result = env.step(&step.action)?;
            if result.observation != step.observation {
                return Err(CoreError::ReplayDivergence {
                    step: idx + 1,
                    expected: step.observation.clone(),
                    got: result.observation,
                });
            }
        }
        if env.state().outcome != Some(1) {
            return Err(CoreError::Planner("calibrated trajectory does not replay to success".into()));
        }
        Ok(())
    }
}

/// Assembles the calibration record for a detected deviation.
///
/// The reflective step reuses the expert action and (by environment
/// determinism) the expert observation at position `t`; the record is
/// validated by replay before it is returned.
pub fn build_calibration_record<R: Reflector + ?Sized>(
    spec: &WorldSpec,
    expert: &Trajectory,
    event: &DeviationEvent,
    reflector: &mut R,
) -> Result<CalibrationRecord> {
    if event.t < 1 || event.t > expert.len() {
        return Err(CoreError::Range {
            what: alloc::format!("deviation at {} in a {}-step expert", event.t, expert.len()),
        });
    }
    let instruction = spec.instruction();
    let prefix = expert.prefix(event.t - 1)?;
    let ground_truth = expert.steps[event.t - 1].action_step();
    let thought = reflector.reflect(
        &instruction,
        &prefix.steps,
        &event.explored_step.action_step(),
        &ground_truth,
    )?;
    if thought.trim().is_empty() {
        return Err(CoreError::Config("reflector returned an empty thought".into()));
    }
    let reflective_step = ActionStep::new(thought, ground_truth.action.clone());
    let mut suffix_steps = Vec::with_capacity(expert.len() - event.t + 1);
    suffix_steps.push(Step::new(reflective_step.clone(), expert.steps[event.t - 1].observation.clone()));
    suffix_steps.extend(expert.steps[event.t..].iter().cloned());
    let record = CalibrationRecord {
        task_id: spec.task_id.clone(),
        t: event.t,
        prefix,
        deviated_step: event.explored_step.clone(),
        reflective_step,
        calibrated_suffix: SubTrajectory {
            parent_task_id: spec.task_id.clone(),
            start: event.t,
            steps: suffix_steps,
        },
        deviated_trajectory: event.deviated_trajectory(spec, expert),
    };
    record.validate_replay(spec)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{expert_plan, gen_tasks, GenConfig};
    use crate::policy::{ExpertPolicy, NoisyExpertPolicy};
    use crate::rng::SeedPath;

    fn fixture() -> (WorldSpec, Trajectory) {
        let cfg = GenConfig {
            n_tasks: 1,
            n_locations: 4,
            n_objects: 3,
            goal_size_range: (1, 1),
            unseen: false,
            max_steps: 20,
        };
        let spec = gen_tasks(&cfg, 51).unwrap().pop().unwrap();
        let expert = expert_plan(&spec).unwrap();
        (spec, expert)
    }

    /// Emits a scripted action at one position, the expert action elsewhere.
    pub(crate) struct DeadEndAgent {
        pub at: usize,
        pub action: String,
        pub position: usize,
    }

    impl Policy for DeadEndAgent {
        fn act(&mut self, view: &EnvView<'_>, _temperature: f64, _rng: &mut Rng) -> Result<ActionStep> {
            self.position += 1;
            let text = if self.position == self.at {
                self.action.clone()
            } else {
                crate::env::plan_next(view.spec, view.state.expect("state")).text()
            };
            Ok(ActionStep::new(crate::policy::template_thought(&text), text))
        }
    }

    #[test]
    fn detection_boundary() {
        assert!(!detect_deviation(0.6, 0.6, 0.0));
        assert!(detect_deviation(0.6, 0.4, 0.0));
        assert!(detect_deviation(0.6, 0.55, 0.1));
        assert!(!detect_deviation(0.6, 0.55, -0.1));
    }

    #[test]
    fn expert_agent_never_deviates() {
        let (spec, expert) = fixture();
        let mut rng = SeedPath::new(0).rng();
        let event = scan_expert_prefixes(
            &spec,
            &expert,
            &mut ExpertPolicy,
            &mut ExpertPolicy,
            &DetectorConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(event.is_none());
    }

    #[test]
    fn scripted_dead_end_is_flagged_exactly() {
        let (spec, expert) = fixture();
        // tight budget: the trailing `done` is slack, so one wasted step is
        // exactly fatal while the on-plan expert still succeeds
        let mut spec = spec;
        spec.max_steps = expert.len() - 1;
        let mut agent = DeadEndAgent { at: 2, action: "open nowhere_9".into(), position: 0 };
        let mut rng = SeedPath::new(1).rng();
        let event = scan_expert_prefixes(
            &spec,
            &expert,
            &mut agent,
            &mut ExpertPolicy,
            &DetectorConfig::default(),
            &mut rng,
        )
        .unwrap()
        .expect("dead end must be detected");
        assert_eq!(event.t, 2);
        assert_eq!(event.r_prev, 1.0);
        assert_eq!(event.r_explored, 0.0);
        assert_eq!(event.explored_step.action, "open nowhere_9");
        assert!(detect_deviation(event.r_prev, event.r_explored, 0.0));
    }

    #[test]
    fn delta_minus_one_is_unsatisfiable() {
        let (spec, expert) = fixture();
        let mut cfg = DetectorConfig::default();
        cfg.delta = -1.0;
        let mut agent = NoisyExpertPolicy::new(1.0).unwrap();
        let mut rollout_policy = NoisyExpertPolicy::new(0.3).unwrap();
        for seed in 0..5 {
            let mut rng = SeedPath::new(seed).rng();
            let event = scan_expert_prefixes(
                &spec,
                &expert,
                &mut agent,
                &mut rollout_policy,
                &cfg,
                &mut rng,
            )
            .unwrap();
            assert!(event.is_none());
        }
    }

    #[test]
    fn forced_off_expert_at_first_position() {
        let (spec, expert) = fixture();
        let mut spec = spec;
        spec.max_steps = expert.len() - 1;
        let mut agent = DeadEndAgent { at: 1, action: "open nowhere_9".into(), position: 0 };
        let mut rng = SeedPath::new(2).rng();
        let event = scan_expert_prefixes(
            &spec,
            &expert,
            &mut agent,
            &mut ExpertPolicy,
            &DetectorConfig::default(),
            &mut rng,
        )
        .unwrap()
        .expect("deviation at t=1");
        assert_eq!(event.t, 1);
        assert_eq!(event.r_prev, 1.0);
        assert_eq!(event.r_explored, 0.0);
    }

    #[test]
    fn template_reflection_is_deterministic_and_complete() {
        let deviated = ActionStep::new("", "goto drawer_1");
        let truth = ActionStep::new("", "goto cabinet_2");
        let instruction = "You are at the shelf_1. Your task: put the pan_1 in the countertop_1.";
        let a = template_reflect(instruction, &[], &deviated, &truth);
        let b = template_reflect(instruction, &[], &deviated, &truth);
        assert_eq!(a, b);
        assert!(a.contains("goto drawer_1"));
        assert!(a.contains("goto cabinet_2"));
        assert_eq!(
            a,
            "The last action 'goto drawer_1' moves away from the goal. I should instead \
             'goto cabinet_2' because the task still requires me to put the pan_1 in the countertop_1."
        );
    }

    #[test]
    fn calibration_record_structure_and_replay() {
        let (spec, expert) = fixture();
        let mut spec = spec;
        spec.max_steps = expert.len() - 1;
        let mut agent = DeadEndAgent { at: 2, action: "open nowhere_9".into(), position: 0 };
        let mut rng = SeedPath::new(3).rng();
        let cfg = DetectorConfig::default();
        let event = scan_expert_prefixes(&spec, &expert, &mut agent, &mut ExpertPolicy, &cfg, &mut rng)
            .unwrap()
            .expect("expected deviation event");
        let record =
            build_calibration_record(&spec, &expert, &event, &mut TemplateReflector).unwrap();
        let expected: Vec<String> =
            expert.steps[event.t - 1..].iter().map(|s| s.action.clone()).collect();
        assert_eq!(record.calibrated_suffix_actions(), expected);
        assert_eq!(record.reflective_step.action, expert.steps[event.t - 1].action);
        assert!(record.reflective_step.thought.contains(&event.explored_step.action));
        record.validate_replay(&spec).unwrap();
        assert_eq!(record.deviated_trajectory.steps.len(), event.t + event.deviated_continuation.len());
    }
}
