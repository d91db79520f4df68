//! Canonical trajectory data model shared by every other module.
//!
//! Step indices are 1-based throughout, matching the `a_1..a_m` convention;
//! an empty prefix is a [`SubTrajectory`] with `start = 1` and no steps.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A rationale plus one environment command, treated as a single unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionStep {
    pub thought: String,
    pub action: String,
}

impl ActionStep {
    pub fn new(thought: impl Into<String>, action: impl Into<String>) -> Self {
        ActionStep { thought: thought.into(), action: action.into() }
    }
}

/// One interaction turn: the agent's action and the environment's feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub thought: String,
    pub action: String,
    pub observation: String,
}

impl Step {
    pub fn new(action_step: ActionStep, observation: impl Into<String>) -> Self {
        Step {
            thought: action_step.thought,
            action: action_step.action,
            observation: observation.into(),
        }
    }

    pub fn action_step(&self) -> ActionStep {
        ActionStep { thought: self.thought.clone(), action: self.action.clone() }
    }
}

/// Where a trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    Expert,
    Explored,
    Calibrated,
}

/// A full episode: instruction, ordered steps, and the binary outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub instruction: String,
    pub steps: Vec<Step>,
    pub outcome: u8,
    pub source: TrajectorySource,
}

impl Trajectory {
    /// Number of steps `m`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Steps `i..=j`, 1-based inclusive on both ends.
    pub fn slice(&self, i: usize, j: usize) -> Result<SubTrajectory> {
        if i < 1 || i > j || j > self.steps.len() {
            return Err(CoreError::Range {
                what: alloc::format!("slice({i}, {j}) of a {}-step trajectory", self.steps.len()),
            });
        }
        Ok(SubTrajectory {
            parent_task_id: self.task_id.clone(),
            start: i,
            steps: self.steps[i - 1..j].to_vec(),
        })
    }

    /// Prefix `e_{1:t}`; `t = 0` yields the empty prefix.
    pub fn prefix(&self, t: usize) -> Result<SubTrajectory> {
        if t == 0 {
            return Ok(SubTrajectory::empty(self.task_id.clone()));
        }
        self.slice(1, t)
    }

    pub fn actions(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.action.as_str()).collect()
    }
}

/// A contiguous run of steps `e_{i:j}` cut from a parent trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTrajectory {
    pub parent_task_id: String,
    /// 1-based index of the first step within the parent.
    pub start: usize,
    pub steps: Vec<Step>,
}

impl SubTrajectory {
    pub fn empty(parent_task_id: String) -> Self {
        SubTrajectory { parent_task_id, start: 1, steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.action.as_str()).collect()
    }

    /// Steps `i..=j` of this sub-trajectory (1-based within it).
    pub fn slice(&self, i: usize, j: usize) -> Result<SubTrajectory> {
        if i < 1 || i > j || j > self.steps.len() {
            return Err(CoreError::Range {
                what: alloc::format!("slice({i}, {j}) of a {}-step sub-trajectory", self.steps.len()),
            });
        }
        Ok(SubTrajectory {
            parent_task_id: self.parent_task_id.clone(),
            start: self.start + i - 1,
            steps: self.steps[i - 1..j].to_vec(),
        })
    }

    /// Concatenation, keeping this sub-trajectory's start.
    pub fn concat(&self, other: &SubTrajectory) -> SubTrajectory {
        let mut steps = self.steps.clone();
        steps.extend(other.steps.iter().cloned());
        SubTrajectory { parent_task_id: self.parent_task_id.clone(), start: self.start, steps }
    }
}

/// Checks the structural invariants of a trajectory.
pub fn validate(traj: &Trajectory, max_steps: usize) -> Result<()> {
    if traj.steps.is_empty() || traj.steps.len() > max_steps {
        return Err(CoreError::Range {
            what: alloc::format!("trajectory length {} not in 1..={max_steps}", traj.steps.len()),
        });
    }
    if traj.outcome > 1 {
        return Err(CoreError::Config(alloc::format!("outcome {} not in {{0,1}}", traj.outcome)));
    }
    if traj.source == TrajectorySource::Expert && traj.outcome != 1 {
        return Err(CoreError::Config("expert trajectory with outcome 0".into()));
    }
    for (idx, step) in traj.steps.iter().enumerate() {
        if step.action.is_empty() || step.action.contains('\n') {
            return Err(CoreError::Config(alloc::format!("bad action at step {}", idx + 1)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(m: usize) -> Trajectory {
        Trajectory {
            task_id: "t0".into(),
            instruction: "do things".into(),
            steps: (1..=m)
                .map(|i| Step {
                    thought: alloc::format!("think {i}"),
                    action: alloc::format!("act {i}"),
                    observation: alloc::format!("obs {i}"),
                })
                .collect(),
            outcome: 1,
            source: TrajectorySource::Expert,
        }
    }

    #[test]
    fn slice_identity() {
        let e = fixture(4);
        let s = e.slice(1, 4).unwrap();
        assert_eq!(s.steps, e.steps);
        assert_eq!(s.start, 1);
    }

    #[test]
    fn slice_suffix_and_single() {
        let e = fixture(5);
        let suffix = e.slice(3, 5).unwrap();
        assert_eq!(suffix.start, 3);
        assert_eq!(suffix.actions(), ["act 3", "act 4", "act 5"]);

        let single = e.slice(3, 3).unwrap();
        assert_eq!(single.start, 3);
        assert_eq!(single.len(), 1);
        assert_eq!(single.steps[0].action, "act 3");
    }

    #[test]
    fn slice_out_of_range() {
        let e = fixture(3);
        assert!(matches!(e.slice(0, 2), Err(CoreError::Range { .. })));
        assert!(matches!(e.slice(2, 4), Err(CoreError::Range { .. })));
        assert!(matches!(e.slice(3, 2), Err(CoreError::Range { .. })));
    }

    #[test]
    fn nested_slice_composes() {
        let e = fixture(6);
        for i in 1..=4usize {
            for j in i..=6usize {
                let outer = e.slice(i, j).unwrap();
                for k in 1..=outer.len() {
                    let inner = outer.slice(1, k).unwrap();
                    let direct = e.slice(i, i + k - 1).unwrap();
                    assert_eq!(inner, direct);
                }
            }
        }
    }

    #[test]
    fn empty_prefix() {
        let e = fixture(3);
        let p = e.prefix(0).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.start, 1);
    }

    #[test]
    fn validate_rejects_failed_expert() {
        let mut e = fixture(3);
        e.outcome = 0;
        assert!(validate(&e, 20).is_err());
    }

    #[test]
    fn validate_rejects_newline_action() {
        let mut e = fixture(2);
        e.steps[0].action = "go\nto".into();
        assert!(validate(&e, 20).is_err());
    }
}
