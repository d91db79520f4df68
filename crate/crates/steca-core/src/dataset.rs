//! Deviation-weighted training datasets.
//!
//! Three example families share one weighted shape:
//! - calibration examples: reward `1 + eta * d(calibrated suffix, deviated suffix)`
//! - expert sub-trajectory examples: reward `1 + eta * d(expert suffix, explored suffix)`
//! - explored-success examples: reward `1 - eta * d(explored, expert)`, with the
//!   matching expert trajectory carried at reward exactly 1 (the fixed point of
//!   the same formula at distance 0).
//!
//! With the distance clamped to `[0,1]`, rewards land in `[1, 1+eta]` for the
//! first two kinds and `[1-eta, 1]` for the third; `eta = 0` collapses all
//! rewards to 1.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationRecord;
use crate::error::Result;
use crate::ndtw::{ndtw_distance, StepDistance};
use crate::trajectory::{SubTrajectory, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Calibration,
    ExpertSub,
    ExploredSuccess,
}

/// One weighted training segment: maximize `reward * log pi(target | prefix)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedExample {
    pub kind: ExampleKind,
    pub task_id: String,
    pub prefix: SubTrajectory,
    pub target: SubTrajectory,
    pub reward: f64,
    pub deviation_distance: f64,
}

impl WeightedExample {
    /// Checks the reward-range invariant for this example's kind.
    pub fn reward_in_range(&self, eta: f64) -> bool {
        let r = self.reward;
        match self.kind {
            ExampleKind::Calibration | ExampleKind::ExpertSub => (1.0..=1.0 + eta).contains(&r),
            ExampleKind::ExploredSuccess => (1.0 - eta..=1.0).contains(&r),
        }
    }
}

/// The three datasets plus the parameters they were built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub d_c: Vec<WeightedExample>,
    pub d_s: Vec<WeightedExample>,
    pub d_e: Vec<WeightedExample>,
    pub eta: f64,
    pub distance: StepDistance,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.d_c.len() + self.d_s.len() + self.d_e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &WeightedExample> {
        self.d_c.iter().chain(self.d_s.iter()).chain(self.d_e.iter())
    }
}

/// Calibration examples: prefix `e_{1:t-1}`, target the calibrated suffix,
/// reward grows with the distance to the deviated suffix.
pub fn build_calibration_examples(
    records: &[CalibrationRecord],
    eta: f64,
    d: StepDistance,
) -> Result<Vec<WeightedExample>> {
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let calibrated = record.calibrated_suffix_actions();
        let deviated = record.deviated_suffix_actions();
        if calibrated.is_empty() || deviated.is_empty() {
            log::warn!("skipping calibration record for {} with an empty suffix", record.task_id);
            continue;
        }
        let distance = ndtw_distance(&calibrated, &deviated, d)?;
        out.push(WeightedExample {
            kind: ExampleKind::Calibration,
            task_id: record.task_id.clone(),
            prefix: record.prefix.clone(),
            target: record.calibrated_suffix.clone(),
            reward: 1.0 + eta * distance,
            deviation_distance: distance,
        });
    }
    Ok(out)
}

/// A failed exploration paired with its expert and the first deviated index.
#[derive(Debug, Clone)]
pub struct FailureCase {
    pub explored: Trajectory,
    pub expert: Trajectory,
    /// 1-based first deviated position in the explored trajectory.
    pub t: usize,
}

/// Expert sub-trajectory examples: prefix `e_{1:t-1}` (expert), target the
/// expert suffix `e_{t:m}`, reward grows with distance to the explored suffix.
///
/// Unequal suffix lengths are aligned by nDTW directly.
pub fn build_expert_sub_examples(
    failures: &[FailureCase],
    eta: f64,
    d: StepDistance,
) -> Result<Vec<WeightedExample>> {
    let mut out = Vec::with_capacity(failures.len());
    for case in failures {
        if case.t < 1 || case.t > case.expert.len() || case.t > case.explored.len() {
            log::warn!(
                "skipping failure case for {}: deviated index {} out of range",
                case.explored.task_id,
                case.t
            );
            continue;
        }
        let expert_suffix = case.expert.slice(case.t, case.expert.len())?;
        let explored_suffix = case.explored.slice(case.t, case.explored.len())?;
        let distance = ndtw_distance(&expert_suffix.actions(), &explored_suffix.actions(), d)?;
        out.push(WeightedExample {
            kind: ExampleKind::ExpertSub,
            task_id: case.expert.task_id.clone(),
            prefix: case.expert.prefix(case.t - 1)?,
            target: expert_suffix,
            reward: 1.0 + eta * distance,
            deviation_distance: distance,
        });
    }
    Ok(out)
}

/// Explored-success examples: empty prefix, target the full explored
/// trajectory, reward shrinks with distance from the expert; each matching
/// expert trajectory is added once at reward exactly 1.
pub fn build_explored_success_examples(
    successes: &[Trajectory],
    experts: &BTreeMap<String, Trajectory>,
    eta: f64,
    d: StepDistance,
) -> Result<Vec<WeightedExample>> {
    let mut out = Vec::new();
    let mut experts_added: alloc::collections::BTreeSet<String> = Default::default();
    for success in successes {
        let Some(expert) = experts.get(&success.task_id) else {
            log::warn!("skipping success for {}: no expert counterpart", success.task_id);
            continue;
        };
        if success.outcome != 1 {
            log::warn!("skipping non-successful trajectory for {}", success.task_id);
            continue;
        }
        let distance = ndtw_distance(&success.actions(), &expert.actions(), d)?;
        out.push(WeightedExample {
            kind: ExampleKind::ExploredSuccess,
            task_id: success.task_id.clone(),
            prefix: SubTrajectory::empty(success.task_id.clone()),
            target: success.slice(1, success.len())?,
            reward: 1.0 - eta * distance,
            deviation_distance: distance,
        });
        if experts_added.insert(expert.task_id.clone()) {
            out.push(WeightedExample {
                kind: ExampleKind::ExploredSuccess,
                task_id: expert.task_id.clone(),
                prefix: SubTrajectory::empty(expert.task_id.clone()),
                target: expert.slice(1, expert.len())?,
                reward: 1.0,
                deviation_distance: 0.0,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Step, TrajectorySource};

    fn traj(task: &str, actions: &[&str], outcome: u8, source: TrajectorySource) -> Trajectory {
        Trajectory {
            task_id: task.into(),
            instruction: "You are at the a_1. Your task: put the x_1 in the b_1.".into(),
            steps: actions
                .iter()
                .map(|a| Step {
                    thought: String::new(),
                    action: (*a).into(),
                    observation: "ok".into(),
                })
                .collect(),
            outcome,
            source,
        }
    }

    #[test]
    fn expert_sub_rewards() {
        let expert = traj("t", &["a", "b", "c", "done"], 1, TrajectorySource::Expert);
        let same = FailureCase {
            explored: traj("t", &["a", "b", "c", "done"], 0, TrajectorySource::Explored),
            expert: expert.clone(),
            t: 2,
        };
        let out = build_expert_sub_examples(&[same], 0.01, StepDistance::ExactMatch).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].reward, 1.0); // identical suffixes, d = 0

        let diff = FailureCase {
            explored: traj("t", &["a", "x", "y", "z"], 0, TrajectorySource::Explored),
            expert: expert.clone(),
            t: 2,
        };
        let out = build_expert_sub_examples(&[diff], 0.01, StepDistance::ExactMatch).unwrap();
        // fully different suffixes of length 3: distance clamps <= 1
        assert!((1.0..=1.01).contains(&out[0].reward));
        assert!(out[0].reward_in_range(0.01));
    }

    #[test]
    fn out_of_range_deviation_index_is_skipped() {
        let expert = traj("t", &["a", "b", "done"], 1, TrajectorySource::Expert);
        let case = FailureCase {
            explored: traj("t", &["a"], 0, TrajectorySource::Explored),
            expert,
            t: 2,
        };
        let out = build_expert_sub_examples(&[case], 1.0, StepDistance::ExactMatch).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn explored_success_rewards_and_expert_counterpart() {
        let expert = traj("t", &["a", "b", "done"], 1, TrajectorySource::Expert);
        let explored = traj("t", &["a", "x", "b", "done"], 1, TrajectorySource::Explored);
        let mut experts = BTreeMap::new();
        experts.insert("t".to_string(), expert.clone());
        let out =
            build_explored_success_examples(&[explored], &experts, 1.0, StepDistance::ExactMatch)
                .unwrap();
        assert_eq!(out.len(), 2);
        // wasted exploration step: strictly below 1
        assert!(out[0].reward < 1.0);
        assert!(out[0].reward_in_range(1.0));
        // expert counterpart at the fixed point
        assert_eq!(out[1].reward, 1.0);
        assert_eq!(out[1].deviation_distance, 0.0);

        // identical exploration: reward exactly 1
        let same = traj("t", &["a", "b", "done"], 1, TrajectorySource::Explored);
        let out =
            build_explored_success_examples(&[same], &experts, 1.0, StepDistance::ExactMatch)
                .unwrap();
        assert_eq!(out[0].reward, 1.0);
    }

    #[test]
    fn missing_expert_counterpart_is_skipped() {
        let explored = traj("t", &["a", "done"], 1, TrajectorySource::Explored);
        let out = build_explored_success_examples(
            &[explored],
            &BTreeMap::new(),
            1.0,
            StepDistance::ExactMatch,
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn eta_zero_collapses_rewards() {
        let expert = traj("t", &["a", "b", "c", "done"], 1, TrajectorySource::Expert);
        let case = FailureCase {
            explored: traj("t", &["a", "x", "y", "z"], 0, TrajectorySource::Explored),
            expert: expert.clone(),
            t: 2,
        };
        let out = build_expert_sub_examples(&[case], 0.0, StepDistance::ExactMatch).unwrap();
        assert_eq!(out[0].reward, 1.0);
    }

    #[test]
    fn monotone_in_distance() {
        // larger deviation distance -> strictly larger r_s, smaller r_e
        let eta = 0.5;
        let expert = traj("t", &["a", "b", "c", "done"], 1, TrajectorySource::Expert);
        let near = FailureCase {
            explored: traj("t", &["a", "b", "x", "done"], 0, TrajectorySource::Explored),
            expert: expert.clone(),
            t: 2,
        };
        let far = FailureCase {
            explored: traj("t", &["a", "x", "y", "z"], 0, TrajectorySource::Explored),
            expert: expert.clone(),
            t: 2,
        };
        let out = build_expert_sub_examples(&[near, far], eta, StepDistance::ExactMatch).unwrap();
        assert!(out[0].reward < out[1].reward);

        let mut experts = BTreeMap::new();
        experts.insert("t".to_string(), expert);
        let close = traj("t", &["a", "b", "c", "done"], 1, TrajectorySource::Explored);
        let wandering = traj("t", &["a", "x", "y", "b", "c", "done"], 1, TrajectorySource::Explored);
        let out = build_explored_success_examples(
            &[wandering, close],
            &experts,
            eta,
            StepDistance::ExactMatch,
        )
        .unwrap();
        assert!(out[0].reward < out[2].reward);
    }
}
