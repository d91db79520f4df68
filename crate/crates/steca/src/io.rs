//! JSONL artifact files and the parameter checkpoint format.
//!
//! Every artifact is UTF-8 with LF line endings and one JSON object per
//! line. Writers serialize to a temporary file in the same directory and
//! rename it into place, so an artifact that exists on disk is always
//! complete — that is what makes stage resumption safe. Readers report parse
//! failures with the file path and 1-based line number.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use steca_core::dataset::{ExampleKind, WeightedExample};
use steca_core::policy::{GoalFeatures, PolicyParams};
use steca_core::trajectory::{Step, SubTrajectory};

/// Reads one value per line, failing with `path:line` context.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}:{}", path.display(), idx + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .with_context(|| format!("parsing {}:{}", path.display(), idx + 1))?;
        out.push(value);
    }
    Ok(out)
}

/// Writes one value per line atomically (temp file + rename).
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Writes a single pretty-printed JSON value atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

/// Writes plain text atomically.
pub fn write_atomic_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .context("artifact path has no file name")?;
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        let mut writer = BufWriter::new(file);
        writer.write_all(bytes)?;
        writer.flush()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const FEATURE_MAP_GOAL: &str = "goal_features";

/// Versioned policy-parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Which feature map the weights index into.
    pub feature_map: String,
    pub feature_dim: usize,
    pub weights: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(params: &PolicyParams) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            feature_map: FEATURE_MAP_GOAL.to_string(),
            feature_dim: params.feature_dim,
            weights: params.weights.clone(),
        }
    }

    pub fn into_params(self) -> Result<PolicyParams> {
        if self.version != CHECKPOINT_VERSION {
            bail!("unsupported checkpoint version {}", self.version);
        }
        if self.feature_map != FEATURE_MAP_GOAL {
            bail!("unknown feature map '{}'", self.feature_map);
        }
        if self.feature_dim != GoalFeatures::DIM || self.weights.len() != self.feature_dim {
            bail!(
                "checkpoint dimension mismatch: dim {} with {} weights (expected {})",
                self.feature_dim,
                self.weights.len(),
                GoalFeatures::DIM
            );
        }
        Ok(PolicyParams { weights: self.weights, feature_dim: self.feature_dim })
    }
}

pub fn write_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    write_json(path, &Checkpoint::from_params(params))
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyParams> {
    read_json::<Checkpoint>(path)?.into_params()
}

/// Wire form of a weighted example: the prefix and target are plain step
/// lists, with their positions implied (the prefix starts the episode and
/// the target continues right after it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedExampleWire {
    pub kind: ExampleKind,
    pub task_id: String,
    pub prefix: Vec<Step>,
    pub target: Vec<Step>,
    pub reward: f64,
    pub deviation_distance: f64,
}

impl From<&WeightedExample> for WeightedExampleWire {
    fn from(ex: &WeightedExample) -> Self {
        WeightedExampleWire {
            kind: ex.kind,
            task_id: ex.task_id.clone(),
            prefix: ex.prefix.steps.clone(),
            target: ex.target.steps.clone(),
            reward: ex.reward,
            deviation_distance: ex.deviation_distance,
        }
    }
}

impl From<WeightedExampleWire> for WeightedExample {
    fn from(wire: WeightedExampleWire) -> Self {
        let prefix_len = wire.prefix.len();
        WeightedExample {
            kind: wire.kind,
            task_id: wire.task_id.clone(),
            prefix: SubTrajectory { parent_task_id: wire.task_id.clone(), start: 1, steps: wire.prefix },
            target: SubTrajectory {
                parent_task_id: wire.task_id,
                start: prefix_len + 1,
                steps: wire.target,
            },
            reward: wire.reward,
            deviation_distance: wire.deviation_distance,
        }
    }
}

pub fn write_examples(path: &Path, examples: &[WeightedExample]) -> Result<()> {
    let wire: Vec<WeightedExampleWire> = examples.iter().map(Into::into).collect();
    write_jsonl(path, &wire)
}

pub fn read_examples(path: &Path) -> Result<Vec<WeightedExample>> {
    Ok(read_jsonl::<WeightedExampleWire>(path)?.into_iter().map(Into::into).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use steca_core::env::{expert_plan, gen_tasks, GenConfig};
    use steca_core::trajectory::Trajectory;

    fn experts(n: usize, seed: u64) -> Vec<Trajectory> {
        let cfg = GenConfig {
            n_tasks: n,
            n_locations: 5,
            n_objects: 4,
            goal_size_range: (1, 2),
            unseen: false,
            max_steps: 20,
        };
        gen_tasks(&cfg, seed).unwrap().iter().map(|s| expert_plan(s).unwrap()).collect()
    }

    #[test]
    fn trajectory_roundtrip_and_byte_stability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("experts.jsonl");
        let trajs = experts(100, 41);
        write_jsonl(&path, &trajs).unwrap();
        let back: Vec<Trajectory> = read_jsonl(&path).unwrap();
        assert_eq!(back, trajs);

        let first = fs::read(&path).unwrap();
        write_jsonl(&path, &back).unwrap();
        let second = fs::read(&path).unwrap();
        assert_eq!(first, second, "rewriting the same data must be byte-identical");
        assert!(!first.contains(&b'\r'));
        assert_eq!(*first.last().unwrap(), b'\n');
    }

    #[test]
    fn trajectory_line_schema_is_flat() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let trajs = experts(1, 42);
        write_jsonl(&path, &trajs).unwrap();
        let line = fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["task_id", "instruction", "steps", "outcome", "source"] {
            assert!(value.get(key).is_some(), "missing key {key}");
        }
        let step = &value["steps"][0];
        for key in ["thought", "action", "observation"] {
            assert!(step.get(key).is_some(), "missing step key {key}");
        }
        assert_eq!(value["source"], "expert");
        assert_eq!(value["outcome"], 1);
    }

    #[test]
    fn parse_error_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"task_id\": \"a\"}\nnot json\n").unwrap();
        let err = read_jsonl::<serde_json::Value>(&path).unwrap_err();
        assert!(format!("{err:#}").contains("bad.jsonl:2"), "{err:#}");
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        let mut params = PolicyParams::zeros(GoalFeatures::DIM);
        params.weights[3] = -1.25;
        write_checkpoint(&path, &params).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), params);

        let mut ckpt = Checkpoint::from_params(&params);
        ckpt.version = 99;
        write_json(&path, &ckpt).unwrap();
        assert!(read_checkpoint(&path).unwrap_err().to_string().contains("version"));

        let mut ckpt = Checkpoint::from_params(&params);
        ckpt.weights.pop();
        write_json(&path, &ckpt).unwrap();
        assert!(read_checkpoint(&path).unwrap_err().to_string().contains("mismatch"));
    }

    #[test]
    fn weighted_example_wire_roundtrip() {
        let expert = &experts(1, 43)[0];
        let ex = WeightedExample {
            kind: ExampleKind::ExpertSub,
            task_id: expert.task_id.clone(),
            prefix: expert.prefix(2).unwrap(),
            target: expert.slice(3, expert.len()).unwrap(),
            reward: 1.5,
            deviation_distance: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d_s.jsonl");
        write_examples(&path, std::slice::from_ref(&ex)).unwrap();
        let back = read_examples(&path).unwrap();
        assert_eq!(back, vec![ex]);

        let line = fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert!(value["prefix"].is_array());
        assert!(value["target"].is_array());
        assert_eq!(value["kind"], "expert_sub");
    }
}
