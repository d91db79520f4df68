//! Run configuration: a single TOML file with per-section defaults, plus
//! `STECA_<SECTION>_<KEY>` environment overrides applied on top of the file.
//!
//! ```toml
//! seed = 0
//!
//! [env]                # task generation
//! n_seen_tasks = 200
//! n_unseen_tasks = 50
//! n_locations = 6
//! n_objects = 5
//! seen_goal_size = [1, 1]
//! unseen_goal_size = [2, 2]
//! max_steps = 20
//!
//! [mc]                 # step-reward Monte Carlo
//! n_samples = 5
//! temperature = 1.0
//!
//! [detector]
//! delta = 0.0
//! explore_temperature = 1.0
//! failure_index_mode = "mc"    # or "string_mismatch"
//!
//! [reward]
//! eta = 1.0
//! distance = "exact_match"     # or "token_jaccard"
//!
//! [train]
//! learning_rate = 0.5
//! sft_epochs = 3
//! rt_epochs = 1
//! batch_size = 32
//! use_d_c = true
//! use_d_s = true
//! use_d_e = true
//!
//! [explore]
//! episodes_per_task = 1
//! temperature = 1.0
//!
//! [reflector]
//! kind = "template"            # or "external"
//! endpoint = ""                # host:port, external only
//! timeout_ms = 5000
//! retries = 2
//!
//! [eval]
//! n_calibration_prefixes = 100
//! ```

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use steca_core::calibrate::DetectorConfig;
use steca_core::env::GenConfig;
use steca_core::ndtw::StepDistance;
use steca_core::stepreward::McConfig;
use steca_core::training::{TermMask, TrainConfig};

pub const ENV_PREFIX: &str = "STECA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSection,
    pub mc: McSection,
    pub detector: DetectorSection,
    pub reward: RewardSection,
    pub train: TrainSection,
    pub explore: ExploreSection,
    pub reflector: ReflectorSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            env: EnvSection::default(),
            mc: McSection::default(),
            detector: DetectorSection::default(),
            reward: RewardSection::default(),
            train: TrainSection::default(),
            explore: ExploreSection::default(),
            reflector: ReflectorSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub n_seen_tasks: usize,
    pub n_unseen_tasks: usize,
    pub n_locations: usize,
    pub n_objects: usize,
    pub seen_goal_size: (usize, usize),
    pub unseen_goal_size: (usize, usize),
    pub max_steps: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            n_seen_tasks: 200,
            n_unseen_tasks: 50,
            n_locations: 6,
            n_objects: 5,
            seen_goal_size: (1, 1),
            unseen_goal_size: (2, 2),
            max_steps: steca_core::env::DEFAULT_MAX_STEPS,
        }
    }
}

impl EnvSection {
    pub fn gen_config(&self, unseen: bool) -> GenConfig {
        GenConfig {
            n_tasks: if unseen { self.n_unseen_tasks } else { self.n_seen_tasks },
            n_locations: self.n_locations,
            n_objects: self.n_objects,
            goal_size_range: if unseen { self.unseen_goal_size } else { self.seen_goal_size },
            unseen,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub n_samples: usize,
    pub temperature: f64,
}

impl Default for McSection {
    fn default() -> Self {
        McSection { n_samples: 5, temperature: 1.0 }
    }
}

impl McSection {
    pub fn mc_config(&self, base_seed: u64) -> McConfig {
        McConfig { n_samples: self.n_samples, temperature: self.temperature, base_seed }
    }
}

/// How the first erroneous index of a failed exploration is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureIndexMode {
    /// Re-estimate step rewards along the failed trajectory and take the
    /// first deviated position.
    Mc,
    /// First position whose action text differs from the expert's.
    StringMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub delta: f64,
    pub explore_temperature: f64,
    pub failure_index_mode: FailureIndexMode,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection { delta: 0.0, explore_temperature: 1.0, failure_index_mode: FailureIndexMode::Mc }
    }
}

impl DetectorSection {
    pub fn detector_config(&self, mc: McConfig) -> DetectorConfig {
        DetectorConfig { delta: self.delta, mc, explore_temperature: self.explore_temperature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub eta: f64,
    pub distance: StepDistance,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection { eta: 1.0, distance: StepDistance::ExactMatch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    /// Step size for the reward-weighted stage; smaller than the warm-up
    /// rate because it fine-tunes an already-shaped policy.
    pub rt_learning_rate: f64,
    pub sft_epochs: usize,
    pub rt_epochs: usize,
    pub batch_size: usize,
    pub use_d_c: bool,
    pub use_d_s: bool,
    pub use_d_e: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 0.5,
            rt_learning_rate: 0.1,
            sft_epochs: 3,
            rt_epochs: 1,
            batch_size: 32,
            use_d_c: true,
            use_d_s: true,
            use_d_e: true,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            sft_epochs: self.sft_epochs,
            rt_epochs: self.rt_epochs,
            batch_size: self.batch_size,
            seed,
        }
    }

    pub fn rt_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { learning_rate: self.rt_learning_rate, ..self.train_config(seed) }
    }

    pub fn term_mask(&self) -> TermMask {
        TermMask { d_c: self.use_d_c, d_s: self.use_d_s, d_e: self.use_d_e }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreSection {
    pub episodes_per_task: usize,
    pub temperature: f64,
}

impl Default for ExploreSection {
    fn default() -> Self {
        ExploreSection { episodes_per_task: 1, temperature: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectorKind {
    Template,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectorSection {
    pub kind: ReflectorKind,
    /// `host:port` of the external reflector; required when kind = external.
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for ReflectorSection {
    fn default() -> Self {
        ReflectorSection {
            kind: ReflectorKind::Template,
            endpoint: String::new(),
            timeout_ms: 5000,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_calibration_prefixes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_calibration_prefixes: 100 }
    }
}

impl RunConfig {
    /// Loads the file (defaults when `path` is `None`), applies environment
    /// overrides, and validates.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut table = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        apply_env_overrides(&mut table, std::env::vars())?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.gen_config(false).validate().map_err(|e| anyhow!("env (seen): {e}"))?;
        self.env.gen_config(true).validate().map_err(|e| anyhow!("env (unseen): {e}"))?;
        if self.mc.n_samples == 0 {
            bail!("mc.n_samples must be positive");
        }
        if self.mc.temperature < 0.0 || !self.mc.temperature.is_finite() {
            bail!("mc.temperature must be finite and non-negative");
        }
        if self.detector.explore_temperature < 0.0 {
            bail!("detector.explore_temperature must be non-negative");
        }
        if self.reward.eta < 0.0 || !self.reward.eta.is_finite() {
            bail!("reward.eta must be finite and non-negative");
        }
        self.train.train_config(0).validate().map_err(|e| anyhow!("train: {e}"))?;
        self.train.rt_train_config(0).validate().map_err(|e| anyhow!("train: {e}"))?;
        if self.explore.temperature < 0.0 {
            bail!("explore.temperature must be non-negative");
        }
        if self.reflector.kind == ReflectorKind::External && self.reflector.endpoint.is_empty() {
            bail!("reflector.endpoint is required when reflector.kind = \"external\"");
        }
        Ok(())
    }

    /// Canonical serialized form, written into the run directory.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Applies `STECA_<SECTION>_<KEY>` (or `STECA_SEED`) variables on top of the
/// parsed table. Values parse as TOML fragments when possible (numbers,
/// booleans, arrays) and fall back to plain strings.
fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    let mut overrides: Vec<(String, String)> = vars
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .map(|(k, v)| (k[ENV_PREFIX.len()..].to_ascii_lowercase(), v))
        .collect();
    overrides.sort();
    for (key, raw) in overrides {
        let value = parse_override(&raw);
        match key.split_once('_') {
            None => {
                table.insert(key, value);
            }
            Some((section, rest)) => {
                let entry = table
                    .entry(section.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let section_table = entry
                    .as_table_mut()
                    .ok_or_else(|| anyhow!("config section '{section}' is not a table"))?;
                section_table.insert(rest.to_string(), value);
            }
        }
    }
    Ok(())
}

fn parse_override(raw: &str) -> toml::Value {
    // a bare value is a valid TOML document when wrapped in a key
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_values_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\n[env]\nn_seen_tasks = 10\n[reward]\neta = 0.01\ndistance = \"token_jaccard\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.env.n_seen_tasks, 10);
        assert_eq!(cfg.reward.eta, 0.01);
        assert_eq!(cfg.reward.distance, StepDistance::TokenJaccard);
        // untouched sections keep their defaults
        assert_eq!(cfg.mc.n_samples, 5);
    }

    #[test]
    fn env_vars_override_file_values() {
        let mut table = "seed = 1\n[mc]\nn_samples = 5\n".parse::<toml::Table>().unwrap();
        let vars = vec![
            ("STECA_SEED".to_string(), "42".to_string()),
            ("STECA_MC_N_SAMPLES".to_string(), "9".to_string()),
            ("STECA_DETECTOR_DELTA".to_string(), "-1.0".to_string()),
            ("STECA_REWARD_DISTANCE".to_string(), "\"token_jaccard\"".to_string()),
            ("OTHER_VAR".to_string(), "ignored".to_string()),
        ];
        apply_env_overrides(&mut table, vars.into_iter()).unwrap();
        let cfg: RunConfig = toml::Value::Table(table).try_into().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.mc.n_samples, 9);
        assert_eq!(cfg.detector.delta, -1.0);
        assert_eq!(cfg.reward.distance, StepDistance::TokenJaccard);
    }

    #[test]
    fn bare_string_override_parses() {
        assert_eq!(parse_override("template"), toml::Value::String("template".into()));
        assert_eq!(parse_override("3"), toml::Value::Integer(3));
        assert_eq!(parse_override("true"), toml::Value::Boolean(true));
        assert_eq!(
            parse_override("[1, 2]"),
            toml::Value::Array(vec![toml::Value::Integer(1), toml::Value::Integer(2)])
        );
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.mc.n_samples = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.reward.eta = -0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.reflector.kind = ReflectorKind::External;
        assert!(cfg.validate().unwrap_err().to_string().contains("endpoint"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[env]\nn_seen_task = 10\n").unwrap();
        assert!(RunConfig::load(Some(&path)).is_err());
    }
}
