//! Staged pipeline over a run directory.
//!
//! Run-directory layout (all JSONL artifacts are one object per line, LF):
//!
//! ```text
//! run/
//!   config.toml                resolved configuration for the run
//!   tasks_seen.jsonl           WorldSpec per line (training split)
//!   tasks_unseen.jsonl         WorldSpec per line (held-out split)
//!   experts.jsonl              expert Trajectory per seen task
//!   params_sft.json            checkpoint after supervised warm-up
//!   warmup_losses.json         mean loss per warm-up epoch
//!   explored.jsonl             sampled episodes of the warmed-up policy
//!   events.jsonl               DeviationEvent per detected prefix deviation
//!   failures.jsonl             first deviated index per failed episode
//!   records.jsonl              CalibrationRecord per event
//!   dataset_c.jsonl            calibration examples (weighted)
//!   dataset_s.jsonl            expert sub-trajectory examples (weighted)
//!   dataset_e.jsonl            explored-success examples (weighted)
//!   params_final.json          checkpoint after reward-weighted training
//!   train_losses.json          mean loss per reward-weighted epoch
//!   calibration_prefixes.jsonl stored deviated prefixes for evaluation
//!   report_sft.json            evaluation of the warm-up-only baseline
//!   report_final.json          evaluation of the calibrated-trained policy
//!   report.txt                 both reports as an aligned table
//! ```
//!
//! A stage whose outputs all exist is skipped on resume; artifacts are
//! written atomically, so an existing file is always complete. Every stage
//! is a pure function of the config and the upstream artifacts, which makes
//! reruns byte-identical (no timestamps anywhere).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use steca_core::calibrate::{
    build_calibration_record, detect_deviation, scan_expert_prefixes, CalibrationRecord,
    DeviationEvent, Reflector, TemplateReflector,
};
use steca_core::dataset::{
    build_calibration_examples, build_expert_sub_examples, build_explored_success_examples,
    DatasetBundle, FailureCase, WeightedExample,
};
use steca_core::env::{expert_plan, gen_tasks, replay_prefix, WorldSpec};
use steca_core::policy::{GoalFeatures, Policy, PolicyParams, SoftmaxPolicy};
use steca_core::rng::{uniform_index, SeedPath};
use steca_core::stepreward::estimate_step_reward;
use steca_core::training::{
    affordance_rate, evaluate_calibration, evaluate_success, reinforced_train, sft_warmup,
    CalibrationEval, CalibrationPrefix, EvalReport,
};
use steca_core::trajectory::{Step, Trajectory, TrajectorySource};

use crate::config::{FailureIndexMode, ReflectorKind, RunConfig};
use crate::external::{Endpoint, ExternalReflector};
use crate::io;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenTasks,
    Expert,
    Warmup,
    Explore,
    Detect,
    Calibrate,
    BuildDataset,
    Train,
    Eval,
}

pub const STAGES: [Stage; 9] = [
    Stage::GenTasks,
    Stage::Expert,
    Stage::Warmup,
    Stage::Explore,
    Stage::Detect,
    Stage::Calibrate,
    Stage::BuildDataset,
    Stage::Train,
    Stage::Eval,
];

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenTasks => "gen-tasks",
            Stage::Expert => "expert",
            Stage::Warmup => "warmup",
            Stage::Explore => "explore",
            Stage::Detect => "detect",
            Stage::Calibrate => "calibrate",
            Stage::BuildDataset => "build-dataset",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        STAGES.iter().copied().find(|s| s.name() == name)
    }

    fn outputs(&self, dir: &Path) -> Vec<PathBuf> {
        let paths: &[&str] = match self {
            Stage::GenTasks => &["tasks_seen.jsonl", "tasks_unseen.jsonl"],
            Stage::Expert => &["experts.jsonl"],
            Stage::Warmup => &["params_sft.json", "warmup_losses.json"],
            Stage::Explore => &["explored.jsonl"],
            Stage::Detect => &["events.jsonl", "failures.jsonl"],
            Stage::Calibrate => &["records.jsonl"],
            Stage::BuildDataset => &["dataset_c.jsonl", "dataset_s.jsonl", "dataset_e.jsonl"],
            Stage::Train => &["params_final.json", "train_losses.json"],
            Stage::Eval => &[
                "calibration_prefixes.jsonl",
                "report_sft.json",
                "report_final.json",
                "report.txt",
            ],
        };
        paths.iter().map(|p| dir.join(p)).collect()
    }
}

/// Pipeline failure, mapped onto the CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage '{stage}' is missing upstream artifact {missing}; run the earlier stages first")]
    Dependency { stage: &'static str, missing: PathBuf },
    #[error("stage '{stage}' failed: {source:#}")]
    Stage {
        stage: &'static str,
        #[source]
        source: anyhow::Error,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => crate::exit::CONFIG,
            PipelineError::Dependency { .. } => crate::exit::DEPENDENCY,
            PipelineError::Stage { .. } => crate::exit::STAGE,
        }
    }
}

/// First deviated index of one failed explored episode, keyed by its line
/// number within `explored.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureIndex {
    pub task_id: String,
    /// 0-based line index into `explored.jsonl`.
    pub episode: usize,
    /// 1-based first deviated position.
    pub t: usize,
}

/// Evaluation of one policy over the full protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub name: String,
    /// Held-out suite summary; `calibration_rate` is the with-deviated rate.
    pub report: EvalReport,
    pub seen_success: f64,
    pub calibration_with: CalibrationEval,
    pub calibration_without: CalibrationEval,
    /// |with − without| success-rate gap.
    pub calibration_gap: f64,
}

/// Runs one stage. With `resume`, a stage whose outputs all exist is
/// skipped; explicit single-stage invocations pass `resume = false` and
/// always recompute (byte-identically, on unchanged inputs).
pub fn run_stage(stage: Stage, cfg: &RunConfig, dir: &Path, resume: bool) -> Result<(), PipelineError> {
    if resume && stage.outputs(dir).iter().all(|p| p.exists()) {
        log::info!("stage {} is complete; skipping", stage.name());
        return Ok(());
    }
    let result = match stage {
        Stage::GenTasks => stage_gen_tasks(cfg, dir),
        Stage::Expert => stage_expert(cfg, dir),
        Stage::Warmup => stage_warmup(cfg, dir),
        Stage::Explore => stage_explore(cfg, dir),
        Stage::Detect => stage_detect(cfg, dir),
        Stage::Calibrate => stage_calibrate(cfg, dir),
        Stage::BuildDataset => stage_build_dataset(cfg, dir),
        Stage::Train => stage_train(cfg, dir),
        Stage::Eval => stage_eval(cfg, dir).map(|_| ()),
    };
    result.map_err(|err| match err.downcast::<PipelineError>() {
        Ok(inner) => inner,
        Err(source) => PipelineError::Stage { stage: stage.name(), source },
    })
}

/// Runs every stage in order, skipping completed ones, and returns the final
/// evaluation pair (baseline, calibrated).
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<(PolicyReport, PolicyReport), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Stage {
        stage: "gen-tasks",
        source: anyhow!("creating run directory {}: {e}", dir.display()),
    })?;
    let resolved = cfg.to_toml().map_err(|e| PipelineError::Config(e.to_string()))?;
    io::write_atomic_text(&dir.join("config.toml"), &resolved)
        .map_err(|e| PipelineError::Stage { stage: "gen-tasks", source: e })?;
    for stage in STAGES {
        run_stage(stage, cfg, dir, true)?;
    }
    let sft = io::read_json(&dir.join("report_sft.json"))
        .map_err(|e| PipelineError::Stage { stage: "eval", source: e })?;
    let steca = io::read_json(&dir.join("report_final.json"))
        .map_err(|e| PipelineError::Stage { stage: "eval", source: e })?;
    Ok((sft, steca))
}

fn require(stage: &'static str, path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::Dependency { stage, missing: path })
    }
}

fn load_specs(stage: &'static str, dir: &Path, file: &str) -> Result<Vec<WorldSpec>> {
    let path = require(stage, dir.join(file))?;
    Ok(io::read_jsonl(&path)?)
}

fn spec_map(specs: &[WorldSpec]) -> BTreeMap<String, WorldSpec> {
    specs.iter().map(|s| (s.task_id.clone(), s.clone())).collect()
}

fn load_policy(stage: &'static str, dir: &Path, file: &str) -> Result<SoftmaxPolicy<GoalFeatures>> {
    let path = require(stage, dir.join(file))?;
    let params = io::read_checkpoint(&path)?;
    Ok(SoftmaxPolicy::new(params, GoalFeatures)?)
}

fn stage_gen_tasks(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let seed = SeedPath::new(cfg.seed).text("gen-tasks").seed();
    let seen = gen_tasks(&cfg.env.gen_config(false), seed)?;
    let unseen = gen_tasks(&cfg.env.gen_config(true), seed)?;
    io::write_jsonl(&dir.join("tasks_seen.jsonl"), &seen)?;
    io::write_jsonl(&dir.join("tasks_unseen.jsonl"), &unseen)?;
    log::info!("generated {} seen and {} unseen tasks", seen.len(), unseen.len());
    Ok(())
}

fn stage_expert(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let _ = cfg;
    let specs = load_specs("expert", dir, "tasks_seen.jsonl")?;
    let experts: Vec<Trajectory> = specs
        .iter()
        .map(|spec| expert_plan(spec).with_context(|| format!("planning {}", spec.task_id)))
        .collect::<Result<_>>()?;
    io::write_jsonl(&dir.join("experts.jsonl"), &experts)?;
    Ok(())
}

fn stage_warmup(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let specs = load_specs("warmup", dir, "tasks_seen.jsonl")?;
    let experts: Vec<Trajectory> = io::read_jsonl(&require("warmup", dir.join("experts.jsonl"))?)?;
    let train_cfg = cfg.train.train_config(SeedPath::new(cfg.seed).text("train").seed());
    let (params, losses) = sft_warmup(
        PolicyParams::zeros(GoalFeatures::DIM),
        &GoalFeatures,
        &experts,
        &spec_map(&specs),
        &train_cfg,
    )?;
    io::write_checkpoint(&dir.join("params_sft.json"), &params)?;
    io::write_json(&dir.join("warmup_losses.json"), &losses)?;
    log::info!("warm-up epoch losses: {losses:?}");
    Ok(())
}

fn stage_explore(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let specs = load_specs("explore", dir, "tasks_seen.jsonl")?;
    let mut policy = load_policy("explore", dir, "params_sft.json")?;
    let mut episodes = Vec::new();
    for spec in &specs {
        for ep in 0..cfg.explore.episodes_per_task {
            let mut rng = SeedPath::new(cfg.seed)
                .text("explore")
                .text(&spec.task_id)
                .index(ep as u64)
                .rng();
            let (mut env, _) = steca_core::env::Env::reset(spec);
            let (steps, outcome) = steca_core::policy::rollout(
                &mut env,
                &[],
                &mut policy,
                cfg.explore.temperature,
                &mut rng,
            )?;
            episodes.push(Trajectory {
                task_id: spec.task_id.clone(),
                instruction: spec.instruction(),
                steps,
                outcome,
                source: TrajectorySource::Explored,
            });
        }
    }
    let successes = episodes.iter().filter(|e| e.outcome == 1).count();
    log::info!("explored {} episodes, {} successful", episodes.len(), successes);
    io::write_jsonl(&dir.join("explored.jsonl"), &episodes)?;
    Ok(())
}

/// First deviated position of a trajectory's own action sequence, per the
/// configured mode. `None` when no position qualifies.
fn first_deviated_index<P: Policy + ?Sized>(
    cfg: &RunConfig,
    spec: &WorldSpec,
    explored: &Trajectory,
    expert: &Trajectory,
    rollout_policy: &mut P,
) -> Result<Option<usize>> {
    match cfg.detector.failure_index_mode {
        FailureIndexMode::StringMismatch => {
            for (p, step) in explored.steps.iter().enumerate() {
                match expert.steps.get(p) {
                    Some(expert_step) if expert_step.action == step.action => continue,
                    _ => return Ok(Some(p + 1)),
                }
            }
            Ok(None)
        }
        FailureIndexMode::Mc => {
            let mc = cfg.mc.mc_config(SeedPath::new(cfg.seed).text("mc-failure").seed());
            let mut r_prev =
                estimate_step_reward(spec, &[], rollout_policy, &mc)?.mean;
            for p in 1..=explored.len() {
                let r_p =
                    estimate_step_reward(spec, &explored.steps[..p], rollout_policy, &mc)?.mean;
                if detect_deviation(r_prev, r_p, cfg.detector.delta) {
                    return Ok(Some(p));
                }
                r_prev = r_p;
            }
            Ok(None)
        }
    }
}

fn stage_detect(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let specs = load_specs("detect", dir, "tasks_seen.jsonl")?;
    let by_id = spec_map(&specs);
    let experts: Vec<Trajectory> = io::read_jsonl(&require("detect", dir.join("experts.jsonl"))?)?;
    let experts_by_id: BTreeMap<&str, &Trajectory> =
        experts.iter().map(|e| (e.task_id.as_str(), e)).collect();
    let episodes: Vec<Trajectory> = io::read_jsonl(&require("detect", dir.join("explored.jsonl"))?)?;
    let mut agent = load_policy("detect", dir, "params_sft.json")?;
    let mut rollout_policy = load_policy("detect", dir, "params_sft.json")?;
    let det_cfg = cfg
        .detector
        .detector_config(cfg.mc.mc_config(SeedPath::new(cfg.seed).text("mc").seed()));

    // prefix scans: one sampled exploration per expert position
    let mut events: Vec<DeviationEvent> = Vec::new();
    for expert in &experts {
        let spec = by_id
            .get(&expert.task_id)
            .ok_or_else(|| anyhow!("no spec for {}", expert.task_id))?;
        let mut rng = SeedPath::new(cfg.seed).text("scan").text(&expert.task_id).rng();
        if let Some(event) =
            scan_expert_prefixes(spec, expert, &mut agent, &mut rollout_policy, &det_cfg, &mut rng)?
        {
            events.push(event);
        }
    }
    log::info!("prefix scans flagged {} of {} trajectories", events.len(), experts.len());
    io::write_jsonl(&dir.join("events.jsonl"), &events)?;

    // first erroneous index of each failed episode
    let mut failures: Vec<FailureIndex> = Vec::new();
    for (episode, traj) in episodes.iter().enumerate() {
        if traj.outcome == 1 || traj.is_empty() {
            continue;
        }
        let (Some(spec), Some(expert)) =
            (by_id.get(&traj.task_id), experts_by_id.get(traj.task_id.as_str()))
        else {
            log::warn!("skipping failed episode {episode}: unknown task {}", traj.task_id);
            continue;
        };
        match first_deviated_index(cfg, spec, traj, expert, &mut rollout_policy)? {
            Some(t) => failures.push(FailureIndex { task_id: traj.task_id.clone(), episode, t }),
            None => log::warn!("no deviated index found for failed episode {episode}"),
        }
    }
    io::write_jsonl(&dir.join("failures.jsonl"), &failures)?;
    Ok(())
}

fn make_reflector(cfg: &RunConfig) -> Box<dyn Reflector> {
    match cfg.reflector.kind {
        ReflectorKind::Template => Box::new(TemplateReflector),
        ReflectorKind::External => Box::new(ExternalReflector {
            endpoint: Endpoint::new(
                cfg.reflector.endpoint.clone(),
                std::time::Duration::from_millis(cfg.reflector.timeout_ms),
                cfg.reflector.retries,
            ),
        }),
    }
}

fn stage_calibrate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let specs = load_specs("calibrate", dir, "tasks_seen.jsonl")?;
    let by_id = spec_map(&specs);
    let experts: Vec<Trajectory> = io::read_jsonl(&require("calibrate", dir.join("experts.jsonl"))?)?;
    let experts_by_id: BTreeMap<&str, &Trajectory> =
        experts.iter().map(|e| (e.task_id.as_str(), e)).collect();
    let events: Vec<DeviationEvent> = io::read_jsonl(&require("calibrate", dir.join("events.jsonl"))?)?;
    let mut reflector = make_reflector(cfg);
    let mut records: Vec<CalibrationRecord> = Vec::new();
    for event in &events {
        let (Some(spec), Some(expert)) =
            (by_id.get(&event.task_id), experts_by_id.get(event.task_id.as_str()))
        else {
            log::warn!("skipping event for unknown task {}", event.task_id);
            continue;
        };
        let record = build_calibration_record(spec, expert, event, reflector.as_mut())
            .with_context(|| format!("calibrating {} at step {}", event.task_id, event.t))?;
        records.push(record);
    }
    io::write_jsonl(&dir.join("records.jsonl"), &records)?;
    Ok(())
}

fn stage_build_dataset(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let records: Vec<CalibrationRecord> =
        io::read_jsonl(&require("build-dataset", dir.join("records.jsonl"))?)?;
    let episodes: Vec<Trajectory> =
        io::read_jsonl(&require("build-dataset", dir.join("explored.jsonl"))?)?;
    let failures: Vec<FailureIndex> =
        io::read_jsonl(&require("build-dataset", dir.join("failures.jsonl"))?)?;
    let experts: Vec<Trajectory> =
        io::read_jsonl(&require("build-dataset", dir.join("experts.jsonl"))?)?;
    let experts_by_id: BTreeMap<String, Trajectory> =
        experts.iter().map(|e| (e.task_id.clone(), e.clone())).collect();

    let eta = cfg.reward.eta;
    let d = cfg.reward.distance;
    let d_c = build_calibration_examples(&records, eta, d)?;

    let mut cases = Vec::new();
    for failure in &failures {
        let Some(explored) = episodes.get(failure.episode) else {
            log::warn!("failure index {} has no matching episode", failure.episode);
            continue;
        };
        let Some(expert) = experts_by_id.get(&failure.task_id) else {
            log::warn!("failure for unknown task {}", failure.task_id);
            continue;
        };
        cases.push(FailureCase { explored: explored.clone(), expert: expert.clone(), t: failure.t });
    }
    let d_s = build_expert_sub_examples(&cases, eta, d)?;

    let successes: Vec<Trajectory> =
        episodes.iter().filter(|e| e.outcome == 1).cloned().collect();
    let d_e = build_explored_success_examples(&successes, &experts_by_id, eta, d)?;

    log::info!("datasets: {} calibration, {} expert-sub, {} explored-success", d_c.len(), d_s.len(), d_e.len());
    io::write_examples(&dir.join("dataset_c.jsonl"), &d_c)?;
    io::write_examples(&dir.join("dataset_s.jsonl"), &d_s)?;
    io::write_examples(&dir.join("dataset_e.jsonl"), &d_e)?;
    Ok(())
}

fn load_bundle(stage: &'static str, cfg: &RunConfig, dir: &Path) -> Result<DatasetBundle> {
    let read = |name: &str| -> Result<Vec<WeightedExample>> {
        io::read_examples(&require(stage, dir.join(name))?)
    };
    Ok(DatasetBundle {
        d_c: read("dataset_c.jsonl")?,
        d_s: read("dataset_s.jsonl")?,
        d_e: read("dataset_e.jsonl")?,
        eta: cfg.reward.eta,
        distance: cfg.reward.distance,
    })
}

fn stage_train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let specs = load_specs("train", dir, "tasks_seen.jsonl")?;
    let params = io::read_checkpoint(&require("train", dir.join("params_sft.json"))?)?;
    let bundle = load_bundle("train", cfg, dir)?;
    let train_cfg = cfg.train.rt_train_config(SeedPath::new(cfg.seed).text("train").seed());
    let (params, losses) = reinforced_train(
        params,
        &GoalFeatures,
        &bundle,
        &spec_map(&specs),
        cfg.train.term_mask(),
        &train_cfg,
    )?;
    io::write_checkpoint(&dir.join("params_final.json"), &params)?;
    io::write_json(&dir.join("train_losses.json"), &losses)?;
    log::info!("reward-weighted epoch losses: {losses:?}");
    Ok(())
}

/// Builds the stored evaluation prefixes: each record's expert prefix plus
/// its deviated step, sampled down to the configured count.
fn build_calibration_prefixes(cfg: &RunConfig, records: &[CalibrationRecord]) -> Vec<CalibrationPrefix> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = SeedPath::new(cfg.seed).text("calibration-prefix-select").rng();
    for i in (1..order.len()).rev() {
        order.swap(i, uniform_index(&mut rng, i + 1));
    }
    let n = cfg.eval.n_calibration_prefixes.min(order.len());
    if n < cfg.eval.n_calibration_prefixes {
        log::warn!(
            "only {} calibration records available for the {}-prefix evaluation suite",
            records.len(),
            cfg.eval.n_calibration_prefixes
        );
    }
    let mut picked: Vec<usize> = order[..n].to_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let record = &records[i];
            let mut steps: Vec<Step> = record.prefix.steps.clone();
            steps.push(record.deviated_step.clone());
            CalibrationPrefix { task_id: record.task_id.clone(), steps }
        })
        .collect()
}

fn evaluate_policy(
    name: &str,
    params: PolicyParams,
    cfg: &RunConfig,
    seen: &[WorldSpec],
    unseen: &[WorldSpec],
    prefixes: &[(WorldSpec, CalibrationPrefix)],
) -> Result<PolicyReport> {
    let mut policy = SoftmaxPolicy::new(params, GoalFeatures)?;
    let seen_success = evaluate_success(&mut policy, seen)?;
    let unseen_success = evaluate_success(&mut policy, unseen)?;
    let affordance = affordance_rate(&mut policy, unseen)?;
    let with = evaluate_calibration(&mut policy, prefixes, true)?;
    let without = evaluate_calibration(&mut policy, prefixes, false)?;
    Ok(PolicyReport {
        name: name.to_string(),
        report: EvalReport {
            avg_final_reward: unseen_success,
            calibration_rate: with.rate,
            affordance_rate: affordance,
            n_tasks: unseen.len(),
            seed: cfg.seed,
        },
        seen_success,
        calibration_with: with,
        calibration_without: without,
        calibration_gap: (with.rate - without.rate).abs(),
    })
}

/// Renders the side-by-side comparison table.
pub fn render_table(reports: &[&PolicyReport]) -> String {
    let mut rows: Vec<(String, Vec<String>)> = vec![
        ("avg final reward (unseen)".into(), vec![]),
        ("avg final reward (seen)".into(), vec![]),
        ("affordance rate (unseen)".into(), vec![]),
        ("calibration rate (with deviated)".into(), vec![]),
        ("calibration rate (without)".into(), vec![]),
        ("calibration gap".into(), vec![]),
    ];
    for r in reports {
        rows[0].1.push(format!("{:.4}", r.report.avg_final_reward));
        rows[1].1.push(format!("{:.4}", r.seen_success));
        rows[2].1.push(format!("{:.4}", r.report.affordance_rate));
        rows[3].1.push(format!("{:.4}", r.calibration_with.rate));
        rows[4].1.push(format!("{:.4}", r.calibration_without.rate));
        rows[5].1.push(format!("{:.4}", r.calibration_gap));
    }
    let label_width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = write!(out, "{:label_width$}", "metric");
    for r in reports {
        let _ = write!(out, "  {:>10}", r.name);
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:label_width$}");
        for cell in cells {
            let _ = write!(out, "  {cell:>10}");
        }
        out.push('\n');
    }
    out
}

pub fn stage_eval(cfg: &RunConfig, dir: &Path) -> Result<(PolicyReport, PolicyReport)> {
    let seen = load_specs("eval", dir, "tasks_seen.jsonl")?;
    let unseen = load_specs("eval", dir, "tasks_unseen.jsonl")?;
    let by_id = spec_map(&seen);
    let records: Vec<CalibrationRecord> =
        io::read_jsonl(&require("eval", dir.join("records.jsonl"))?)?;
    let sft_params = io::read_checkpoint(&require("eval", dir.join("params_sft.json"))?)?;
    let final_params = io::read_checkpoint(&require("eval", dir.join("params_final.json"))?)?;

    let prefixes = build_calibration_prefixes(cfg, &records);
    io::write_jsonl(&dir.join("calibration_prefixes.jsonl"), &prefixes)?;
    let paired: Vec<(WorldSpec, CalibrationPrefix)> = prefixes
        .into_iter()
        .filter_map(|p| by_id.get(&p.task_id).map(|s| (s.clone(), p)))
        .collect();

    let sft = evaluate_policy("sft", sft_params, cfg, &seen, &unseen, &paired)?;
    let steca = evaluate_policy("calibrated", final_params, cfg, &seen, &unseen, &paired)?;
    io::write_json(&dir.join("report_sft.json"), &sft)?;
    io::write_json(&dir.join("report_final.json"), &steca)?;
    let table = render_table(&[&sft, &steca]);
    io::write_atomic_text(&dir.join("report.txt"), &table)?;
    println!("{table}");
    Ok((sft, steca))
}

/// Verifies that a replayed prefix file agrees with its specs; used by the
/// calibration evaluation path of the `eval` subcommand.
pub fn load_calibration_suite(
    dir: &Path,
) -> Result<Vec<(WorldSpec, CalibrationPrefix)>, PipelineError> {
    let load = |file: &str| -> Result<Vec<WorldSpec>> { load_specs("eval", dir, file) };
    let seen = load("tasks_seen.jsonl").map_err(stage_err)?;
    let by_id = spec_map(&seen);
    let prefixes: Vec<CalibrationPrefix> =
        io::read_jsonl(&require("eval", dir.join("calibration_prefixes.jsonl"))?)
            .map_err(stage_err)?;
    let mut out = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        let Some(spec) = by_id.get(&prefix.task_id) else {
            log::warn!("prefix for unknown task {}", prefix.task_id);
            continue;
        };
        // fail fast on corrupted artifacts rather than silently skipping all
        replay_prefix(spec, &prefix.steps, prefix.steps.len()).map_err(|e| stage_err(e.into()))?;
        out.push((spec.clone(), prefix));
    }
    Ok(out)
}

fn stage_err(source: anyhow::Error) -> PipelineError {
    match source.downcast::<PipelineError>() {
        Ok(inner) => inner,
        Err(source) => PipelineError::Stage { stage: "eval", source },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.env.n_seen_tasks = 8;
        cfg.env.n_unseen_tasks = 4;
        cfg.env.n_locations = 4;
        cfg.env.n_objects = 3;
        cfg.eval.n_calibration_prefixes = 8;
        cfg
    }

    #[test]
    fn missing_upstream_artifact_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let err = run_stage(Stage::Expert, &cfg, dir.path(), false).unwrap_err();
        match err {
            PipelineError::Dependency { stage, missing } => {
                assert_eq!(stage, "expert");
                assert!(missing.ends_with("tasks_seen.jsonl"));
            }
            other => panic!("expected dependency error, got {other}"),
        }
        assert_eq!(err_code(&cfg, dir.path()), crate::exit::DEPENDENCY);
    }

    fn err_code(cfg: &RunConfig, dir: &Path) -> i32 {
        run_stage(Stage::Expert, cfg, dir, false).unwrap_err().exit_code()
    }

    #[test]
    fn full_pipeline_small_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let (sft, steca) = run_pipeline(&cfg, dir.path()).unwrap();
        assert_eq!(sft.name, "sft");
        assert_eq!(steca.name, "calibrated");
        for stage in STAGES {
            for path in stage.outputs(dir.path()) {
                assert!(path.exists(), "missing {}", path.display());
            }
        }
        // deleting one stage's outputs and re-running regenerates them identically
        let events_path = dir.path().join("events.jsonl");
        let before = std::fs::read(&events_path).unwrap();
        std::fs::remove_file(&events_path).unwrap();
        run_pipeline(&cfg, dir.path()).unwrap();
        assert_eq!(std::fs::read(&events_path).unwrap(), before);
    }

    #[test]
    fn rerunning_stages_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        run_pipeline(&cfg, dir.path()).unwrap();
        let snapshot = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
        let first: Vec<_> = ["tasks_seen.jsonl", "experts.jsonl", "params_sft.json", "report.txt"]
            .iter()
            .map(|n| snapshot(n))
            .collect();
        for stage in [Stage::GenTasks, Stage::Expert, Stage::Warmup] {
            run_stage(stage, &cfg, dir.path(), false).unwrap();
        }
        run_stage(Stage::Eval, &cfg, dir.path(), false).unwrap();
        let second: Vec<_> = ["tasks_seen.jsonl", "experts.jsonl", "params_sft.json", "report.txt"]
            .iter()
            .map(|n| snapshot(n))
            .collect();
        assert_eq!(first, second);
    }

    #[test]
    fn delta_minus_one_yields_zero_events() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.detector.delta = -1.0;
        run_pipeline(&cfg, dir.path()).unwrap();
        let events: Vec<DeviationEvent> =
            io::read_jsonl(&dir.path().join("events.jsonl")).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn eta_zero_collapses_all_rewards_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.reward.eta = 0.0;
        run_pipeline(&cfg, dir.path()).unwrap();
        for name in ["dataset_c.jsonl", "dataset_s.jsonl", "dataset_e.jsonl"] {
            for ex in io::read_examples(&dir.path().join(name)).unwrap() {
                assert_eq!(ex.reward, 1.0, "{name}");
            }
        }
    }

    #[test]
    fn reward_ranges_hold_on_pipeline_output() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        run_pipeline(&cfg, dir.path()).unwrap();
        for name in ["dataset_c.jsonl", "dataset_s.jsonl", "dataset_e.jsonl"] {
            for ex in io::read_examples(&dir.path().join(name)).unwrap() {
                assert!(ex.reward_in_range(cfg.reward.eta), "{name}: {ex:?}");
            }
        }
    }

    #[test]
    fn string_mismatch_failure_mode_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.detector.failure_index_mode = FailureIndexMode::StringMismatch;
        run_pipeline(&cfg, dir.path()).unwrap();
        let failures: Vec<FailureIndex> =
            io::read_jsonl(&dir.path().join("failures.jsonl")).unwrap();
        let episodes: Vec<Trajectory> =
            io::read_jsonl(&dir.path().join("explored.jsonl")).unwrap();
        let experts: Vec<Trajectory> = io::read_jsonl(&dir.path().join("experts.jsonl")).unwrap();
        let experts_by_id: BTreeMap<&str, &Trajectory> =
            experts.iter().map(|e| (e.task_id.as_str(), e)).collect();
        for f in &failures {
            let episode = &episodes[f.episode];
            let expert = experts_by_id[f.task_id.as_str()];
            // actions agree strictly before t and differ at t (or run past the expert)
            for p in 0..f.t - 1 {
                assert_eq!(episode.steps[p].action, expert.steps[p].action);
            }
            match expert.steps.get(f.t - 1) {
                Some(step) => assert_ne!(episode.steps[f.t - 1].action, step.action),
                None => assert!(f.t > expert.len()),
            }
        }
    }
}
