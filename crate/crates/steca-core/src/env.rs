//! Deterministic, seedable, partially observable pick-and-place text world.
//!
//! The world is a flat set of named locations holding named objects. Some
//! locations start closed and must be opened before their contents are
//! visible or reachable. The agent holds at most one object. Tasks are
//! conjunctions of `(object, location)` placement goals.
//!
//! All stochasticity lives in policies; given a spec and an action sequence
//! the environment is a pure function.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{uniform_f64, uniform_index, SeedPath};
use crate::trajectory::{ActionStep, Step, Trajectory, TrajectorySource};

pub const DEFAULT_MAX_STEPS: usize = 20;
/// Generated expert plans must fall in this length band (inclusive).
pub const PLAN_LEN_MIN: usize = 3;
pub const PLAN_LEN_MAX: usize = 20;

/// Observation returned for any invalid or inapplicable action.
pub const NOTHING_HAPPENS: &str = "Nothing happens.";

const SEEN_OBJECTS: &[&str] =
    &["apple", "book", "bowl", "cup", "egg", "knife", "mug", "pan", "plate", "spoon"];
const UNSEEN_OBJECTS: &[&str] =
    &["bottle", "brush", "candle", "cloth", "key", "lamp", "pencil", "remote", "soap", "vase"];
const LOCATIONS: &[&str] =
    &["cabinet", "countertop", "desk", "drawer", "fridge", "shelf", "sidetable", "stand"];

/// Immutable description of one task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub task_id: String,
    pub locations: Vec<String>,
    pub objects: Vec<String>,
    pub initial_placement: BTreeMap<String, String>,
    /// Locations that start closed.
    pub openable: BTreeSet<String>,
    pub agent_start: String,
    /// Target placements, all of which must hold at termination.
    pub goal: Vec<(String, String)>,
    pub max_steps: usize,
}

impl WorldSpec {
    /// The task instruction handed to policies. Names the start location and
    /// the goal placements; object whereabouts stay hidden.
    pub fn instruction(&self) -> String {
        let goals: Vec<String> = self
            .goal
            .iter()
            .map(|(o, l)| format!("put the {o} in the {l}"))
            .collect();
        format!("You are at the {}. Your task: {}.", self.agent_start, goals.join(" and "))
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations.is_empty() || self.objects.is_empty() {
            return Err(CoreError::Config("empty location or object list".into()));
        }
        if self.goal.is_empty() {
            return Err(CoreError::Config("empty goal".into()));
        }
        if self.max_steps == 0 {
            return Err(CoreError::Config("max_steps must be positive".into()));
        }
        if !self.locations.contains(&self.agent_start) {
            return Err(CoreError::Config(format!("unknown start location {}", self.agent_start)));
        }
        for obj in &self.objects {
            match self.initial_placement.get(obj) {
                Some(loc) if self.locations.contains(loc) => {}
                _ => return Err(CoreError::Config(format!("object {obj} not placed at a known location"))),
            }
        }
        for (obj, loc) in &self.goal {
            if !self.objects.contains(obj) || !self.locations.contains(loc) {
                return Err(CoreError::Config(format!("goal ({obj}, {loc}) references unknown names")));
            }
        }
        Ok(())
    }
}

/// Mutable world state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldState {
    pub agent_at: String,
    pub holding: Option<String>,
    pub placement: BTreeMap<String, String>,
    pub opened: BTreeSet<String>,
    pub visited: BTreeSet<String>,
    pub steps_taken: usize,
    pub terminated: bool,
    pub outcome: Option<u8>,
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: String,
    pub done: bool,
    pub outcome: Option<u8>,
}

impl StepResult {
    /// True when the action executed (did not bounce off the world).
    pub fn applicable(&self) -> bool {
        !self.observation.starts_with("Nothing happens")
    }
}

/// Parsed action grammar:
/// `goto <loc> | open <loc> | take <obj> from <loc> | put <obj> in <loc> | done`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Goto(String),
    Open(String),
    Take(String, String),
    Put(String, String),
    Done,
}

impl Action {
    pub fn parse(text: &str) -> Option<Action> {
        let toks: Vec<&str> = text.split_whitespace().collect();
        match toks.as_slice() {
            ["done"] => Some(Action::Done),
            ["goto", loc] => Some(Action::Goto(loc.to_string())),
            ["open", loc] => Some(Action::Open(loc.to_string())),
            ["take", obj, "from", loc] => Some(Action::Take(obj.to_string(), loc.to_string())),
            ["put", obj, "in", loc] => Some(Action::Put(obj.to_string(), loc.to_string())),
            _ => None,
        }
    }

    pub fn text(&self) -> String {
        match self {
            Action::Goto(l) => format!("goto {l}"),
            Action::Open(l) => format!("open {l}"),
            Action::Take(o, l) => format!("take {o} from {l}"),
            Action::Put(o, l) => format!("put {o} in {l}"),
            Action::Done => "done".to_string(),
        }
    }
}

/// Every grammar-valid action over the spec's vocabulary, sorted.
///
/// This is the candidate set sampled by policies; it deliberately includes
/// inapplicable instantiations so the affordance rate is a meaningful metric.
pub fn action_candidates(spec: &WorldSpec) -> Vec<String> {
    let mut out = Vec::new();
    out.push("done".to_string());
    for loc in &spec.locations {
        out.push(format!("goto {loc}"));
        out.push(format!("open {loc}"));
        for obj in &spec.objects {
            out.push(format!("take {obj} from {loc}"));
            out.push(format!("put {obj} in {loc}"));
        }
    }
    out.sort();
    out
}

/// A live episode.
#[derive(Debug, Clone)]
pub struct Env {
    spec: WorldSpec,
    state: WorldState,
}

impl Env {
    pub fn reset(spec: &WorldSpec) -> (Env, String) {
        let mut visited = BTreeSet::new();
        visited.insert(spec.agent_start.clone());
        let env = Env {
            spec: spec.clone(),
            state: WorldState {
                agent_at: spec.agent_start.clone(),
                holding: None,
                placement: spec.initial_placement.clone(),
                opened: BTreeSet::new(),
                visited,
                steps_taken: 0,
                terminated: false,
                outcome: None,
            },
        };
        let obs = format!("You are at the {}.", spec.agent_start);
        (env, obs)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn terminated(&self) -> bool {
        self.state.terminated
    }

    fn is_open(&self, loc: &str) -> bool {
        !self.spec.openable.contains(loc) || self.state.opened.contains(loc)
    }

    fn contents(&self, loc: &str) -> Vec<&str> {
        self.state
            .placement
            .iter()
            .filter(|(_, l)| l.as_str() == loc)
            .map(|(o, _)| o.as_str())
            .collect()
    }

    fn describe_contents(&self, loc: &str) -> String {
        let objs = self.contents(loc);
        if objs.is_empty() {
            format!("In the {loc}, you see nothing.")
        } else {
            let listed: Vec<String> = objs.iter().map(|o| format!("a {o}")).collect();
            format!("In the {loc}, you see {}.", listed.join(", "))
        }
    }

    fn goal_met(&self) -> bool {
        self.spec
            .goal
            .iter()
            .all(|(o, l)| self.state.placement.get(o).map(String::as_str) == Some(l.as_str()))
    }

    /// Executes one action. Invalid or inapplicable actions consume a step and
    /// observe [`NOTHING_HAPPENS`]; stepping after termination is an error.
    pub fn step(&mut self, action_text: &str) -> Result<StepResult> {
        if self.state.terminated {
            return Err(CoreError::Terminated);
        }
        self.state.steps_taken += 1;
        let mut done = false;
        let observation = match Action::parse(action_text) {
            Some(Action::Goto(loc)) => {
                if self.spec.locations.contains(&loc) && loc != self.state.agent_at {
                    self.state.agent_at = loc.clone();
                    self.state.visited.insert(loc.clone());
                    if self.is_open(&loc) {
                        format!("You arrive at the {loc}. {}", self.describe_contents(&loc))
                    } else {
                        format!("You arrive at the {loc}. The {loc} is closed.")
                    }
                } else {
                    NOTHING_HAPPENS.to_string()
                }
            }
            Some(Action::Open(loc)) => {
                if self.state.agent_at == loc
                    && self.spec.openable.contains(&loc)
                    && !self.state.opened.contains(&loc)
                {
                    self.state.opened.insert(loc.clone());
                    format!("You open the {loc}. {}", self.describe_contents(&loc))
                } else {
                    NOTHING_HAPPENS.to_string()
                }
            }
            Some(Action::Take(obj, loc)) => {
                let here = self.state.agent_at == loc;
                let present = self.state.placement.get(&obj).map(String::as_str) == Some(loc.as_str());
                if here && present && self.is_open(&loc) && self.state.holding.is_none() {
                    self.state.placement.remove(&obj);
                    self.state.holding = Some(obj.clone());
                    format!("You take the {obj} from the {loc}.")
                } else {
                    NOTHING_HAPPENS.to_string()
                }
            }
            Some(Action::Put(obj, loc)) => {
                let here = self.state.agent_at == loc;
                let held = self.state.holding.as_deref() == Some(obj.as_str());
                if here && held && self.is_open(&loc) {
                    self.state.holding = None;
                    self.state.placement.insert(obj.clone(), loc.clone());
                    format!("You put the {obj} in the {loc}.")
                } else {
                    NOTHING_HAPPENS.to_string()
                }
            }
            Some(Action::Done) => {
                done = true;
                "You stop.".to_string()
            }
            None => NOTHING_HAPPENS.to_string(),
        };
        if self.state.steps_taken >= self.spec.max_steps {
            done = true;
        }
        let outcome = if done { Some(u8::from(self.goal_met())) } else { None };
        if done {
            self.state.terminated = true;
            self.state.outcome = outcome;
        }
        Ok(StepResult { observation, done, outcome })
    }
}

/// Replays the first `t` actions of a stored trajectory, checking each
/// re-emitted observation against the stored one.
pub fn replay_prefix(spec: &WorldSpec, steps: &[Step], t: usize) -> Result<Env> {
    if t > steps.len() {
        return Err(CoreError::Range { what: format!("prefix {t} of {} steps", steps.len()) });
    }
    let (mut env, _) = Env::reset(spec);
    for (idx, step) in steps[..t].iter().enumerate() {
        let result = env.step(&step.action)?;
        if result.observation != step.observation {
            return Err(CoreError::ReplayDivergence {
                step: idx + 1,
                expected: step.observation.clone(),
                got: result.observation,
            });
        }
    }
    Ok(env)
}

/// The next action of the full-knowledge scripted planner, or `Done` when all
/// goals hold. Total over every reachable state, including states where the
/// agent holds an object no goal wants.
pub fn plan_next(spec: &WorldSpec, state: &WorldState) -> Action {
    let unsatisfied: Vec<&(String, String)> = spec
        .goal
        .iter()
        .filter(|(o, l)| state.placement.get(o).map(String::as_str) != Some(l.as_str()))
        .collect();
    let open = |loc: &str| !spec.openable.contains(loc) || state.opened.contains(loc);

    if let Some(held) = &state.holding {
        if let Some((_, target)) = unsatisfied.iter().find(|(o, _)| o == held) {
            if state.agent_at != *target {
                return Action::Goto(target.clone());
            }
            if !open(target) {
                return Action::Open(target.clone());
            }
            return Action::Put(held.clone(), target.clone());
        }
        // Held object is not wanted anywhere: drop it where we stand.
        if !open(&state.agent_at) {
            return Action::Open(state.agent_at.clone());
        }
        return Action::Put(held.clone(), state.agent_at.clone());
    }

    match unsatisfied.first() {
        None => Action::Done,
        Some((obj, _)) => {
            let at = state.placement.get(obj).expect("unheld object is placed").clone();
            if state.agent_at != at {
                Action::Goto(at)
            } else if !open(&at) {
                Action::Open(at)
            } else {
                Action::Take(obj.clone(), at)
            }
        }
    }
}

fn plan_thought(spec: &WorldSpec, action: &Action) -> String {
    match action {
        Action::Goto(l) => {
            if spec.goal.iter().any(|(_, gl)| gl == l) {
                format!("I should head to the {l} to work toward the goal.")
            } else {
                format!("I need to reach the {l} next.")
            }
        }
        Action::Open(l) => format!("The {l} is closed, so I should open it."),
        Action::Take(o, l) => format!("The {o} is in the {l}; I will pick it up."),
        Action::Put(o, l) => format!("I am at the {l} holding the {o}, so I will put it down."),
        Action::Done => "Every goal placement is satisfied, so the task is complete.".to_string(),
    }
}

/// Runs the scripted planner from the initial state and records the episode.
///
/// Errors if the plan does not fit the step budget or fails the goal check.
pub fn expert_plan(spec: &WorldSpec) -> Result<Trajectory> {
    spec.validate()?;
    let (mut env, _) = Env::reset(spec);
    let mut steps = Vec::new();
    loop {
        let action = plan_next(&env.spec, &env.state);
        let action_step = ActionStep::new(plan_thought(spec, &action), action.text());
        let result = env.step(&action_step.action)?;
        steps.push(Step::new(action_step, result.observation));
        if result.done {
            if result.outcome != Some(1) {
                return Err(CoreError::Planner(format!(
                    "plan for {} did not reach the goal within {} steps",
                    spec.task_id, spec.max_steps
                )));
            }
            break;
        }
    }
    Ok(Trajectory {
        task_id: spec.task_id.clone(),
        instruction: spec.instruction(),
        steps,
        outcome: 1,
        source: TrajectorySource::Expert,
    })
}

/// Task generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_tasks: usize,
    pub n_locations: usize,
    pub n_objects: usize,
    /// Inclusive range of goal sizes.
    pub goal_size_range: (usize, usize),
    /// Draws object names from a vocabulary disjoint from the seen split.
    pub unseen: bool,
    pub max_steps: usize,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.n_locations == 0 || self.n_objects == 0 {
            return Err(CoreError::Config("counts must be positive".into()));
        }
        let (lo, hi) = self.goal_size_range;
        if lo == 0 || lo > hi {
            return Err(CoreError::Config(format!("bad goal size range [{lo}, {hi}]")));
        }
        if hi > self.n_objects {
            return Err(CoreError::Config(format!(
                "goal size {hi} exceeds object count {}",
                self.n_objects
            )));
        }
        if self.max_steps == 0 {
            return Err(CoreError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

fn pick_names(base: &[&str], n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{}_{}", base[i % base.len()], i / base.len() + 1)).collect()
}

/// Generates `n_tasks` feasible specs, deterministic in the seed.
///
/// Each candidate world is accepted only if its expert plan length falls in
/// `[PLAN_LEN_MIN, min(PLAN_LEN_MAX, max_steps)]`, mirroring the length band
/// of the source tasks.
pub fn gen_tasks(cfg: &GenConfig, seed: u64) -> Result<Vec<WorldSpec>> {
    cfg.validate()?;
    let split = if cfg.unseen { "unseen" } else { "seen" };
    let object_vocab = if cfg.unseen { UNSEEN_OBJECTS } else { SEEN_OBJECTS };
    let locations = pick_names(LOCATIONS, cfg.n_locations);
    let objects = pick_names(object_vocab, cfg.n_objects);
    let plan_cap = PLAN_LEN_MAX.min(cfg.max_steps);

    let mut specs = Vec::with_capacity(cfg.n_tasks);
    for task_idx in 0..cfg.n_tasks {
        let mut rng = SeedPath::new(seed).text("gen-task").text(split).index(task_idx as u64).rng();
        let mut accepted = None;
        for _attempt in 0..1000 {
            let mut placement = BTreeMap::new();
            for obj in &objects {
                let loc = &locations[uniform_index(&mut rng, locations.len())];
                placement.insert(obj.clone(), loc.clone());
            }
            let mut openable = BTreeSet::new();
            for loc in &locations {
                if uniform_f64(&mut rng) < 0.4 {
                    openable.insert(loc.clone());
                }
            }
            let agent_start = locations[uniform_index(&mut rng, locations.len())].clone();
            let (lo, hi) = cfg.goal_size_range;
            let goal_size = lo + uniform_index(&mut rng, hi - lo + 1);
            let mut pool: Vec<&String> = objects.iter().collect();
            let mut goal = Vec::new();
            for _ in 0..goal_size {
                let obj = pool.swap_remove(uniform_index(&mut rng, pool.len()));
                let target = locations[uniform_index(&mut rng, locations.len())].clone();
                goal.push((obj.clone(), target));
            }
            goal.sort();
            let spec = WorldSpec {
                task_id: format!("{split}_{task_idx:04}"),
                locations: locations.clone(),
                objects: objects.clone(),
                initial_placement: placement,
                openable,
                agent_start,
                goal,
                max_steps: cfg.max_steps,
            };
            if let Ok(plan) = expert_plan(&spec) {
                if (PLAN_LEN_MIN..=plan_cap).contains(&plan.len()) {
                    accepted = Some(spec);
                    break;
                }
            }
        }
        match accepted {
            Some(spec) => specs.push(spec),
            None => {
                return Err(CoreError::Config(format!(
                    "could not generate a feasible task for index {task_idx}"
                )))
            }
        }
    }
    Ok(specs)
}
