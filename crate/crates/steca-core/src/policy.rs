//! Action-generation policies over the enumerated candidate grammar.
//!
//! Four kinds share the [`Policy`] trait: the scripted expert, an
//! epsilon-noisy expert, a trainable feature-softmax policy, and (in the
//! companion crate) an external agent attached over a wire protocol.
//!
//! The softmax policy never sees the true world state. It scores candidates
//! with a linear model over indicator features computed from a belief state
//! reconstructed from the instruction and the observation history, so
//! training and acting stay consistent under partial observability.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::env::{action_candidates, plan_next, Action, Env, WorldSpec, WorldState};
use crate::error::{CoreError, Result};
use crate::rng::{uniform_f64, uniform_index, Rng};
use crate::trajectory::{ActionStep, Step, SubTrajectory};

/// What a policy is allowed to see when choosing an action.
///
/// `state` is the true world state; only the scripted expert kinds read it.
pub struct EnvView<'a> {
    pub instruction: &'a str,
    pub history: &'a [Step],
    pub candidates: &'a [String],
    pub spec: &'a WorldSpec,
    pub state: Option<&'a WorldState>,
}

pub trait Policy {
    fn act(&mut self, view: &EnvView<'_>, temperature: f64, rng: &mut Rng) -> Result<ActionStep>;
}

impl Policy for Box<dyn Policy> {
    fn act(&mut self, view: &EnvView<'_>, temperature: f64, rng: &mut Rng) -> Result<ActionStep> {
        (**self).act(view, temperature, rng)
    }
}

/// Template thought attached to sampled actions; policies score action text
/// only, so the rationale is decorative but keeps the step format uniform.
pub fn template_thought(action_text: &str) -> String {
    match Action::parse(action_text) {
        Some(Action::Goto(l)) => alloc::format!("I will move to the {l}."),
        Some(Action::Open(l)) => alloc::format!("I will open the {l} to see inside."),
        Some(Action::Take(o, l)) => alloc::format!("I will take the {o} from the {l}."),
        Some(Action::Put(o, l)) => alloc::format!("I will put the {o} in the {l}."),
        Some(Action::Done) => "The task should be complete now.".to_string(),
        None => "I will try this.".to_string(),
    }
}

fn true_state<'a>(view: &'a EnvView<'_>) -> Result<&'a WorldState> {
    view.state
        .ok_or_else(|| CoreError::Config("scripted expert policy needs the true world state".into()))
}

/// Full-knowledge scripted planner as a policy.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&mut self, view: &EnvView<'_>, _temperature: f64, _rng: &mut Rng) -> Result<ActionStep> {
        let action = plan_next(view.spec, true_state(view)?);
        Ok(ActionStep::new(template_thought(&action.text()), action.text()))
    }
}

/// Expert action with probability `1 - epsilon`, otherwise uniform over the
/// candidate set.
pub struct NoisyExpertPolicy {
    pub epsilon: f64,
}

impl NoisyExpertPolicy {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(CoreError::Config(alloc::format!("epsilon {epsilon} not in [0,1]")));
        }
        Ok(NoisyExpertPolicy { epsilon })
    }
}

impl Policy for NoisyExpertPolicy {
    fn act(&mut self, view: &EnvView<'_>, _temperature: f64, rng: &mut Rng) -> Result<ActionStep> {
        let state = true_state(view)?;
        let text = if uniform_f64(rng) < self.epsilon {
            view.candidates[uniform_index(rng, view.candidates.len())].clone()
        } else {
            plan_next(view.spec, state).text()
        };
        Ok(ActionStep::new(template_thought(&text), text))
    }
}

/// Dense weight vector for the softmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub feature_dim: usize,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize) -> Self {
        PolicyParams { weights: alloc::vec![0.0; feature_dim], feature_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.feature_dim {
            return Err(CoreError::Config("weight length != feature_dim".into()));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(CoreError::Config("non-finite weight".into()));
        }
        Ok(())
    }
}

/// Sparse indicator features for one candidate action in one context.
pub trait FeatureMap {
    fn dim(&self) -> usize;
    /// Returns `(feature_id, value)` pairs; deterministic, bounded values.
    fn features(
        &self,
        instruction: &str,
        history: &[Step],
        candidate: &str,
    ) -> Vec<(usize, f64)>;

    /// Features for every candidate in one context. Implementations that
    /// derive a shared context from the history should override this to
    /// compute it once.
    fn features_batch(
        &self,
        instruction: &str,
        history: &[Step],
        candidates: &[String],
    ) -> Vec<Vec<(usize, f64)>> {
        candidates.iter().map(|c| self.features(instruction, history, c)).collect()
    }
}

const N_TEMPLATES: usize = 5;
const N_PREDICATES: usize = 10;

/// Default feature map: per-template bias plus goal-relevance predicates
/// computed from the belief state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalFeatures;

impl GoalFeatures {
    pub const DIM: usize = N_TEMPLATES * N_PREDICATES;
}

impl FeatureMap for GoalFeatures {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn features(&self, instruction: &str, history: &[Step], candidate: &str) -> Vec<(usize, f64)> {
        let belief = Belief::build(instruction, history);
        belief.features(candidate)
    }

    fn features_batch(
        &self,
        instruction: &str,
        history: &[Step],
        candidates: &[String],
    ) -> Vec<Vec<(usize, f64)>> {
        let belief = Belief::build(instruction, history);
        candidates.iter().map(|c| belief.features(c)).collect()
    }
}

/// What the agent can infer about the world from its own interaction history.
#[derive(Debug, Clone, Default)]
pub struct Belief {
    pub goals: Vec<(String, String)>,
    pub agent_at: Option<String>,
    pub holding: Option<String>,
    pub placement: BTreeMap<String, String>,
    pub visited: BTreeSet<String>,
    pub closed: BTreeSet<String>,
}

fn parse_listing(observation: &str, loc: &str, placement: &mut BTreeMap<String, String>) {
    let Some(pos) = observation.find("you see ") else { return };
    let listing = observation[pos + "you see ".len()..].trim_end_matches('.');
    placement.retain(|_, l| l != loc);
    if listing == "nothing" {
        return;
    }
    for item in listing.split(", ") {
        if let Some(obj) = item.strip_prefix("a ") {
            placement.insert(obj.to_string(), loc.to_string());
        }
    }
}

impl Belief {
    pub fn build(instruction: &str, history: &[Step]) -> Belief {
        let mut belief = Belief::default();
        if let Some(rest) = instruction.strip_prefix("You are at the ") {
            if let Some(end) = rest.find('.') {
                let start = rest[..end].to_string();
                belief.visited.insert(start.clone());
                belief.agent_at = Some(start);
            }
        }
        let mut rest = instruction;
        while let Some(pos) = rest.find("put the ") {
            rest = &rest[pos + "put the ".len()..];
            if let Some(mid) = rest.find(" in the ") {
                let obj = rest[..mid].to_string();
                let after = &rest[mid + " in the ".len()..];
                let end = after.find([' ', '.']).unwrap_or(after.len());
                belief.goals.push((obj, after[..end].to_string()));
                rest = &after[end..];
            } else {
                break;
            }
        }
        for step in history {
            belief.observe(&step.action, &step.observation);
        }
        belief
    }

    fn observe(&mut self, action: &str, observation: &str) {
        match Action::parse(action) {
            Some(Action::Goto(loc)) if observation.starts_with("You arrive at the ") => {
                self.visited.insert(loc.clone());
                self.agent_at = Some(loc.clone());
                if observation.contains("is closed") {
                    self.closed.insert(loc);
                } else {
                    self.closed.remove(&loc);
                    parse_listing(observation, &loc, &mut self.placement);
                }
            }
            Some(Action::Open(loc)) if observation.starts_with("You open the ") => {
                self.closed.remove(&loc);
                parse_listing(observation, &loc, &mut self.placement);
            }
            Some(Action::Take(obj, _)) if observation.starts_with("You take the ") => {
                self.placement.remove(&obj);
                self.holding = Some(obj);
            }
            Some(Action::Put(obj, loc)) if observation.starts_with("You put the ") => {
                self.holding = None;
                self.placement.insert(obj, loc);
            }
            _ => {}
        }
    }

    fn goal_unsatisfied(&self, obj: &str) -> Option<&str> {
        self.goals
            .iter()
            .find(|(o, l)| o == obj && self.placement.get(o.as_str()).map(String::as_str) != Some(l))
            .map(|(_, l)| l.as_str())
    }

    fn all_goals_met(&self) -> bool {
        self.goals
            .iter()
            .all(|(o, l)| self.placement.get(o).map(String::as_str) == Some(l.as_str()))
    }

    /// Indicator features for one candidate action.
    pub fn features(&self, candidate: &str) -> Vec<(usize, f64)> {
        let parsed = Action::parse(candidate);
        let (template, obj, loc): (usize, Option<&str>, Option<&str>) = match &parsed {
            Some(Action::Goto(l)) => (0, None, Some(l)),
            Some(Action::Open(l)) => (1, None, Some(l)),
            Some(Action::Take(o, l)) => (2, Some(o), Some(l)),
            Some(Action::Put(o, l)) => (3, Some(o), Some(l)),
            Some(Action::Done) => (4, None, None),
            None => (4, None, None),
        };
        let mut preds = [false; N_PREDICATES];
        preds[0] = true;
        preds[1] = obj.is_some_and(|o| self.goal_unsatisfied(o).is_some());
        preds[2] = match (&self.holding, loc) {
            (Some(h), Some(l)) => self.goal_unsatisfied(h) == Some(l),
            _ => false,
        };
        preds[3] = match (obj, loc) {
            (Some(o), Some(l)) => self.placement.get(o).map(String::as_str) == Some(l),
            _ => false,
        };
        preds[4] = loc.is_some_and(|l| {
            self.goals.iter().any(|(o, _)| {
                self.goal_unsatisfied(o).is_some()
                    && self.placement.get(o).map(String::as_str) == Some(l)
            })
        });
        preds[5] = loc.is_some_and(|l| !self.visited.contains(l));
        preds[6] = loc.is_some_and(|l| self.agent_at.as_deref() == Some(l));
        preds[7] = loc.is_some_and(|l| self.closed.contains(l));
        preds[8] = self.holding.is_some();
        preds[9] = self.all_goals_met();
        preds
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(p, _)| (template * N_PREDICATES + p, 1.0))
            .collect()
    }
}

fn dot_sparse(weights: &[f64], features: &[(usize, f64)]) -> f64 {
    features.iter().map(|&(i, v)| weights[i] * v).sum()
}

/// Softmax probabilities over candidate scores at the given temperature.
///
/// `temperature = 0` puts all mass on the argmax (first index under the
/// caller's candidate ordering, which is lexicographic).
pub fn softmax_probs(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature < 0.0 {
        return Err(CoreError::Config(alloc::format!("temperature {temperature} is negative")));
    }
    if scores.is_empty() {
        return Err(CoreError::EmptySequence);
    }
    let mut probs = alloc::vec![0.0; scores.len()];
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        probs[best] = 1.0;
        return Ok(probs);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        let e = libm::exp((s - max) / temperature);
        probs[i] = e;
        total += e;
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Trainable linear-softmax policy over the candidate grammar.
pub struct SoftmaxPolicy<F: FeatureMap> {
    pub params: PolicyParams,
    pub feature_map: F,
}

impl<F: FeatureMap> SoftmaxPolicy<F> {
    pub fn new(params: PolicyParams, feature_map: F) -> Result<Self> {
        params.validate()?;
        if params.feature_dim != feature_map.dim() {
            return Err(CoreError::Config("params dimension != feature map dimension".into()));
        }
        Ok(SoftmaxPolicy { params, feature_map })
    }

    fn candidate_probs(
        &self,
        instruction: &str,
        history: &[Step],
        candidates: &[String],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let feats = self.feature_map.features_batch(instruction, history, candidates);
        let scores: Vec<f64> =
            feats.iter().map(|f| dot_sparse(&self.params.weights, f)).collect();
        softmax_probs(&scores, temperature)
    }
}

impl<F: FeatureMap> Policy for SoftmaxPolicy<F> {
    fn act(&mut self, view: &EnvView<'_>, temperature: f64, rng: &mut Rng) -> Result<ActionStep> {
        let probs = self.candidate_probs(view.instruction, view.history, view.candidates, temperature)?;
        let idx = if temperature == 0.0 {
            probs.iter().position(|&p| p == 1.0).unwrap_or(0)
        } else {
            let draw = uniform_f64(rng);
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if draw < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let text = view.candidates[idx].clone();
        Ok(ActionStep::new(template_thought(&text), text))
    }
}

/// Sum over segment steps of the log softmax-probability of each stored
/// action, conditioned on `prefix ⊕ segment[..k]` as the growing history.
///
/// The policy factorizes per step, so the value satisfies the chain rule:
/// `logprob(prefix, s1 ⊕ s2) = logprob(prefix, s1) + logprob(prefix ⊕ s1, s2)`.
pub fn segment_logprob<F: FeatureMap>(
    params: &PolicyParams,
    feature_map: &F,
    spec: &WorldSpec,
    prefix: &SubTrajectory,
    segment: &SubTrajectory,
    temperature: f64,
) -> Result<f64> {
    let (value, _) = segment_eval(params, feature_map, spec, prefix, segment, temperature, false)?;
    Ok(value)
}

/// Analytic gradient of [`segment_logprob`] in the weights:
/// per step, `(φ(a_t) − E_{a∼softmax} φ(a)) / temperature`.
pub fn segment_logprob_grad<F: FeatureMap>(
    params: &PolicyParams,
    feature_map: &F,
    spec: &WorldSpec,
    prefix: &SubTrajectory,
    segment: &SubTrajectory,
    temperature: f64,
) -> Result<Vec<f64>> {
    let (_, grad) = segment_eval(params, feature_map, spec, prefix, segment, temperature, true)?;
    Ok(grad.expect("gradient requested"))
}

fn segment_eval<F: FeatureMap>(
    params: &PolicyParams,
    feature_map: &F,
    spec: &WorldSpec,
    prefix: &SubTrajectory,
    segment: &SubTrajectory,
    temperature: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    params.validate()?;
    if temperature <= 0.0 {
        return Err(CoreError::Config("segment log-prob needs temperature > 0".into()));
    }
    let candidates = action_candidates(spec);
    let instruction = spec.instruction();
    let mut history: Vec<Step> = prefix.steps.clone();
    let mut value = 0.0;
    let mut grad = if with_grad { Some(alloc::vec![0.0; params.feature_dim]) } else { None };
    for (k, step) in segment.steps.iter().enumerate() {
        let target = candidates.iter().position(|c| *c == step.action).ok_or_else(|| {
            CoreError::InvalidSegment { step: prefix.len() + k + 1, action: step.action.clone() }
        })?;
        let feats = feature_map.features_batch(&instruction, &history, &candidates);
        let scores: Vec<f64> = feats.iter().map(|f| dot_sparse(&params.weights, f)).collect();
        let probs = softmax_probs(&scores, temperature)?;
        value += libm::log(probs[target]);
        if let Some(g) = grad.as_mut() {
            for &(i, v) in &feats[target] {
                g[i] += v / temperature;
            }
            for (c, f) in feats.iter().enumerate() {
                for &(i, v) in f {
                    g[i] -= probs[c] * v / temperature;
                }
            }
        }
        history.push(step.clone());
    }
    Ok((value, grad))
}

/// Drives a policy in an environment until termination, starting from the
/// env's current state and the given history. Returns the newly generated
/// steps and the final outcome.
pub fn rollout<P: Policy + ?Sized>(
    env: &mut Env,
    history: &[Step],
    policy: &mut P,
    temperature: f64,
    rng: &mut Rng,
) -> Result<(Vec<Step>, u8)> {
    if env.terminated() {
        let outcome = env.state().outcome.expect("terminated env has an outcome");
        return Ok((Vec::new(), outcome));
    }
    let spec = env.spec().clone();
    let instruction = spec.instruction();
    let candidates = action_candidates(&spec);
    let mut full_history: Vec<Step> = history.to_vec();
    let mut new_steps = Vec::new();
    loop {
        let action_step = {
            let view = EnvView {
                instruction: &instruction,
                history: &full_history,
                candidates: &candidates,
                spec: &spec,
                state: Some(env.state()),
            };
            policy.act(&view, temperature, rng)?
        };
        let result = env.step(&action_step.action)?;
        let step = Step::new(action_step, result.observation);
        full_history.push(step.clone());
        new_steps.push(step);
        if result.done {
            return Ok((new_steps, result.outcome.expect("done step carries an outcome")));
        }
    }
}
