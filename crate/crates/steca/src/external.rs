//! External agents over newline-delimited JSON.
//!
//! Both the policy and the reflector speak the same framing: one JSON
//! request object per line over a TCP byte stream, one JSON response object
//! per line back. Each call opens a fresh connection, so a misbehaving
//! server cannot wedge later requests; timeouts and retry counts come from
//! the configuration.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use steca_core::calibrate::Reflector;
use steca_core::policy::{EnvView, Policy};
use steca_core::rng::Rng;
use steca_core::trajectory::{ActionStep, Step};
use steca_core::CoreError;

/// Prompt template for the external reflector, shipped alongside the binary.
/// Placeholders: `{instruction}`, `{history}`, `{deviated_action}`,
/// `{ground_truth_action}`.
pub const REFLECTION_PROMPT: &str = include_str!("../resources/reflection_prompt.txt");

/// Fills [`REFLECTION_PROMPT`] for a concrete reflection call; servers and
/// tests can use this to build the text they feed their model.
pub fn render_reflection_prompt(
    instruction: &str,
    history: &[Step],
    deviated_action: &str,
    ground_truth_action: &str,
) -> String {
    let history_text = if history.is_empty() {
        "(no steps yet)".to_string()
    } else {
        history
            .iter()
            .enumerate()
            .map(|(i, s)| {
                format!("{}. thought: {} | action: {} | observation: {}", i + 1, s.thought, s.action, s.observation)
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    REFLECTION_PROMPT
        .replace("{instruction}", instruction)
        .replace("{history}", &history_text)
        .replace("{deviated_action}", deviated_action)
        .replace("{ground_truth_action}", ground_truth_action)
}

/// Requests sent to an external agent, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Act {
        instruction: String,
        history: Vec<Step>,
        candidates: Vec<String>,
    },
    Reflect {
        instruction: String,
        history: Vec<Step>,
        deviated_action: String,
        ground_truth_action: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActResponse {
    pub thought: String,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectResponse {
    pub thought: String,
}

/// Connection settings shared by both external agent kinds.
#[derive(Debug, Clone)]
pub struct Endpoint {
    /// `host:port`.
    pub addr: String,
    pub timeout: Duration,
    pub retries: u32,
}

impl Endpoint {
    pub fn new(addr: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        Endpoint { addr: addr.into(), timeout, retries }
    }

    /// One request/response exchange, retried on transport errors.
    fn call(&self, request: &Request) -> Result<String, CoreError> {
        let payload = serde_json::to_string(request)
            .map_err(|e| CoreError::PolicyIo(format!("encoding request: {e}")))?;
        let mut last_err = None;
        for attempt in 0..=self.retries {
            match self.call_once(&payload) {
                Ok(line) => return Ok(line),
                Err(err) => {
                    log::warn!("external call attempt {} failed: {err}", attempt + 1);
                    last_err = Some(err);
                }
            }
        }
        Err(CoreError::PolicyIo(format!(
            "external agent at {} failed after {} attempts: {}",
            self.addr,
            self.retries + 1,
            last_err.expect("at least one attempt ran")
        )))
    }

    fn call_once(&self, payload: &str) -> std::io::Result<String> {
        let stream = TcpStream::connect(&self.addr)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let mut writer = stream.try_clone()?;
        writer.write_all(payload.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        let mut line = String::new();
        BufReader::new(stream).read_line(&mut line)?;
        if line.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "server closed the connection without responding",
            ));
        }
        Ok(line)
    }
}

/// Policy backed by an external agent; the sampling temperature stays on the
/// server side, so it is not part of the wire format.
pub struct ExternalPolicy {
    pub endpoint: Endpoint,
}

impl Policy for ExternalPolicy {
    fn act(&mut self, view: &EnvView<'_>, _temperature: f64, _rng: &mut Rng) -> Result<ActionStep, CoreError> {
        let request = Request::Act {
            instruction: view.instruction.to_string(),
            history: view.history.to_vec(),
            candidates: view.candidates.to_vec(),
        };
        let line = self.endpoint.call(&request)?;
        let response: ActResponse = serde_json::from_str(&line)
            .map_err(|e| CoreError::PolicyIo(format!("decoding act response: {e}")))?;
        if !view.candidates.contains(&response.action) {
            log::warn!("external action '{}' is not in the candidate set", response.action);
        }
        Ok(ActionStep::new(response.thought, response.action))
    }
}

/// Reflector backed by an external agent.
pub struct ExternalReflector {
    pub endpoint: Endpoint,
}

impl Reflector for ExternalReflector {
    fn reflect(
        &mut self,
        instruction: &str,
        prefix: &[Step],
        deviated_action: &ActionStep,
        ground_truth_action: &ActionStep,
    ) -> Result<String, CoreError> {
        let request = Request::Reflect {
            instruction: instruction.to_string(),
            history: prefix.to_vec(),
            deviated_action: deviated_action.action.clone(),
            ground_truth_action: ground_truth_action.action.clone(),
        };
        let line = self.endpoint.call(&request)?;
        let response: ReflectResponse = serde_json::from_str(&line)
            .map_err(|e| CoreError::PolicyIo(format!("decoding reflect response: {e}")))?;
        Ok(response.thought)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::thread;

    /// Serves `n` connections, answering each request with `respond`.
    fn spawn_server(
        n: usize,
        respond: impl Fn(Request) -> String + Send + 'static,
    ) -> (String, thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let handle = thread::spawn(move || {
            for _ in 0..n {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let request: Request = serde_json::from_str(&line).unwrap();
                let mut stream = stream;
                stream.write_all(respond(request).as_bytes()).unwrap();
                stream.write_all(b"\n").unwrap();
            }
        });
        (addr, handle)
    }

    fn endpoint(addr: &str) -> Endpoint {
        Endpoint::new(addr, Duration::from_secs(2), 0)
    }

    #[test]
    fn act_request_wire_format() {
        let request = Request::Act {
            instruction: "do it".into(),
            history: vec![Step { thought: "t".into(), action: "a".into(), observation: "o".into() }],
            candidates: vec!["a".into(), "done".into()],
        };
        let value: serde_json::Value = serde_json::to_value(&request).unwrap();
        assert_eq!(value["type"], "act");
        assert_eq!(value["history"][0]["observation"], "o");
        assert_eq!(value["candidates"][1], "done");
        let back: Request = serde_json::from_value(value).unwrap();
        assert_eq!(back, request);
    }

    #[test]
    fn external_policy_round_trip() {
        let (addr, handle) = spawn_server(1, |request| {
            let Request::Act { candidates, .. } = request else { panic!("expected act") };
            serde_json::to_string(&ActResponse {
                thought: "picking the first option".into(),
                action: candidates[0].clone(),
            })
            .unwrap()
        });
        let spec = steca_core::env::gen_tasks(
            &steca_core::env::GenConfig {
                n_tasks: 1,
                n_locations: 3,
                n_objects: 2,
                goal_size_range: (1, 1),
                unseen: false,
                max_steps: 20,
            },
            5,
        )
        .unwrap()
        .pop()
        .unwrap();
        let instruction = spec.instruction();
        let candidates = steca_core::env::action_candidates(&spec);
        let view = EnvView {
            instruction: &instruction,
            history: &[],
            candidates: &candidates,
            spec: &spec,
            state: None,
        };
        let mut policy = ExternalPolicy { endpoint: endpoint(&addr) };
        let mut rng = steca_core::rng::SeedPath::new(0).rng();
        let step = policy.act(&view, 1.0, &mut rng).unwrap();
        assert_eq!(step.action, candidates[0]);
        assert_eq!(step.thought, "picking the first option");
        handle.join().unwrap();
    }

    #[test]
    fn external_reflector_round_trip() {
        let (addr, handle) = spawn_server(1, |request| {
            let Request::Reflect { deviated_action, ground_truth_action, .. } = request else {
                panic!("expected reflect")
            };
            serde_json::to_string(&ReflectResponse {
                thought: format!("not {deviated_action}; {ground_truth_action} instead"),
            })
            .unwrap()
        });
        let mut reflector = ExternalReflector { endpoint: endpoint(&addr) };
        let thought = reflector
            .reflect(
                "put the cup_1 in the shelf_1",
                &[],
                &ActionStep::new("", "goto drawer_1"),
                &ActionStep::new("", "goto shelf_1"),
            )
            .unwrap();
        assert_eq!(thought, "not goto drawer_1; goto shelf_1 instead");
        handle.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        // a bound-then-dropped listener leaves a port nothing listens on
        let port = {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            listener.local_addr().unwrap().port()
        };
        let mut policy = ExternalPolicy {
            endpoint: Endpoint::new(
                format!("127.0.0.1:{port}"),
                Duration::from_millis(200),
                1,
            ),
        };
        let spec = steca_core::env::gen_tasks(
            &steca_core::env::GenConfig {
                n_tasks: 1,
                n_locations: 3,
                n_objects: 2,
                goal_size_range: (1, 1),
                unseen: false,
                max_steps: 20,
            },
            6,
        )
        .unwrap()
        .pop()
        .unwrap();
        let instruction = spec.instruction();
        let candidates = steca_core::env::action_candidates(&spec);
        let view = EnvView {
            instruction: &instruction,
            history: &[],
            candidates: &candidates,
            spec: &spec,
            state: None,
        };
        let mut rng = steca_core::rng::SeedPath::new(0).rng();
        let err = policy.act(&view, 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, CoreError::PolicyIo(_)));
        assert!(err.to_string().contains("2 attempts"), "{err}");
    }

    #[test]
    fn prompt_template_fills_every_placeholder() {
        let history = vec![Step {
            thought: "looking around".into(),
            action: "goto shelf_1".into(),
            observation: "You arrive at the shelf_1.".into(),
        }];
        let text = render_reflection_prompt(
            "put the cup_1 in the shelf_1",
            &history,
            "open drawer_1",
            "take cup_1 from shelf_1",
        );
        assert!(!text.contains('{'), "unfilled placeholder in:\n{text}");
        assert!(text.contains("put the cup_1 in the shelf_1"));
        assert!(text.contains("open drawer_1"));
        assert!(text.contains("take cup_1 from shelf_1"));
        assert!(text.contains("You arrive at the shelf_1."));
    }
}
