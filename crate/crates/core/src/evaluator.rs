//! Accuracy evaluation of candidate networks.
//!
//! Two backends implement [`Evaluator`]: a deterministic surrogate for
//! desk-scale runs and a pool of external worker processes that train real
//! models. Workers speak line-delimited JSON over stdin/stdout:
//!
//! ```text
//! worker -> {"hello": {"protocol": 1, "name": "..."}}
//! engine -> {"eval": {"trial_id": 7, "arch": {...}, "solver": {...}, "eval_samples": 100, "seed": 42}}
//! worker -> {"result": {"trial_id": 7, "top1": 0.93, "evaluated_samples": 100}}
//!         | {"error": {"trial_id": 7, "message": "..."}}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::archspec::NetworkArch;
use crate::costmodel::network_cost;
use crate::engine::SolverSettings;
use crate::util::sha256_u64;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_EVAL_SAMPLES: u64 = 100;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("failed to start worker `{program}`: {message}")]
    Spawn { program: String, message: String },
    #[error("worker handshake failed: {0}")]
    Handshake(String),
    #[error("worker timed out after {0:.1} s")]
    Timeout(f64),
    #[error("worker exited")]
    Exited,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o error talking to worker: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub trial_id: u64,
    pub arch: NetworkArch,
    pub solver: SolverSettings,
    pub eval_samples: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "message")]
pub enum EvalStatus {
    Ok,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub trial_id: u64,
    pub top1: f64,
    pub evaluated_samples: u64,
    pub status: EvalStatus,
}

impl EvalResponse {
    pub fn ok(trial_id: u64, top1: f64, evaluated_samples: u64) -> Self {
        EvalResponse {
            trial_id,
            top1,
            evaluated_samples,
            status: EvalStatus::Ok,
        }
    }

    pub fn error(trial_id: u64, message: impl Into<String>) -> Self {
        EvalResponse {
            trial_id,
            top1: 0.0,
            evaluated_samples: 0,
            status: EvalStatus::Error(message.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == EvalStatus::Ok
    }
}

/// Anything that can score a candidate. Implementations must be safe to
/// call from several threads at once.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, req: &EvalRequest) -> EvalResponse;
}

/// Deterministic stand-in for training: accuracy saturates with the weight
/// count and grows with the training budget, plus bounded hash noise.
///
/// `top1 = clamp(cap * b + noise, 0, 1)` quantized to `1 / eval_samples`,
/// with `cap = 0.5 + 0.45 * (1 - exp(-P / p0))` for weight count `P`,
/// `b = min(1, iterations / full_iterations)^0.25` and noise uniform in
/// `[-noise, +noise]`, keyed on the network and the request seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub p0: f64,
    pub full_iterations: f64,
    pub noise: f64,
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate {
            p0: 20_000.0,
            full_iterations: 40_000.0,
            noise: 0.01,
        }
    }
}

impl Surrogate {
    pub fn cap(&self, params: u64) -> f64 {
        0.5 + 0.45 * (1.0 - (-(params as f64) / self.p0).exp())
    }

    pub fn budget_factor(&self, iterations: u64) -> f64 {
        (iterations as f64 / self.full_iterations)
            .min(1.0)
            .powf(0.25)
    }

    /// Noise in `[-noise, +noise]` keyed on `(arch, seed)`.
    pub fn noise_for(&self, arch: &NetworkArch, seed: u64) -> f64 {
        let mut key = serde_json::to_vec(arch).expect("arch serializes");
        key.extend_from_slice(&seed.to_le_bytes());
        let unit = (sha256_u64(&key) >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * unit - 1.0) * self.noise
    }
}

impl Evaluator for Surrogate {
    fn evaluate(&self, req: &EvalRequest) -> EvalResponse {
        if let Err(e) = req.arch.validate() {
            return EvalResponse::error(req.trial_id, e.to_string());
        }
        if req.eval_samples == 0 {
            return EvalResponse::error(req.trial_id, "eval_samples must be >= 1");
        }
        let params = match network_cost(&req.arch) {
            Ok(cost) => cost.total_params,
            Err(e) => return EvalResponse::error(req.trial_id, e.to_string()),
        };
        let raw = self.cap(params) * self.budget_factor(req.solver.iterations)
            + self.noise_for(&req.arch, req.seed);
        let n = req.eval_samples as f64;
        let top1 = (raw.clamp(0.0, 1.0) * n).round() / n;
        EvalResponse::ok(req.trial_id, top1, req.eval_samples)
    }
}

/// Surrogate evaluation with the default constants.
pub fn surrogate_eval(req: &EvalRequest) -> EvalResponse {
    Surrogate::default().evaluate(req)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerMessage {
    Hello {
        protocol: u32,
        name: String,
    },
    Eval(EvalRequest),
    Result {
        trial_id: u64,
        top1: f64,
        evaluated_samples: u64,
    },
    Error {
        trial_id: u64,
        message: String,
    },
}

/// How to launch a worker process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_handshake_timeout")]
    pub handshake_timeout_secs: f64,
}

fn default_timeout() -> f64 {
    3600.0
}

fn default_handshake_timeout() -> f64 {
    60.0
}

impl WorkerCommand {
    pub fn new(program: impl Into<String>, args: &[&str]) -> Self {
        WorkerCommand {
            program: program.into(),
            args: args.iter().map(|s| s.to_string()).collect(),
            timeout_secs: default_timeout(),
            handshake_timeout_secs: default_handshake_timeout(),
        }
    }
}

/// One running, handshaken worker process.
pub struct WorkerHandle {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    name: String,
    timeout: Duration,
}

impl WorkerHandle {
    pub fn spawn(cmd: &WorkerCommand) -> Result<Self, EvalError> {
        let mut child = Command::new(&cmd.program)
            .args(&cmd.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EvalError::Spawn {
                program: cmd.program.clone(),
                message: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut handle = WorkerHandle {
            child,
            stdin,
            lines,
            name: String::new(),
            timeout: Duration::from_secs_f64(cmd.timeout_secs),
        };
        let hello = handle
            .read_message(Duration::from_secs_f64(cmd.handshake_timeout_secs))
            .map_err(|e| EvalError::Handshake(e.to_string()))?;
        match hello {
            WorkerMessage::Hello { protocol, name } if protocol == PROTOCOL_VERSION => {
                handle.name = name;
                Ok(handle)
            }
            WorkerMessage::Hello { protocol, .. } => Err(EvalError::Handshake(format!(
                "unsupported protocol version {protocol}"
            ))),
            other => Err(EvalError::Handshake(format!(
                "expected hello, got {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn read_message(&mut self, timeout: Duration) -> Result<WorkerMessage, EvalError> {
        let line = match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(EvalError::Io(e.to_string())),
            Err(RecvTimeoutError::Timeout) => {
                return Err(EvalError::Timeout(timeout.as_secs_f64()))
            }
            Err(RecvTimeoutError::Disconnected) => return Err(EvalError::Exited),
        };
        serde_json::from_str(&line)
            .map_err(|e| EvalError::Protocol(format!("malformed message {line:?}: {e}")))
    }

    /// Sends one request and waits for its response. Transport and protocol
    /// failures are returned as `Err`; a well-formed worker-reported error
    /// is an `Ok` response with error status.
    pub fn request(&mut self, req: &EvalRequest) -> Result<EvalResponse, EvalError> {
        let mut line =
            serde_json::to_string(&WorkerMessage::Eval(req.clone())).expect("request serializes");
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| EvalError::Io(e.to_string()))?;
        match self.read_message(self.timeout)? {
            WorkerMessage::Result {
                trial_id,
                top1,
                evaluated_samples,
            } => {
                if trial_id != req.trial_id {
                    return Err(EvalError::Protocol(format!(
                        "out-of-order response: expected trial {}, got {trial_id}",
                        req.trial_id
                    )));
                }
                if !(0.0..=1.0).contains(&top1) {
                    return Err(EvalError::Protocol(format!("top1 {top1} outside [0, 1]")));
                }
                if evaluated_samples == 0 {
                    return Err(EvalError::Protocol("evaluated_samples must be >= 1".into()));
                }
                Ok(EvalResponse::ok(trial_id, top1, evaluated_samples))
            }
            WorkerMessage::Error { trial_id, message } => {
                if trial_id != req.trial_id {
                    return Err(EvalError::Protocol(format!(
                        "out-of-order response: expected trial {}, got {trial_id}",
                        req.trial_id
                    )));
                }
                Ok(EvalResponse::error(trial_id, message))
            }
            other => Err(EvalError::Protocol(format!("unexpected message {other:?}"))),
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Evaluates `req` on a running worker, folding transport failures into an
/// error response.
pub fn worker_eval(req: &EvalRequest, worker: &mut WorkerHandle) -> EvalResponse {
    worker
        .request(req)
        .unwrap_or_else(|e| EvalResponse::error(req.trial_id, e.to_string()))
}

/// A fixed set of worker processes, one request in flight per process. A
/// worker that times out or breaks protocol is killed and replaced on its
/// next use.
pub struct WorkerPool {
    command: WorkerCommand,
    slots: Vec<Mutex<Option<WorkerHandle>>>,
}

impl WorkerPool {
    /// Starts `size` workers up front so a bad command fails immediately.
    pub fn start(command: WorkerCommand, size: usize) -> Result<Self, EvalError> {
        let slots = (0..size.max(1))
            .map(|_| WorkerHandle::spawn(&command).map(|w| Mutex::new(Some(w))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(WorkerPool { command, slots })
    }

    pub fn size(&self) -> usize {
        self.slots.len()
    }

    fn run(&self, slot: &mut Option<WorkerHandle>, req: &EvalRequest) -> EvalResponse {
        if slot.is_none() {
            match WorkerHandle::spawn(&self.command) {
                Ok(w) => *slot = Some(w),
                Err(e) => return EvalResponse::error(req.trial_id, e.to_string()),
            }
        }
        let worker = slot.as_mut().expect("spawned above");
        match worker.request(req) {
            Ok(resp) => resp,
            Err(e) => {
                log::warn!("worker failed on trial {}: {e}; restarting", req.trial_id);
                *slot = None;
                EvalResponse::error(req.trial_id, e.to_string())
            }
        }
    }
}

impl Evaluator for WorkerPool {
    fn evaluate(&self, req: &EvalRequest) -> EvalResponse {
        for slot in &self.slots {
            if let Ok(mut guard) = slot.try_lock() {
                return self.run(&mut guard, req);
            }
        }
        let index = req.trial_id as usize % self.slots.len();
        let mut guard = self.slots[index].lock().unwrap_or_else(|p| p.into_inner());
        self.run(&mut guard, req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{ConvLayerSpec, TensorShape};

    fn request(arch: NetworkArch, iterations: u64, seed: u64) -> EvalRequest {
        EvalRequest {
            trial_id: 1,
            arch,
            solver: SolverSettings {
                iterations,
                ..SolverSettings::default()
            },
            eval_samples: DEFAULT_EVAL_SAMPLES,
            seed,
        }
    }

    #[test]
    fn tiny_network_sits_near_half() {
        let arch = NetworkArch::new(TensorShape::new(1, 1, 1), vec![ConvLayerSpec::new(1, 1, 1)]);
        for seed in 0..50 {
            let r = surrogate_eval(&request(arch.clone(), 40_000, seed));
            assert!(r.is_ok());
            assert!((0.49..=0.51).contains(&r.top1), "{}", r.top1);
        }
    }

    #[test]
    fn huge_network_saturates() {
        let arch = NetworkArch::new(
            TensorShape::new(1, 8, 8),
            vec![ConvLayerSpec::new(5, 5, 200), ConvLayerSpec::new(5, 5, 200)],
        );
        assert!(network_cost(&arch).unwrap().total_params >= 1_000_000);
        for seed in 0..50 {
            let r = surrogate_eval(&request(arch.clone(), 40_000, seed));
            assert!((0.94..=0.96).contains(&r.top1), "{}", r.top1);
        }
    }

    #[test]
    fn deterministic_and_quantized() {
        let arch = crate::reference::seed_arch();
        let a = surrogate_eval(&request(arch.clone(), 8_000, 9));
        let b = surrogate_eval(&request(arch, 8_000, 9));
        assert_eq!(a, b);
        assert!(((a.top1 * 100.0).round() - a.top1 * 100.0).abs() < 1e-9);
        assert_eq!(a.evaluated_samples, 100);
    }

    #[test]
    fn budget_factor_shape() {
        let s = Surrogate::default();
        assert_eq!(s.budget_factor(40_000), 1.0);
        assert_eq!(s.budget_factor(80_000), 1.0);
        assert!((s.budget_factor(2_500) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_requests_report_errors() {
        let arch = NetworkArch::new(TensorShape::new(1, 1, 1), vec![]);
        assert!(!surrogate_eval(&request(arch, 1, 0)).is_ok());
    }

    #[test]
    fn wire_messages_use_protocol_field_names() {
        let hello: WorkerMessage =
            serde_json::from_str(r#"{"hello": {"protocol": 1, "name": "stub"}}"#).unwrap();
        assert_eq!(
            hello,
            WorkerMessage::Hello {
                protocol: 1,
                name: "stub".into()
            }
        );
        let arch = NetworkArch::new(TensorShape::new(1, 2, 2), vec![ConvLayerSpec::new(1, 1, 1)]);
        let text = serde_json::to_string(&WorkerMessage::Eval(request(arch, 8000, 5))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let eval = &v["eval"];
        assert_eq!(eval["trial_id"], 1);
        assert_eq!(eval["eval_samples"], 100);
        assert_eq!(eval["seed"], 5);
        assert_eq!(eval["solver"]["optimizer"], "adam");
        assert_eq!(eval["solver"]["lr"], 0.001);
        assert_eq!(eval["solver"]["batch"], 25);
        assert_eq!(eval["solver"]["iterations"], 8000);
        assert!(eval["solver"]["decay"].is_null());
        assert_eq!(eval["arch"]["layers"][0]["padding"], "same");
        let result: WorkerMessage = serde_json::from_str(
            r#"{"result": {"trial_id": 3, "top1": 0.5, "evaluated_samples": 100}}"#,
        )
        .unwrap();
        assert!(matches!(result, WorkerMessage::Result { trial_id: 3, .. }));
        let error: WorkerMessage =
            serde_json::from_str(r#"{"error": {"trial_id": 3, "message": "boom"}}"#).unwrap();
        assert!(matches!(error, WorkerMessage::Error { trial_id: 3, .. }));
    }
}
