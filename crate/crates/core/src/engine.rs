//! Search orchestration: phases of sampled trials, refinement by freezing the
//! most common Pareto-frontier setting between phases, and fine-tuning of the
//! final frontier.
//!
//! All progress is recorded in an append-only [`TrialLog`]. The engine is a
//! state machine whose state is a pure function of the log: the live run
//! and a replay apply the very same records through [`EngineState::apply`],
//! so a run resumed from any prefix of its log continues exactly as the
//! uninterrupted run would have.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspec::{ArchError, Assignment, NetworkArch, ParamId, ParamValue, SearchSpace};
use crate::costmodel::{network_cost, CostError, NetworkCost};
use crate::evaluator::{
    EvalError, EvalRequest, EvalResponse, EvalStatus, Evaluator, Surrogate, WorkerCommand,
    WorkerPool, DEFAULT_EVAL_SAMPLES,
};
use crate::pareto::{self, common_settings, most_common_setting, ParetoError, ScoredPoint};
use crate::tpe::{Observation, TpeConfig, TpeError, TpeState};
use crate::util::{mix_seed, sha256_hex};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Tpe(#[from] TpeError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("log integrity: {0}")]
    Integrity(String),
    #[error("log belongs to run {found}, config describes run {expected}")]
    RunMismatch { expected: String, found: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_error(path: &Path, e: impl fmt::Display) -> EngineError {
    EngineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

/// Step decay: the learning rate is multiplied by `factor` every `every`
/// iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub factor: f64,
    pub every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    #[serde(rename = "batch")]
    pub batch_size: u64,
    pub iterations: u64,
    #[serde(default)]
    pub decay: Option<LrDecay>,
}

impl Default for SolverSettings {
    /// ADAM, learning rate 1e-3, batch 25, 8000 iterations, no decay.
    fn default() -> Self {
        SolverSettings {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            batch_size: 25,
            iterations: 8_000,
            decay: None,
        }
    }
}

impl SolverSettings {
    /// Settings the seed network was originally trained with: learning rate
    /// 5e-4 dropping by 70% every 10,000 iterations, batch 100, 40,000
    /// iterations.
    pub fn original() -> Self {
        SolverSettings {
            optimizer: Optimizer::Adam,
            learning_rate: 5e-4,
            batch_size: 100,
            iterations: 40_000,
            decay: Some(LrDecay {
                factor: 0.3,
                every: 10_000,
            }),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EngineError::Config("learning rate must be > 0".into()));
        }
        if self.batch_size < 1 || self.iterations < 1 {
            return Err(EngineError::Config(
                "batch and iterations must be >= 1".into(),
            ));
        }
        if let Some(d) = &self.decay {
            if !(d.factor > 0.0 && d.factor <= 1.0) || d.every < 1 {
                return Err(EngineError::Config(
                    "decay factor must be in (0, 1] and every >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    /// Number of trials to propose.
    pub budget: usize,
    pub solver: SolverSettings,
    /// Sample the space's solver domains in this phase and pin the best
    /// trial's solver values for later phases.
    #[serde(default)]
    pub search_solver: bool,
    /// Freeze the most common frontier setting after this phase. Defaults to
    /// every phase but the last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<bool>,
    /// Wall-clock stop, checked before each proposal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seconds: Option<f64>,
}

impl PhaseConfig {
    pub fn new(budget: usize, solver: SolverSettings) -> Self {
        PhaseConfig {
            budget,
            solver,
            search_solver: false,
            refine: None,
            max_seconds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvaluatorSpec {
    Surrogate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p0: Option<f64>,
    },
    Worker(WorkerCommand),
}

impl EvaluatorSpec {
    /// Builds the evaluator, starting `parallel` worker processes if needed.
    pub fn build(&self, parallel: usize) -> Result<Box<dyn Evaluator>, EngineError> {
        Ok(match self {
            EvaluatorSpec::Surrogate { p0 } => {
                let mut s = Surrogate::default();
                if let Some(p0) = p0 {
                    s.p0 = *p0;
                }
                Box::new(s)
            }
            EvaluatorSpec::Worker(cmd) => Box::new(WorkerPool::start(cmd.clone(), parallel)?),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Tpe,
    Random,
}

/// Everything that determines a run. Two runs with equal configs produce
/// byte-identical logs when the evaluator is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub space: SearchSpace,
    pub phases: Vec<PhaseConfig>,
    pub finetune_iterations: u64,
    /// Support fraction a setting needs before refinement counts it as a
    /// shared substructure.
    pub refine_threshold: f64,
    /// Skip freezing when the best setting's support is under the threshold.
    /// Off by default: the most common setting is frozen regardless.
    pub require_threshold: bool,
    pub seed: u64,
    pub evaluator: EvaluatorSpec,
    pub max_parallel: usize,
    pub sampler: SamplerKind,
    /// Sampler settings; the seed field is ignored in favour of per-phase
    /// seeds derived from `seed`.
    pub tpe: TpeConfig,
    /// Carry compatible observations into the next phase's sampler instead
    /// of starting it empty.
    pub carry_history: bool,
    pub eval_samples: u64,
    /// When set, the sampler maximizes `top1 - lambda * ops / seed_ops`.
    pub scalarize_lambda: Option<f64>,
}

/// On-disk form of [`ExperimentConfig`]; the space comes from `space_file`,
/// resolved against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub space_file: PathBuf,
    pub phases: Vec<PhaseConfig>,
    pub finetune_iterations: u64,
    #[serde(default = "default_threshold")]
    pub refine_threshold: f64,
    #[serde(default)]
    pub require_threshold: bool,
    #[serde(default)]
    pub seed: u64,
    pub evaluator: EvaluatorSpec,
    #[serde(default = "one")]
    pub max_parallel: usize,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub tpe: TpeConfig,
    #[serde(default)]
    pub carry_history: bool,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: u64,
    #[serde(default)]
    pub scalarize_lambda: Option<f64>,
}

fn default_threshold() -> f64 {
    0.5
}

fn one() -> usize {
    1
}

fn default_eval_samples() -> u64 {
    DEFAULT_EVAL_SAMPLES
}

impl ExperimentConfig {
    /// Two phases of 300 and 500 trials at 8,000 iterations with one
    /// refinement between them, then fine-tuning to 40,000 iterations.
    pub fn full_budget(space: SearchSpace, seed: u64) -> Self {
        Self::two_phase(space, seed, 300, 500)
    }

    /// Same shape as [`ExperimentConfig::full_budget`] with custom phase budgets.
    pub fn two_phase(space: SearchSpace, seed: u64, first: usize, second: usize) -> Self {
        let solver = SolverSettings::default();
        ExperimentConfig {
            space,
            phases: vec![
                PhaseConfig::new(first, solver.clone()),
                PhaseConfig::new(second, solver),
            ],
            finetune_iterations: 40_000,
            refine_threshold: default_threshold(),
            require_threshold: false,
            seed,
            evaluator: EvaluatorSpec::Surrogate { p0: None },
            max_parallel: 1,
            sampler: SamplerKind::Tpe,
            tpe: TpeConfig::default(),
            carry_history: false,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            scalarize_lambda: None,
        }
    }

    pub fn from_file(file: ConfigFile, base_dir: &Path) -> Result<Self, EngineError> {
        let path = base_dir.join(&file.space_file);
        let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        let space = SearchSpace::from_json(&text).map_err(|e| EngineError::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        let cfg = ExperimentConfig {
            space,
            phases: file.phases,
            finetune_iterations: file.finetune_iterations,
            refine_threshold: file.refine_threshold,
            require_threshold: file.require_threshold,
            seed: file.seed,
            evaluator: file.evaluator,
            max_parallel: file.max_parallel,
            sampler: file.sampler,
            tpe: file.tpe,
            carry_history: file.carry_history,
            eval_samples: file.eval_samples,
            scalarize_lambda: file.scalarize_lambda,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let file: ConfigFile = serde_json::from_str(&text).map_err(|e| EngineError::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_file(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.phases.is_empty() {
            return Err(EngineError::Config("at least one phase is required".into()));
        }
        for (i, phase) in self.phases.iter().enumerate() {
            if phase.budget < 1 {
                return Err(EngineError::Config(format!(
                    "phase {i}: budget must be >= 1"
                )));
            }
            phase.solver.validate()?;
            if self.finetune_iterations < phase.solver.iterations {
                return Err(EngineError::Config(format!(
                    "finetune_iterations {} below phase {i} iterations {}",
                    self.finetune_iterations, phase.solver.iterations
                )));
            }
            if phase.search_solver && !self.space.has_solver_domains() {
                return Err(EngineError::Config(format!(
                    "phase {i} searches solver parameters but the space has no solver domains"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.refine_threshold) {
            return Err(EngineError::Config(
                "refine_threshold must be in [0, 1]".into(),
            ));
        }
        if self.max_parallel < 1 {
            return Err(EngineError::Config("max_parallel must be >= 1".into()));
        }
        if self.eval_samples < 1 {
            return Err(EngineError::Config("eval_samples must be >= 1".into()));
        }
        if let Some(l) = self.scalarize_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(EngineError::Config("scalarize_lambda must be >= 0".into()));
            }
        }
        self.tpe.validate()?;
        Ok(())
    }

    /// Short content hash identifying the run; stamped on every log record.
    pub fn run_id(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        sha256_hex(text.as_bytes())[..16].to_string()
    }

    fn refines_after(&self, phase: usize) -> bool {
        self.phases[phase]
            .refine
            .unwrap_or(phase + 1 < self.phases.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Search,
    Finetune,
}

/// One line of the trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogRecord {
    /// Start of a phase, or with `stopped_after` set, its early end.
    Phase {
        run: String,
        stage: Stage,
        phase: usize,
        budget: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stopped_after: Option<usize>,
    },
    Proposed {
        run: String,
        id: u64,
        phase: usize,
        assignment: Assignment,
        ops: u64,
        params: u64,
    },
    Evaluated {
        run: String,
        id: u64,
        top1: f64,
        evaluated_samples: u64,
        iterations: u64,
    },
    Finetuned {
        run: String,
        id: u64,
        top1: f64,
        evaluated_samples: u64,
        iterations: u64,
    },
    Failed {
        run: String,
        id: u64,
        stage: Stage,
        reason: String,
    },
    Freeze {
        run: String,
        phase: usize,
        param: ParamId,
        value: ParamValue,
        support: f64,
    },
}

impl LogRecord {
    pub fn run(&self) -> &str {
        match self {
            LogRecord::Phase { run, .. }
            | LogRecord::Proposed { run, .. }
            | LogRecord::Evaluated { run, .. }
            | LogRecord::Finetuned { run, .. }
            | LogRecord::Failed { run, .. }
            | LogRecord::Freeze { run, .. } => run,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Ordered, append-only list of records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialLog {
    records: Vec<LogRecord>,
}

impl TrialLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    /// The first `n` records.
    pub fn prefix(&self, n: usize) -> TrialLog {
        TrialLog {
            records: self.records[..n.min(self.records.len())].to_vec(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// Parses line-delimited records. A final line without a newline is a
    /// torn write and is dropped; its byte offset is returned so the file
    /// can be truncated before appending.
    pub fn parse(text: &str) -> Result<(TrialLog, Option<usize>), EngineError> {
        let (complete, torn) = match text.rfind('\n') {
            Some(i) if i + 1 < text.len() => (&text[..=i], Some(i + 1)),
            Some(_) => (text, None),
            None if text.is_empty() => (text, None),
            None => ("", Some(0)),
        };
        let mut records = Vec::new();
        for (i, line) in complete.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| EngineError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok((TrialLog { records }, torn))
    }

    pub fn read(path: &Path) -> Result<TrialLog, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Ok(Self::parse(&text)?.0)
    }
}

impl FromIterator<LogRecord> for TrialLog {
    fn from_iter<T: IntoIterator<Item = LogRecord>>(iter: T) -> Self {
        TrialLog {
            records: iter.into_iter().collect(),
        }
    }
}

/// Destination for records as they are produced.
pub trait LogSink {
    fn append(&mut self, record: &LogRecord) -> std::io::Result<()>;
}

/// Writes one JSON line per record and flushes after each.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        JsonlSink { out }
    }
}

impl<W: Write> LogSink for JsonlSink<W> {
    fn append(&mut self, record: &LogRecord) -> std::io::Result<()> {
        let mut line = record.to_line();
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        self.out.flush()
    }
}

impl JsonlSink<BufWriter<File>> {
    /// Creates (truncating) a log file.
    pub fn create(path: &Path) -> Result<Self, EngineError> {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        Ok(JsonlSink::new(BufWriter::new(file)))
    }

    /// Opens an existing log for appending, dropping a torn final line.
    /// Returns the sink and the complete records already in the file.
    pub fn resume(path: &Path) -> Result<(Self, TrialLog), EngineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let (log, torn) = TrialLog::parse(&text)?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| io_error(path, e))?;
        if let Some(offset) = torn {
            log::warn!("dropping torn final record in {}", path.display());
            file.set_len(offset as u64).map_err(|e| io_error(path, e))?;
        }
        Ok((JsonlSink::new(BufWriter::new(file)), log))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub top1: f64,
    pub evaluated_samples: u64,
    pub iterations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialState {
    Proposed,
    Evaluated,
    Finetuned,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: u64,
    pub phase: usize,
    pub assignment: Assignment,
    pub arch: NetworkArch,
    pub solver: SolverSettings,
    pub cost: NetworkCost,
    pub evaluated: Option<Outcome>,
    pub finetuned: Option<Outcome>,
    /// Why the search evaluation failed.
    pub failure: Option<String>,
    /// Why fine-tuning failed; the search result stays valid.
    pub finetune_failure: Option<String>,
}

impl Trial {
    pub fn state(&self) -> TrialState {
        match (&self.finetuned, &self.evaluated, &self.failure) {
            (Some(_), _, _) => TrialState::Finetuned,
            (None, Some(_), _) => TrialState::Evaluated,
            (None, None, Some(reason)) => TrialState::Failed(reason.clone()),
            (None, None, None) => TrialState::Proposed,
        }
    }

    /// Latest accuracy: fine-tuned results supersede search results.
    pub fn accuracy(&self) -> Option<f64> {
        self.finetuned
            .as_ref()
            .or(self.evaluated.as_ref())
            .map(|o| o.top1)
    }

    pub fn trained_iterations(&self) -> u64 {
        self.finetuned
            .as_ref()
            .or(self.evaluated.as_ref())
            .map_or(0, |o| o.iterations)
    }

    pub fn search_point(&self) -> Option<ScoredPoint> {
        self.evaluated.as_ref().map(|o| ScoredPoint {
            trial_id: self.id,
            accuracy: o.top1,
            cost: self.cost.total_ops,
        })
    }

    pub fn latest_point(&self) -> Option<ScoredPoint> {
        self.accuracy().map(|accuracy| ScoredPoint {
            trial_id: self.id,
            accuracy,
            cost: self.cost.total_ops,
        })
    }
}

/// What a refinement step froze.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub space: SearchSpace,
    pub param: ParamId,
    pub value: ParamValue,
    pub support: f64,
    /// Whether the support reached the configured threshold.
    pub meets_threshold: bool,
}

/// Freezes the most common architectural setting among the Pareto-optimal
/// evaluated trials. Trials are never removed.
pub fn refine(
    trials: &[Trial],
    space: &SearchSpace,
    threshold: f64,
) -> Result<RefineOutcome, EngineError> {
    let points: Vec<ScoredPoint> = trials.iter().filter_map(Trial::search_point).collect();
    let front = pareto::frontier(&points);
    if front.is_empty() {
        return Err(EngineError::Pareto(ParetoError::Empty));
    }
    let by_id = |id: u64| {
        trials
            .iter()
            .find(|t| t.id == id)
            .expect("frontier from trials")
    };
    let assignments: Vec<Assignment> = front
        .iter()
        .map(|p| space.complete(&by_id(p.trial_id).assignment).layer_params())
        .collect();
    let hist = common_settings(&assignments)?;
    let exclude: BTreeSet<ParamId> = space.frozen_ids().collect();
    let best = most_common_setting(&hist, &exclude)?;
    Ok(RefineOutcome {
        space: space.freeze(best.id, best.value)?,
        param: best.id,
        value: best.value,
        support: best.support,
        meets_threshold: best.support >= threshold,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Sampler {
    Tpe(TpeState),
    Random { seed: u64, drawn: u64 },
}

const STREAM_TPE: u64 = 1;
const STREAM_RANDOM: u64 = 2;
const STREAM_SEARCH_EVAL: u64 = 3;
const STREAM_FINETUNE_EVAL: u64 = 4;

impl Sampler {
    fn propose(&self, space: &SearchSpace) -> Result<Assignment, EngineError> {
        if space.unfrozen().next().is_none() {
            return Ok(space.frozen_assignment());
        }
        match self {
            Sampler::Tpe(state) => Ok(state.propose(space)?),
            Sampler::Random { seed, drawn } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(*seed, &[*drawn]));
                Ok(space.sample_uniform(&mut rng))
            }
        }
    }

    fn advance(&mut self, space: &SearchSpace) -> Result<(), EngineError> {
        match self {
            Sampler::Tpe(state) => {
                if space.unfrozen().next().is_some() {
                    state.skip();
                }
            }
            Sampler::Random { drawn, .. } => *drawn += 1,
        }
        Ok(())
    }

    /// Whether a proposal made now, with `pending` results outstanding, is
    /// the same proposal a serial run would make.
    fn independent_of_pending(&self, pending: usize) -> bool {
        match self {
            Sampler::Tpe(state) => state.observations().len() + pending < state.config().n_startup,
            Sampler::Random { .. } => true,
        }
    }

    fn observe(&mut self, space: &SearchSpace, obs: Observation) -> Result<(), EngineError> {
        if let Sampler::Tpe(state) = self {
            state.observe(space, obs)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cursor {
    Start,
    Search(usize),
    Finetune,
}

/// Engine state reconstructed from (and only from) the log.
#[derive(Debug, Clone)]
pub struct EngineState {
    cfg: ExperimentConfig,
    run_id: String,
    space: SearchSpace,
    seed_ops: u64,
    trials: Vec<Trial>,
    log: TrialLog,
    cursor: Cursor,
    sampler: Sampler,
    pending: Vec<usize>,
    draining: bool,
    proposals: usize,
    closed: bool,
}

/// Next thing the engine must do.
#[derive(Debug, Clone, PartialEq)]
enum Step {
    StartPhase(usize),
    Propose,
    EvaluatePending,
    CloseEarly,
    Advance(usize),
    Finetune(Vec<u64>),
    Done,
}

impl EngineState {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let seed_ops = network_cost(cfg.space.seed())?.total_ops;
        Ok(EngineState {
            run_id: cfg.run_id(),
            space: cfg.space.clone(),
            seed_ops,
            trials: Vec::new(),
            log: TrialLog::new(),
            cursor: Cursor::Start,
            sampler: Sampler::Random { seed: 0, drawn: 0 },
            pending: Vec::new(),
            draining: false,
            proposals: 0,
            closed: false,
            cfg,
        })
    }

    /// Rebuilds the state reached after `log`, rejecting logs that are not a
    /// valid prefix of a run under `cfg`.
    pub fn replay(cfg: ExperimentConfig, log: &TrialLog) -> Result<Self, EngineError> {
        let mut state = EngineState::new(cfg)?;
        for record in log.records() {
            state.apply(record.clone())?;
        }
        Ok(state)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Current space, including every freeze so far.
    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn log(&self) -> &TrialLog {
        &self.log
    }

    pub fn trial(&self, id: u64) -> Option<&Trial> {
        self.trials.get((id as usize).checked_sub(1)?)
    }

    pub fn is_done(&self) -> bool {
        self.next_step() == Step::Done
    }

    /// Observations held by the current phase's sampler.
    pub fn sampler_observations(&self) -> &[Observation] {
        match &self.sampler {
            Sampler::Tpe(s) => s.observations(),
            Sampler::Random { .. } => &[],
        }
    }

    /// Frozen `(param, value)` pairs in freeze order.
    pub fn freezes(&self) -> Vec<(usize, ParamId, ParamValue)> {
        self.log
            .records()
            .iter()
            .filter_map(|r| match r {
                LogRecord::Freeze {
                    phase,
                    param,
                    value,
                    ..
                } => Some((*phase, *param, *value)),
                _ => None,
            })
            .collect()
    }

    /// Frontier over the latest accuracy of every trial: fine-tuned results
    /// supersede search results.
    pub fn frontier(&self) -> Vec<ScoredPoint> {
        let points: Vec<ScoredPoint> = self.trials.iter().filter_map(Trial::latest_point).collect();
        pareto::frontier(&points)
    }

    /// Frontier over search results only.
    pub fn search_frontier(&self) -> Vec<ScoredPoint> {
        let points: Vec<ScoredPoint> = self.trials.iter().filter_map(Trial::search_point).collect();
        pareto::frontier(&points)
    }

    fn phase_space(&self, phase: usize) -> SearchSpace {
        if self.cfg.phases[phase].search_solver {
            self.space.clone()
        } else {
            self.space.architecture_only()
        }
    }

    fn new_sampler(&self, phase: usize, space: &SearchSpace) -> Sampler {
        match self.cfg.sampler {
            SamplerKind::Random => Sampler::Random {
                seed: mix_seed(self.cfg.seed, &[STREAM_RANDOM, phase as u64]),
                drawn: 0,
            },
            SamplerKind::Tpe => {
                let config = TpeConfig {
                    seed: mix_seed(self.cfg.seed, &[STREAM_TPE, phase as u64]),
                    ..self.cfg.tpe.clone()
                };
                let mut state = TpeState::new(config).expect("validated config");
                if self.cfg.carry_history {
                    for t in &self.trials {
                        let (Some(objective), Some(_)) = (self.objective(t), &t.evaluated) else {
                            continue;
                        };
                        let assignment: Assignment = t
                            .assignment
                            .iter()
                            .filter(|(id, _)| space.domain(id).is_some())
                            .map(|(k, v)| (*k, *v))
                            .collect();
                        let obs = Observation {
                            assignment,
                            objective,
                        };
                        // incompatible with the refined space: skip
                        let _ = state.observe(space, obs);
                    }
                }
                Sampler::Tpe(state)
            }
        }
    }

    fn objective(&self, trial: &Trial) -> Option<f64> {
        let top1 = trial.evaluated.as_ref()?.top1;
        Some(match self.cfg.scalarize_lambda {
            Some(lambda) => {
                let rel = trial.cost.total_ops as f64 / self.seed_ops as f64;
                (top1 - lambda * rel).clamp(0.0, 1.0)
            }
            None => top1,
        })
    }

    fn trial_solver(&self, phase: usize, assignment: &Assignment) -> SolverSettings {
        self.space
            .solver_for(assignment, &self.cfg.phases[phase].solver)
    }

    fn phase_complete(&self) -> bool {
        match self.cursor {
            Cursor::Search(p) => {
                self.pending.is_empty()
                    && (self.closed || self.proposals >= self.cfg.phases[p].budget)
            }
            _ => false,
        }
    }

    fn finetune_targets(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.search_frontier().iter().map(|p| p.trial_id).collect();
        ids.sort_unstable();
        ids
    }

    fn finetune_remaining(&self) -> Vec<u64> {
        self.finetune_targets()
            .into_iter()
            .filter(|id| {
                let t = self.trial(*id).expect("target exists");
                t.finetuned.is_none() && t.finetune_failure.is_none()
            })
            .collect()
    }

    fn next_step(&self) -> Step {
        match self.cursor {
            Cursor::Start => Step::StartPhase(0),
            Cursor::Search(p) => {
                let budget_left = !self.closed && self.proposals < self.cfg.phases[p].budget;
                if self.draining {
                    Step::EvaluatePending
                } else if budget_left
                    && self.pending.len() < self.cfg.max_parallel
                    && (self.pending.is_empty()
                        || self.sampler.independent_of_pending(self.pending.len()))
                {
                    Step::Propose
                } else if !self.pending.is_empty() {
                    Step::EvaluatePending
                } else {
                    Step::Advance(p)
                }
            }
            Cursor::Finetune => {
                let remaining = self.finetune_remaining();
                if remaining.is_empty() {
                    Step::Done
                } else {
                    Step::Finetune(remaining.into_iter().take(self.cfg.max_parallel).collect())
                }
            }
        }
    }

    fn integrity(msg: impl Into<String>) -> EngineError {
        EngineError::Integrity(msg.into())
    }

    /// Applies one record, validating it against the current state.
    pub fn apply(&mut self, record: LogRecord) -> Result<(), EngineError> {
        if record.run() != self.run_id {
            return Err(EngineError::RunMismatch {
                expected: self.run_id.clone(),
                found: record.run().to_string(),
            });
        }
        match &record {
            LogRecord::Phase {
                stage: Stage::Search,
                phase,
                budget,
                stopped_after: None,
                ..
            } => {
                let expected = match self.cursor {
                    Cursor::Start => 0,
                    Cursor::Search(p) if self.phase_complete() => p + 1,
                    _ => {
                        return Err(Self::integrity(format!(
                            "phase {phase} started out of order"
                        )))
                    }
                };
                if *phase != expected || *phase >= self.cfg.phases.len() {
                    return Err(Self::integrity(format!(
                        "expected phase {expected}, got {phase}"
                    )));
                }
                if *budget != self.cfg.phases[*phase].budget {
                    return Err(Self::integrity(format!(
                        "phase {phase} budget differs from config"
                    )));
                }
                let space = self.phase_space(*phase);
                self.sampler = self.new_sampler(*phase, &space);
                self.cursor = Cursor::Search(*phase);
                self.proposals = 0;
                self.closed = false;
            }
            LogRecord::Phase {
                stage: Stage::Search,
                phase,
                stopped_after: Some(n),
                ..
            } => {
                if self.cursor != Cursor::Search(*phase)
                    || !self.pending.is_empty()
                    || *n != self.proposals
                    || self.closed
                {
                    return Err(Self::integrity(format!(
                        "unexpected early stop of phase {phase}"
                    )));
                }
                self.closed = true;
            }
            LogRecord::Phase {
                stage: Stage::Finetune,
                phase,
                budget,
                ..
            } => {
                let last = self.cfg.phases.len() - 1;
                if self.cursor != Cursor::Search(last)
                    || !self.phase_complete()
                    || *phase != last + 1
                {
                    return Err(Self::integrity(
                        "fine-tuning started before search finished",
                    ));
                }
                if *budget != self.finetune_targets().len() {
                    return Err(Self::integrity(
                        "fine-tune budget differs from the frontier size",
                    ));
                }
                self.cursor = Cursor::Finetune;
            }
            LogRecord::Proposed {
                id,
                phase,
                assignment,
                ops,
                params,
                ..
            } => {
                let Cursor::Search(p) = self.cursor else {
                    return Err(Self::integrity(format!(
                        "trial {id} proposed outside a search phase"
                    )));
                };
                let expected = self.trials.len() as u64 + 1;
                if *id != expected {
                    return Err(Self::integrity(format!(
                        "trial id gap: expected {expected}, got {id}"
                    )));
                }
                if *phase != p || self.closed || self.proposals >= self.cfg.phases[p].budget {
                    return Err(Self::integrity(format!("trial {id} exceeds phase {p}")));
                }
                let space = self.phase_space(p);
                let arch = space.apply(assignment)?;
                let cost = network_cost(&arch)?;
                if cost.total_ops != *ops || cost.total_params != *params {
                    return Err(Self::integrity(format!(
                        "trial {id} cost does not match its network"
                    )));
                }
                let solver = self.trial_solver(p, assignment);
                self.sampler.advance(&space)?;
                self.trials.push(Trial {
                    id: *id,
                    phase: p,
                    assignment: assignment.clone(),
                    arch,
                    solver,
                    cost,
                    evaluated: None,
                    finetuned: None,
                    failure: None,
                    finetune_failure: None,
                });
                self.pending.push(self.trials.len() - 1);
                self.proposals += 1;
            }
            LogRecord::Evaluated {
                id,
                top1,
                evaluated_samples,
                iterations,
                ..
            } => {
                let idx = self.take_pending(*id)?;
                if !(0.0..=1.0).contains(top1) {
                    return Err(Self::integrity(format!(
                        "trial {id} accuracy {top1} outside [0, 1]"
                    )));
                }
                self.trials[idx].evaluated = Some(Outcome {
                    top1: *top1,
                    evaluated_samples: *evaluated_samples,
                    iterations: *iterations,
                });
                let Cursor::Search(p) = self.cursor else {
                    unreachable!()
                };
                let objective = self.objective(&self.trials[idx]).expect("evaluated");
                let obs = Observation {
                    assignment: self.trials[idx].assignment.clone(),
                    objective,
                };
                let space = self.phase_space(p);
                self.sampler.observe(&space, obs)?;
            }
            LogRecord::Failed {
                id,
                stage: Stage::Search,
                reason,
                ..
            } => {
                let idx = self.take_pending(*id)?;
                self.trials[idx].failure = Some(reason.clone());
            }
            LogRecord::Finetuned {
                id,
                top1,
                evaluated_samples,
                iterations,
                ..
            } => {
                let idx = self.take_finetune(*id)?;
                if !(0.0..=1.0).contains(top1) {
                    return Err(Self::integrity(format!(
                        "trial {id} accuracy {top1} outside [0, 1]"
                    )));
                }
                self.trials[idx].finetuned = Some(Outcome {
                    top1: *top1,
                    evaluated_samples: *evaluated_samples,
                    iterations: *iterations,
                });
            }
            LogRecord::Failed {
                id,
                stage: Stage::Finetune,
                reason,
                ..
            } => {
                let idx = self.take_finetune(*id)?;
                self.trials[idx].finetune_failure = Some(reason.clone());
            }
            LogRecord::Freeze {
                phase,
                param,
                value,
                ..
            } => {
                if self.cursor != Cursor::Search(*phase) || !self.phase_complete() {
                    return Err(Self::integrity(format!(
                        "freeze of {param} outside phase {phase}'s end"
                    )));
                }
                self.space = self.space.freeze(*param, *value)?;
            }
        }
        self.log.push(record);
        Ok(())
    }

    fn take_pending(&mut self, id: u64) -> Result<usize, EngineError> {
        match self.pending.first() {
            Some(&idx) if self.trials[idx].id == id => {
                self.pending.remove(0);
                self.draining = !self.pending.is_empty();
                Ok(idx)
            }
            _ => Err(Self::integrity(format!(
                "result for trial {id} out of proposal order"
            ))),
        }
    }

    fn take_finetune(&mut self, id: u64) -> Result<usize, EngineError> {
        if self.cursor != Cursor::Finetune {
            return Err(Self::integrity(format!(
                "fine-tune result for {id} before fine-tuning"
            )));
        }
        match self.finetune_remaining().first() {
            Some(&next) if next == id => Ok(id as usize - 1),
            _ => Err(Self::integrity(format!(
                "fine-tune result for {id} out of order"
            ))),
        }
    }

    /// Freeze records that close phase `p`: solver pins for a solver-search
    /// phase, then the refinement freeze when configured.
    fn closing_records(&self, p: usize) -> Result<Vec<LogRecord>, EngineError> {
        let already: Vec<&ParamId> = self
            .log
            .records()
            .iter()
            .filter_map(|r| match r {
                LogRecord::Freeze { phase, param, .. } if *phase == p => Some(param),
                _ => None,
            })
            .collect();
        let mut out = Vec::new();
        let mut space = self.space.clone();
        if self.cfg.phases[p].search_solver && !already.iter().any(|id| !id.is_layer_param()) {
            let best = self
                .trials
                .iter()
                .filter(|t| t.phase == p)
                .filter_map(|t| t.evaluated.as_ref().map(|o| (t, o.top1)))
                .fold(None::<(&Trial, f64)>, |best, (t, a)| match best {
                    Some((_, b)) if b >= a => best,
                    _ => Some((t, a)),
                });
            if let Some((trial, _)) = best {
                for d in self.space.unfrozen().filter(|d| !d.id.is_layer_param()) {
                    let value = trial
                        .assignment
                        .get(&d.id)
                        .expect("solver phase assignment");
                    space = space.freeze(d.id, value)?;
                    out.push(LogRecord::Freeze {
                        run: self.run_id.clone(),
                        phase: p,
                        param: d.id,
                        value,
                        support: 1.0,
                    });
                }
            }
        }
        if self.cfg.refines_after(p) && !already.iter().any(|id| id.is_layer_param()) {
            match refine(
                &self.trials,
                &space.architecture_only(),
                self.cfg.refine_threshold,
            ) {
                Ok(outcome) if outcome.meets_threshold || !self.cfg.require_threshold => {
                    out.push(LogRecord::Freeze {
                        run: self.run_id.clone(),
                        phase: p,
                        param: outcome.param,
                        value: outcome.value,
                        support: outcome.support,
                    });
                }
                Ok(outcome) => log::info!(
                    "phase {p}: best setting {}={} has support {:.2} below threshold; not freezing",
                    outcome.param,
                    outcome.value,
                    outcome.support
                ),
                Err(EngineError::Pareto(e)) => log::info!("phase {p}: nothing to refine ({e})"),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

/// Seed handed to the evaluator for one trial at one stage.
pub fn stage_seed(experiment_seed: u64, trial_id: u64, stage: Stage) -> u64 {
    let stream = match stage {
        Stage::Search => STREAM_SEARCH_EVAL,
        Stage::Finetune => STREAM_FINETUNE_EVAL,
    };
    mix_seed(experiment_seed, &[stream, trial_id])
}

/// Drives an [`EngineState`] forward against an evaluator, mirroring every
/// record to an optional sink.
pub struct Engine<'e> {
    state: EngineState,
    evaluator: &'e dyn Evaluator,
    sink: Option<Box<dyn LogSink + 'e>>,
    phase_started: Instant,
}

impl<'e> Engine<'e> {
    pub fn new(cfg: ExperimentConfig, evaluator: &'e dyn Evaluator) -> Result<Self, EngineError> {
        Ok(Engine {
            state: EngineState::new(cfg)?,
            evaluator,
            sink: None,
            phase_started: Instant::now(),
        })
    }

    /// Continues the run recorded in `log`.
    pub fn resume(
        cfg: ExperimentConfig,
        log: &TrialLog,
        evaluator: &'e dyn Evaluator,
    ) -> Result<Self, EngineError> {
        Ok(Engine {
            state: EngineState::replay(cfg, log)?,
            evaluator,
            sink: None,
            phase_started: Instant::now(),
        })
    }

    pub fn with_sink(mut self, sink: impl LogSink + 'e) -> Self {
        self.sink = Some(Box::new(sink));
        self
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn into_log(self) -> TrialLog {
        self.state.log
    }

    fn emit(&mut self, record: LogRecord) -> Result<(), EngineError> {
        self.state.apply(record.clone())?;
        if let Some(sink) = self.sink.as_mut() {
            sink.append(&record).map_err(|e| EngineError::Io {
                path: PathBuf::from("<trial log>"),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Performs one step. Returns `false` once the run is complete.
    pub fn step(&mut self) -> Result<bool, EngineError> {
        let mut step = self.state.next_step();
        if step == Step::Propose {
            if let Cursor::Search(p) = self.state.cursor {
                if let Some(limit) = self.state.cfg.phases[p].max_seconds {
                    if self.phase_started.elapsed().as_secs_f64() >= limit {
                        step = if self.state.pending.is_empty() {
                            Step::CloseEarly
                        } else {
                            Step::EvaluatePending
                        };
                    }
                }
            }
        }
        let run = self.state.run_id.clone();
        match step {
            Step::Done => return Ok(false),
            Step::StartPhase(p) => {
                self.emit(LogRecord::Phase {
                    run,
                    stage: Stage::Search,
                    phase: p,
                    budget: self.state.cfg.phases[p].budget,
                    stopped_after: None,
                })?;
                self.phase_started = Instant::now();
            }
            Step::Propose => {
                let Cursor::Search(p) = self.state.cursor else {
                    unreachable!()
                };
                let space = self.state.phase_space(p);
                let assignment = self.state.sampler.propose(&space)?;
                let cost = network_cost(&space.apply(&assignment)?)?;
                self.emit(LogRecord::Proposed {
                    run,
                    id: self.state.trials.len() as u64 + 1,
                    phase: p,
                    assignment,
                    ops: cost.total_ops,
                    params: cost.total_params,
                })?;
            }
            Step::EvaluatePending => {
                let requests: Vec<EvalRequest> = self
                    .state
                    .pending
                    .iter()
                    .map(|&i| self.request(&self.state.trials[i], Stage::Search))
                    .collect();
                for (req, resp) in requests.iter().zip(self.evaluate_all(&requests)) {
                    let record = result_record(&run, req, resp, Stage::Search);
                    self.emit(record)?;
                }
            }
            Step::CloseEarly => {
                let Cursor::Search(p) = self.state.cursor else {
                    unreachable!()
                };
                self.emit(LogRecord::Phase {
                    run,
                    stage: Stage::Search,
                    phase: p,
                    budget: self.state.cfg.phases[p].budget,
                    stopped_after: Some(self.state.proposals),
                })?;
            }
            Step::Advance(p) => {
                for record in self.state.closing_records(p)? {
                    self.emit(record)?;
                }
                if p + 1 < self.state.cfg.phases.len() {
                    self.emit(LogRecord::Phase {
                        run,
                        stage: Stage::Search,
                        phase: p + 1,
                        budget: self.state.cfg.phases[p + 1].budget,
                        stopped_after: None,
                    })?;
                    self.phase_started = Instant::now();
                } else {
                    let budget = self.state.finetune_targets().len();
                    self.emit(LogRecord::Phase {
                        run,
                        stage: Stage::Finetune,
                        phase: p + 1,
                        budget,
                        stopped_after: None,
                    })?;
                }
            }
            Step::Finetune(ids) => {
                let requests: Vec<EvalRequest> = ids
                    .iter()
                    .map(|&id| self.request(self.state.trial(id).unwrap(), Stage::Finetune))
                    .collect();
                for (req, resp) in requests.iter().zip(self.evaluate_all(&requests)) {
                    let record = result_record(&run, req, resp, Stage::Finetune);
                    self.emit(record)?;
                }
            }
        }
        Ok(true)
    }

    fn request(&self, trial: &Trial, stage: Stage) -> EvalRequest {
        let mut solver = trial.solver.clone();
        if stage == Stage::Finetune {
            solver.iterations = self.state.cfg.finetune_iterations;
        }
        EvalRequest {
            trial_id: trial.id,
            arch: trial.arch.clone(),
            solver,
            eval_samples: self.state.cfg.eval_samples,
            seed: stage_seed(self.state.cfg.seed, trial.id, stage),
        }
    }

    fn evaluate_all(&self, requests: &[EvalRequest]) -> Vec<EvalResponse> {
        if requests.len() <= 1 || self.state.cfg.max_parallel <= 1 {
            return requests
                .iter()
                .map(|r| self.evaluator.evaluate(r))
                .collect();
        }
        let evaluator = self.evaluator;
        std::thread::scope(|scope| {
            let handles: Vec<_> = requests
                .iter()
                .map(|r| scope.spawn(move || evaluator.evaluate(r)))
                .collect();
            handles
                .into_iter()
                .zip(requests)
                .map(|(h, r)| {
                    h.join()
                        .unwrap_or_else(|_| EvalResponse::error(r.trial_id, "evaluator panicked"))
                })
                .collect()
        })
    }

    /// Runs until the current search phase `phase` has all its trials
    /// evaluated (or the run is already past it).
    pub fn run_phase(&mut self, phase: usize) -> Result<(), EngineError> {
        loop {
            match self.state.cursor {
                Cursor::Search(p) if p > phase => return Ok(()),
                Cursor::Finetune => return Ok(()),
                Cursor::Search(p) if p == phase && self.state.phase_complete() => return Ok(()),
                _ => {}
            }
            if !self.step()? {
                return Ok(());
            }
        }
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<(), EngineError> {
        while self.step()? {}
        Ok(())
    }
}

fn result_record(run: &str, req: &EvalRequest, resp: EvalResponse, stage: Stage) -> LogRecord {
    let run = run.to_string();
    let id = req.trial_id;
    let failed = |reason: String| LogRecord::Failed {
        run: run.clone(),
        id,
        stage,
        reason,
    };
    match resp.status {
        EvalStatus::Error(reason) => failed(reason),
        EvalStatus::Ok if resp.trial_id != id => failed(format!(
            "response for trial {} to request {id}",
            resp.trial_id
        )),
        EvalStatus::Ok if !(0.0..=1.0).contains(&resp.top1) => {
            failed(format!("top1 {} outside [0, 1]", resp.top1))
        }
        EvalStatus::Ok => match stage {
            Stage::Search => LogRecord::Evaluated {
                run,
                id,
                top1: resp.top1,
                evaluated_samples: resp.evaluated_samples,
                iterations: req.solver.iterations,
            },
            Stage::Finetune => LogRecord::Finetuned {
                run,
                id,
                top1: resp.top1,
                evaluated_samples: resp.evaluated_samples,
                iterations: req.solver.iterations,
            },
        },
    }
}

/// Runs a whole experiment in memory.
pub fn run_experiment(
    cfg: ExperimentConfig,
    evaluator: &dyn Evaluator,
) -> Result<EngineState, EngineError> {
    let mut engine = Engine::new(cfg, evaluator)?;
    engine.run()?;
    Ok(engine.state)
}

/// Reconstructs the engine state a log leads to.
pub fn resume(log: &TrialLog, cfg: ExperimentConfig) -> Result<EngineState, EngineError> {
    EngineState::replay(cfg, log)
}
