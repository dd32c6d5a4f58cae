//! Network architectures, the searchable parameter space derived from a seed
//! network, and binding of sampled assignments back to concrete networks.
//!
//! Only the kernel height, kernel width and filter count of each convolution
//! are searchable. Strides and padding are fixed attributes of the seed and
//! are copied into every candidate unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{self, CostError};
use crate::engine::SolverSettings;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("architecture has no layers")]
    Empty,
    #[error("input shape field `{0}` must be >= 1")]
    ZeroInput(&'static str),
    #[error("layer {layer}: {source}")]
    Layer { layer: usize, source: CostError },
    #[error("unknown parameter {0}")]
    UnknownParam(ParamId),
    #[error("parameter {0} has no value in the assignment")]
    MissingValue(ParamId),
    #[error("parameter {id}: value {value} outside domain {domain}")]
    OutOfBounds {
        id: ParamId,
        value: ParamValue,
        domain: DomainRange,
    },
    #[error("parameter {id} is frozen at {frozen}, got {value}")]
    FrozenContradiction {
        id: ParamId,
        frozen: ParamValue,
        value: ParamValue,
    },
    #[error("duplicate domain for {0}")]
    DuplicateDomain(ParamId),
    #[error("no domain for {0}")]
    MissingDomain(ParamId),
    #[error("invalid domain for {id}: {reason}")]
    InvalidDomain { id: ParamId, reason: String },
    #[error("invalid parameter id `{0}`")]
    BadParamId(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Channels, height and width of a feature-map stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub c: u64,
    pub h: u64,
    pub w: u64,
}

impl TensorShape {
    pub fn new(c: u64, h: u64, w: u64) -> Self {
        TensorShape { c, h, w }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// One convolution unit. The input channel count is not stored: it is the
/// filter count of the previous layer (or the network input's channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kh: u64,
    pub kw: u64,
    pub m: u64,
    #[serde(default = "one")]
    pub sh: u64,
    #[serde(default = "one")]
    pub sw: u64,
    #[serde(default)]
    pub padding: Padding,
}

fn one() -> u64 {
    1
}

impl ConvLayerSpec {
    /// Stride-1, same-padded layer.
    pub fn new(kh: u64, kw: u64, m: u64) -> Self {
        ConvLayerSpec {
            kh,
            kw,
            m,
            sh: 1,
            sw: 1,
            padding: Padding::Same,
        }
    }

    pub fn with_stride(mut self, sh: u64, sw: u64) -> Self {
        self.sh = sh;
        self.sw = sw;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkArch {
    pub input: TensorShape,
    pub layers: Vec<ConvLayerSpec>,
}

impl NetworkArch {
    pub fn new(input: TensorShape, layers: Vec<ConvLayerSpec>) -> Self {
        NetworkArch { input, layers }
    }

    /// Checks every invariant, propagating shapes so that valid-padding
    /// kernels are compared against the actual input of their layer.
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.layers.is_empty() {
            return Err(ArchError::Empty);
        }
        for (name, v) in [
            ("c", self.input.c),
            ("h", self.input.h),
            ("w", self.input.w),
        ] {
            if v == 0 {
                return Err(ArchError::ZeroInput(name));
            }
        }
        let mut shape = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = costmodel::out_shape(layer, shape)
                .map_err(|source| ArchError::Layer { layer: i, source })?;
        }
        Ok(())
    }

    /// Input shape of every layer followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<TensorShape>, ArchError> {
        self.validate()?;
        let mut shapes = vec![self.input];
        let mut shape = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = costmodel::out_shape(layer, shape)
                .map_err(|source| ArchError::Layer { layer: i, source })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub fn validate_arch(arch: NetworkArch) -> Result<NetworkArch, ArchError> {
    arch.validate()?;
    Ok(arch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    #[serde(rename = "kh")]
    Kh,
    #[serde(rename = "kw")]
    Kw,
    #[serde(rename = "m")]
    M,
    #[serde(rename = "lr")]
    Lr,
    #[serde(rename = "batch")]
    BatchSize,
    #[serde(rename = "iterations")]
    Iterations,
}

impl ParamKind {
    pub const LAYER_KINDS: [ParamKind; 3] = [ParamKind::Kh, ParamKind::Kw, ParamKind::M];

    pub fn is_layer_kind(self) -> bool {
        matches!(self, ParamKind::Kh | ParamKind::Kw | ParamKind::M)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Kh => "kh",
            ParamKind::Kw => "kw",
            ParamKind::M => "m",
            ParamKind::Lr => "lr",
            ParamKind::BatchSize => "batch",
            ParamKind::Iterations => "iterations",
        }
    }
}

impl FromStr for ParamKind {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "kh" => ParamKind::Kh,
            "kw" => ParamKind::Kw,
            "m" => ParamKind::M,
            "lr" => ParamKind::Lr,
            "batch" => ParamKind::BatchSize,
            "iterations" => ParamKind::Iterations,
            _ => return Err(ArchError::BadParamId(s.to_string())),
        })
    }
}

/// Identifies one searchable parameter. Layer kinds carry a layer index,
/// solver kinds do not.
///
/// Ordering: all layer parameters first, by layer index then `kh < kw < m`,
/// followed by solver parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    layer: Option<usize>,
    kind: ParamKind,
}

impl ParamId {
    pub fn layer(index: usize, kind: ParamKind) -> Self {
        assert!(kind.is_layer_kind(), "{kind:?} is not a layer parameter");
        ParamId {
            layer: Some(index),
            kind,
        }
    }

    pub fn solver(kind: ParamKind) -> Self {
        assert!(!kind.is_layer_kind(), "{kind:?} is not a solver parameter");
        ParamId { layer: None, kind }
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn layer_index(&self) -> Option<usize> {
        self.layer
    }

    pub fn is_layer_param(&self) -> bool {
        self.layer.is_some()
    }

    fn sort_key(&self) -> (bool, usize, ParamKind) {
        (self.layer.is_none(), self.layer.unwrap_or(0), self.kind)
    }
}

impl PartialOrd for ParamId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ParamId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "{}:{}", i, self.kind.as_str()),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

impl FromStr for ParamId {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ArchError::BadParamId(s.to_string());
        match s.split_once(':') {
            Some((layer, kind)) => {
                let layer: usize = layer.parse().map_err(|_| bad())?;
                let kind: ParamKind = kind.parse().map_err(|_| bad())?;
                if !kind.is_layer_kind() {
                    return Err(bad());
                }
                Ok(ParamId::layer(layer, kind))
            }
            None => {
                let kind: ParamKind = s.parse().map_err(|_| bad())?;
                if kind.is_layer_kind() {
                    return Err(bad());
                }
                Ok(ParamId::solver(kind))
            }
        }
    }
}

impl Serialize for ParamId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A parameter value: integers for architectural and count parameters,
/// reals for the learning rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
}

impl ParamValue {
    pub fn as_f64(self) -> f64 {
        match self {
            ParamValue::Int(v) => v as f64,
            ParamValue::Real(v) => v,
        }
    }

    pub fn as_int(self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(v),
            ParamValue::Real(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Some(v as i64),
            ParamValue::Real(_) => None,
        }
    }
}

impl PartialEq for ParamValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for ParamValue {}

impl PartialOrd for ParamValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ParamValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self, other) {
            (ParamValue::Int(a), ParamValue::Int(b)) => a.cmp(b),
            _ => self.as_f64().total_cmp(&other.as_f64()),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Real(v) => write!(f, "{v}"),
        }
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::Int(v)
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Real(v)
    }
}

/// Range of one parameter. Integer ranges are inclusive and stepped from
/// `lower`; the learning rate is searched log-uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainRange {
    Int { lower: i64, upper: i64, step: i64 },
    LogReal { lower: f64, upper: f64 },
}

impl DomainRange {
    pub fn int(lower: i64, upper: i64) -> Self {
        DomainRange::Int {
            lower,
            upper,
            step: 1,
        }
    }

    /// Number of distinct values, `None` for continuous ranges.
    pub fn cardinality(&self) -> Option<u128> {
        match *self {
            DomainRange::Int { lower, upper, step } => Some(((upper - lower) / step) as u128 + 1),
            DomainRange::LogReal { lower, upper } if lower == upper => Some(1),
            DomainRange::LogReal { .. } => None,
        }
    }

    pub fn contains(&self, value: ParamValue) -> bool {
        match *self {
            DomainRange::Int { lower, upper, step } => match value.as_int() {
                Some(v) => v >= lower && v <= upper && (v - lower) % step == 0,
                None => false,
            },
            DomainRange::LogReal { lower, upper } => {
                let v = value.as_f64();
                v.is_finite() && v >= lower && v <= upper
            }
        }
    }

    /// Integer value at grid position `index`.
    pub fn int_at(&self, index: usize) -> Option<i64> {
        match *self {
            DomainRange::Int { lower, step, .. } => {
                let v = lower + step * index as i64;
                self.contains(ParamValue::Int(v)).then_some(v)
            }
            DomainRange::LogReal { .. } => None,
        }
    }

    /// Grid position of an integer value.
    pub fn index_of(&self, value: ParamValue) -> Option<usize> {
        match *self {
            DomainRange::Int { lower, step, .. } if self.contains(value) => {
                Some(((value.as_int()? - lower) / step) as usize)
            }
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match *self {
            DomainRange::Int { .. } => {
                let n = self.cardinality().unwrap() as usize;
                ParamValue::Int(self.int_at(rng.random_range(0..n)).unwrap())
            }
            DomainRange::LogReal { lower, upper } => {
                if lower == upper {
                    return ParamValue::Real(lower);
                }
                let x = rng.random_range(lower.ln()..upper.ln());
                ParamValue::Real(x.exp().clamp(lower, upper))
            }
        }
    }
}

impl fmt::Display for DomainRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainRange::Int {
                lower,
                upper,
                step: 1,
            } => write!(f, "[{lower}, {upper}]"),
            DomainRange::Int { lower, upper, step } => {
                write!(f, "[{lower}, {upper}] step {step}")
            }
            DomainRange::LogReal { lower, upper } => write!(f, "[{lower}, {upper}] (log)"),
        }
    }
}

/// Bounds for one searchable parameter, optionally frozen to a single value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainRecord", into = "DomainRecord")]
pub struct ParamDomain {
    pub id: ParamId,
    pub range: DomainRange,
    pub frozen: Option<ParamValue>,
}

impl ParamDomain {
    pub fn new(id: ParamId, range: DomainRange) -> Result<Self, ArchError> {
        let domain = ParamDomain {
            id,
            range,
            frozen: None,
        };
        domain.check()?;
        Ok(domain)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Number of values an assignment may take here (1 when frozen).
    pub fn effective_cardinality(&self) -> Option<u128> {
        if self.frozen.is_some() {
            Some(1)
        } else {
            self.range.cardinality()
        }
    }

    fn check(&self) -> Result<(), ArchError> {
        let invalid = |reason: &str| ArchError::InvalidDomain {
            id: self.id,
            reason: reason.to_string(),
        };
        match (self.id.kind(), self.range) {
            (ParamKind::Lr, DomainRange::LogReal { lower, upper }) => {
                if !(lower > 0.0 && lower.is_finite() && upper.is_finite()) {
                    return Err(invalid("learning-rate bounds must be positive and finite"));
                }
                if lower > upper {
                    return Err(invalid("lower > upper"));
                }
            }
            (ParamKind::Lr, _) => return Err(invalid("learning rate must use a real range")),
            (_, DomainRange::Int { lower, upper, step }) => {
                if lower < 1 {
                    return Err(invalid("lower bound must be >= 1"));
                }
                if lower > upper {
                    return Err(invalid("lower > upper"));
                }
                if step < 1 {
                    return Err(invalid("step must be >= 1"));
                }
            }
            (_, DomainRange::LogReal { .. }) => {
                return Err(invalid("integer parameter given a real range"))
            }
        }
        if let Some(v) = self.frozen {
            if !self.range.contains(v) {
                return Err(invalid(&format!("frozen value {v} outside {}", self.range)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DomainRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    kind: ParamKind,
    lower: ParamValue,
    upper: ParamValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frozen: Option<ParamValue>,
}

impl TryFrom<DomainRecord> for ParamDomain {
    type Error = ArchError;

    fn try_from(r: DomainRecord) -> Result<Self, Self::Error> {
        let id = match (r.layer, r.kind.is_layer_kind()) {
            (Some(layer), true) => ParamId::layer(layer, r.kind),
            (None, false) => ParamId::solver(r.kind),
            (Some(layer), false) => {
                return Err(ArchError::BadParamId(format!(
                    "{}:{}",
                    layer,
                    r.kind.as_str()
                )))
            }
            (None, true) => return Err(ArchError::BadParamId(r.kind.as_str().to_string())),
        };
        let invalid = |reason: &str| ArchError::InvalidDomain {
            id,
            reason: reason.to_string(),
        };
        let range = if r.kind == ParamKind::Lr {
            if r.step.is_some() {
                return Err(invalid("learning rate takes no step"));
            }
            DomainRange::LogReal {
                lower: r.lower.as_f64(),
                upper: r.upper.as_f64(),
            }
        } else {
            DomainRange::Int {
                lower: r
                    .lower
                    .as_int()
                    .ok_or_else(|| invalid("lower must be an integer"))?,
                upper: r
                    .upper
                    .as_int()
                    .ok_or_else(|| invalid("upper must be an integer"))?,
                step: r.step.unwrap_or(1),
            }
        };
        let frozen = match (r.frozen, range) {
            (Some(v), DomainRange::LogReal { .. }) => Some(ParamValue::Real(v.as_f64())),
            (Some(v), DomainRange::Int { .. }) => Some(ParamValue::Int(
                v.as_int()
                    .ok_or_else(|| invalid("frozen value must be an integer"))?,
            )),
            (None, _) => None,
        };
        let domain = ParamDomain { id, range, frozen };
        domain.check()?;
        Ok(domain)
    }
}

impl From<ParamDomain> for DomainRecord {
    fn from(d: ParamDomain) -> Self {
        let (lower, upper, step) = match d.range {
            DomainRange::Int { lower, upper, step } => (
                ParamValue::Int(lower),
                ParamValue::Int(upper),
                (step != 1).then_some(step),
            ),
            DomainRange::LogReal { lower, upper } => {
                (ParamValue::Real(lower), ParamValue::Real(upper), None)
            }
        };
        DomainRecord {
            layer: d.id.layer_index(),
            kind: d.id.kind(),
            lower,
            upper,
            step,
            frozen: d.frozen,
        }
    }
}

/// A mapping from parameter to value.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(BTreeMap<ParamId, ParamValue>);

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, value: impl Into<ParamValue>) -> Option<ParamValue> {
        self.0.insert(id, value.into())
    }

    pub fn with(mut self, id: ParamId, value: impl Into<ParamValue>) -> Self {
        self.insert(id, value);
        self
    }

    pub fn get(&self, id: &ParamId) -> Option<ParamValue> {
        self.0.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &ParamValue)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamId> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Only the architectural (per-layer) entries.
    pub fn layer_params(&self) -> Assignment {
        Assignment(
            self.0
                .iter()
                .filter(|(k, _)| k.is_layer_param())
                .map(|(k, v)| (*k, *v))
                .collect(),
        )
    }

    /// Builds the per-layer assignment `{(i, kh, kw, m)}` for a list of layers.
    pub fn from_layers(layers: &[(i64, i64, i64)]) -> Assignment {
        let mut a = Assignment::new();
        for (i, &(kh, kw, m)) in layers.iter().enumerate() {
            a.insert(ParamId::layer(i, ParamKind::Kh), kh);
            a.insert(ParamId::layer(i, ParamKind::Kw), kw);
            a.insert(ParamId::layer(i, ParamKind::M), m);
        }
        a
    }
}

impl FromIterator<(ParamId, ParamValue)> for Assignment {
    fn from_iter<T: IntoIterator<Item = (ParamId, ParamValue)>>(iter: T) -> Self {
        Assignment(iter.into_iter().collect())
    }
}

/// How [`derive_space`] turns seed settings into bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsPolicy {
    /// Upper kernel bound for every layer after the first. `None` keeps the
    /// seed's own kernel as the bound.
    pub later_kernel_upper: Option<u64>,
    /// Grid step for the filter count.
    pub m_step: i64,
}

impl Default for BoundsPolicy {
    fn default() -> Self {
        BoundsPolicy {
            later_kernel_upper: Some(5),
            m_step: 1,
        }
    }
}

/// The set of networks reachable from a seed by changing per-layer kernel
/// sizes and filter counts, plus optional solver parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceFile", into = "SpaceFile")]
pub struct SearchSpace {
    seed: NetworkArch,
    domains: Vec<ParamDomain>,
    solver_defaults: SolverSettings,
}

#[derive(Serialize, Deserialize)]
struct SpaceFile {
    input: TensorShape,
    layers: Vec<ConvLayerSpec>,
    domains: Vec<ParamDomain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    solver: Option<SolverSettings>,
}

impl TryFrom<SpaceFile> for SearchSpace {
    type Error = ArchError;

    fn try_from(f: SpaceFile) -> Result<Self, Self::Error> {
        SearchSpace::new(
            NetworkArch::new(f.input, f.layers),
            f.domains,
            f.solver.unwrap_or_default(),
        )
    }
}

impl From<SearchSpace> for SpaceFile {
    fn from(s: SearchSpace) -> Self {
        SpaceFile {
            input: s.seed.input,
            layers: s.seed.layers,
            domains: s.domains,
            solver: Some(s.solver_defaults),
        }
    }
}

impl SearchSpace {
    pub fn new(
        seed: NetworkArch,
        mut domains: Vec<ParamDomain>,
        solver_defaults: SolverSettings,
    ) -> Result<Self, ArchError> {
        seed.validate()?;
        domains.sort_by_key(|d| d.id);
        for pair in domains.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(ArchError::DuplicateDomain(pair[0].id));
            }
        }
        for d in &domains {
            d.check()?;
            if let Some(layer) = d.id.layer_index() {
                if layer >= seed.layers.len() {
                    return Err(ArchError::UnknownParam(d.id));
                }
            }
        }
        for layer in 0..seed.layers.len() {
            for kind in ParamKind::LAYER_KINDS {
                let id = ParamId::layer(layer, kind);
                if domains.binary_search_by_key(&id, |d| d.id).is_err() {
                    return Err(ArchError::MissingDomain(id));
                }
            }
        }
        Ok(SearchSpace {
            seed,
            domains,
            solver_defaults,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space serializes")
    }

    pub fn seed(&self) -> &NetworkArch {
        &self.seed
    }

    /// Domains in parameter order.
    pub fn domains(&self) -> &[ParamDomain] {
        &self.domains
    }

    pub fn solver_defaults(&self) -> &SolverSettings {
        &self.solver_defaults
    }

    pub fn domain(&self, id: &ParamId) -> Option<&ParamDomain> {
        self.domains
            .binary_search_by_key(id, |d| d.id)
            .ok()
            .map(|i| &self.domains[i])
    }

    pub fn unfrozen(&self) -> impl Iterator<Item = &ParamDomain> {
        self.domains.iter().filter(|d| !d.is_frozen())
    }

    pub fn frozen_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.domains.iter().filter(|d| d.is_frozen()).map(|d| d.id)
    }

    pub fn has_solver_domains(&self) -> bool {
        self.domains.iter().any(|d| !d.id.is_layer_param())
    }

    /// Product of the domain cardinalities; `None` when an unfrozen
    /// continuous domain makes the space uncountable or the product
    /// overflows `u128`.
    pub fn space_size(&self) -> Option<u128> {
        self.domains
            .iter()
            .try_fold(1u128, |acc, d| acc.checked_mul(d.effective_cardinality()?))
    }

    /// Same space with solver domains removed.
    pub fn architecture_only(&self) -> SearchSpace {
        SearchSpace {
            seed: self.seed.clone(),
            domains: self
                .domains
                .iter()
                .filter(|d| d.id.is_layer_param())
                .cloned()
                .collect(),
            solver_defaults: self.solver_defaults.clone(),
        }
    }

    pub fn freeze(
        &self,
        id: ParamId,
        value: impl Into<ParamValue>,
    ) -> Result<SearchSpace, ArchError> {
        let value = value.into();
        let idx = self
            .domains
            .binary_search_by_key(&id, |d| d.id)
            .map_err(|_| ArchError::UnknownParam(id))?;
        let domain = &self.domains[idx];
        let value = normalize(domain.range, value);
        if !domain.range.contains(value) {
            return Err(ArchError::OutOfBounds {
                id,
                value,
                domain: domain.range,
            });
        }
        if let Some(frozen) = domain.frozen {
            if frozen != value {
                return Err(ArchError::FrozenContradiction { id, frozen, value });
            }
        }
        let mut next = self.clone();
        next.domains[idx].frozen = Some(value);
        Ok(next)
    }

    /// Checks that `a` names only known parameters, covers every unfrozen
    /// domain, stays in bounds and agrees with every frozen value.
    pub fn check_assignment(&self, a: &Assignment) -> Result<(), ArchError> {
        for (id, _) in a.iter() {
            if self.domain(id).is_none() {
                return Err(ArchError::UnknownParam(*id));
            }
        }
        for d in &self.domains {
            match (a.get(&d.id), d.frozen) {
                (None, None) => return Err(ArchError::MissingValue(d.id)),
                (None, Some(_)) => {}
                (Some(v), frozen) => {
                    if !d.range.contains(v) {
                        return Err(ArchError::OutOfBounds {
                            id: d.id,
                            value: v,
                            domain: d.range,
                        });
                    }
                    if let Some(f) = frozen {
                        if normalize(d.range, v) != f {
                            return Err(ArchError::FrozenContradiction {
                                id: d.id,
                                frozen: f,
                                value: v,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Value of `id` under `a`, falling back to the frozen value.
    pub fn value_of(&self, a: &Assignment, id: &ParamId) -> Option<ParamValue> {
        a.get(id).or_else(|| self.domain(id).and_then(|d| d.frozen))
    }

    /// Completes `a` with every frozen value.
    pub fn complete(&self, a: &Assignment) -> Assignment {
        let mut out = a.clone();
        for d in &self.domains {
            if let (Some(f), None) = (d.frozen, a.get(&d.id)) {
                out.insert(d.id, f);
            }
        }
        out
    }

    /// Materializes the network described by `a`.
    pub fn apply(&self, a: &Assignment) -> Result<NetworkArch, ArchError> {
        self.check_assignment(a)?;
        let mut arch = self.seed.clone();
        for (i, layer) in arch.layers.iter_mut().enumerate() {
            for kind in ParamKind::LAYER_KINDS {
                let id = ParamId::layer(i, kind);
                let v = self
                    .value_of(a, &id)
                    .and_then(ParamValue::as_int)
                    .ok_or(ArchError::MissingValue(id))? as u64;
                match kind {
                    ParamKind::Kh => layer.kh = v,
                    ParamKind::Kw => layer.kw = v,
                    ParamKind::M => layer.m = v,
                    _ => unreachable!(),
                }
            }
        }
        arch.validate()?;
        Ok(arch)
    }

    /// Solver settings for `a`: `base` with any searched solver parameters
    /// overridden.
    pub fn solver_for(&self, a: &Assignment, base: &SolverSettings) -> SolverSettings {
        let mut solver = base.clone();
        for d in self.domains.iter().filter(|d| !d.id.is_layer_param()) {
            let Some(v) = self.value_of(a, &d.id) else {
                continue;
            };
            match d.id.kind() {
                ParamKind::Lr => solver.learning_rate = v.as_f64(),
                ParamKind::BatchSize => solver.batch_size = v.as_int().unwrap_or(1) as u64,
                ParamKind::Iterations => solver.iterations = v.as_int().unwrap_or(1) as u64,
                _ => {}
            }
        }
        solver
    }

    /// The assignment whose application yields `arch`. Solver parameters are
    /// taken from the space's solver defaults.
    pub fn assignment_from_arch(&self, arch: &NetworkArch) -> Result<Assignment, ArchError> {
        if arch.layers.len() != self.seed.layers.len() {
            return Err(ArchError::InvalidDomain {
                id: ParamId::layer(arch.layers.len().min(self.seed.layers.len()), ParamKind::M),
                reason: "layer count differs from the seed".into(),
            });
        }
        let mut a = Assignment::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            a.insert(ParamId::layer(i, ParamKind::Kh), layer.kh as i64);
            a.insert(ParamId::layer(i, ParamKind::Kw), layer.kw as i64);
            a.insert(ParamId::layer(i, ParamKind::M), layer.m as i64);
        }
        for d in self.domains.iter().filter(|d| !d.id.is_layer_param()) {
            let v = match d.id.kind() {
                ParamKind::Lr => ParamValue::Real(self.solver_defaults.learning_rate),
                ParamKind::BatchSize => ParamValue::Int(self.solver_defaults.batch_size as i64),
                _ => ParamValue::Int(self.solver_defaults.iterations as i64),
            };
            a.insert(d.id, v);
        }
        self.check_assignment(&a)?;
        Ok(a)
    }

    /// Assignment of the frozen values only; complete when the space is
    /// fully frozen.
    pub fn frozen_assignment(&self) -> Assignment {
        self.domains
            .iter()
            .filter_map(|d| d.frozen.map(|v| (d.id, v)))
            .collect()
    }

    /// Uniform draw over every domain; frozen domains take their value.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        self.domains
            .iter()
            .map(|d| (d.id, d.frozen.unwrap_or_else(|| d.range.sample(rng))))
            .collect()
    }

    /// Stable content hash of the space (hex).
    pub fn content_hash(&self) -> String {
        crate::util::sha256_hex(
            serde_json::to_string(self)
                .expect("space serializes")
                .as_bytes(),
        )
    }
}

fn normalize(range: DomainRange, v: ParamValue) -> ParamValue {
    match (range, v.as_int()) {
        (DomainRange::Int { .. }, Some(i)) => ParamValue::Int(i),
        (DomainRange::LogReal { .. }, _) => ParamValue::Real(v.as_f64()),
        _ => v,
    }
}

/// Builds the search space around `seed`: filter count in `[1, seed M]` for
/// every layer, first-layer kernel bounded by the seed's kernel, later
/// kernels bounded per `policy`.
pub fn derive_space(seed: &NetworkArch, policy: &BoundsPolicy) -> Result<SearchSpace, ArchError> {
    seed.validate()?;
    let mut domains = Vec::with_capacity(seed.layers.len() * 3);
    for (i, layer) in seed.layers.iter().enumerate() {
        let (kh_max, kw_max) = match (i, policy.later_kernel_upper) {
            (0, _) | (_, None) => (layer.kh, layer.kw),
            (_, Some(k)) => (k, k),
        };
        domains.push(ParamDomain::new(
            ParamId::layer(i, ParamKind::Kh),
            DomainRange::int(1, kh_max as i64),
        )?);
        domains.push(ParamDomain::new(
            ParamId::layer(i, ParamKind::Kw),
            DomainRange::int(1, kw_max as i64),
        )?);
        let step = policy.m_step.max(1);
        let m = layer.m as i64;
        let lower = if step > 1 && m >= step { step } else { 1 };
        let upper = lower + (m - lower) / step * step;
        domains.push(ParamDomain::new(
            ParamId::layer(i, ParamKind::M),
            DomainRange::Int { lower, upper, step },
        )?);
    }
    SearchSpace::new(seed.clone(), domains, SolverSettings::default())
}

pub fn apply_assignment(space: &SearchSpace, a: &Assignment) -> Result<NetworkArch, ArchError> {
    space.apply(a)
}

pub fn freeze_param(
    space: &SearchSpace,
    id: ParamId,
    value: impl Into<ParamValue>,
) -> Result<SearchSpace, ArchError> {
    space.freeze(id, value)
}
