//! Tree-structured Parzen Estimator over integer and log-scaled parameters.
//!
//! After `n_startup` observations the history is split at the `gamma`
//! quantile of the objective (higher is better). Each unfrozen parameter gets
//! two Parzen mixtures, `l` over the good set and `g` over the rest, and
//! candidates drawn from `l` are ranked by the product of `l / g` across
//! parameters.
//!
//! Integer parameters are modelled on their grid positions: every
//! observation contributes a Gaussian of bandwidth
//! `max(1, (bins - 1) / max(1, sqrt(n)))` integrated over unit bins and
//! renormalized to the domain, and a uniform prior kernel of equal weight
//! keeps the support full. The learning rate is modelled the same way in log
//! space with continuous truncated Gaussians.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archspec::{ArchError, Assignment, DomainRange, ParamDomain, ParamValue, SearchSpace};
use crate::util::mix_seed;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TpeError {
    #[error("invalid sampler configuration: {0}")]
    BadConfig(String),
    #[error("objective {0} outside [0, 1]")]
    BadObjective(f64),
    #[error("assignment not in the search space: {0}")]
    OutOfSpace(#[from] ArchError),
    #[error("every parameter is frozen")]
    DegenerateSpace,
    #[error("density model needs {need} observations, have {have}")]
    InsufficientHistory { have: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_startup: 20,
            n_candidates: 24,
            seed: 0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), TpeError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TpeError::BadConfig(format!(
                "gamma {} not in (0, 1)",
                self.gamma
            )));
        }
        if self.n_startup < 1 {
            return Err(TpeError::BadConfig("n_startup must be >= 1".into()));
        }
        if self.n_candidates < 1 {
            return Err(TpeError::BadConfig("n_candidates must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub assignment: Assignment,
    pub objective: f64,
}

/// Sampler state: configuration, the observation history in arrival order,
/// and the number of suggestions made so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TpeState {
    config: TpeConfig,
    observations: Vec<Observation>,
    suggestions: u64,
}

impl TpeState {
    pub fn new(config: TpeConfig) -> Result<Self, TpeError> {
        config.validate()?;
        Ok(TpeState {
            config,
            observations: Vec::new(),
            suggestions: 0,
        })
    }

    pub fn config(&self) -> &TpeConfig {
        &self.config
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn suggestions_made(&self) -> u64 {
        self.suggestions
    }

    /// Whether the next suggestion ignores history.
    pub fn in_startup(&self) -> bool {
        self.observations.len() < self.config.n_startup
    }

    pub fn observe(&mut self, space: &SearchSpace, obs: Observation) -> Result<(), TpeError> {
        if !(0.0..=1.0).contains(&obs.objective) {
            return Err(TpeError::BadObjective(obs.objective));
        }
        space.check_assignment(&obs.assignment)?;
        self.observations.push(obs);
        Ok(())
    }

    pub fn suggest(&mut self, space: &SearchSpace) -> Result<Assignment, TpeError> {
        let a = self.propose(space)?;
        self.suggestions += 1;
        Ok(a)
    }

    /// The suggestion [`TpeState::suggest`] would return next, without
    /// consuming it.
    pub fn propose(&self, space: &SearchSpace) -> Result<Assignment, TpeError> {
        if space.unfrozen().next().is_none() {
            return Err(TpeError::DegenerateSpace);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, &[self.suggestions]));
        if self.in_startup() {
            return Ok(space.sample_uniform(&mut rng));
        }

        let models = self.fit(space);
        let mut best: Option<(f64, Assignment)> = None;
        for _ in 0..self.config.n_candidates {
            let mut candidate = space.frozen_assignment();
            let mut score = 0.0;
            for (domain, good, bad) in &models {
                let x = good.sample(&mut rng);
                score += good.log_density(x) - bad.log_density(x);
                candidate.insert(domain.id, good.to_value(x));
            }
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, candidate));
            }
        }
        Ok(best.expect("n_candidates >= 1").1)
    }

    /// Consumes a suggestion slot without computing it, as when replaying a
    /// recorded suggestion.
    pub fn skip(&mut self) {
        self.suggestions += 1;
    }

    /// `sum_p ln(l_p(x_p) / g_p(x_p))` over the unfrozen parameters.
    pub fn log_density_ratio(&self, space: &SearchSpace, a: &Assignment) -> Result<f64, TpeError> {
        if self.in_startup() {
            return Err(TpeError::InsufficientHistory {
                have: self.observations.len(),
                need: self.config.n_startup,
            });
        }
        space.check_assignment(a)?;
        Ok(self
            .fit(space)
            .iter()
            .map(|(domain, good, bad)| {
                let x = good.coordinate(a.get(&domain.id).expect("checked"));
                good.log_density(x) - bad.log_density(x)
            })
            .sum())
    }

    /// The aggregated `l / g` that [`TpeState::suggest`] maximizes.
    pub fn density_ratio(&self, space: &SearchSpace, a: &Assignment) -> Result<f64, TpeError> {
        self.log_density_ratio(space, a).map(f64::exp)
    }

    /// Good and bad observation sets. Ties at the split keep arrival order.
    pub fn split(&self) -> (Vec<&Observation>, Vec<&Observation>) {
        let mut order: Vec<&Observation> = self.observations.iter().collect();
        order.sort_by(|a, b| b.objective.total_cmp(&a.objective));
        let n = order.len();
        let n_good = ((self.config.gamma * n as f64).ceil() as usize).clamp(1, n.max(1));
        let bad = order.split_off(n_good.min(n));
        (order, bad)
    }

    fn fit<'s>(&self, space: &'s SearchSpace) -> Vec<(&'s ParamDomain, Parzen, Parzen)> {
        let (good, bad) = self.split();
        space
            .unfrozen()
            .map(|d| {
                (
                    d,
                    Parzen::fit(d.range, d, &good),
                    Parzen::fit(d.range, d, &bad),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Support {
    /// Grid positions `0..bins`.
    Grid { bins: usize },
    /// `[lo, hi]` in natural-log units.
    Log { lo: f64, hi: f64 },
}

/// Equal-weight mixture of truncated Gaussians plus one uniform kernel.
#[derive(Debug, Clone)]
struct Parzen {
    range: DomainRange,
    support: Support,
    /// Kernel centers in model coordinates with their multiplicities.
    centers: Vec<(f64, usize)>,
    /// Multiplicity over the kernel's mass inside the support, per center.
    weights: Vec<f64>,
    n: usize,
    sigma: f64,
}

impl Parzen {
    fn fit(range: DomainRange, domain: &ParamDomain, observations: &[&Observation]) -> Parzen {
        let mut groups: BTreeMap<ParamValue, usize> = BTreeMap::new();
        for obs in observations {
            if let Some(v) = obs.assignment.get(&domain.id) {
                *groups.entry(v).or_default() += 1;
            }
        }
        let n: usize = groups.values().sum();
        let support = match range {
            DomainRange::Int { .. } => Support::Grid {
                bins: range.cardinality().expect("integer range") as usize,
            },
            DomainRange::LogReal { lower, upper } => Support::Log {
                lo: lower.ln(),
                hi: upper.ln(),
            },
        };
        let width = match support {
            Support::Grid { bins } => (bins - 1) as f64,
            Support::Log { lo, hi } => hi - lo,
        };
        let spread = width / (n as f64).sqrt().max(1.0);
        let sigma = match support {
            Support::Grid { .. } => spread.max(1.0),
            Support::Log { .. } => spread.max(width * 0.01),
        };
        let mut parzen = Parzen {
            range,
            support,
            centers: Vec::with_capacity(groups.len()),
            weights: Vec::with_capacity(groups.len()),
            n,
            sigma,
        };
        parzen.centers = groups
            .into_iter()
            .map(|(v, count)| (parzen.coordinate(v), count))
            .collect();
        parzen.weights = parzen
            .centers
            .iter()
            .map(|&(c, k)| {
                let total = match support {
                    Support::Grid { bins } => {
                        normal_mass((-0.5 - c) / sigma, (bins as f64 - 0.5 - c) / sigma)
                    }
                    Support::Log { lo, hi } => normal_mass((lo - c) / sigma, (hi - c) / sigma),
                };
                k as f64 / total
            })
            .collect();
        parzen
    }

    fn coordinate(&self, v: ParamValue) -> f64 {
        match self.support {
            Support::Grid { .. } => self.range.index_of(v).expect("value on grid") as f64,
            Support::Log { .. } => v.as_f64().ln(),
        }
    }

    fn to_value(&self, x: f64) -> ParamValue {
        match (self.support, self.range) {
            (Support::Grid { .. }, _) => {
                ParamValue::Int(self.range.int_at(x as usize).expect("in range"))
            }
            (Support::Log { .. }, DomainRange::LogReal { lower, upper }) => {
                ParamValue::Real(x.exp().clamp(lower, upper))
            }
            _ => unreachable!(),
        }
    }

    fn density(&self, x: f64) -> f64 {
        let s = self.sigma;
        let kernels = self.centers.iter().zip(&self.weights);
        let (mass, prior) = match self.support {
            Support::Grid { bins } => {
                let mass: f64 = kernels
                    .map(|(&(c, _), w)| w * normal_mass((x - 0.5 - c) / s, (x + 0.5 - c) / s))
                    .sum();
                (mass, 1.0 / bins as f64)
            }
            Support::Log { lo, hi } => {
                if hi == lo {
                    return 1.0;
                }
                let pdf: f64 = kernels
                    .map(|(&(c, _), w)| {
                        let z = (x - c) / s;
                        w * (-0.5 * z * z).exp() / (s * SQRT_2PI)
                    })
                    .sum();
                (pdf, 1.0 / (hi - lo))
            }
        };
        (mass + prior) / (self.n + 1) as f64
    }

    fn log_density(&self, x: f64) -> f64 {
        self.density(x).ln()
    }

    /// Draws a model coordinate: a component uniformly (the prior counting
    /// as one), then a point from it by rejection.
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let mut pick = rng.random_range(0..=self.n);
        let center = self.centers.iter().find_map(|&(c, k)| {
            if pick < k {
                Some(c)
            } else {
                pick -= k;
                None
            }
        });
        match (self.support, center) {
            (Support::Grid { bins }, None) => rng.random_range(0..bins) as f64,
            (Support::Log { lo, hi }, None) => {
                if hi == lo {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            }
            (Support::Grid { bins }, Some(c)) => loop {
                let z: f64 = rng.sample(StandardNormal);
                let bin = (c + self.sigma * z + 0.5).floor();
                if bin >= 0.0 && bin < bins as f64 {
                    break bin;
                }
            },
            (Support::Log { lo, hi }, Some(c)) => loop {
                let z: f64 = rng.sample(StandardNormal);
                let x = c + self.sigma * z;
                if (lo..=hi).contains(&x) {
                    break x;
                }
            },
        }
    }
}

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Standard normal probability of `[a, b]`, evaluated on whichever tail
/// keeps precision.
fn normal_mass(a: f64, b: f64) -> f64 {
    let upper_tail = |x: f64| 0.5 * libm::erfc(x / std::f64::consts::SQRT_2);
    if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        upper_tail(-b) - upper_tail(-a)
    } else {
        1.0 - upper_tail(-a) - upper_tail(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::{
        BoundsPolicy, ConvLayerSpec, NetworkArch, ParamId, ParamKind, TensorShape,
    };

    fn m0() -> ParamId {
        ParamId::layer(0, ParamKind::M)
    }

    /// Single layer whose only free parameter is M in [1, 100].
    fn m_space() -> SearchSpace {
        let seed = NetworkArch::new(
            TensorShape::new(1, 8, 8),
            vec![ConvLayerSpec::new(3, 3, 100)],
        );
        crate::archspec::derive_space(&seed, &BoundsPolicy::default())
            .unwrap()
            .freeze(ParamId::layer(0, ParamKind::Kh), 3)
            .unwrap()
            .freeze(ParamId::layer(0, ParamKind::Kw), 3)
            .unwrap()
    }

    fn obs(space: &SearchSpace, m: i64, objective: f64) -> Observation {
        Observation {
            assignment: space.complete(&Assignment::new().with(m0(), m)),
            objective,
        }
    }

    #[test]
    fn config_is_validated() {
        for cfg in [
            TpeConfig {
                gamma: 0.0,
                ..Default::default()
            },
            TpeConfig {
                gamma: 1.0,
                ..Default::default()
            },
            TpeConfig {
                n_startup: 0,
                ..Default::default()
            },
            TpeConfig {
                n_candidates: 0,
                ..Default::default()
            },
        ] {
            assert!(TpeState::new(cfg).is_err());
        }
    }

    #[test]
    fn observe_appends_in_order_and_keeps_duplicates() {
        let space = m_space();
        let mut state = TpeState::new(TpeConfig::default()).unwrap();
        state.observe(&space, obs(&space, 5, 0.1)).unwrap();
        assert_eq!(state.observations().len(), 1);
        state.observe(&space, obs(&space, 5, 0.1)).unwrap();
        for i in 0..298 {
            state
                .observe(&space, obs(&space, 1 + i % 100, 0.5))
                .unwrap();
        }
        assert_eq!(state.observations().len(), 300);
        assert_eq!(state.observations()[0], state.observations()[1]);
        assert_eq!(
            state.observations()[299].assignment.get(&m0()),
            Some(ParamValue::Int(98))
        );
    }

    #[test]
    fn observe_rejects_out_of_space() {
        let space = m_space();
        let mut state = TpeState::new(TpeConfig::default()).unwrap();
        let bad = Observation {
            assignment: space.complete(&Assignment::new().with(m0(), 101)),
            objective: 0.5,
        };
        assert!(matches!(
            state.observe(&space, bad),
            Err(TpeError::OutOfSpace(_))
        ));
        assert!(matches!(
            state.observe(&space, obs(&space, 3, 1.5)),
            Err(TpeError::BadObjective(_))
        ));
    }

    #[test]
    fn fully_frozen_space_is_degenerate() {
        let space = m_space().freeze(m0(), 7).unwrap();
        let mut state = TpeState::new(TpeConfig::default()).unwrap();
        assert_eq!(state.suggest(&space), Err(TpeError::DegenerateSpace));
    }

    #[test]
    fn cardinality_one_domain_forces_the_assignment() {
        let seed = NetworkArch::new(TensorShape::new(1, 1, 1), vec![ConvLayerSpec::new(1, 1, 1)]);
        let space = crate::archspec::derive_space(&seed, &BoundsPolicy::default())
            .unwrap()
            .freeze(ParamId::layer(0, ParamKind::Kh), 1)
            .unwrap()
            .freeze(ParamId::layer(0, ParamKind::Kw), 1)
            .unwrap();
        let mut state = TpeState::new(TpeConfig {
            n_startup: 2,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..5 {
            let a = state.suggest(&space).unwrap();
            assert_eq!(space.apply(&a).unwrap(), seed);
            state
                .observe(
                    &space,
                    Observation {
                        assignment: a,
                        objective: 0.3,
                    },
                )
                .unwrap();
        }
    }

    #[test]
    fn identical_good_and_bad_sets_give_unit_ratio() {
        let space = m_space();
        let mut state = TpeState::new(TpeConfig {
            gamma: 0.5,
            n_startup: 4,
            ..Default::default()
        })
        .unwrap();
        for (m, y) in [(10, 1.0), (60, 1.0), (10, 0.0), (60, 0.0)] {
            state.observe(&space, obs(&space, m, y)).unwrap();
        }
        for m in [1, 10, 33, 60, 100] {
            let r = state
                .density_ratio(&space, &obs(&space, m, 0.0).assignment)
                .unwrap();
            assert!((r - 1.0).abs() < 1e-12, "ratio {r} at {m}");
        }
    }

    #[test]
    fn ratio_peaks_at_good_cluster() {
        let space = m_space();
        let mut state = TpeState::new(TpeConfig {
            n_startup: 10,
            ..Default::default()
        })
        .unwrap();
        for i in 0..40 {
            // good cluster near 20, bad cluster near 80
            let (m, y) = if i % 4 == 0 {
                (18 + i % 5, 0.9)
            } else {
                (78 + i % 5, 0.2)
            };
            state.observe(&space, obs(&space, m, y)).unwrap();
        }
        let at = |m| {
            state
                .density_ratio(&space, &obs(&space, m, 0.0).assignment)
                .unwrap()
        };
        assert!(at(20) > at(80));
        assert!(at(20) > at(50));
        assert!(at(20) > 1.0 && at(80) < 1.0);
    }

    #[test]
    fn density_ratio_needs_history() {
        let space = m_space();
        let state = TpeState::new(TpeConfig::default()).unwrap();
        assert_eq!(
            state.density_ratio(&space, &obs(&space, 3, 0.0).assignment),
            Err(TpeError::InsufficientHistory { have: 0, need: 20 })
        );
    }

    #[test]
    fn ratio_invariant_under_reordering() {
        let space = m_space();
        let data: Vec<(i64, f64)> = (0..30)
            .map(|i| ((i * 37) % 100 + 1, (i as f64 * 0.731) % 1.0))
            .collect();
        let mut fwd = TpeState::new(TpeConfig::default()).unwrap();
        let mut rev = TpeState::new(TpeConfig::default()).unwrap();
        for &(m, y) in &data {
            fwd.observe(&space, obs(&space, m, y)).unwrap();
        }
        for &(m, y) in data.iter().rev() {
            rev.observe(&space, obs(&space, m, y)).unwrap();
        }
        for m in [1, 25, 50, 75, 100] {
            let a = obs(&space, m, 0.0).assignment;
            assert_eq!(
                fwd.density_ratio(&space, &a).unwrap(),
                rev.density_ratio(&space, &a).unwrap()
            );
        }
    }

    #[test]
    fn split_sizes_and_tie_order() {
        let space = m_space();
        let mut state = TpeState::new(TpeConfig {
            gamma: 0.25,
            n_startup: 1,
            ..Default::default()
        })
        .unwrap();
        for (m, y) in [(1, 0.5), (2, 0.5), (3, 0.5), (4, 0.5), (5, 0.1)] {
            state.observe(&space, obs(&space, m, y)).unwrap();
        }
        let (good, bad) = state.split();
        // ceil(0.25 * 5) = 2, earliest of the tied observations first
        assert_eq!(good.len(), 2);
        assert_eq!(bad.len(), 3);
        let ms: Vec<_> = good
            .iter()
            .map(|o| o.assignment.get(&m0()).unwrap())
            .collect();
        assert_eq!(ms, [ParamValue::Int(1), ParamValue::Int(2)]);
    }

    #[test]
    fn suggestions_are_deterministic_and_in_bounds() {
        let space = crate::reference::default_space()
            .freeze(ParamId::layer(0, ParamKind::Kh), 3)
            .unwrap();
        let run = || {
            let mut state = TpeState::new(TpeConfig {
                seed: 11,
                n_startup: 5,
                ..Default::default()
            })
            .unwrap();
            let mut out = Vec::new();
            for i in 0..30 {
                let a = state.suggest(&space).unwrap();
                space.check_assignment(&a).unwrap();
                assert_eq!(
                    a.get(&ParamId::layer(0, ParamKind::Kh)),
                    Some(ParamValue::Int(3))
                );
                let y = (i as f64 * 0.37) % 1.0;
                state
                    .observe(
                        &space,
                        Observation {
                            assignment: a.clone(),
                            objective: y,
                        },
                    )
                    .unwrap();
                out.push(a);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learning_rate_is_modelled_in_log_space() {
        let text = r#"{
            "input": {"c": 1, "h": 8, "w": 8},
            "layers": [{"kh": 3, "kw": 3, "m": 8, "sh": 1, "sw": 1, "padding": "same"}],
            "domains": [
                {"layer": 0, "kind": "kh", "lower": 3, "upper": 3},
                {"layer": 0, "kind": "kw", "lower": 3, "upper": 3},
                {"layer": 0, "kind": "m", "lower": 8, "upper": 8},
                {"kind": "lr", "lower": 1e-5, "upper": 1e-1}
            ]
        }"#;
        let space = SearchSpace::from_json(text).unwrap();
        let lr = ParamId::solver(ParamKind::Lr);
        let mut state = TpeState::new(TpeConfig {
            n_startup: 10,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..60 {
            let a = state.suggest(&space).unwrap();
            let x = a.get(&lr).unwrap().as_f64();
            assert!((1e-5..=1e-1).contains(&x));
            // best near 1e-3
            let y = 1.0 - ((x.log10() + 3.0).abs() / 4.0).min(1.0);
            state
                .observe(
                    &space,
                    Observation {
                        assignment: a,
                        objective: y,
                    },
                )
                .unwrap();
        }
        let near = Assignment::from_layers(&[(3, 3, 8)]).with(lr, 1e-3);
        let far = Assignment::from_layers(&[(3, 3, 8)]).with(lr, 1e-5);
        assert!(
            state.density_ratio(&space, &near).unwrap()
                > state.density_ratio(&space, &far).unwrap()
        );
    }

    #[test]
    fn normal_mass_tails() {
        assert!((normal_mass(f64::NEG_INFINITY, f64::INFINITY) - 1.0).abs() < 1e-15);
        assert!((normal_mass(-1.0, 1.0) - 0.682_689_492_137_085_9).abs() < 1e-12);
        // deep upper tail keeps relative precision
        let m = normal_mass(10.0, 11.0);
        assert!(
            m > 0.0 && (m / 7.619_853_024_160_527e-24 - 1.0).abs() < 1e-4,
            "{m}"
        );
    }
}
