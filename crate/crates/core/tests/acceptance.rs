//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report reads top to bottom. The
//! process fails when any criterion fails, except for a failure marked
//! documented: one whose cause lies in the published reference data itself.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use perfnas::archspec::{DomainRange, ParamDomain, ParamKind};
use perfnas::costmodel::{layer_ops, layer_params, naive_count_oracle, network_cost};
use perfnas::engine::{
    Engine, EngineState, ExperimentConfig, PhaseConfig, SamplerKind, SolverSettings, TrialLog,
};
use perfnas::evaluator::Surrogate;
use perfnas::pareto::{frontier_indices, ScoredPoint};
use perfnas::reference::{self, HIGHLIGHTS};
use perfnas::report::compare;
use perfnas::tpe::{Observation, TpeConfig, TpeState};
use perfnas::util::spearman;
use perfnas::{Assignment, ConvLayerSpec, Padding, ParamId, ParamValue, SearchSpace, TensorShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
    /// Set when the only failing checks are the documented ones.
    documented: bool,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
            documented: false,
        }
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 cost model equals loop-count oracle", criterion_1),
        ("2 searched-model rank reproduction", criterion_2),
        ("3 highlight ratio arithmetic", criterion_3),
        ("4 Pareto frontier equals brute force", criterion_4),
        ("5 end-to-end desk run", criterion_5),
        ("6 determinism and resume", criterion_6),
        ("7 TPE density oracle and startup permutation", criterion_7),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        let tag = match (v.pass, v.documented) {
            (true, _) => "PASS",
            (false, true) => "FAIL (documented)",
            (false, false) => "FAIL",
        };
        println!("{tag} [{name}] {:.2}s: {}", secs, v.detail);
        if !v.pass && !v.documented {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn random_layer(rng: &mut ChaCha8Rng) -> (ConvLayerSpec, TensorShape) {
    loop {
        let input = TensorShape::new(
            rng.random_range(1..=64),
            rng.random_range(1..=48),
            rng.random_range(1..=48),
        );
        let padding = if rng.random_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let layer = ConvLayerSpec::new(
            rng.random_range(1..=7),
            rng.random_range(1..=7),
            rng.random_range(1..=64),
        )
        .with_stride(rng.random_range(1..=3), rng.random_range(1..=3))
        .with_padding(padding);
        if padding == Padding::Valid && (layer.kh > input.h || layer.kw > input.w) {
            continue;
        }
        return (layer, input);
    }
}

/// Weights counted one by one.
fn count_weights(layer: &ConvLayerSpec, input: TensorShape) -> u64 {
    let mut n = 0;
    for _m in 0..layer.m {
        for _c in 0..input.c {
            for _i in 0..layer.kh {
                for _j in 0..layer.kw {
                    n += 1;
                }
            }
        }
    }
    n
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut valid = 0;
    let mut mismatches = Vec::new();
    for i in 0..500 {
        let (layer, input) = random_layer(&mut rng);
        valid += usize::from(layer.padding == Padding::Valid);
        let ops = layer_ops(&layer, input).unwrap();
        let oracle = naive_count_oracle(&layer, input).unwrap();
        let params = layer_params(&layer, input).unwrap();
        if ops != oracle || params != count_weights(&layer, input) {
            mismatches.push(i);
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        mismatches.is_empty() && elapsed < Duration::from_secs(5),
        format!(
            "500 layers ({valid} valid-padded), {} mismatches, {:.2}s (limit 5s)",
            mismatches.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let models = reference::searched_models();
    let costs: Vec<u64> = models
        .iter()
        .map(|m| network_cost(&m.arch).unwrap().total_ops)
        .collect();
    let inversions = costs.windows(2).filter(|w| w[1] >= w[0]).count();
    let seed_cost = network_cost(&reference::seed_arch()).unwrap().total_ops;
    let mut computed: Vec<f64> = vec![seed_cost as f64];
    computed.extend(costs.iter().map(|&c| c as f64));
    let mut published = vec![reference::SEED_MFLOPS];
    published.extend(models.iter().map(|m| m.published_mflops));
    let rho = spearman(&computed, &published);
    let pass = inversions <= 1 && rho >= 0.98 && seed_cost > costs[0];
    Verdict::new(
        pass,
        format!(
            "{inversions} adjacent inversions (max 1), spearman {rho:.4} (min 0.98), seed {} > kws1 {}",
            seed_cost, costs[0]
        ),
    )
}

fn criterion_3() -> Verdict {
    let (_, seed_top1, seed_mflops) = HIGHLIGHTS[0];
    let expected = [(33.75, -4.63), (6.63, -0.09), (3.47, 0.02), (2.60, 0.88)];
    let mut failures = Vec::new();
    let mut values = Vec::new();
    for (i, (row, (speedup, delta))) in HIGHLIGHTS[1..].iter().zip(expected).enumerate() {
        let (s, d) = compare(seed_mflops * 1e6, row.2 * 1e6, seed_top1, row.1).unwrap();
        values.push(format!("{s:.2}x/{d:+.2}"));
        if (s - speedup).abs() > 0.01 + 1e-9 {
            failures.push((i, "speedup", s, speedup));
        }
        if (d - delta).abs() > 0.01 + 1e-9 {
            failures.push((i, "delta", d, delta));
        }
    }
    let mut v = Verdict::new(failures.is_empty(), values.join(", "));
    if !failures.is_empty() {
        let described: Vec<String> = failures
            .iter()
            .map(|(i, what, got, want)| format!("row {} {what} {got:+.2} vs {want:+.2}", i + 1))
            .collect();
        v.detail
            .push_str(&format!("; off: {}", described.join(", ")));
        // 0.9410 - 0.9423 is -0.13 points; the table's -0.09 does not follow
        // from its own accuracy column
        v.documented = failures.len() == 1 && failures[0].0 == 1 && failures[0].1 == "delta";
        if v.documented {
            v.detail
                .push_str(" (published accuracies 0.9410 and 0.9423 differ by 0.13 points)");
        }
    }
    v
}

fn brute_force(points: &[ScoredPoint]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points.iter().any(|q| {
                let p = &points[i];
                q.accuracy >= p.accuracy
                    && q.cost <= p.cost
                    && (q.accuracy > p.accuracy || q.cost < p.cost)
            })
        })
        .collect()
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut with_dups = 0;
    for set in 0..1000 {
        let n = rng.random_range(0..=200);
        // coarse grids force duplicate points and ties on each axis
        let (acc_levels, cost_levels) = if set % 2 == 0 {
            (20, 30)
        } else {
            (1000, 100_000)
        };
        let points: Vec<ScoredPoint> = (0..n)
            .map(|i| ScoredPoint {
                trial_id: i as u64,
                accuracy: rng.random_range(0..=acc_levels) as f64 / acc_levels as f64,
                cost: rng.random_range(1..=cost_levels),
            })
            .collect();
        let distinct: BTreeSet<(u64, u64)> = points
            .iter()
            .map(|p| (p.accuracy.to_bits(), p.cost))
            .collect();
        with_dups += usize::from(distinct.len() < points.len());
        if frontier_indices(&points) != brute_force(&points) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "1000 sets ({with_dups} with duplicate points), {mismatches} mismatches, {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn desk_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::two_phase(reference::default_space(), seed, 60, 100)
}

fn random_config(seed: u64) -> ExperimentConfig {
    let mut cfg = desk_config(seed);
    let mut phase = PhaseConfig::new(160, SolverSettings::default());
    phase.refine = Some(false);
    cfg.phases = vec![phase];
    cfg.sampler = SamplerKind::Random;
    cfg
}

fn run(cfg: ExperimentConfig) -> EngineState {
    let surrogate = Surrogate::default();
    let mut engine = Engine::new(cfg, &surrogate).unwrap();
    engine.run().unwrap();
    engine.state().clone()
}

/// Search results as (cost, top1).
fn search_points(state: &EngineState) -> Vec<(u64, f64)> {
    state
        .trials()
        .iter()
        .filter_map(|t| t.evaluated.as_ref().map(|o| (t.cost.total_ops, o.top1)))
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    xs[((xs.len() - 1) as f64 * q).round() as usize]
}

fn best_under(points: &[(u64, f64)], threshold: f64) -> f64 {
    points
        .iter()
        .filter(|(c, _)| *c as f64 <= threshold)
        .map(|(_, a)| *a)
        .fold(0.0, f64::max)
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let state = run(desk_config(0));
    let elapsed = start.elapsed();
    let freezes = state.freezes();
    let mut problems = Vec::new();
    if state.frontier().is_empty() {
        problems.push("empty frontier".to_string());
    }
    if freezes.len() != 1 {
        problems.push(format!("{} freeze events", freezes.len()));
    }
    if let Some((_, param, value)) = freezes.first() {
        let violating = state
            .trials()
            .iter()
            .filter(|t| t.phase == 1 && t.assignment.get(param) != Some(*value))
            .count();
        if violating > 0 {
            problems.push(format!("{violating} phase-2 trials ignore {param}={value}"));
        }
    }
    let phase_counts = (0..2)
        .map(|p| state.trials().iter().filter(|t| t.phase == p).count())
        .collect::<Vec<_>>();
    if phase_counts != [60, 100] {
        problems.push(format!("phase sizes {phase_counts:?}"));
    }
    if elapsed >= Duration::from_secs(60) {
        problems.push("over 60s".into());
    }

    let mut tpe_best = Vec::new();
    let mut random_best = Vec::new();
    // diagnostic only: the same comparison at the 10th percentile of cost
    let mut tpe_low = Vec::new();
    let mut random_low = Vec::new();
    for seed in 0..10 {
        let tpe = search_points(&if seed == 0 {
            state.clone()
        } else {
            run(desk_config(seed))
        });
        let rnd = search_points(&run(random_config(seed)));
        let pooled: Vec<f64> = tpe.iter().chain(&rnd).map(|(c, _)| *c as f64).collect();
        let low = quantile(&pooled, 0.1);
        let threshold = median(pooled);
        tpe_best.push(best_under(&tpe, threshold));
        random_best.push(best_under(&rnd, threshold));
        tpe_low.push(best_under(&tpe, low));
        random_low.push(best_under(&rnd, low));
    }
    let (t, r) = (median(tpe_best), median(random_best));
    let (tl, rl) = (median(tpe_low), median(random_low));
    if t < r {
        problems.push(format!("TPE median {t:.4} below random {r:.4}"));
    }
    let (param, value) = freezes
        .first()
        .map(|f| (f.1.to_string(), f.2.to_string()))
        .unwrap_or_default();
    Verdict::new(
        problems.is_empty(),
        format!(
            "seed 0 run {:.2}s (limit 60s), frontier {}, froze {param}={value}; \
             median best top1 at pooled median cost over 10 seeds: TPE {t:.4} vs random {r:.4} \
             (at 10th-percentile cost: TPE {tl:.4} vs random {rl:.4}){}",
            elapsed.as_secs_f64(),
            state.frontier().len(),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; problems: {}", problems.join(", "))
            }
        ),
    )
}

fn criterion_6() -> Verdict {
    let a = run(desk_config(6)).log().to_jsonl();
    let b = run(desk_config(6)).log().to_jsonl();
    let identical = a == b;
    let full = TrialLog::parse(&a).unwrap().0;
    let surrogate = Surrogate::default();
    let mut divergent = Vec::new();
    for k in 0..=full.len() {
        let mut engine = Engine::resume(desk_config(6), &full.prefix(k), &surrogate).unwrap();
        engine.run().unwrap();
        if engine.into_log() != full {
            divergent.push(k);
        }
    }
    Verdict::new(
        identical && divergent.is_empty(),
        format!(
            "repeat run byte-identical: {identical}; resumed from all {} prefixes, {} diverged",
            full.len() + 1,
            divergent.len()
        ),
    )
}

fn solver_space() -> SearchSpace {
    let base = reference::default_space();
    let mut domains = base.domains().to_vec();
    domains.push(
        ParamDomain::new(
            ParamId::solver(ParamKind::Lr),
            DomainRange::LogReal {
                lower: 1e-5,
                upper: 1e-1,
            },
        )
        .unwrap(),
    );
    domains.push(
        ParamDomain::new(
            ParamId::solver(ParamKind::BatchSize),
            DomainRange::Int {
                lower: 8,
                upper: 128,
                step: 8,
            },
        )
        .unwrap(),
    );
    SearchSpace::new(base.seed().clone(), domains, SolverSettings::default()).unwrap()
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson integral of the standard normal density over [a, b].
fn simpson_normal(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = (((b - a) * 256.0).ceil() as usize)
        .max(2)
        .next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut sum = normal_pdf(a) + normal_pdf(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * normal_pdf(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// Parzen density of one parameter recomputed by summing kernels directly.
fn oracle_density(domain: &ParamDomain, values: &[ParamValue], x: ParamValue) -> f64 {
    let n = values.len() as f64;
    match domain.range {
        DomainRange::Int { lower, upper, step } => {
            let bins = ((upper - lower) / step + 1) as f64;
            let pos = |v: ParamValue| ((v.as_int().unwrap() - lower) / step) as f64;
            let sigma = ((bins - 1.0) / n.sqrt().max(1.0)).max(1.0);
            let px = pos(x);
            let kernels: f64 = values
                .iter()
                .map(|v| {
                    let c = pos(*v);
                    let bin = simpson_normal((px - 0.5 - c) / sigma, (px + 0.5 - c) / sigma);
                    let total = simpson_normal((-0.5 - c) / sigma, (bins - 0.5 - c) / sigma);
                    bin / total
                })
                .sum();
            (kernels + 1.0 / bins) / (n + 1.0)
        }
        DomainRange::LogReal { lower, upper } => {
            let (lo, hi) = (lower.ln(), upper.ln());
            let sigma = ((hi - lo) / n.sqrt().max(1.0)).max((hi - lo) * 0.01);
            let px = x.as_f64().ln();
            let kernels: f64 = values
                .iter()
                .map(|v| {
                    let c = v.as_f64().ln();
                    let total = simpson_normal((lo - c) / sigma, (hi - c) / sigma);
                    normal_pdf((px - c) / sigma) / (sigma * total)
                })
                .sum();
            (kernels + 1.0 / (hi - lo)) / (n + 1.0)
        }
    }
}

/// Density ratio recomputed from the raw observation list.
fn oracle_ratio(space: &SearchSpace, cfg: &TpeConfig, obs: &[Observation], x: &Assignment) -> f64 {
    let n = obs.len();
    let n_good = ((cfg.gamma * n as f64).ceil() as usize).max(1);
    // rank by objective, earlier observations first among equals
    let good: Vec<bool> = (0..n)
        .map(|i| {
            let ahead = (0..n)
                .filter(|&j| {
                    obs[j].objective > obs[i].objective
                        || (obs[j].objective == obs[i].objective && j < i)
                })
                .count();
            ahead < n_good
        })
        .collect();
    let mut ratio = 1.0;
    for domain in space.domains().iter().filter(|d| d.frozen.is_none()) {
        let pick = |want: bool| -> Vec<ParamValue> {
            obs.iter()
                .zip(&good)
                .filter(|(_, g)| **g == want)
                .map(|(o, _)| o.assignment.get(&domain.id).unwrap())
                .collect()
        };
        let v = x.get(&domain.id).unwrap();
        ratio *= oracle_density(domain, &pick(true), v) / oracle_density(domain, &pick(false), v);
    }
    ratio
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spaces = [reference::default_space(), solver_space()];
    let mut worst = 0.0f64;
    for state_ix in 0..100 {
        let space = &spaces[state_ix % 2];
        let cfg = TpeConfig {
            gamma: rng.random_range(0.1..0.5),
            n_startup: rng.random_range(1..=10),
            n_candidates: 24,
            seed: state_ix as u64,
        };
        let mut state = TpeState::new(cfg.clone()).unwrap();
        let n = rng.random_range(cfg.n_startup..=40);
        for _ in 0..n {
            let assignment = space.sample_uniform(&mut rng);
            // quantized objectives produce ties at the split
            let objective = rng.random_range(0..=20) as f64 / 20.0;
            state
                .observe(
                    space,
                    Observation {
                        assignment,
                        objective,
                    },
                )
                .unwrap();
        }
        let query = if rng.random_bool(0.5) {
            space.sample_uniform(&mut rng)
        } else {
            let i = rng.random_range(0..n);
            state.observations()[i].assignment.clone()
        };
        let got = state.density_ratio(space, &query).unwrap();
        let want = oracle_ratio(space, &cfg, state.observations(), &query);
        worst = worst.max(((got - want) / want).abs());
    }

    // startup suggestions ignore the history and its order
    let space = reference::default_space();
    let cfg = TpeConfig {
        n_startup: 12,
        seed: 77,
        ..TpeConfig::default()
    };
    let history: Vec<Observation> = (0..11)
        .map(|i| Observation {
            assignment: space.sample_uniform(&mut rng),
            objective: i as f64 / 11.0,
        })
        .collect();
    let mut permutation_failures = 0;
    for trial in 0..20 {
        let mut shuffled = history.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let keep = rng.random_range(0..=shuffled.len());
        let mut a = TpeState::new(cfg.clone()).unwrap();
        let mut b = TpeState::new(cfg.clone()).unwrap();
        for o in &history {
            a.observe(&space, o.clone()).unwrap();
        }
        for o in &shuffled[..if trial % 2 == 0 { shuffled.len() } else { keep }] {
            b.observe(&space, o.clone()).unwrap();
        }
        for _ in 0..3 {
            if a.suggest(&space).unwrap() != b.suggest(&space).unwrap() {
                permutation_failures += 1;
            }
        }
    }
    Verdict::new(
        worst <= 1e-9 && permutation_failures == 0,
        format!(
            "100 states, worst relative error {worst:.2e} (limit 1e-9); \
             {permutation_failures} startup suggestions changed under history permutation"
        ),
    )
}
