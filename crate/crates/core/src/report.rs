//! Tables and CSV output built from costs and trial logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::archspec::{Assignment, NetworkArch};
use crate::costmodel::{mflops, network_cost, CostError};
use crate::engine::{LogRecord, Stage, TrialLog};
use crate::pareto::{frontier, ScoredPoint};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReportError {
    #[error("costs must be positive (seed {seed}, model {model})")]
    NonPositiveCost { seed: f64, model: f64 },
    #[error("corrupt log: {0}")]
    CorruptLog(String),
    #[error("seed trial {0} has no evaluated accuracy in the log")]
    MissingSeed(u64),
}

/// One row of a Table-1-style comparison against the seed network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaReportRow {
    pub label: String,
    pub top1: f64,
    pub ops: f64,
    /// Accuracy change in percentage points, rounded to 2 dp.
    pub delta_top1: f64,
    /// `seed_ops / ops`, rounded to 2 dp.
    pub speedup: f64,
    pub in_band: bool,
}

fn round2(x: f64) -> f64 {
    let r = (x * 100.0).round() / 100.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Speedup and accuracy delta of a model against the seed.
pub fn compare(
    seed_ops: f64,
    model_ops: f64,
    seed_top1: f64,
    model_top1: f64,
) -> Result<(f64, f64), ReportError> {
    if !(seed_ops > 0.0 && model_ops > 0.0) {
        return Err(ReportError::NonPositiveCost {
            seed: seed_ops,
            model: model_ops,
        });
    }
    Ok((
        round2(seed_ops / model_ops),
        round2((model_top1 - seed_top1) * 100.0),
    ))
}

/// Whether `top1` lies at most `band_points` percentage points below the
/// seed accuracy.
pub fn in_band(seed_top1: f64, top1: f64, band_points: f64) -> bool {
    (seed_top1 - top1) * 100.0 <= band_points + 1e-9
}

/// Reference point the report compares against.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRef {
    pub label: String,
    pub ops: f64,
    pub top1: f64,
}

pub fn delta_row(
    seed: &SeedRef,
    label: &str,
    ops: f64,
    top1: f64,
    band_points: f64,
) -> Result<DeltaReportRow, ReportError> {
    let (speedup, delta_top1) = compare(seed.ops, ops, seed.top1, top1)?;
    Ok(DeltaReportRow {
        label: label.to_string(),
        top1,
        ops,
        delta_top1,
        speedup,
        in_band: in_band(seed.top1, top1, band_points),
    })
}

/// The seed row followed by one row per model.
pub fn delta_table(
    seed: &SeedRef,
    models: &[(String, f64, f64)],
    band_points: f64,
) -> Result<Vec<DeltaReportRow>, ReportError> {
    let mut rows = vec![delta_row(
        seed,
        &seed.label,
        seed.ops,
        seed.top1,
        band_points,
    )?];
    for (label, ops, top1) in models {
        rows.push(delta_row(seed, label, *ops, *top1, band_points)?);
    }
    Ok(rows)
}

fn fmt_mflops(ops: f64) -> String {
    format!("{:.2}", ops / 1e6)
}

pub fn render_delta_text(rows: &[DeltaReportRow]) -> String {
    let mut out = format!(
        "{:<12} {:>8} {:>10} {:>12} {:>9}  {}\n",
        "model", "top1", "dTOP-1", "MFLOPs", "speedup", "band"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>8.4} {:>+10.2} {:>12} {:>8.2}x  {}",
            r.label,
            r.top1,
            r.delta_top1,
            fmt_mflops(r.ops),
            r.speedup,
            if r.in_band { "*" } else { "" }
        );
    }
    out
}

pub fn render_delta_csv(rows: &[DeltaReportRow]) -> String {
    let mut out = String::from("label,top1,mflops,delta_top1,speedup,in_band\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.2},{:.2},{}",
            r.label,
            r.top1,
            fmt_mflops(r.ops),
            r.delta_top1,
            r.speedup,
            r.in_band
        );
    }
    out
}

/// Per-layer cost report for one network.
pub fn cost_report(arch: &NetworkArch, csv: bool) -> Result<String, CostError> {
    let cost = network_cost(arch)?;
    let mut out = String::new();
    if csv {
        out.push_str("layer,in_c,in_h,in_w,out_c,out_h,out_w,ops,params\n");
    } else {
        let _ = writeln!(
            out,
            "{:<6} {:>16} {:>16} {:>16} {:>12}",
            "layer", "input", "output", "ops", "params"
        );
    }
    for (i, l) in cost.per_layer.iter().enumerate() {
        let (a, b) = (l.in_shape, l.out_shape);
        if csv {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{}",
                a.c, a.h, a.w, b.c, b.h, b.w, l.ops, l.params
            );
        } else {
            let _ = writeln!(
                out,
                "{i:<6} {:>16} {:>16} {:>16} {:>12}",
                format!("{}x{}x{}", a.c, a.h, a.w),
                format!("{}x{}x{}", b.c, b.h, b.w),
                l.ops,
                l.params
            );
        }
    }
    if csv {
        let _ = writeln!(out, "total,,,,,,,{},{}", cost.total_ops, cost.total_params);
    } else {
        let _ = writeln!(
            out,
            "total: {} ops ({} MFLOPs), {} params",
            cost.total_ops,
            mflops(cost.total_ops),
            cost.total_params
        );
    }
    Ok(out)
}

/// A trial as seen from the log alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub id: u64,
    pub phase: usize,
    pub assignment: Assignment,
    pub ops: u64,
    pub params: u64,
    pub search_top1: Option<f64>,
    pub finetune_top1: Option<f64>,
    pub failure: Option<String>,
}

impl TrialSummary {
    /// Fine-tuned accuracy when present, else the search accuracy.
    pub fn top1(&self) -> Option<f64> {
        self.finetune_top1.or(self.search_top1)
    }

    pub fn is_finetuned(&self) -> bool {
        self.finetune_top1.is_some()
    }
}

fn get(
    trials: &mut BTreeMap<u64, TrialSummary>,
    id: u64,
) -> Result<&mut TrialSummary, ReportError> {
    trials
        .get_mut(&id)
        .ok_or_else(|| ReportError::CorruptLog(format!("result for unknown trial {id}")))
}

/// Trials and frontier reconstructed from a log without its config.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSummary {
    pub trials: Vec<TrialSummary>,
    /// Ids of frontier trials.
    pub frontier: Vec<u64>,
}

impl LogSummary {
    pub fn from_log(log: &TrialLog) -> Result<Self, ReportError> {
        let mut trials: BTreeMap<u64, TrialSummary> = BTreeMap::new();
        for r in log.records() {
            match r {
                LogRecord::Proposed {
                    id,
                    phase,
                    assignment,
                    ops,
                    params,
                    ..
                } => {
                    let prev = trials.insert(
                        *id,
                        TrialSummary {
                            id: *id,
                            phase: *phase,
                            assignment: assignment.clone(),
                            ops: *ops,
                            params: *params,
                            search_top1: None,
                            finetune_top1: None,
                            failure: None,
                        },
                    );
                    if prev.is_some() {
                        return Err(ReportError::CorruptLog(format!(
                            "trial {id} proposed twice"
                        )));
                    }
                }
                LogRecord::Evaluated { id, top1, .. } => {
                    get(&mut trials, *id)?.search_top1 = Some(*top1)
                }
                LogRecord::Finetuned { id, top1, .. } => {
                    get(&mut trials, *id)?.finetune_top1 = Some(*top1)
                }
                LogRecord::Failed {
                    id,
                    stage: Stage::Search,
                    reason,
                    ..
                } => get(&mut trials, *id)?.failure = Some(reason.clone()),
                LogRecord::Failed { id, .. } => {
                    get(&mut trials, *id)?;
                }
                LogRecord::Phase { .. } | LogRecord::Freeze { .. } => {}
            }
        }
        let trials: Vec<TrialSummary> = trials.into_values().collect();
        let points: Vec<ScoredPoint> = trials
            .iter()
            .filter_map(|t| {
                t.top1().map(|accuracy| ScoredPoint {
                    trial_id: t.id,
                    accuracy,
                    cost: t.ops,
                })
            })
            .collect();
        let frontier = frontier(&points).iter().map(|p| p.trial_id).collect();
        Ok(LogSummary { trials, frontier })
    }

    pub fn trial(&self, id: u64) -> Option<&TrialSummary> {
        self.trials.iter().find(|t| t.id == id)
    }

    pub fn is_pareto(&self, id: u64) -> bool {
        self.frontier.contains(&id)
    }

    /// Frontier trials by descending cost, ties by id.
    pub fn frontier_trials(&self) -> Vec<&TrialSummary> {
        let mut out: Vec<&TrialSummary> = self
            .frontier
            .iter()
            .filter_map(|id| self.trial(*id))
            .collect();
        out.sort_by(|a, b| b.ops.cmp(&a.ops).then(a.id.cmp(&b.id)));
        out
    }

    pub fn render_pareto(&self, csv: bool) -> String {
        let mut out = String::new();
        if csv {
            out.push_str("trial_id,top1,mflops,ops,finetuned,assignment\n");
        } else {
            let _ = writeln!(
                out,
                "{:>6} {:>8} {:>10}  assignment",
                "id", "top1", "MFLOPs"
            );
        }
        for t in self.frontier_trials() {
            let top1 = t.top1().expect("frontier trials have accuracy");
            let assignment = render_assignment(&t.assignment);
            if csv {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},\"{}\"",
                    t.id,
                    top1,
                    mflops(t.ops),
                    t.ops,
                    t.is_finetuned(),
                    assignment
                );
            } else {
                let _ = writeln!(
                    out,
                    "{:>6} {:>8.4} {:>10}  {}",
                    t.id,
                    top1,
                    mflops(t.ops),
                    assignment
                );
            }
        }
        out
    }

    /// Scatter of every trial with an accuracy.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("trial_id,ops,top1,phase,is_pareto,is_finetuned\n");
        for t in &self.trials {
            if let Some(top1) = t.top1() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    t.id,
                    t.ops,
                    top1,
                    t.phase,
                    self.is_pareto(t.id),
                    t.is_finetuned()
                );
            }
        }
        out
    }

    /// Seed reference taken from a trial of this log.
    pub fn seed_from_trial(&self, id: u64) -> Result<SeedRef, ReportError> {
        let t = self.trial(id).ok_or(ReportError::MissingSeed(id))?;
        Ok(SeedRef {
            label: format!("trial {id}"),
            ops: t.ops as f64,
            top1: t.top1().ok_or(ReportError::MissingSeed(id))?,
        })
    }

    /// Delta rows for the frontier, most expensive first.
    pub fn delta_rows(
        &self,
        seed: &SeedRef,
        band_points: f64,
    ) -> Result<Vec<DeltaReportRow>, ReportError> {
        let models: Vec<(String, f64, f64)> = self
            .frontier_trials()
            .iter()
            .map(|t| (format!("trial {}", t.id), t.ops as f64, t.top1().unwrap()))
            .filter(|(label, _, _)| *label != seed.label)
            .collect();
        delta_table(seed, &models, band_points)
    }
}

/// Compact `k=v` rendering of an assignment.
pub fn render_assignment(a: &Assignment) -> String {
    a.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}
