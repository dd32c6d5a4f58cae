//! Dominance under (accuracy up, cost down), frontier extraction, and the
//! setting histogram used to pick what to freeze between search phases.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::archspec::{Assignment, ParamId, ParamValue};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ParetoError {
    #[error("accuracy {0} outside [0, 1]")]
    BadAccuracy(f64),
    #[error("no assignments given")]
    Empty,
    #[error("assignment {index} covers different parameters than the first")]
    MixedSpace { index: usize },
    #[error("every parameter is frozen")]
    AllFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint {
    pub trial_id: u64,
    pub accuracy: f64,
    pub cost: u64,
}

impl ScoredPoint {
    pub fn new(trial_id: u64, accuracy: f64, cost: u64) -> Result<Self, ParetoError> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(ParetoError::BadAccuracy(accuracy));
        }
        Ok(ScoredPoint {
            trial_id,
            accuracy,
            cost,
        })
    }
}

/// `a` is at least as accurate and at most as costly as `b`, and strictly
/// better on one of the two.
pub fn dominates(a: &ScoredPoint, b: &ScoredPoint) -> bool {
    a.accuracy >= b.accuracy && a.cost <= b.cost && (a.accuracy > b.accuracy || a.cost < b.cost)
}

/// Indices of the non-dominated points, ascending. Points with identical
/// accuracy and cost are all kept.
pub fn frontier_indices(points: &[ScoredPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| points[i].cost);

    let mut keep = Vec::new();
    // best accuracy among all strictly cheaper points
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let cost = points[order[start]].cost;
        let end = start
            + order[start..]
                .iter()
                .take_while(|&&i| points[i].cost == cost)
                .count();
        let group = &order[start..end];
        let group_best = group
            .iter()
            .map(|&i| points[i].accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        if group_best > best_cheaper {
            keep.extend(
                group
                    .iter()
                    .copied()
                    .filter(|&i| points[i].accuracy == group_best),
            );
            best_cheaper = group_best;
        }
        start = end;
    }
    keep.sort_unstable();
    keep
}

/// The non-dominated subset, in input order.
pub fn frontier(points: &[ScoredPoint]) -> Vec<ScoredPoint> {
    frontier_indices(points)
        .into_iter()
        .map(|i| points[i])
        .collect()
}

/// Counts of each `(parameter, value)` pair over a set of assignments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SettingHistogram {
    total: usize,
    counts: BTreeMap<ParamId, BTreeMap<ParamValue, usize>>,
}

impl SettingHistogram {
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn count(&self, id: &ParamId, value: ParamValue) -> usize {
        self.counts
            .get(id)
            .and_then(|m| m.get(&value))
            .copied()
            .unwrap_or(0)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamId> {
        self.counts.keys()
    }

    pub fn values(&self, id: &ParamId) -> impl Iterator<Item = (&ParamValue, &usize)> {
        self.counts.get(id).into_iter().flat_map(|m| m.iter())
    }
}

pub fn common_settings(assignments: &[Assignment]) -> Result<SettingHistogram, ParetoError> {
    let first = assignments.first().ok_or(ParetoError::Empty)?;
    let keys: Vec<&ParamId> = first.keys().collect();
    let mut counts: BTreeMap<ParamId, BTreeMap<ParamValue, usize>> = BTreeMap::new();
    for (index, a) in assignments.iter().enumerate() {
        if !a.keys().eq(keys.iter().copied()) {
            return Err(ParetoError::MixedSpace { index });
        }
        for (id, value) in a.iter() {
            *counts.entry(*id).or_default().entry(*value).or_default() += 1;
        }
    }
    Ok(SettingHistogram {
        total: assignments.len(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommonSetting {
    pub id: ParamId,
    pub value: ParamValue,
    /// Fraction of the histogram's assignments sharing this setting.
    pub support: f64,
}

/// The most frequent setting among parameters not in `exclude`. Ties go to
/// the lower layer, then `kh < kw < m`, then the smaller value.
pub fn most_common_setting(
    hist: &SettingHistogram,
    exclude: &BTreeSet<ParamId>,
) -> Result<CommonSetting, ParetoError> {
    let mut best: Option<(ParamId, ParamValue, usize)> = None;
    for (id, values) in hist.counts.iter().filter(|(id, _)| !exclude.contains(id)) {
        for (value, &count) in values {
            if best.is_none_or(|(_, _, c)| count > c) {
                best = Some((*id, *value, count));
            }
        }
    }
    let (id, value, count) = best.ok_or(ParetoError::AllFrozen)?;
    Ok(CommonSetting {
        id,
        value,
        support: count as f64 / hist.total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::ParamKind;
    use proptest::prelude::*;

    fn p(id: u64, accuracy: f64, cost: u64) -> ScoredPoint {
        ScoredPoint::new(id, accuracy, cost).unwrap()
    }

    fn brute_force(points: &[ScoredPoint]) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| !points.iter().any(|q| dominates(q, &points[i])))
            .collect()
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(
            &p(0, 0.94, 100_000_000),
            &p(1, 0.93, 150_000_000)
        ));
        assert!(!dominates(
            &p(0, 0.94, 100_000_000),
            &p(1, 0.94, 100_000_000)
        ));
        let seed = p(0, 0.9423, 581_120_000);
        let fast = p(1, 0.9410, 87_610_000);
        assert!(!dominates(&seed, &fast));
        assert!(!dominates(&fast, &seed));
    }

    #[test]
    fn frontier_examples() {
        assert_eq!(frontier(&[p(7, 0.5, 3)]), vec![p(7, 0.5, 3)]);
        let pts = [
            p(0, 0.95, 200),
            p(1, 0.94, 100),
            p(2, 0.93, 50),
            p(3, 0.90, 60),
        ];
        assert_eq!(frontier_indices(&pts), vec![0, 1, 2]);
        assert_eq!(brute_force(&pts), vec![0, 1, 2]);
    }

    #[test]
    fn published_highlights_frontier() {
        let pts: Vec<ScoredPoint> = crate::reference::HIGHLIGHTS
            .iter()
            .enumerate()
            .map(|(i, (_, top1, mflops))| p(i as u64, *top1, (mflops * 1e6).round() as u64))
            .collect();
        // the seed and the 0.9410 model do not dominate each other
        assert!(!dominates(&pts[0], &pts[2]) && !dominates(&pts[2], &pts[0]));
        // the 0.9511 model is both more accurate and cheaper than the seed
        assert!(dominates(&pts[4], &pts[0]));
        assert_eq!(frontier_indices(&pts), vec![1, 2, 3, 4]);
        assert_eq!(brute_force(&pts), vec![1, 2, 3, 4]);
    }

    #[test]
    fn duplicates_are_all_kept() {
        let pts = [p(0, 0.9, 10), p(1, 0.9, 10), p(2, 0.8, 10), p(3, 0.9, 11)];
        assert_eq!(frontier_indices(&pts), vec![0, 1]);
    }

    #[test]
    fn bad_accuracy_rejected() {
        assert_eq!(
            ScoredPoint::new(0, 1.2, 1),
            Err(ParetoError::BadAccuracy(1.2))
        );
        assert!(ScoredPoint::new(0, f64::NAN, 1).is_err());
    }

    fn kh(layer: usize) -> ParamId {
        ParamId::layer(layer, ParamKind::Kh)
    }

    #[test]
    fn histogram_counts() {
        let mk = |k0: i64| Assignment::new().with(kh(0), k0).with(kh(1), 2);
        let assignments = vec![mk(3), mk(3), mk(1), mk(3)];
        let h = common_settings(&assignments).unwrap();
        assert_eq!(h.count(&kh(0), ParamValue::Int(3)), 3);
        assert_eq!(h.count(&kh(1), ParamValue::Int(2)), 4);
        assert_eq!(h.total(), 4);
    }

    #[test]
    fn histogram_rejects_mixed_spaces_and_empty_input() {
        let a = Assignment::new().with(kh(0), 1);
        let b = Assignment::new().with(kh(1), 1);
        assert_eq!(
            common_settings(&[a, b]),
            Err(ParetoError::MixedSpace { index: 1 })
        );
        assert_eq!(common_settings(&[]), Err(ParetoError::Empty));
    }

    #[test]
    fn most_common_reports_support() {
        let mut assignments = Vec::new();
        for i in 0..12 {
            let k0 = if i < 9 { 3 } else { 2 };
            assignments.push(
                Assignment::new()
                    .with(kh(0), k0)
                    .with(ParamId::layer(0, ParamKind::M), 10 + i),
            );
        }
        let h = common_settings(&assignments).unwrap();
        let best = most_common_setting(&h, &BTreeSet::new()).unwrap();
        assert_eq!(best.id, kh(0));
        assert_eq!(best.value, ParamValue::Int(3));
        assert!((best.support - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_layer_then_kind_then_value() {
        let a = Assignment::new()
            .with(kh(1), 4)
            .with(ParamId::layer(0, ParamKind::M), 9);
        let h = common_settings(&[a]).unwrap();
        let best = most_common_setting(&h, &BTreeSet::new()).unwrap();
        assert_eq!(best.id, ParamId::layer(0, ParamKind::M));

        let h = common_settings(&[
            Assignment::new().with(kh(0), 5),
            Assignment::new().with(kh(0), 2),
        ])
        .unwrap();
        assert_eq!(
            most_common_setting(&h, &BTreeSet::new()).unwrap().value,
            ParamValue::Int(2)
        );
    }

    #[test]
    fn exclusion_falls_back_to_next_best() {
        let assignments: Vec<Assignment> = (0..5)
            .map(|i| {
                Assignment::new()
                    .with(kh(0), 3)
                    .with(kh(1), if i < 4 { 1 } else { 2 })
            })
            .collect();
        let h = common_settings(&assignments).unwrap();
        let excluded: BTreeSet<ParamId> = [kh(0)].into();
        let best = most_common_setting(&h, &excluded).unwrap();
        assert_eq!((best.id, best.value), (kh(1), ParamValue::Int(1)));
        let all: BTreeSet<ParamId> = [kh(0), kh(1)].into();
        assert_eq!(most_common_setting(&h, &all), Err(ParetoError::AllFrozen));
    }

    fn points_strategy() -> impl Strategy<Value = Vec<ScoredPoint>> {
        // Coarse grids force ties and duplicates.
        prop::collection::vec((0u32..=20, 0u64..30), 1..60).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (a, c))| p(i as u64, a as f64 / 20.0, c))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn frontier_matches_brute_force(points in points_strategy()) {
            prop_assert_eq!(frontier_indices(&points), brute_force(&points));
        }

        #[test]
        fn frontier_is_idempotent_antichain(points in points_strategy()) {
            let front = frontier(&points);
            prop_assert_eq!(frontier(&front), front.clone());
            for a in &front {
                for b in &front {
                    prop_assert!(!dominates(a, b));
                }
            }
            for q in &points {
                if !front.contains(q) {
                    prop_assert!(front.iter().any(|f| dominates(f, q)));
                }
            }
        }

        #[test]
        fn dominance_is_a_strict_order(a in (0u32..5, 0u64..5), b in (0u32..5, 0u64..5), c in (0u32..5, 0u64..5)) {
            let (a, b, c) = (p(0, a.0 as f64 / 4.0, a.1), p(1, b.0 as f64 / 4.0, b.1), p(2, c.0 as f64 / 4.0, c.1));
            prop_assert!(!dominates(&a, &a));
            prop_assert!(!(dominates(&a, &b) && dominates(&b, &a)));
            if dominates(&a, &b) && dominates(&b, &c) {
                prop_assert!(dominates(&a, &c));
            }
        }

        #[test]
        fn frontier_invariant_under_monotone_cost_rescaling(points in points_strategy()) {
            let rescaled: Vec<ScoredPoint> = points
                .iter()
                .map(|q| p(q.trial_id, q.accuracy, q.cost * q.cost * 3 + 7))
                .collect();
            prop_assert_eq!(frontier_indices(&points), frontier_indices(&rescaled));
        }

        #[test]
        fn histogram_marginals_sum_to_n(values in prop::collection::vec((1i64..4, 1i64..4), 1..30)) {
            let assignments: Vec<Assignment> = values
                .iter()
                .map(|&(a, b)| Assignment::new().with(kh(0), a).with(kh(1), b))
                .collect();
            let h = common_settings(&assignments).unwrap();
            for id in h.params() {
                prop_assert_eq!(h.values(id).map(|(_, c)| *c).sum::<usize>(), assignments.len());
            }
        }
    }
}
