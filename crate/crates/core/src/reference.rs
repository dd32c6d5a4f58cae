//! The keyword-spotting seed network and the twelve Pareto-optimal variants
//! with their published operation counts.
//!
//! The seed takes a 1x40x32 MFCC map through six conv units; only the first
//! unit is strided. Strides follow the pinned convention (see
//! [`crate::costmodel::convention`]).

use crate::archspec::{
    derive_space, BoundsPolicy, ConvLayerSpec, NetworkArch, SearchSpace, TensorShape,
};

pub const SEED_JSON: &str = include_str!("../data/kws_seed_space.json");

#[derive(Debug, Clone)]
pub struct ReferenceModel {
    pub label: &'static str,
    pub arch: NetworkArch,
    pub published_top1: f64,
    pub published_mflops: f64,
}

const INPUT: TensorShape = TensorShape { c: 1, h: 40, w: 32 };
const UNIT1_STRIDE: (u64, u64) = (1, 2);
const UNIT2_STRIDE: (u64, u64) = (1, 1);

/// Builds a six-unit network from `(kh, kw, M)` triples under the pinned
/// strides.
pub fn kws_arch(units: &[(u64, u64, u64); 6]) -> NetworkArch {
    let layers = units
        .iter()
        .enumerate()
        .map(|(i, &(kh, kw, m))| {
            let (sh, sw) = match i {
                0 => UNIT1_STRIDE,
                1 => UNIT2_STRIDE,
                _ => (1, 1),
            };
            ConvLayerSpec::new(kh, kw, m).with_stride(sh, sw)
        })
        .collect();
    NetworkArch::new(INPUT, layers)
}

pub fn seed_arch() -> NetworkArch {
    kws_arch(&[
        (4, 10, 100),
        (3, 3, 100),
        (3, 3, 100),
        (3, 3, 100),
        (3, 3, 100),
        (3, 3, 100),
    ])
}

/// Search space around the seed with the experiment's default bounds.
pub fn default_space() -> SearchSpace {
    derive_space(&seed_arch(), &BoundsPolicy::default()).expect("seed is valid")
}

pub const SEED_TOP1: f64 = 0.942;
pub const SEED_MFLOPS: f64 = 581.1;

/// Name, per-layer `(kh, kw, m)`, top-1 and published MFLOPs.
type ModelRow = (&'static str, [(u64, u64, u64); 6], f64, f64);

/// kws1 through kws12, most expensive first.
pub fn searched_models() -> Vec<ReferenceModel> {
    #[rustfmt::skip]
    let rows: [ModelRow; 12] = [
        ("kws1",  [(3, 3, 40), (3, 3, 30), (1, 1, 30), (5, 5, 50), (5, 5, 50), (5, 5, 50)], 0.951, 223.4),
        ("kws2",  [(5, 5, 40), (3, 3, 50), (1, 1, 30), (5, 5, 40), (3, 3, 50), (5, 5, 50)], 0.943, 167.7),
        ("kws3",  [(5, 5, 50), (1, 1, 30), (5, 5, 40), (3, 3, 20), (5, 5, 30), (3, 3, 50)], 0.941, 87.6),
        ("kws4",  [(5, 5, 50), (3, 3, 40), (5, 5, 20), (1, 1, 20), (5, 5, 30), (3, 3, 50)], 0.938, 87.2),
        ("kws5",  [(5, 5, 20), (1, 1, 40), (5, 5, 30), (3, 3, 20), (5, 5, 30), (3, 3, 30)], 0.938, 76.5),
        ("kws6",  [(5, 5, 20), (3, 3, 40), (3, 3, 40), (3, 3, 20), (3, 3, 40), (3, 3, 40)], 0.936, 65.2),
        ("kws7",  [(3, 3, 50), (1, 1, 30), (3, 3, 20), (5, 5, 20), (3, 3, 50), (3, 3, 40)], 0.936, 56.8),
        ("kws8",  [(5, 5, 50), (1, 1, 50), (3, 3, 20), (3, 3, 40), (3, 3, 30), (3, 3, 20)], 0.937, 46.3),
        ("kws9",  [(5, 5, 50), (1, 1, 20), (1, 1, 50), (3, 3, 20), (5, 5, 20), (3, 3, 40)], 0.934, 37.7),
        ("kws10", [(3, 3, 40), (1, 1, 20), (1, 1, 20), (3, 3, 20), (5, 5, 20), (3, 3, 30)], 0.934, 26.3),
        ("kws11", [(5, 5, 30), (1, 1, 20), (1, 1, 20), (1, 1, 20), (3, 3, 20), (5, 5, 20)], 0.919, 20.2),
        ("kws12", [(5, 5, 50), (1, 1, 40), (1, 1, 50), (1, 1, 20), (3, 3, 20), (3, 3, 20)], 0.927, 17.2),
    ];
    rows.iter()
        .map(|(label, units, top1, mflops)| ReferenceModel {
            label,
            arch: kws_arch(units),
            published_top1: *top1,
            published_mflops: *mflops,
        })
        .collect()
}

/// The seed followed by [`searched_models`].
pub fn reference_models() -> Vec<ReferenceModel> {
    let mut models = vec![ReferenceModel {
        label: "seed",
        arch: seed_arch(),
        published_top1: SEED_TOP1,
        published_mflops: SEED_MFLOPS,
    }];
    models.extend(searched_models());
    models
}

/// `(label, TOP-1, MFLOPs)` of the seed and the four highlighted search
/// results, as published.
pub const HIGHLIGHTS: [(&str, f64, f64); 5] = [
    ("seed model", 0.9423, 581.12),
    ("best delta FP_OPS", 0.8960, 17.22),
    ("fastest delta TOP-1 ~ 0", 0.9410, 87.61),
    ("fastest delta TOP-1 > 0", 0.9425, 167.68),
    ("best delta TOP-1", 0.9511, 223.44),
];
