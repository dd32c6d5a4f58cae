//! Analytic inference cost of a convolution stack.
//!
//! A layer with `M` filters over a `C x H x W` input performs
//! `M * C * H' * W' * (2 * kh * kw + 1)` floating-point operations, where
//! `H' x W'` is the output grid: `kh * kw` multiplies and adds per filter tap
//! and channel, plus one add per channel to sum the channel partials. It holds
//! `M * C * kh * kw` weights; biases are not counted. All arithmetic is exact
//! and overflow-checked.

use serde::{Deserialize, Serialize};

use crate::archspec::{ConvLayerSpec, NetworkArch, Padding, TensorShape};

pub mod convention;
pub mod oracle;

pub use oracle::naive_count_oracle;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("layer field `{0}` must be >= 1")]
    ZeroField(&'static str),
    #[error("kernel exceeds input: {kh}x{kw} kernel on {h}x{w} input with valid padding")]
    KernelExceedsInput { kh: u64, kw: u64, h: u64, w: u64 },
    #[error("operation count overflows 64 bits")]
    Overflow,
    #[error("oracle trip count {trips} exceeds the limit of {limit}")]
    TripGuard { trips: u128, limit: u128 },
    #[error("layer {layer}: {source}")]
    InLayer {
        layer: usize,
        #[source]
        source: Box<CostError>,
    },
    #[error("network has no layers")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub ops: u64,
    pub params: u64,
    pub in_shape: TensorShape,
    pub out_shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkCost {
    pub per_layer: Vec<LayerCost>,
    pub total_ops: u64,
    pub total_params: u64,
}

/// `ceil(a / b)` as `floor((a + b - 1) / b)`.
pub fn ceil_div(a: u64, b: u64) -> u64 {
    debug_assert!(b > 0);
    a / b + u64::from(!a.is_multiple_of(b))
}

fn check_fields(layer: &ConvLayerSpec, input: TensorShape) -> Result<(), CostError> {
    let fields = [
        ("kh", layer.kh),
        ("kw", layer.kw),
        ("m", layer.m),
        ("sh", layer.sh),
        ("sw", layer.sw),
        ("c", input.c),
        ("h", input.h),
        ("w", input.w),
    ];
    match fields.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(CostError::ZeroField(name)),
        None => Ok(()),
    }
}

pub fn out_shape(layer: &ConvLayerSpec, input: TensorShape) -> Result<TensorShape, CostError> {
    check_fields(layer, input)?;
    let (h, w) = match layer.padding {
        Padding::Same => (ceil_div(input.h, layer.sh), ceil_div(input.w, layer.sw)),
        Padding::Valid => {
            if layer.kh > input.h || layer.kw > input.w {
                return Err(CostError::KernelExceedsInput {
                    kh: layer.kh,
                    kw: layer.kw,
                    h: input.h,
                    w: input.w,
                });
            }
            (
                (input.h - layer.kh) / layer.sh + 1,
                (input.w - layer.kw) / layer.sw + 1,
            )
        }
    };
    Ok(TensorShape::new(layer.m, h, w))
}

fn mul(values: &[u64]) -> Result<u64, CostError> {
    values
        .iter()
        .try_fold(1u64, |acc, &v| acc.checked_mul(v))
        .ok_or(CostError::Overflow)
}

/// Operation count of one layer. Under valid padding the output grid replaces
/// the ceiling terms.
pub fn layer_ops(layer: &ConvLayerSpec, input: TensorShape) -> Result<u64, CostError> {
    let out = out_shape(layer, input)?;
    let taps = mul(&[2, layer.kh, layer.kw])?
        .checked_add(1)
        .ok_or(CostError::Overflow)?;
    mul(&[layer.m, input.c, out.h, out.w, taps])
}

/// Weight count of one layer.
pub fn layer_params(layer: &ConvLayerSpec, input: TensorShape) -> Result<u64, CostError> {
    check_fields(layer, input)?;
    mul(&[layer.m, input.c, layer.kh, layer.kw])
}

pub fn layer_cost(layer: &ConvLayerSpec, input: TensorShape) -> Result<LayerCost, CostError> {
    Ok(LayerCost {
        ops: layer_ops(layer, input)?,
        params: layer_params(layer, input)?,
        in_shape: input,
        out_shape: out_shape(layer, input)?,
    })
}

/// Per-layer and total cost, chaining each layer's filter count into the
/// next layer's channel count.
pub fn network_cost(arch: &NetworkArch) -> Result<NetworkCost, CostError> {
    if arch.layers.is_empty() {
        return Err(CostError::Empty);
    }
    let mut per_layer = Vec::with_capacity(arch.layers.len());
    let mut shape = arch.input;
    let (mut total_ops, mut total_params) = (0u64, 0u64);
    for (i, layer) in arch.layers.iter().enumerate() {
        let cost = layer_cost(layer, shape).map_err(|e| CostError::InLayer {
            layer: i,
            source: Box::new(e),
        })?;
        total_ops = total_ops.checked_add(cost.ops).ok_or(CostError::Overflow)?;
        total_params = total_params
            .checked_add(cost.params)
            .ok_or(CostError::Overflow)?;
        shape = cost.out_shape;
        per_layer.push(cost);
    }
    Ok(NetworkCost {
        per_layer,
        total_ops,
        total_params,
    })
}

/// Renders raw operations as millions with two decimals, e.g. `581.12`.
pub fn mflops(ops: u64) -> String {
    // Integer rounding keeps the rendering exact for any u64.
    let hundredths = (ops as u128 + 5_000) / 10_000;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}
