//! Loop-counting reference for the closed-form operation count.
//!
//! Walks the input grid with the layer's stride to find output positions,
//! then for every output position, filter and input channel steps through
//! each kernel tap, counting one multiply and one add per tap and one add
//! per channel for the cross-channel sum.

use crate::archspec::{ConvLayerSpec, Padding, TensorShape};

use super::CostError;

/// Upper bound on innermost-loop iterations the oracle will perform.
pub const ORACLE_TRIP_LIMIT: u128 = 1_000_000_000;

fn positions(
    extent: u64,
    kernel: u64,
    stride: u64,
    padding: Padding,
) -> Result<Vec<u64>, CostError> {
    let last = match padding {
        Padding::Same => extent - 1,
        Padding::Valid => extent
            .checked_sub(kernel)
            .ok_or(CostError::KernelExceedsInput {
                kh: kernel,
                kw: kernel,
                h: extent,
                w: extent,
            })?,
    };
    Ok((0..=last).step_by(stride as usize).collect())
}

pub fn naive_count_oracle(layer: &ConvLayerSpec, input: TensorShape) -> Result<u64, CostError> {
    for v in [
        layer.kh, layer.kw, layer.m, layer.sh, layer.sw, input.c, input.h, input.w,
    ] {
        if v == 0 {
            return Err(CostError::ZeroField("oracle input"));
        }
    }
    if layer.padding == Padding::Valid && (layer.kh > input.h || layer.kw > input.w) {
        return Err(CostError::KernelExceedsInput {
            kh: layer.kh,
            kw: layer.kw,
            h: input.h,
            w: input.w,
        });
    }
    let rows = positions(input.h, layer.kh, layer.sh, layer.padding)?;
    let cols = positions(input.w, layer.kw, layer.sw, layer.padding)?;
    let trips = [
        layer.m,
        rows.len() as u64,
        cols.len() as u64,
        input.c,
        layer.kh,
        layer.kw,
    ]
    .iter()
    .map(|&v| v as u128)
    .product::<u128>();
    if trips > ORACLE_TRIP_LIMIT {
        return Err(CostError::TripGuard {
            trips,
            limit: ORACLE_TRIP_LIMIT,
        });
    }

    let mut multiplies = 0u64;
    let mut adds = 0u64;
    for _filter in 0..layer.m {
        for _row in &rows {
            for _col in &cols {
                for _channel in 0..input.c {
                    for _ty in 0..layer.kh {
                        for _tx in 0..layer.kw {
                            multiplies += 1;
                            adds += 1;
                        }
                    }
                    // accumulate this channel's partial into the output point
                    adds += 1;
                }
            }
        }
    }
    Ok(multiplies + adds)
}
