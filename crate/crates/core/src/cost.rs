//! Prefill FLOPs accounting.
//!
//! A decoder layer processing `n` tokens with hidden size `d` and FFN
//! intermediate size `m` costs `4·n·d² + 2·n²·d + 2·n·d·m` FLOPs
//! (projections, attention scores and values, FFN).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("FLOPs accumulator overflow")]
    Overflow,
    #[error("model dims must be positive, got L={layers} d={hidden} m={ffn}")]
    InvalidDims { layers: u64, hidden: u64, ffn: u64 },
    #[error("{counts} stage counts for {boundaries} stage boundaries")]
    LengthMismatch { counts: usize, boundaries: usize },
    #[error(
        "stage boundaries {0:?} must start at 0, increase strictly and stay below the layer count"
    )]
    InvalidBoundaries(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: u64,
    pub hidden: u64,
    pub ffn: u64,
}

impl ModelDims {
    pub fn new(layers: u64, hidden: u64, ffn: u64) -> Result<Self, CostError> {
        if layers == 0 || hidden == 0 || ffn == 0 {
            return Err(CostError::InvalidDims {
                layers,
                hidden,
                ffn,
            });
        }
        Ok(Self {
            layers,
            hidden,
            ffn,
        })
    }
}

impl Default for ModelDims {
    /// A 28-layer 7B-class decoder (hidden 3584, FFN 18944).
    fn default() -> Self {
        Self {
            layers: 28,
            hidden: 3584,
            ffn: 18944,
        }
    }
}

/// Exact FLOPs of one layer over `n` tokens.
pub fn layer_flops(n: u64, dims: &ModelDims) -> Result<u128, CostError> {
    let (n, d, m) = (n as u128, dims.hidden as u128, dims.ffn as u128);
    let nd = n.checked_mul(d).ok_or(CostError::Overflow)?;
    let proj = nd
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or(CostError::Overflow)?;
    let attn = nd
        .checked_mul(n)
        .and_then(|x| x.checked_mul(2))
        .ok_or(CostError::Overflow)?;
    let ffn = nd
        .checked_mul(m)
        .and_then(|x| x.checked_mul(2))
        .ok_or(CostError::Overflow)?;
    proj.checked_add(attn)
        .and_then(|x| x.checked_add(ffn))
        .ok_or(CostError::Overflow)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub total: u128,
    pub baseline: u128,
    pub ratio: f64,
    pub per_stage: Vec<u128>,
    /// `total` in teraFLOPs, one decimal.
    pub total_tflops: String,
    pub baseline_tflops: String,
}

pub fn format_tflops(flops: u128) -> String {
    format!("{:.1}", flops as f64 / 1e12)
}

/// Checks `boundaries` against the model depth.
pub fn validate_boundaries(boundaries: &[usize], layers: u64) -> Result<(), CostError> {
    let ok = boundaries.first() == Some(&0)
        && boundaries.windows(2).all(|w| w[0] < w[1])
        && boundaries.last().is_some_and(|&b| (b as u64) < layers);
    if ok {
        Ok(())
    } else {
        Err(CostError::InvalidBoundaries(boundaries.to_vec()))
    }
}

/// Sums layer FLOPs with stage `s` covering layers `[boundaries[s], boundaries[s+1])`
/// at `counts[s]` tokens, against an unpruned run at `baseline_count` tokens.
///
/// `extra_tokens` (instruction/system text) is added to every layer's token
/// count on both sides of the ratio.
pub fn pipeline_flops(
    counts: &[u64],
    boundaries: &[usize],
    dims: &ModelDims,
    baseline_count: u64,
    extra_tokens: u64,
) -> Result<FlopsReport, CostError> {
    if counts.len() != boundaries.len() {
        return Err(CostError::LengthMismatch {
            counts: counts.len(),
            boundaries: boundaries.len(),
        });
    }
    validate_boundaries(boundaries, dims.layers)?;
    let mut per_stage = Vec::with_capacity(counts.len());
    for (s, &n) in counts.iter().enumerate() {
        let end = boundaries.get(s + 1).map_or(dims.layers, |&b| b as u64);
        let layers = (end - boundaries[s] as u64) as u128;
        let n = n.checked_add(extra_tokens).ok_or(CostError::Overflow)?;
        per_stage.push(
            layer_flops(n, dims)?
                .checked_mul(layers)
                .ok_or(CostError::Overflow)?,
        );
    }
    let total = per_stage
        .iter()
        .try_fold(0u128, |acc, &x| acc.checked_add(x))
        .ok_or(CostError::Overflow)?;
    let base_n = baseline_count
        .checked_add(extra_tokens)
        .ok_or(CostError::Overflow)?;
    let baseline = layer_flops(base_n, dims)?
        .checked_mul(dims.layers as u128)
        .ok_or(CostError::Overflow)?;
    let ratio = if baseline == 0 {
        1.0
    } else {
        total as f64 / baseline as f64
    };
    Ok(FlopsReport {
        total,
        baseline,
        ratio,
        per_stage,
        total_tflops: format_tflops(total),
        baseline_tflops: format_tflops(baseline),
    })
}
