//! Per-segment prune ratios.
//!
//! Each segment is scored against the sum of the segments before it and the
//! sum of the segments after it, and the stage prune ratio is spread across
//! segments by the z-score of that score.

use serde::Serialize;
use thiserror::Error;

use crate::segmentation::SegmentMap;
use crate::tensor::cosine_similarity;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_R_VAR: f64 = 0.1;
/// Upper clamp for a single segment's prune ratio.
pub const MAX_SEGMENT_RATIO: f64 = 0.95;

const DEGENERATE_STD: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("base prune ratio {0} outside [0, 1)")]
    InvalidBase(f64),
    #[error("prune deviation {0} must be finite and non-negative")]
    InvalidDeviation(f64),
    #[error("{budgets} budgets but {counts} segment token counts")]
    LengthMismatch { budgets: usize, counts: usize },
    #[error("segment map is empty")]
    NoSegments,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetVector {
    pub b: Vec<f64>,
    pub lambda: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl BudgetVector {
    pub fn new(b: Vec<f64>, lambda: f64) -> Self {
        let (mean, std) = mean_std(&b);
        Self {
            b,
            lambda,
            mean,
            std,
        }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Cosine similarity against a context sum; an empty or degenerate context scores 0.
fn context_similarity(g: &[f64], context: Option<&[f64]>) -> f64 {
    context
        .and_then(|c| cosine_similarity(g, c).ok())
        .unwrap_or(0.0)
}

/// `b_m = λ·s(g_m, Σ_{i>m} g_i) + (1−λ)·(1 − s(g_m, Σ_{i<m} g_i))`, clamped to `[0, 1]`.
pub fn segment_budgets(segmap: &SegmentMap, lambda: f64) -> Result<BudgetVector, BudgetError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(BudgetError::InvalidLambda(lambda));
    }
    let gs: Vec<&[f64]> = segmap.segments.iter().map(|s| s.g.as_slice()).collect();
    if gs.is_empty() {
        return Err(BudgetError::NoSegments);
    }
    let d = gs[0].len();
    let m_count = gs.len();

    // suffix[m] = Σ_{i ≥ m} g_i
    let mut suffix = vec![vec![0.0f64; d]; m_count + 1];
    for m in (0..m_count).rev() {
        let (head, tail) = suffix.split_at_mut(m + 1);
        for ((s, &next), &x) in head[m].iter_mut().zip(&tail[0]).zip(gs[m]) {
            *s = next + x;
        }
    }
    let mut left = vec![0.0f64; d];
    let mut b = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let right = (m + 1 < m_count).then(|| suffix[m + 1].as_slice());
        let left_ctx = (m > 0).then_some(left.as_slice());
        let s_r = context_similarity(gs[m], right);
        let s_l = context_similarity(gs[m], left_ctx);
        let score = lambda * s_r + (1.0 - lambda) * (1.0 - s_l);
        b.push(score.clamp(0.0, 1.0));
        for (l, &x) in left.iter_mut().zip(gs[m]) {
            *l += x;
        }
    }
    Ok(BudgetVector::new(b, lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRatios {
    pub base: f64,
    pub deviation: f64,
    pub ratios: Vec<f64>,
}

impl SegmentRatios {
    pub fn uniform(base: f64, segments: usize) -> Self {
        Self {
            base,
            deviation: 0.0,
            ratios: vec![base; segments],
        }
    }

    /// Token-weighted mean ratio.
    pub fn weighted_mean(&self, counts: &[usize]) -> f64 {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return self.base;
        }
        self.ratios
            .iter()
            .zip(counts)
            .map(|(r, &n)| r * n as f64)
            .sum::<f64>()
            / total as f64
    }
}

/// Spreads `base` across segments as `base + deviation·z(b_m)`.
///
/// Raw ratios are clamped to `[0, 0.95]` (or `[0, base]` when `base`
/// exceeds 0.95). The over-weighted side of the deviations is then scaled
/// by one factor so that the mean ratio weighted by `token_counts` equals
/// `base` again.
pub fn allocate_ratios(
    budgets: &BudgetVector,
    base: f64,
    deviation: f64,
    token_counts: &[usize],
) -> Result<SegmentRatios, BudgetError> {
    if !(0.0..1.0).contains(&base) {
        return Err(BudgetError::InvalidBase(base));
    }
    if !deviation.is_finite() || deviation < 0.0 {
        return Err(BudgetError::InvalidDeviation(deviation));
    }
    if budgets.len() != token_counts.len() {
        return Err(BudgetError::LengthMismatch {
            budgets: budgets.len(),
            counts: token_counts.len(),
        });
    }
    let m_count = budgets.len();
    if m_count <= 1 || budgets.std < DEGENERATE_STD || deviation == 0.0 {
        return Ok(SegmentRatios {
            base,
            deviation,
            ratios: vec![base; m_count],
        });
    }
    let cap = MAX_SEGMENT_RATIO.max(base);
    let mut delta: Vec<f64> = budgets
        .b
        .iter()
        .map(|b| {
            let raw = base + deviation * (b - budgets.mean) / budgets.std;
            raw.clamp(0.0, cap) - base
        })
        .collect();

    let (mut pos, mut neg) = (0.0f64, 0.0f64);
    for (d, &n) in delta.iter().zip(token_counts) {
        if *d > 0.0 {
            pos += d * n as f64;
        } else {
            neg -= d * n as f64;
        }
    }
    if pos > neg {
        let f = neg / pos;
        delta.iter_mut().filter(|d| **d > 0.0).for_each(|d| *d *= f);
    } else if neg > pos {
        let f = pos / neg;
        delta.iter_mut().filter(|d| **d < 0.0).for_each(|d| *d *= f);
    }
    Ok(SegmentRatios {
        base,
        deviation,
        ratios: delta.iter().map(|d| (base + d).clamp(0.0, cap)).collect(),
    })
}

/// `⌊x + 0.5⌋` for non-negative `x`, tolerant of round-off just below a half.
pub fn round_half_up(x: f64) -> usize {
    if x <= 0.0 {
        return 0;
    }
    (x + 0.5 + 1e-9).floor() as usize
}

/// Kept-token counts per segment for prune ratios `ratios` over segments of
/// `sizes` tokens.
///
/// The total is `round_half_up(Σ (1 − R_m)·n_m)`, at least one token per
/// non-empty segment, distributed by largest remainder of the per-segment
/// quotas (ties to the lower index). Rounding each segment on its own would
/// let the total drift by up to half a token per segment.
pub fn kept_counts(ratios: &[f64], sizes: &[usize]) -> Vec<usize> {
    assert_eq!(ratios.len(), sizes.len(), "one ratio per segment");
    let quotas: Vec<f64> = ratios
        .iter()
        .zip(sizes)
        .map(|(r, &n)| ((1.0 - r) * n as f64).clamp(0.0, n as f64))
        .collect();
    let nonempty = sizes.iter().filter(|&&n| n > 0).count();
    let capacity: usize = sizes.iter().sum();
    let total = round_half_up(quotas.iter().sum()).clamp(nonempty, capacity);

    let mut kept: Vec<usize> = quotas
        .iter()
        .zip(sizes)
        .map(|(q, &n)| {
            let floor = (q + 1e-9).floor() as usize;
            if n > 0 {
                floor.clamp(1, n)
            } else {
                0
            }
        })
        .collect();
    let mut assigned: usize = kept.iter().sum();
    while assigned < total {
        let m = (0..kept.len())
            .filter(|&m| kept[m] < sizes[m])
            .max_by(|&a, &b| {
                (quotas[a] - kept[a] as f64)
                    .total_cmp(&(quotas[b] - kept[b] as f64))
                    .then(b.cmp(&a))
            })
            .expect("total never exceeds capacity");
        kept[m] += 1;
        assigned += 1;
    }
    while assigned > total {
        let m = (0..kept.len())
            .filter(|&m| kept[m] > 1)
            .min_by(|&a, &b| {
                (quotas[a] - kept[a] as f64)
                    .total_cmp(&(quotas[b] - kept[b] as f64))
                    .then(a.cmp(&b))
            })
            .expect("total is at least the number of non-empty segments");
        kept[m] -= 1;
        assigned -= 1;
    }
    kept
}
