//! Instruction-conditioned DPP token selection.
//!
//! The kernel is the scaled Gram matrix of the visual tokens, modulated on
//! both sides by instruction relevance:
//!
//! ```text
//! L̃[i][j] = r_i · r_j · (v_i · v_j) / d
//! ```
//!
//! It is block diagonal by segment. Blocks are never materialized: the
//! greedy MAP routine only requests the rows of items it has already
//! selected, so a block of `n` tokens costs `O(n·k·(k + d))` to solve.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::budget::{kept_counts, SegmentRatios};
use crate::segmentation::SegmentMap;
use crate::tensor::{dot, Embeddings, InstructionEmbedding, TensorError};

/// Lower bound applied to min-max normalized relevance.
pub const RELEVANCE_FLOOR: f64 = 1e-4;
/// A greedy pivot at or below this value means the block is rank-exhausted.
pub const PIVOT_EPS: f64 = 1e-12;
/// Diagonal jitter used when checking a kernel block for positive semi-definiteness.
pub const PSD_JITTER: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DppError {
    #[error("requested {k} items from a block of {n}")]
    BudgetExceeded { k: usize, n: usize },
    #[error("token {id} does not belong to any segment")]
    SegmentMismatch { id: usize },
    #[error("{ratios} segment ratios for {segments} segments")]
    RatioMismatch { ratios: usize, segments: usize },
    #[error("relevance vector has {relevance} entries for {tokens} tokens")]
    RelevanceMismatch { relevance: usize, tokens: usize },
    #[error("no visual tokens")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelevanceVector {
    pub r: Vec<f64>,
    /// Scaled instruction/token dot products before the softmax.
    pub logits: Vec<f64>,
}

impl RelevanceVector {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// `r = min-max(softmax(H_t·H_vᵀ / √d))`, floored at [`RELEVANCE_FLOOR`].
pub fn relevance(hv: &Embeddings, ht: &InstructionEmbedding) -> Result<RelevanceVector, DppError> {
    ht.check_dim(hv.dim())?;
    if hv.is_empty() {
        return Err(DppError::Empty);
    }
    let scale = 1.0 / (hv.dim() as f64).sqrt();
    let logits: Vec<f64> = hv.rows().map(|v| dot(ht.data(), v) * scale).collect();
    let zmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - zmax).exp()).collect();
    let total: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let pmin = p.iter().copied().fold(f64::INFINITY, f64::min);
    let pmax = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = pmax - pmin;
    let r = if range < 1e-12 {
        vec![1.0; p.len()]
    } else {
        p.iter()
            .map(|x| ((x - pmin) / range).max(RELEVANCE_FLOOR))
            .collect()
    };
    Ok(RelevanceVector { r, logits })
}

/// A symmetric PSD kernel that can produce rows on demand.
pub trait Kernel {
    fn size(&self) -> usize;

    fn diagonal(&self) -> Vec<f64>;

    /// Writes row `j` into `out` (length [`Kernel::size`]).
    fn row(&self, j: usize, out: &mut [f64]);

    /// Ranking used for picks after the greedy pivots are exhausted.
    fn fallback_scores(&self) -> Vec<f64> {
        self.diagonal()
    }
}

/// A fully materialized symmetric kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKernel {
    n: usize,
    data: Vec<f64>,
}

impl DenseKernel {
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "dense kernel must be n×n");
        Self { n, data }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &v) in diag.iter().enumerate() {
            data[i * n + i] = v;
        }
        Self { n, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl Kernel for DenseKernel {
    fn size(&self) -> usize {
        self.n
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    fn row(&self, j: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.data[j * self.n..(j + 1) * self.n]);
    }
}

/// One segment's block `L̃_m`, held as its tokens and relevance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    segment: usize,
    ids: Vec<usize>,
    dim: usize,
    vectors: Vec<f64>,
    relevance: Vec<f64>,
}

impl KernelBlock {
    pub fn segment(&self) -> usize {
        self.segment
    }

    /// Global token ids of the block's rows.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn relevance(&self) -> &[f64] {
        &self.relevance
    }

    fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.relevance[i] * self.relevance[j] * dot(self.vector(i), self.vector(j))
            / self.dim as f64
    }

    pub fn to_dense(&self) -> DenseKernel {
        let n = self.ids.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = self.entry(i, j);
            }
        }
        DenseKernel::new(n, data)
    }
}

impl Kernel for KernelBlock {
    fn size(&self) -> usize {
        self.ids.len()
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.size()).map(|i| self.entry(i, i)).collect()
    }

    fn row(&self, j: usize, out: &mut [f64]) {
        let vj = self.vector(j);
        let scale = self.relevance[j] / self.dim as f64;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.relevance[i] * scale * dot(self.vector(i), vj);
        }
    }

    fn fallback_scores(&self) -> Vec<f64> {
        self.relevance.clone()
    }
}

/// `L̃` split into per-segment blocks; cross-segment entries are structurally zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DppKernel {
    pub blocks: Vec<KernelBlock>,
}

impl DppKernel {
    pub fn num_tokens(&self) -> usize {
        self.blocks.iter().map(|b| b.ids.len()).sum()
    }
}

/// Groups the rows of `hv` by segment and attaches relevance.
pub fn build_kernel(
    hv: &Embeddings,
    r: &RelevanceVector,
    segmap: &SegmentMap,
) -> Result<DppKernel, DppError> {
    if r.len() != hv.len() {
        return Err(DppError::RelevanceMismatch {
            relevance: r.len(),
            tokens: hv.len(),
        });
    }
    let dim = hv.dim();
    let mut blocks: Vec<KernelBlock> = (0..segmap.len())
        .map(|segment| KernelBlock {
            segment,
            ids: Vec::new(),
            dim,
            vectors: Vec::new(),
            relevance: Vec::new(),
        })
        .collect();
    for (row, &id) in hv.ids().iter().enumerate() {
        let m = segmap
            .segment_of_token(id)
            .ok_or(DppError::SegmentMismatch { id })?;
        let b = &mut blocks[m];
        b.ids.push(id);
        b.vectors.extend(hv.row(row).iter().map(|&x| x as f64));
        b.relevance.push(r.r[row]);
    }
    Ok(DppKernel { blocks })
}

/// Cholesky check of `L + PSD_JITTER·I`; returns the smallest pivot seen.
pub fn min_cholesky_pivot(kernel: &DenseKernel) -> f64 {
    let n = kernel.size();
    let mut l = vec![0.0f64; n * n];
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut diag = kernel.get(j, j) + PSD_JITTER;
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        min_pivot = min_pivot.min(diag);
        let ljj = diag.max(PSD_JITTER).sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = kernel.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    min_pivot
}

/// Result of greedy MAP inference on one block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSelection {
    /// Block-local indices in pick order.
    pub picks: Vec<usize>,
    /// Conditional gain `d²` of each greedy pick.
    pub pivots: Vec<f64>,
    /// Cumulative `log det(L̃_S)` after each greedy pick.
    pub log_det_trace: Vec<f64>,
    /// Pick index at which the pivots ran out, if they did; later picks
    /// follow the kernel's fallback ranking.
    pub breakdown_at: Option<usize>,
}

impl BlockSelection {
    pub fn log_det(&self) -> f64 {
        self.log_det_trace.last().copied().unwrap_or(0.0)
    }
}

fn argmax_available(scores: &[f64], available: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if available[i] && best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fast greedy MAP: repeatedly adds the item with the largest conditional
/// gain, maintaining the gains and partial Cholesky rows incrementally.
/// Ties go to the lowest index.
pub fn greedy_map<K: Kernel + ?Sized>(kernel: &K, k: usize) -> Result<BlockSelection, DppError> {
    let n = kernel.size();
    if k > n {
        return Err(DppError::BudgetExceeded { k, n });
    }
    let mut gains = kernel.diagonal();
    let mut available = vec![true; n];
    // cols[s][i] is the s-th entry of item i's Cholesky row
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut row = vec![0.0f64; n];
    let mut out = BlockSelection {
        picks: Vec::with_capacity(k),
        pivots: Vec::with_capacity(k),
        log_det_trace: Vec::with_capacity(k),
        breakdown_at: None,
    };
    let mut log_det = 0.0f64;

    while out.picks.len() < k {
        let j = argmax_available(&gains, &available).expect("k ≤ n leaves a candidate");
        let pivot = gains[j];
        if pivot <= PIVOT_EPS {
            out.breakdown_at = Some(out.picks.len());
            break;
        }
        available[j] = false;
        log_det += pivot.ln();
        out.picks.push(j);
        out.pivots.push(pivot);
        out.log_det_trace.push(log_det);
        if out.picks.len() == k {
            break;
        }

        kernel.row(j, &mut row);
        for c in &cols {
            let cj = c[j];
            if cj != 0.0 {
                for (r, &ci) in row.iter_mut().zip(c) {
                    *r -= cj * ci;
                }
            }
        }
        let inv = 1.0 / pivot.sqrt();
        let mut col = vec![0.0f64; n];
        for i in 0..n {
            if available[i] {
                let e = row[i] * inv;
                col[i] = e;
                gains[i] -= e * e;
            }
        }
        cols.push(col);
    }

    if out.picks.len() < k {
        let scores = kernel.fallback_scores();
        while out.picks.len() < k {
            let j = argmax_available(&scores, &available).expect("k ≤ n leaves a candidate");
            available[j] = false;
            out.picks.push(j);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSelection {
    pub segment: usize,
    pub candidates: usize,
    /// Kept global token ids, ascending.
    pub kept: Vec<usize>,
    pub log_det_trace: Vec<f64>,
    pub breakdown_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    /// Union of kept ids, ascending.
    pub kept: Vec<usize>,
    pub segments: Vec<SegmentSelection>,
}

impl Selection {
    /// A selection with no per-segment structure.
    pub fn flat(mut kept: Vec<usize>) -> Self {
        kept.sort_unstable();
        Self {
            kept,
            segments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Solves every block of `kernel` for the given kept counts, in parallel.
pub fn select_blocks(kernel: &DppKernel, kept: &[usize]) -> Result<Selection, DppError> {
    if kept.len() != kernel.blocks.len() {
        return Err(DppError::RatioMismatch {
            ratios: kept.len(),
            segments: kernel.blocks.len(),
        });
    }
    let segments = kernel
        .blocks
        .par_iter()
        .zip(kept)
        .map(|(block, &k)| {
            let sel = greedy_map(block, k)?;
            let mut ids: Vec<usize> = sel.picks.iter().map(|&i| block.ids[i]).collect();
            ids.sort_unstable();
            Ok(SegmentSelection {
                segment: block.segment,
                candidates: block.ids.len(),
                kept: ids,
                log_det_trace: sel.log_det_trace,
                breakdown_at: sel.breakdown_at,
            })
        })
        .collect::<Result<Vec<_>, DppError>>()?;
    let mut all: Vec<usize> = segments
        .iter()
        .flat_map(|s| s.kept.iter().copied())
        .collect();
    all.sort_unstable();
    Ok(Selection {
        kept: all,
        segments,
    })
}

/// Keeps `(1 − R^{i,m})·n_m` tokens of each segment by greedy MAP on its block.
pub fn prune_tokens(
    hv: &Embeddings,
    ht: &InstructionEmbedding,
    segmap: &SegmentMap,
    ratios: &SegmentRatios,
) -> Result<Selection, DppError> {
    if ratios.ratios.len() != segmap.len() {
        return Err(DppError::RatioMismatch {
            ratios: ratios.ratios.len(),
            segments: segmap.len(),
        });
    }
    if hv.is_empty() {
        return Ok(Selection {
            kept: Vec::new(),
            segments: Vec::new(),
        });
    }
    let r = relevance(hv, ht)?;
    let kernel = build_kernel(hv, &r, segmap)?;
    let sizes: Vec<usize> = kernel.blocks.iter().map(|b| b.ids.len()).collect();
    let kept = kept_counts(&ratios.ratios, &sizes);
    select_blocks(&kernel, &kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::VideoTokens;

    fn emb(rows: &[&[f32]]) -> Embeddings {
        let d = rows[0].len();
        Embeddings::new((0..rows.len()).collect(), d, rows.concat()).unwrap()
    }

    #[test]
    fn relevance_constant_logits() {
        let hv = emb(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let ht = InstructionEmbedding::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(relevance(&hv, &ht).unwrap().r, vec![1.0; 3]);
    }

    #[test]
    fn relevance_two_point() {
        // logits chosen so that softmax = [0.7, 0.3]
        let z = (0.7f64 / 0.3).ln() as f32;
        let hv = emb(&[&[z], &[0.0]]);
        let ht = InstructionEmbedding::new(vec![1.0]).unwrap();
        assert_eq!(relevance(&hv, &ht).unwrap().r, vec![1.0, RELEVANCE_FLOOR]);
    }

    #[test]
    fn relevance_three_point() {
        let hv = emb(&[&[0.0], &[1.0], &[2.0]]);
        let ht = InstructionEmbedding::new(vec![1.0]).unwrap();
        let r = relevance(&hv, &ht).unwrap();
        assert_eq!(r.logits, vec![0.0, 1.0, 2.0]);
        assert_eq!(r.r[0], 1e-4);
        assert!((r.r[1] - 0.2689).abs() < 1e-4);
        assert_eq!(r.r[2], 1.0);
    }

    #[test]
    fn relevance_dim_mismatch() {
        let hv = emb(&[&[0.0, 1.0]]);
        let ht = InstructionEmbedding::new(vec![1.0]).unwrap();
        assert!(matches!(relevance(&hv, &ht), Err(DppError::Tensor(_))));
    }

    fn one_segment(
        frames: usize,
        per_frame: usize,
        d: usize,
        data: Vec<f32>,
    ) -> (VideoTokens, SegmentMap) {
        let v = VideoTokens::from_flat(frames, 1, per_frame, d, data).unwrap();
        let s = SegmentMap::from_boundaries(&v, &[0]).unwrap();
        (v, s)
    }

    #[test]
    fn kernel_with_unit_relevance_is_gram() {
        let (v, s) = one_segment(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let hv = v.alive_embeddings();
        let r = RelevanceVector {
            r: vec![1.0, 1.0],
            logits: vec![0.0, 0.0],
        };
        let k = build_kernel(&hv, &r, &s).unwrap().blocks[0].to_dense();
        assert_eq!(k.as_slice(), &[2.5, 5.5, 5.5, 12.5]);
    }

    #[test]
    fn kernel_modulation() {
        let (v, s) = one_segment(1, 2, 2, vec![2f32.sqrt(), 0.0, 0.0, 2f32.sqrt()]);
        let r = RelevanceVector {
            r: vec![1.0, 0.5],
            logits: vec![0.0, 0.0],
        };
        let k = build_kernel(&v.alive_embeddings(), &r, &s).unwrap().blocks[0].to_dense();
        let expect = [1.0, 0.0, 0.0, 0.25];
        for (a, b) in k.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_rejects_foreign_tokens() {
        let (v, s) = one_segment(1, 2, 1, vec![1.0, 1.0]);
        let hv = Embeddings::new(vec![0, 5], 1, vec![1.0, 1.0]).unwrap();
        let r = RelevanceVector {
            r: vec![1.0, 1.0],
            logits: vec![0.0; 2],
        };
        assert_eq!(
            build_kernel(&hv, &r, &s),
            Err(DppError::SegmentMismatch { id: 5 })
        );
        assert!(build_kernel(
            &v.alive_embeddings(),
            &RelevanceVector {
                r: vec![1.0],
                logits: vec![0.0]
            },
            &s
        )
        .is_err());
    }

    #[test]
    fn identity_kernel_ties() {
        let sel = greedy_map(&DenseKernel::from_diagonal(&[1.0, 1.0, 1.0]), 2).unwrap();
        assert_eq!(sel.picks, vec![0, 1]);
        assert_eq!(sel.log_det(), 0.0);
    }

    #[test]
    fn diagonal_kernel() {
        let sel = greedy_map(&DenseKernel::from_diagonal(&[4.0, 1.0, 9.0]), 2).unwrap();
        assert_eq!(sel.picks, vec![2, 0]);
        assert!((sel.log_det() - 36f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn correlated_pair_loses_to_isolated_item() {
        let k = DenseKernel::new(3, vec![1.0, 0.9, 0.0, 0.9, 1.0, 0.0, 0.0, 0.0, 0.5]);
        let sel = greedy_map(&k, 2).unwrap();
        assert_eq!(sel.picks, vec![0, 2]);
        assert_eq!(sel.pivots, vec![1.0, 0.5]);
    }

    #[test]
    fn budget_exceeded() {
        assert_eq!(
            greedy_map(&DenseKernel::from_diagonal(&[1.0]), 2),
            Err(DppError::BudgetExceeded { k: 2, n: 1 })
        );
        assert!(greedy_map(&DenseKernel::from_diagonal(&[]), 0)
            .unwrap()
            .picks
            .is_empty());
    }

    #[test]
    fn rank_deficiency_falls_back() {
        // rank-one kernel: after the first pick every gain is zero
        let k = DenseKernel::new(3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0]);
        let sel = greedy_map(&k, 3).unwrap();
        assert_eq!(sel.picks[0], 2);
        assert_eq!(sel.breakdown_at, Some(1));
        // fallback ranks by the diagonal: 4 before 1
        assert_eq!(sel.picks, vec![2, 1, 0]);
        assert_eq!(sel.log_det_trace.len(), 1);
    }

    #[test]
    fn psd_check() {
        let k = DenseKernel::new(2, vec![1.0, 0.5, 0.5, 1.0]);
        assert!(min_cholesky_pivot(&k) > 0.0);
        let k = DenseKernel::new(2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(min_cholesky_pivot(&k) < -1e-8);
    }

    #[test]
    fn prune_noop_and_single_pick() {
        let data: Vec<f32> = (0..8 * 3).map(|x| ((x * 7 % 5) as f32) - 2.0).collect();
        let v = VideoTokens::from_flat(2, 1, 4, 3, data).unwrap();
        let s = SegmentMap::from_boundaries(&v, &[0, 1]).unwrap();
        let hv = v.alive_embeddings();
        let ht = InstructionEmbedding::new(vec![1.0, -0.5, 0.25]).unwrap();
        let all = prune_tokens(&hv, &ht, &s, &SegmentRatios::uniform(0.0, 2)).unwrap();
        assert_eq!(all.kept, (0..8).collect::<Vec<_>>());

        let one = prune_tokens(&hv, &ht, &s, &SegmentRatios::uniform(0.75, 2)).unwrap();
        assert_eq!(
            one.segments
                .iter()
                .map(|s| s.kept.len())
                .collect::<Vec<_>>(),
            vec![1, 1]
        );
        let r = relevance(&hv, &ht).unwrap();
        for seg in &one.segments {
            let ids = &s.segments[seg.segment].tokens;
            let score = |id: usize| r.r[id].powi(2) * dot(hv.row(id), hv.row(id)) / 3.0;
            let best = *ids
                .iter()
                .max_by(|&&a, &&b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
                .unwrap();
            assert_eq!(seg.kept, vec![best]);
        }
    }

    #[test]
    fn prune_counts() {
        let data: Vec<f32> = (0..8 * 2).map(|x| (x as f32 * 0.37).sin()).collect();
        let v = VideoTokens::from_flat(2, 1, 4, 2, data).unwrap();
        let s = SegmentMap::from_boundaries(&v, &[0, 1]).unwrap();
        let ratios = SegmentRatios {
            base: 0.375,
            deviation: 0.0,
            ratios: vec![0.5, 0.25],
        };
        let ht = InstructionEmbedding::new(vec![1.0, 0.0]).unwrap();
        let sel = prune_tokens(&v.alive_embeddings(), &ht, &s, &ratios).unwrap();
        assert_eq!(sel.segments[0].kept.len(), 2);
        assert_eq!(sel.segments[1].kept.len(), 3);
        assert_eq!(sel.kept.len(), 5);
    }
}
