//! Merge-ratio-guided temporal segmentation.
//!
//! Each grid position is compared with the same position in the previous
//! frame. The `⌊R_merge·N⌋` most similar (position, frame) entries of the
//! whole video form one global Top-K set; a frame whose share of Top-K
//! positions falls below `β` opens a new segment.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{cosine_similarity, VideoTokens};

pub const DEFAULT_BETA: f64 = 0.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("merge ratio {0} outside [0, 1)")]
    InvalidMergeRatio(f64),
    #[error("threshold beta {0} outside [0, 1]")]
    InvalidBeta(f64),
    #[error("merge budget K={k} exceeds the {available} inter-frame entries")]
    BudgetTooLarge { k: usize, available: usize },
    #[error("mask shape {found:?} does not match video shape {expected:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("invalid boundaries {0:?}: must start at 0, be strictly increasing and lie inside the video")]
    InvalidBoundaries(Vec<usize>),
}

/// `⌊ratio·n⌋`, tolerant of round-off just below an integer.
pub fn merge_budget(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Per-position cosine similarity of every frame with its predecessor.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStack {
    frames: usize,
    height: usize,
    width: usize,
    // frames 1..T, each H·W values
    values: Vec<f64>,
}

impl SimilarityStack {
    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    /// `S_t(i, j)` for `t ≥ 1`.
    pub fn get(&self, t: usize, row: usize, col: usize) -> f64 {
        assert!(t >= 1 && t < self.frames, "frame {t} has no similarity map");
        self.values[((t - 1) * self.height + row) * self.width + col]
    }

    pub fn frame_map(&self, t: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.values[(t - 1) * hw..t * hw]
    }

    /// Number of (position, frame) entries with a predecessor.
    pub fn num_entries(&self) -> usize {
        self.values.len()
    }
}

pub fn similarity_stack(video: &VideoTokens) -> Result<SimilarityStack, SegmentationError> {
    let t_count = video.num_frames();
    if t_count == 0 {
        return Err(SegmentationError::EmptyVideo);
    }
    let (h, w) = (video.height(), video.width());
    let frames = video.frames();
    let values: Vec<f64> = (1..t_count)
        .into_par_iter()
        .map(|t| {
            let mut map = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    let s = cosine_similarity(frames[t].token(i, j), frames[t - 1].token(i, j))
                        .unwrap_or(0.0);
                    map.push(s);
                }
            }
            map
        })
        .collect::<Vec<_>>()
        .concat();
    Ok(SimilarityStack {
        frames: t_count,
        height: h,
        width: w,
        values,
    })
}

/// Global Top-K membership over token slots `(t, i, j)`; frame 0 is never marked.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKMask {
    frames: usize,
    height: usize,
    width: usize,
    marked: Vec<bool>,
    k: usize,
}

impl TopKMask {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            marked: vec![false; frames * height * width],
            k: 0,
        }
    }

    #[cfg(test)]
    pub(crate) fn from_marked(
        frames: usize,
        height: usize,
        width: usize,
        marked: Vec<bool>,
    ) -> Self {
        debug_assert_eq!(marked.len(), frames * height * width);
        let k = marked.iter().filter(|m| **m).count();
        Self {
            frames,
            height,
            width,
            marked,
            k,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_marked(&self, t: usize, row: usize, col: usize) -> bool {
        self.marked[(t * self.height + row) * self.width + col]
    }

    /// Marked flags indexed by flat token id.
    pub fn as_slice(&self) -> &[bool] {
        &self.marked
    }

    pub fn marked_in_frame(&self, t: usize) -> usize {
        let hw = self.height * self.width;
        self.marked[t * hw..(t + 1) * hw]
            .iter()
            .filter(|m| **m)
            .count()
    }
}

/// Marks the `⌊merge_ratio·N⌋` largest similarities across all frames and
/// positions jointly. Ties go to the smaller `(t, i, j)`.
pub fn global_topk_mask(
    stack: &SimilarityStack,
    merge_ratio: f64,
) -> Result<TopKMask, SegmentationError> {
    if !(0.0..1.0).contains(&merge_ratio) {
        return Err(SegmentationError::InvalidMergeRatio(merge_ratio));
    }
    let [t, h, w] = stack.shape();
    let hw = h * w;
    let n = t * hw;
    let k = merge_budget(merge_ratio, n);
    let available = stack.num_entries();
    if k > available {
        return Err(SegmentationError::BudgetTooLarge { k, available });
    }
    let mut mask = TopKMask::empty(t, h, w);
    if k == 0 {
        return Ok(mask);
    }
    // flat index into `values` is already ascending (t, i, j)
    let mut order: Vec<usize> = (0..available).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        stack.values[*b].total_cmp(&stack.values[*a]).then(a.cmp(b))
    };
    if k < available {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    for &idx in &order[..k] {
        mask.marked[hw + idx] = true;
    }
    mask.k = k;
    Ok(mask)
}

/// Fraction of frame `t`'s positions that are in the global Top-K.
pub fn overlap_ratio(mask: &TopKMask, t: usize) -> f64 {
    let hw = mask.height * mask.width;
    if hw == 0 {
        return 0.0;
    }
    mask.marked_in_frame(t) as f64 / hw as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// Mean of the segment's alive token embeddings.
    pub g: Vec<f64>,
    #[serde(skip)]
    pub tokens: Vec<usize>,
}

impl Segment {
    pub fn num_frames(&self) -> usize {
        self.end - self.start
    }

    pub fn contains_frame(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

/// Contiguous frame segments covering the video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub boundaries: Vec<usize>,
    pub segments: Vec<Segment>,
    #[serde(skip)]
    tokens_per_frame: usize,
}

impl SegmentMap {
    /// Builds segments starting at each boundary frame, pooling the video's
    /// alive tokens.
    pub fn from_boundaries(
        video: &VideoTokens,
        boundaries: &[usize],
    ) -> Result<Self, SegmentationError> {
        let t_count = video.num_frames();
        if t_count == 0 {
            return Err(SegmentationError::EmptyVideo);
        }
        let valid = boundaries.first() == Some(&0)
            && boundaries.windows(2).all(|w| w[0] < w[1])
            && boundaries.last().is_some_and(|&b| b < t_count);
        if !valid {
            return Err(SegmentationError::InvalidBoundaries(boundaries.to_vec()));
        }
        let hw = video.tokens_per_frame();
        let d = video.dim();
        let segments = boundaries
            .iter()
            .enumerate()
            .map(|(m, &start)| {
                let end = boundaries.get(m + 1).copied().unwrap_or(t_count);
                let tokens: Vec<usize> = (start * hw..end * hw)
                    .filter(|&id| video.is_alive(id))
                    .collect();
                let mut g = vec![0.0f64; d];
                for &id in &tokens {
                    for (acc, &x) in g.iter_mut().zip(video.token(id)) {
                        *acc += x as f64;
                    }
                }
                if !tokens.is_empty() {
                    let inv = 1.0 / tokens.len() as f64;
                    g.iter_mut().for_each(|x| *x *= inv);
                }
                Segment {
                    start,
                    end,
                    g,
                    tokens,
                }
            })
            .collect();
        Ok(Self {
            boundaries: boundaries.to_vec(),
            segments,
            tokens_per_frame: hw,
        })
    }

    #[cfg(test)]
    pub(crate) fn from_parts(
        boundaries: Vec<usize>,
        segments: Vec<Segment>,
        tokens_per_frame: usize,
    ) -> Self {
        Self {
            boundaries,
            segments,
            tokens_per_frame,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn segment_of_frame(&self, t: usize) -> Option<usize> {
        if t >= self.num_frames() {
            return None;
        }
        Some(self.boundaries.partition_point(|&b| b <= t) - 1)
    }

    pub fn segment_of_token(&self, id: usize) -> Option<usize> {
        if self.tokens_per_frame == 0 {
            return None;
        }
        self.segment_of_frame(id / self.tokens_per_frame)
    }

    /// Alive token counts per segment.
    pub fn token_counts(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.tokens.len()).collect()
    }
}

/// Cuts the video before every frame whose overlap ratio is below `beta`.
pub fn segment(
    video: &VideoTokens,
    mask: &TopKMask,
    beta: f64,
) -> Result<SegmentMap, SegmentationError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(SegmentationError::InvalidBeta(beta));
    }
    let expected = [video.num_frames(), video.height(), video.width()];
    if mask.shape() != expected {
        return Err(SegmentationError::ShapeMismatch {
            expected,
            found: mask.shape(),
        });
    }
    let boundaries: Vec<usize> = std::iter::once(0)
        .chain((1..video.num_frames()).filter(|&t| overlap_ratio(mask, t) < beta))
        .collect();
    SegmentMap::from_boundaries(video, &boundaries)
}
