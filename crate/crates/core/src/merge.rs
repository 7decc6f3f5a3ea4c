//! Temporal merging of spatially static tokens.
//!
//! A marked Top-K entry at `(t, i, j)` links frame `t` to frame `t − 1` at
//! position `(i, j)`. A maximal chain of marked entries starting at `t₀ + 1`
//! forms a run over frames `t₀ ..= t₀ + ℓ − 1`; the anchor token at `t₀`
//! takes the mean of the run and the followers are dropped.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::segmentation::TopKMask;
use crate::tensor::VideoTokens;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("plan shape {plan:?} does not match video shape {video:?}")]
    PlanMismatch { plan: [usize; 4], video: [usize; 4] },
    #[error("mask shape {mask:?} does not match video shape {video:?}")]
    MaskMismatch { mask: [usize; 3], video: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeRun {
    pub row: usize,
    pub col: usize,
    /// Anchor frame `t₀`.
    pub start: usize,
    /// Frames in the run, anchor included.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    shape: [usize; 4],
    runs: Vec<MergeRun>,
    merged: Vec<Vec<f32>>,
    dropped: Vec<usize>,
}

impl MergePlan {
    pub fn runs(&self) -> &[MergeRun] {
        &self.runs
    }

    /// Mean embedding for each run, aligned with [`Self::runs`].
    pub fn merged_values(&self) -> &[Vec<f32>] {
        &self.merged
    }

    /// Dropped token ids, ascending.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn survivors(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2] - self.dropped.len()
    }

    pub fn stats(&self) -> MergeStats {
        let max_run_len = self.runs.iter().map(|r| r.len).max().unwrap_or(0);
        let mut histogram = vec![0usize; max_run_len + 1];
        for r in &self.runs {
            histogram[r.len] += 1;
        }
        MergeStats {
            tokens: self.shape[0] * self.shape[1] * self.shape[2],
            runs: self.runs.len(),
            dropped: self.dropped.len(),
            survivors: self.survivors(),
            max_run_len,
            mean_run_len: if self.runs.is_empty() {
                0.0
            } else {
                self.runs.iter().map(|r| r.len).sum::<usize>() as f64 / self.runs.len() as f64
            },
            run_len_histogram: histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeStats {
    pub tokens: usize,
    pub runs: usize,
    pub dropped: usize,
    pub survivors: usize,
    pub max_run_len: usize,
    pub mean_run_len: f64,
    /// `run_len_histogram[ℓ]` counts runs of length `ℓ`.
    pub run_len_histogram: Vec<usize>,
}

fn video_shape(video: &VideoTokens) -> [usize; 4] {
    [
        video.num_frames(),
        video.height(),
        video.width(),
        video.dim(),
    ]
}

pub fn plan_merge(video: &VideoTokens, mask: &TopKMask) -> Result<MergePlan, MergeError> {
    let shape = video_shape(video);
    let [t_count, h, w, d] = shape;
    if mask.shape() != [t_count, h, w] {
        return Err(MergeError::MaskMismatch {
            mask: mask.shape(),
            video: [t_count, h, w],
        });
    }
    let per_position: Vec<Vec<(MergeRun, Vec<f32>)>> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (row, col) = (p / w, p % w);
            let mut out = Vec::new();
            let mut t = 1;
            while t < t_count {
                if !mask.is_marked(t, row, col) {
                    t += 1;
                    continue;
                }
                let start = t - 1;
                while t < t_count && mask.is_marked(t, row, col) {
                    t += 1;
                }
                let len = t - start;
                let mut acc = vec![0.0f64; d];
                for f in start..t {
                    for (a, &x) in acc.iter_mut().zip(video.frames()[f].token(row, col)) {
                        *a += x as f64;
                    }
                }
                let mean = acc.iter().map(|a| (a / len as f64) as f32).collect();
                out.push((
                    MergeRun {
                        row,
                        col,
                        start,
                        len,
                    },
                    mean,
                ));
            }
            out
        })
        .collect();

    let mut runs = Vec::new();
    let mut merged = Vec::new();
    let mut dropped = Vec::new();
    for (run, mean) in per_position.into_iter().flatten() {
        for f in run.start + 1..run.start + run.len {
            dropped.push(video.token_id(f, run.row, run.col));
        }
        runs.push(run);
        merged.push(mean);
    }
    dropped.sort_unstable();
    Ok(MergePlan {
        shape,
        runs,
        merged,
        dropped,
    })
}

/// Writes run means into anchor tokens and clears the followers' alive flags.
pub fn apply_merge(video: &VideoTokens, plan: &MergePlan) -> Result<VideoTokens, MergeError> {
    let shape = video_shape(video);
    if plan.shape != shape {
        return Err(MergeError::PlanMismatch {
            plan: plan.shape,
            video: shape,
        });
    }
    let mut alive = video.alive_mask().to_vec();
    for &id in &plan.dropped {
        alive[id] = false;
    }
    let mut out = video.clone();
    let frames = out.frames_mut();
    for (run, mean) in plan.runs.iter().zip(&plan.merged) {
        frames[run.start]
            .token_mut(run.row, run.col)
            .copy_from_slice(mean);
    }
    Ok(out.with_alive(alive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{global_topk_mask, similarity_stack};

    fn mask_1x1(frames: usize, marked: &[usize]) -> TopKMask {
        let flags = (0..frames).map(|t| marked.contains(&t)).collect();
        TopKMask::from_marked(frames, 1, 1, flags)
    }

    #[test]
    fn empty_mask_is_identity() {
        let v = VideoTokens::from_flat(3, 1, 2, 2, (0..12).map(|x| x as f32).collect()).unwrap();
        let m = TopKMask::empty(3, 1, 2);
        let plan = plan_merge(&v, &m).unwrap();
        assert!(plan.runs().is_empty());
        assert_eq!(plan.survivors(), 6);
        assert_eq!(apply_merge(&v, &plan).unwrap(), v);
    }

    #[test]
    fn single_run_of_four() {
        let m = mask_1x1(5, &[1, 2, 3]);
        let v = VideoTokens::from_flat(5, 1, 1, 2, vec![0.0; 10]).unwrap();
        let plan = plan_merge(&v, &m).unwrap();
        assert_eq!(
            plan.runs(),
            &[MergeRun {
                row: 0,
                col: 0,
                start: 0,
                len: 4
            }]
        );
        assert_eq!(plan.dropped(), &[1, 2, 3]);
    }

    #[test]
    fn gap_splits_runs() {
        let m = mask_1x1(4, &[1, 3]);
        let v = VideoTokens::from_flat(4, 1, 1, 2, vec![0.0; 8]).unwrap();
        let plan = plan_merge(&v, &m).unwrap();
        let lens: Vec<(usize, usize)> = plan.runs().iter().map(|r| (r.start, r.len)).collect();
        assert_eq!(lens, vec![(0, 2), (2, 2)]);
        assert_eq!(plan.dropped(), &[1, 3]);
    }

    #[test]
    fn anchor_takes_mean() {
        let v = VideoTokens::from_flat(2, 1, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = mask_1x1(2, &[1]);
        let plan = plan_merge(&v, &m).unwrap();
        let out = apply_merge(&v, &plan).unwrap();
        assert_eq!(out.token(0), &[0.5, 0.5]);
        assert!(!out.is_alive(1));
        assert_eq!(out.num_alive(), 1);
    }

    #[test]
    fn identical_run_keeps_value() {
        let v = VideoTokens::from_flat(3, 1, 1, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]).unwrap();
        let s = similarity_stack(&v).unwrap();
        let m = global_topk_mask(&s, 2.0 / 3.0).unwrap();
        let out = apply_merge(&v, &plan_merge(&v, &m).unwrap()).unwrap();
        assert_eq!(out.token(0), &[0.3, 0.7]);
        assert_eq!(out.alive_ids(), vec![0]);
    }

    #[test]
    fn sixteen_tokens_quarter_ratio() {
        let data: Vec<f32> = (0..16 * 3).map(|x| ((x * 37 % 11) as f32) - 5.0).collect();
        let v = VideoTokens::from_flat(4, 2, 2, 3, data).unwrap();
        let s = similarity_stack(&v).unwrap();
        let m = global_topk_mask(&s, 0.25).unwrap();
        let marked = m.as_slice().iter().filter(|x| **x).count();
        assert_eq!(marked, 4);
        let out = apply_merge(&v, &plan_merge(&v, &m).unwrap()).unwrap();
        assert_eq!(out.num_alive(), 12);
    }

    #[test]
    fn shape_mismatch() {
        let v = VideoTokens::from_flat(2, 1, 1, 1, vec![1.0, 1.0]).unwrap();
        let w = VideoTokens::from_flat(3, 1, 1, 1, vec![1.0; 3]).unwrap();
        let plan = plan_merge(&v, &TopKMask::empty(2, 1, 1)).unwrap();
        assert!(matches!(
            apply_merge(&w, &plan),
            Err(MergeError::PlanMismatch { .. })
        ));
        assert!(matches!(
            plan_merge(&w, &TopKMask::empty(2, 1, 1)),
            Err(MergeError::MaskMismatch { .. })
        ));
    }
}
