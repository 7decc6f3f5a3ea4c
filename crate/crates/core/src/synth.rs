//! Seeded synthetic videos with planted segment boundaries.
//!
//! Each block of frames repeats one random token grid plus small noise. At
//! every block boundary, each grid position jumps to a vector orthogonal to
//! the previous block's vector at that position.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{InstructionEmbedding, VideoTokens};

pub const DEFAULT_NOISE: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("bad shape: {0}")]
    BadShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub blocks: usize,
    pub seed: u64,
    /// Per-channel noise standard deviation relative to a unit-RMS token.
    pub noise: f64,
}

impl SyntheticConfig {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        dim: usize,
        blocks: usize,
        seed: u64,
    ) -> Self {
        Self {
            frames,
            height,
            width,
            dim,
            blocks,
            seed,
            noise: DEFAULT_NOISE,
        }
    }
}

/// Sidecar describing where the generator cut the video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBoundaries {
    pub boundaries: Vec<usize>,
    pub frames: usize,
    pub grid: [usize; 2],
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video: VideoTokens,
    pub instruction: InstructionEmbedding,
    pub planted: PlantedBoundaries,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Scales `v` to norm `√d`, so that `v·v / d = 1`.
fn rescale(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = (v.len() as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= target / norm);
}

fn orthogonal_to(rng: &mut ChaCha8Rng, prev: &[f64]) -> Vec<f64> {
    let pp: f64 = prev.iter().map(|x| x * x).sum();
    loop {
        let mut v = gaussian(rng, prev.len());
        let proj = v.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() / pp;
        v.iter_mut().zip(prev).for_each(|(a, b)| *a -= proj * b);
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            rescale(&mut v);
            return v;
        }
    }
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticVideo, SynthError> {
    let SyntheticConfig {
        frames,
        height,
        width,
        dim,
        blocks,
        seed,
        noise,
    } = *cfg;
    if frames == 0 || height == 0 || width == 0 || dim == 0 {
        return Err(SynthError::BadShape(format!(
            "frames, grid and dim must be positive (got {frames} frames, {height}x{width}, dim {dim})"
        )));
    }
    if blocks == 0 || blocks > frames {
        return Err(SynthError::BadShape(format!(
            "blocks must be in 1..={frames}, got {blocks}"
        )));
    }
    if blocks > 1 && dim < 2 {
        return Err(SynthError::BadShape(
            "orthogonal block jumps need dim >= 2".into(),
        ));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(SynthError::BadShape(format!(
            "noise {noise} must be non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut cuts: Vec<usize> = index::sample(&mut rng, frames - 1, blocks - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut boundaries = vec![0];
    boundaries.extend(cuts);

    let positions = height * width;
    let mut base: Vec<Vec<f64>> = (0..positions)
        .map(|_| {
            let mut v = gaussian(&mut rng, dim);
            rescale(&mut v);
            v
        })
        .collect();
    let mut data = Vec::with_capacity(frames * positions * dim);
    let mut block = 0;
    for t in 0..frames {
        if block + 1 < blocks && boundaries[block + 1] == t {
            block += 1;
            base = base
                .iter()
                .map(|prev| orthogonal_to(&mut rng, prev))
                .collect();
        }
        for u in &base {
            for &x in u {
                let eps: f64 = rng.sample(StandardNormal);
                data.push((x + noise * eps) as f32);
            }
        }
    }
    let video = VideoTokens::from_flat(frames, height, width, dim, data)
        .expect("generator produces a well-formed video");
    let instruction = InstructionEmbedding::new(
        gaussian(&mut rng, dim)
            .into_iter()
            .map(|x| x as f32)
            .collect(),
    )
    .expect("finite");
    Ok(SyntheticVideo {
        video,
        instruction,
        planted: PlantedBoundaries {
            boundaries,
            frames,
            grid: [height, width],
            dim,
            seed,
        },
    })
}

/// Merge ratio that sends exactly the within-block similarity entries into
/// the global Top-K: `(T − B) / T`.
pub fn within_block_merge_ratio(frames: usize, blocks: usize) -> f64 {
    (frames - blocks) as f64 / frames as f64
}
