//! Numeric containers shared by every stage of the pruning pipeline.
//!
//! Scalars are stored as `f32` (the on-disk precision) and every reduction
//! (dot products, norms, means) is accumulated in `f64`.

use thiserror::Error;

/// Norms below this value are treated as degenerate.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {actual} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite scalar at flat offset {0}")]
    NonFinite(usize),
    #[error("frame {frame} has shape {found:?}, expected {expected:?}")]
    FrameShape {
        frame: usize,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("token id {id} out of range for {count} tokens")]
    TokenOutOfRange { id: usize, count: usize },
}

fn check_finite(data: &[f32]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(off) => Err(TensorError::NonFinite(off)),
        None => Ok(()),
    }
}

pub fn dot<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

pub fn norm<T: Copy + Into<f64>>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
///
/// Returns [`TensorError::ZeroNorm`] if either norm is below
/// [`ZERO_NORM_EPS`]; callers choose how to treat that case.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::DimMismatch(a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Err(TensorError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One frame's visual tokens: an `height × width` grid of `dim`-vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    frame_index: usize,
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenGrid {
    pub fn new(
        frame_index: usize,
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let expected = height * width * dim;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: vec![height, width, dim],
                expected,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self {
            frame_index,
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(frame_index: usize, height: usize, width: usize, dim: usize) -> Self {
        Self {
            frame_index,
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let off = (row * self.width + col) * self.dim;
        &self.data[off..off + self.dim]
    }
}

/// Grid position of a token: frame `t`, row `i`, column `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// A whole video's token stream.
///
/// Tokens are addressed by a flat id `t·H·W + i·W + j`. Merging clears
/// entries of `alive` but never reorders or removes storage, so ids stay
/// stable for the lifetime of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTokens {
    height: usize,
    width: usize,
    dim: usize,
    frames: Vec<TokenGrid>,
    alive: Vec<bool>,
}

impl VideoTokens {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        frames: Vec<TokenGrid>,
    ) -> Result<Self, TensorError> {
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != [height, width, dim] {
                return Err(TensorError::FrameShape {
                    frame: t,
                    expected: [height, width, dim],
                    found: f.shape(),
                });
            }
        }
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(t, mut f)| {
                f.frame_index = t;
                f
            })
            .collect::<Vec<_>>();
        let n = frames.len() * height * width;
        Ok(Self {
            height,
            width,
            dim,
            frames,
            alive: vec![true; n],
        })
    }

    /// Builds a video from a flat `[T, H, W, d]` buffer.
    pub fn from_flat(
        frames: usize,
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let per = height * width * dim;
        let expected = frames * per;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: vec![frames, height, width, dim],
                expected,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        let grids = if per == 0 {
            (0..frames)
                .map(|t| TokenGrid::zeros(t, height, width, dim))
                .collect()
        } else {
            data.chunks_exact(per)
                .enumerate()
                .map(|(t, c)| TokenGrid {
                    frame_index: t,
                    height,
                    width,
                    dim,
                    data: c.to_vec(),
                })
                .collect()
        };
        Self::new(height, width, dim, grids)
    }

    pub(crate) fn with_alive(mut self, alive: Vec<bool>) -> Self {
        debug_assert_eq!(alive.len(), self.alive.len());
        self.alive = alive;
        self
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    /// Total token slots `T·H·W`, alive or not.
    pub fn num_tokens(&self) -> usize {
        self.alive.len()
    }

    pub fn num_alive(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn frames(&self) -> &[TokenGrid] {
        &self.frames
    }

    pub fn alive_mask(&self) -> &[bool] {
        &self.alive
    }

    pub fn is_alive(&self, id: usize) -> bool {
        self.alive[id]
    }

    /// Alive token ids in ascending order.
    pub fn alive_ids(&self) -> Vec<usize> {
        self.alive
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.then_some(i))
            .collect()
    }

    pub fn token_id(&self, frame: usize, row: usize, col: usize) -> usize {
        (frame * self.height + row) * self.width + col
    }

    pub fn provenance(&self, id: usize) -> Provenance {
        let hw = self.tokens_per_frame();
        let frame = id / hw;
        let rem = id % hw;
        Provenance {
            frame,
            row: rem / self.width,
            col: rem % self.width,
        }
    }

    /// Embedding of token `id`, regardless of its alive flag.
    pub fn token(&self, id: usize) -> &[f32] {
        let p = self.provenance(id);
        self.frames[p.frame].token(p.row, p.col)
    }

    /// Concatenated `[T, H, W, d]` payload.
    pub fn flat_data(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_tokens() * self.dim);
        for f in &self.frames {
            out.extend_from_slice(&f.data);
        }
        out
    }

    /// Gathers the given tokens into a row matrix.
    pub fn gather(&self, ids: &[usize]) -> Result<Embeddings, TensorError> {
        let n = self.num_tokens();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id >= n {
                return Err(TensorError::TokenOutOfRange { id, count: n });
            }
            data.extend_from_slice(self.token(id));
        }
        Embeddings::new(ids.to_vec(), self.dim, data)
    }

    /// All alive tokens as a row matrix, in id order.
    pub fn alive_embeddings(&self) -> Embeddings {
        self.gather(&self.alive_ids())
            .expect("alive ids are always in range")
    }

    pub(crate) fn frames_mut(&mut self) -> &mut [TokenGrid] {
        &mut self.frames
    }
}

impl TokenGrid {
    pub(crate) fn token_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let off = (row * self.width + col) * self.dim;
        &mut self.data[off..off + self.dim]
    }
}

/// Embedding of the last instruction token.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEmbedding {
    data: Vec<f32>,
}

impl InstructionEmbedding {
    pub fn new(data: Vec<f32>) -> Result<Self, TensorError> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn check_dim(&self, dim: usize) -> Result<(), TensorError> {
        if self.dim() != dim {
            return Err(TensorError::DimMismatch(self.dim(), dim));
        }
        Ok(())
    }
}

/// A row matrix of token embeddings tagged with their global token ids.
///
/// This is the `H_v` handed to relevance scoring and kernel construction at
/// each stage boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    ids: Vec<usize>,
    dim: usize,
    data: Vec<f32>,
}

impl Embeddings {
    pub fn new(ids: Vec<usize>, dim: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = ids.len() * dim;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: vec![ids.len(), dim],
                expected,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.len()).map(move |i| self.row(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0f32, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f32, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_and_dims() {
        assert_eq!(
            cosine_similarity(&[0.0f32, 0.0], &[1.0, 0.0]),
            Err(TensorError::ZeroNorm)
        );
        assert_eq!(
            cosine_similarity(&[1.0f32], &[1.0, 0.0]),
            Err(TensorError::DimMismatch(1, 2))
        );
    }

    #[test]
    fn cosine_clamps_roundoff() {
        let a = [0.1f64, 0.2, 0.3];
        let c = cosine_similarity(&a, &a).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn grid_rejects_bad_length_and_nan() {
        assert!(matches!(
            TokenGrid::new(0, 2, 2, 3, vec![0.0; 11]),
            Err(TensorError::LengthMismatch { expected: 12, .. })
        ));
        let mut d = vec![0.0; 12];
        d[5] = f32::NAN;
        assert_eq!(
            TokenGrid::new(0, 2, 2, 3, d),
            Err(TensorError::NonFinite(5))
        );
        assert!(InstructionEmbedding::new(vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn video_rejects_mixed_shapes() {
        let a = TokenGrid::zeros(0, 2, 2, 3);
        let b = TokenGrid::zeros(1, 2, 1, 3);
        assert!(matches!(
            VideoTokens::new(2, 2, 3, vec![a, b]),
            Err(TensorError::FrameShape { frame: 1, .. })
        ));
    }

    #[test]
    fn provenance_is_a_bijection() {
        let v = VideoTokens::from_flat(3, 2, 4, 1, (0..24).map(|x| x as f32).collect()).unwrap();
        assert_eq!(v.num_tokens(), 24);
        for id in 0..24 {
            let p = v.provenance(id);
            assert_eq!(v.token_id(p.frame, p.row, p.col), id);
            assert_eq!(v.token(id), &[id as f32]);
        }
    }

    #[test]
    fn gather_rows() {
        let v = VideoTokens::from_flat(2, 1, 2, 2, (0..8).map(|x| x as f32).collect()).unwrap();
        let e = v.gather(&[3, 0]).unwrap();
        assert_eq!(e.row(0), &[6.0, 7.0]);
        assert_eq!(e.row(1), &[0.0, 1.0]);
        assert!(v.gather(&[4]).is_err());
    }
}
