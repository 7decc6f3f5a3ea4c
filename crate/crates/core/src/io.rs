//! HVTK binary tensor files and atomic output helpers.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! magic "HVTK" | version: u16 = 1 | kind: u8 | rank: u8 | dims: rank × u32 | payload: Π(dims) × f32
//! ```
//!
//! `kind` is 0 for a single frame grid `[H, W, d]`, 1 for a video
//! `[T, H, W, d]` and 2 for a vector `[d]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{InstructionEmbedding, TensorError, TokenGrid, VideoTokens};

pub const MAGIC: &[u8; 4] = b"HVTK";
pub const VERSION: u16 = 1;

const KIND_GRID: u8 = 0;
const KIND_VIDEO: u8 = 1;
const KIND_VECTOR: u8 = 2;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("header field `magic`: expected \"HVTK\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("header field `version`: unsupported version {0}")]
    BadVersion(u16),
    #[error("header field `kind`: unknown tensor kind {0}")]
    BadKind(u8),
    #[error("header field `rank`: kind {kind} requires rank {expected}, found {found}")]
    BadRank { kind: u8, expected: u8, found: u8 },
    #[error("header field `dims`: shape {0:?} overflows the addressable payload size")]
    ShapeOverflow(Vec<u32>),
    #[error("header field `{field}`: file ends after {available} bytes, {needed} required")]
    TruncatedPayload {
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("payload: {extra} trailing bytes after declared payload")]
    TrailingBytes { extra: usize },
    #[error("payload: {0}")]
    Invalid(#[from] TensorError),
    #[error("expected a {expected} tensor, found a {found} tensor")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Any tensor that can live in an HVTK file.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Grid(TokenGrid),
    Video(VideoTokens),
    Vector(InstructionEmbedding),
}

impl Tensor {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Tensor::Grid(_) => "grid",
            Tensor::Video(_) => "video",
            Tensor::Vector(_) => "vector",
        }
    }

    pub fn into_video(self) -> Result<VideoTokens, FormatError> {
        match self {
            Tensor::Video(v) => Ok(v),
            other => Err(FormatError::WrongKind {
                expected: "video",
                found: other.kind_name(),
            }),
        }
    }

    pub fn into_vector(self) -> Result<InstructionEmbedding, FormatError> {
        match self {
            Tensor::Vector(v) => Ok(v),
            other => Err(FormatError::WrongKind {
                expected: "vector",
                found: other.kind_name(),
            }),
        }
    }
}

impl From<TokenGrid> for Tensor {
    fn from(g: TokenGrid) -> Self {
        Tensor::Grid(g)
    }
}

impl From<VideoTokens> for Tensor {
    fn from(v: VideoTokens) -> Self {
        Tensor::Video(v)
    }
}

impl From<InstructionEmbedding> for Tensor {
    fn from(v: InstructionEmbedding) -> Self {
        Tensor::Vector(v)
    }
}

fn header(kind: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).expect("tensor dimension exceeds u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

fn push_payload(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a tensor to HVTK bytes.
///
/// The alive mask of a video is not part of the format; every token is
/// written with its current value.
pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    match tensor {
        Tensor::Grid(g) => {
            let mut out = header(KIND_GRID, &[g.height(), g.width(), g.dim()]);
            push_payload(&mut out, g.data());
            out
        }
        Tensor::Video(v) => {
            let mut out = header(
                KIND_VIDEO,
                &[v.num_frames(), v.height(), v.width(), v.dim()],
            );
            for f in v.frames() {
                push_payload(&mut out, f.data());
            }
            out
        }
        Tensor::Vector(e) => {
            let mut out = header(KIND_VECTOR, &[e.dim()]);
            push_payload(&mut out, e.data());
            out
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], FormatError> {
        let needed = self
            .pos
            .checked_add(n)
            .ok_or(FormatError::TruncatedPayload {
                field,
                needed: usize::MAX,
                available: self.buf.len(),
            })?;
        if needed > self.buf.len() {
            return Err(FormatError::TruncatedPayload {
                field,
                needed,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..needed];
        self.pos = needed;
        Ok(s)
    }
}

/// Parses HVTK bytes.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let kind = cur.take(1, "kind")?[0];
    let rank = cur.take(1, "rank")?[0];
    let expected_rank = match kind {
        KIND_GRID => 3,
        KIND_VIDEO => 4,
        KIND_VECTOR => 1,
        k => return Err(FormatError::BadKind(k)),
    };
    if rank != expected_rank {
        return Err(FormatError::BadRank {
            kind,
            expected: expected_rank,
            found: rank,
        });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(cur.take(4, "dims")?.try_into().unwrap()));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|c| c.checked_mul(4).map(|_| c))
        .ok_or_else(|| FormatError::ShapeOverflow(dims.clone()))?;
    let payload = cur.take(count * 4, "payload")?;
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            extra: bytes.len() - cur.pos,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let d: Vec<usize> = dims.iter().map(|&x| x as usize).collect();
    Ok(match kind {
        KIND_GRID => Tensor::Grid(TokenGrid::new(0, d[0], d[1], d[2], data)?),
        KIND_VIDEO => Tensor::Video(VideoTokens::from_flat(d[0], d[1], d[2], d[3], data)?),
        _ => Tensor::Vector(InstructionEmbedding::new(data)?),
    })
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FormatError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    decode_tensor(&bytes)
}

pub fn write_tensor_file(tensor: &Tensor, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_atomic(path, &encode_tensor(tensor))
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), FormatError> {
    let path = path.as_ref();
    let io_err = |source| FormatError::IoFailure {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline; field order follows struct order.
pub fn to_json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types always serialize");
    out.push(b'\n');
    out
}

pub fn write_json<T: serde::Serialize>(
    value: &T,
    path: impl AsRef<Path>,
) -> Result<(), FormatError> {
    write_atomic(path, &to_json_bytes(value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_roundtrip_is_byte_identical() {
        let g = TokenGrid::zeros(0, 2, 2, 3);
        let bytes = encode_tensor(&g.clone().into());
        assert_eq!(bytes.len(), 8 + 12 + 48);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back, Tensor::Grid(g));
        assert_eq!(encode_tensor(&back), bytes);
    }

    #[test]
    fn small_grid_values_survive() {
        let g = TokenGrid::new(0, 1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&g.into());
        let payload = &bytes[bytes.len() - 16..];
        let expected: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        assert_eq!(payload, expected.as_slice());
        match decode_tensor(&bytes).unwrap() {
            Tensor::Grid(g) => assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_video_is_header_only() {
        let v = VideoTokens::new(2, 2, 3, vec![]).unwrap();
        let bytes = encode_tensor(&v.clone().into());
        assert_eq!(bytes.len(), 8 + 16);
        assert_eq!(decode_tensor(&bytes).unwrap(), Tensor::Video(v));
    }

    #[test]
    fn video_payload_size() {
        let v = VideoTokens::from_flat(3, 1, 1, 2, vec![0.5; 6]).unwrap();
        let bytes = encode_tensor(&v.into());
        assert_eq!(bytes.len() - (8 + 16), 24);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_tensor(&TokenGrid::zeros(0, 1, 1, 1).into());
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic(m) if &m == b"XXXX"));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn bad_version_and_kind() {
        let mut bytes = encode_tensor(&TokenGrid::zeros(0, 1, 1, 1).into());
        bytes[4] = 2;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(FormatError::BadVersion(2))
        ));
        let mut bytes = encode_tensor(&TokenGrid::zeros(0, 1, 1, 1).into());
        bytes[6] = 9;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(FormatError::BadKind(9))
        ));
        let mut bytes = encode_tensor(&TokenGrid::zeros(0, 1, 1, 1).into());
        bytes[7] = 2;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(FormatError::BadRank { .. })
        ));
    }

    #[test]
    fn truncated_payload_names_field() {
        let bytes = encode_tensor(&TokenGrid::zeros(0, 2, 2, 2).into());
        let err = decode_tensor(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(
            err,
            FormatError::TruncatedPayload {
                field: "payload",
                ..
            }
        ));
        let err = decode_tensor(&bytes[..10]).unwrap_err();
        assert!(matches!(
            err,
            FormatError::TruncatedPayload { field: "dims", .. }
        ));
        let err = decode_tensor(&bytes[..3]).unwrap_err();
        assert!(matches!(
            err,
            FormatError::TruncatedPayload { field: "magic", .. }
        ));
    }

    #[test]
    fn shape_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(KIND_VIDEO);
        bytes.push(4);
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode_tensor(&bytes),
            Err(FormatError::ShapeOverflow(_))
        ));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = encode_tensor(&TokenGrid::zeros(0, 1, 1, 1).into());
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_tensor(&bytes),
            Err(FormatError::Invalid(_))
        ));
    }

    #[test]
    fn files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let v: Tensor =
            VideoTokens::from_flat(2, 1, 2, 2, (0..8).map(|x| x as f32 * 0.25).collect())
                .unwrap()
                .into();
        let a = dir.path().join("a.hvtk");
        let b = dir.path().join("b.hvtk");
        write_tensor_file(&v, &a).unwrap();
        write_tensor_file(&v, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(read_tensor_file(&a).unwrap(), v);
    }
}
