//! `.mbt` trace codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MBTR" | version u16 | T H W Ck Cv M: u32
//! M x (object id u32, entry frame u32)
//! T x ( keys: H*W*Ck f32 | M x values: H*W*Cv f32 | labels: H*W u8 )
//! ```
//!
//! Value grids follow header object order. The decoder checks the full
//! byte length against the header before reading any payload.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::simstream::Sequence;
use crate::types::{FeatureGrid, FrameFeatures, GridError, ObjectId};

pub const TRACE_MAGIC: [u8; 4] = *b"MBTR";
pub const TRACE_VERSION: u16 = 1;
pub const TRACE_EXTENSION: &str = "mbt";
const FIXED_HEADER: usize = 4 + 2 + 6 * 4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic {0:?}, expected \"MBTR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {0}, expected {TRACE_VERSION}")]
    UnsupportedVersion(u16),
    #[error("truncated trace: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trace has {extra} trailing bytes after {expected} bytes of payload")]
    TrailingBytes { expected: u64, extra: u64 },
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("non-finite value in frame {frame}")]
    NonFinite { frame: u64 },
    #[error("label {label} in frame {frame} names no declared object")]
    InvalidLabel { frame: u64, label: u8 },
    #[error("sequence cannot be encoded: {0}")]
    Unencodable(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Header {
    frames: u32,
    height: u32,
    width: u32,
    c_key: u32,
    c_value: u32,
    objects: Vec<(ObjectId, u32)>,
}

impl Header {
    fn frame_bytes(&self) -> Option<u64> {
        let positions = u64::from(self.height).checked_mul(u64::from(self.width))?;
        let floats = u64::from(self.c_key)
            .checked_add(u64::from(self.c_value).checked_mul(self.objects.len() as u64)?)?;
        positions.checked_mul(floats)?.checked_mul(4)?.checked_add(positions)
    }

    fn total_bytes(&self) -> Option<u64> {
        let head = (FIXED_HEADER + 8 * self.objects.len()) as u64;
        self.frame_bytes()?.checked_mul(u64::from(self.frames))?.checked_add(head)
    }
}

/// Serializes `seq` into the trace layout.
pub fn encode_trace(seq: &Sequence<f32>) -> Result<Vec<u8>, TraceError> {
    let first = seq.frames.first().ok_or(TraceError::Unencodable("sequence has no frames"))?;
    let to_u32 = |v: usize, what| u32::try_from(v).map_err(|_| TraceError::Unencodable(what));
    if seq.labels.len() != seq.frames.len() {
        return Err(TraceError::Unencodable("label map count differs from frame count"));
    }
    let (h, w) = first.dims();
    let objects: Vec<ObjectId> = seq.objects();
    let c_value = seq.c_value().unwrap_or(0);
    let header = Header {
        frames: to_u32(seq.frames.len(), "too many frames")?,
        height: to_u32(h, "height exceeds u32")?,
        width: to_u32(w, "width exceeds u32")?,
        c_key: to_u32(first.keys.channels(), "key channels exceed u32")?,
        c_value: to_u32(c_value, "value channels exceed u32")?,
        objects: seq
            .entries
            .iter()
            .map(|(&o, &e)| Ok((o, u32::try_from(e).map_err(|_| TraceError::Unencodable("entry frame exceeds u32"))?)))
            .collect::<Result<_, TraceError>>()?,
    };
    let total = header.total_bytes().ok_or(TraceError::Unencodable("trace size overflows"))?;
    let mut out = Vec::with_capacity(usize::try_from(total).unwrap_or(0));
    out.extend_from_slice(&TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    for v in [header.frames, header.height, header.width, header.c_key, header.c_value] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(objects.len() as u32).to_le_bytes());
    for &(o, e) in &header.objects {
        out.extend_from_slice(&u32::from(o.0).to_le_bytes());
        out.extend_from_slice(&e.to_le_bytes());
    }
    for (t, (frame, labels)) in seq.frames.iter().zip(&seq.labels).enumerate() {
        if frame.dims() != (h, w) || frame.keys.channels() != first.keys.channels() {
            return Err(TraceError::Unencodable("frames differ in key shape"));
        }
        if frame.frame_index != t as u64 {
            return Err(TraceError::Unencodable("frame indices must count up from 0"));
        }
        if labels.len() != h * w {
            return Err(TraceError::Unencodable("label map size differs from grid"));
        }
        for v in frame.keys.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for o in &objects {
            let grid = frame
                .values
                .get(o)
                .ok_or(TraceError::Unencodable("frame lacks a value grid for a declared object"))?;
            if grid.channels() != c_value {
                return Err(TraceError::Unencodable("value channels differ across frames"));
            }
            for v in grid.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if frame.values.len() != objects.len() {
            return Err(TraceError::Unencodable("frame has values for an undeclared object"));
        }
        out.extend_from_slice(labels);
    }
    debug_assert_eq!(out.len() as u64, total);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    }
}

/// Parses a trace. Never panics on malformed input.
pub fn decode_trace(bytes: &[u8]) -> Result<Sequence<f32>, TraceError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        let mut magic = [0u8; 4];
        magic[..bytes.len()].copy_from_slice(bytes);
        if bytes != &TRACE_MAGIC[..bytes.len()] {
            return Err(TraceError::BadMagic(magic));
        }
        return Err(TraceError::Truncated {
            expected: FIXED_HEADER as u64,
            actual,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != TRACE_MAGIC {
        return Err(TraceError::BadMagic(magic));
    }
    if bytes.len() < 6 {
        return Err(TraceError::Truncated {
            expected: FIXED_HEADER as u64,
            actual,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TRACE_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    if bytes.len() < FIXED_HEADER {
        return Err(TraceError::Truncated {
            expected: FIXED_HEADER as u64,
            actual,
        });
    }
    let mut cur = Cursor { bytes, pos: 6 };
    let (frames, height, width, c_key, c_value, m) = (cur.u32(), cur.u32(), cur.u32(), cur.u32(), cur.u32(), cur.u32());
    if height == 0 || width == 0 || c_key == 0 {
        return Err(TraceError::InvalidHeader("grid dimensions and key channels must be positive"));
    }
    if m > 255 {
        return Err(TraceError::InvalidHeader("at most 255 objects fit u8 label maps"));
    }
    if m > 0 && c_value == 0 {
        return Err(TraceError::InvalidHeader("value channels must be positive when objects are declared"));
    }
    let table_end = FIXED_HEADER as u64 + 8 * u64::from(m);
    if actual < table_end {
        return Err(TraceError::Truncated {
            expected: table_end,
            actual,
        });
    }
    let mut objects = Vec::with_capacity(m as usize);
    for _ in 0..m {
        let (id, entry) = (cur.u32(), cur.u32());
        let id = u8::try_from(id).ok().filter(|&id| id != 0).ok_or(TraceError::InvalidHeader("object id must be in 1..=255"))?;
        if objects.iter().any(|&(o, _)| o == ObjectId(id)) {
            return Err(TraceError::InvalidHeader("duplicate object id"));
        }
        if entry >= frames {
            return Err(TraceError::InvalidHeader("object entry frame is past the last frame"));
        }
        objects.push((ObjectId(id), entry));
    }
    let header = Header {
        frames,
        height,
        width,
        c_key,
        c_value,
        objects,
    };
    let expected = header.total_bytes().ok_or(TraceError::InvalidHeader("trace size overflows"))?;
    if actual < expected {
        return Err(TraceError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(TraceError::TrailingBytes {
            expected,
            extra: actual - expected,
        });
    }

    // Length matched, so every count below fits in memory.
    let (h, w) = (height as usize, width as usize);
    let positions = h * w;
    let mut frames_out = Vec::with_capacity(frames as usize);
    let mut labels_out = Vec::with_capacity(frames as usize);
    for t in 0..u64::from(frames) {
        let keys = FeatureGrid::new(h, w, c_key as usize, cur.f32s(positions * c_key as usize))
            .map_err(|e| grid_error(e, t))?;
        let mut values = BTreeMap::new();
        for &(o, _) in &header.objects {
            let grid = FeatureGrid::new(h, w, c_value as usize, cur.f32s(positions * c_value as usize))
                .map_err(|e| grid_error(e, t))?;
            values.insert(o, grid);
        }
        let labels = cur.take(positions).to_vec();
        if let Some(&label) = labels
            .iter()
            .find(|&&l| l != 0 && !header.objects.iter().any(|&(o, _)| o.0 == l))
        {
            return Err(TraceError::InvalidLabel { frame: t, label });
        }
        frames_out.push(FrameFeatures::new(t, keys, values).map_err(|e| grid_error(e, t))?);
        labels_out.push(labels);
    }
    Ok(Sequence {
        frames: frames_out,
        labels: labels_out,
        entries: header.objects.iter().map(|&(o, e)| (o, u64::from(e))).collect(),
    })
}

fn grid_error(e: GridError, frame: u64) -> TraceError {
    match e {
        GridError::NonFinite { .. } => TraceError::NonFinite { frame },
        _ => TraceError::InvalidHeader("payload does not form valid grids"),
    }
}

pub fn write_trace(seq: &Sequence<f32>, path: impl AsRef<Path>) -> Result<(), TraceError> {
    fs::write(path, encode_trace(seq)?)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Sequence<f32>, TraceError> {
    decode_trace(&fs::read(path)?)
}
