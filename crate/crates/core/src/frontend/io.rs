//! Little-endian feature (`CLMF`) and code (`CLMC`) files.
//!
//! Both formats share a 20-byte header: four magic bytes, a `u32` version,
//! and three `u32`/`f32` fields. Features are followed by `T * bins` `f32`
//! values, codes by `T * D` `u16` values, both row-major.

use std::io::Write;
use std::path::Path;

use super::{CodeSequence, FeatureSequence};
use crate::error::{Error, FormatError, Result};

pub const FEATURES_MAGIC: [u8; 4] = *b"CLMF";
pub const CODES_MAGIC: [u8; 4] = *b"CLMC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.data().len());
    out.extend_from_slice(&FEATURES_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.bins() as u32).to_le_bytes());
    out.extend_from_slice(&seq.frame_rate().to_le_bytes());
    for v in seq.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_codes(seq: &CodeSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * seq.codes().len());
    out.extend_from_slice(&CODES_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.depth() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.vocab() as u32).to_le_bytes());
    for &c in seq.codes() {
        out.extend_from_slice(&(c as u16).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn check_header(bytes: &[u8], magic: [u8; 4]) -> std::result::Result<(), FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found,
        });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(FormatError::BadVersion {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    Ok(())
}

fn check_length(bytes: &[u8], rows: u32, cols: u32, width: usize) -> std::result::Result<usize, FormatError> {
    let count = (rows as usize)
        .checked_mul(cols as usize)
        .ok_or_else(|| FormatError::InvalidHeader("dimensions overflow".into()))?;
    let expected = count
        .checked_mul(width)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| FormatError::InvalidHeader("dimensions overflow".into()))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            needed: expected,
            available: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(count)
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<FeatureSequence, FormatError> {
    check_header(bytes, FEATURES_MAGIC)?;
    let frames = u32_at(bytes, 8);
    let bins = u32_at(bytes, 12);
    let frame_rate = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    if frames == 0 || bins == 0 {
        return Err(FormatError::InvalidHeader(format!("{frames} frames x {bins} bins")));
    }
    if !(frame_rate > 0.0) || !frame_rate.is_finite() {
        return Err(FormatError::InvalidHeader(format!("frame rate {frame_rate}")));
    }
    let count = check_length(bytes, frames, bins, 4)?;
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        data.push(v);
    }
    FeatureSequence::new(frames as usize, bins as usize, frame_rate, data)
        .map_err(|e| FormatError::InvalidHeader(e.to_string()))
}

pub fn decode_codes(bytes: &[u8]) -> std::result::Result<CodeSequence, FormatError> {
    check_header(bytes, CODES_MAGIC)?;
    let len = u32_at(bytes, 8);
    let depth = u32_at(bytes, 12);
    let vocab = u32_at(bytes, 16);
    if vocab > u16::MAX as u32 {
        return Err(FormatError::VocabTooLarge(vocab));
    }
    if len == 0 || depth == 0 || vocab == 0 {
        return Err(FormatError::InvalidHeader(format!("T={len} D={depth} V={vocab}")));
    }
    let count = check_length(bytes, len, depth, 2)?;
    let mut codes = Vec::with_capacity(count);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(2).enumerate() {
        let c = u16::from_le_bytes(chunk.try_into().expect("2 bytes")) as u32;
        if c >= vocab {
            return Err(FormatError::CodeOutOfRange {
                code: c,
                position: i,
                vocab,
            });
        }
        codes.push(c);
    }
    CodeSequence::new(len as usize, depth as usize, vocab as usize, codes)
        .map_err(|e| FormatError::InvalidHeader(e.to_string()))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn format_error(path: &Path, source: FormatError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    write_atomic(path, &encode_features(seq))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path)?;
    decode_features(&bytes).map_err(|e| format_error(path, e))
}

pub fn write_codes(path: &Path, seq: &CodeSequence) -> Result<()> {
    write_atomic(path, &encode_codes(seq))
}

pub fn read_codes(path: &Path) -> Result<CodeSequence> {
    let bytes = std::fs::read(path)?;
    decode_codes(&bytes).map_err(|e| format_error(path, e))
}
