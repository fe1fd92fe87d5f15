//! Little-endian tensor encoding shared by feature files and checkpoints.
//!
//! ```text
//! magic[4] | version u16 | dtype u8 | ndim u8 | reserved[8] | dims ndim*u32 | payload f32*
//! ```
//! Feature files are always rank 2 `(T, D)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"MMFE";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
/// Bytes before the dims block.
pub const HEADER_LEN: usize = 16;

pub fn encode_tensor(shape: &[usize], data: &[f32], out: &mut Vec<u8>) {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    out.reserve(HEADER_LEN + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(shape.len() as u8);
    out.extend_from_slice(&[0u8; 8]);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one tensor from the front of `bytes`, returning the shape, the
/// values and the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>, usize), FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(FormatError::BadMagic {
            found: magic,
            expected: FEATURE_MAGIC,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(FormatError::Dtype(bytes[6]));
    }
    let ndim = bytes[7];
    if ndim == 0 || ndim > 4 {
        return Err(FormatError::Rank(ndim));
    }
    let dims_end = HEADER_LEN + 4 * ndim as usize;
    if bytes.len() < dims_end {
        return Err(FormatError::Truncated {
            expected: dims_end,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(FormatError::ZeroDim(shape));
    }
    let numel: usize = shape.iter().product();
    let end = dims_end + 4 * numel;
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    let data = bytes[dims_end..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data, end))
}

/// A decoded rank-2 feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn encode_features(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor(&[rows, cols], data, &mut out);
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<RawFeatures, FormatError> {
    let (shape, data, used) = decode_tensor(bytes)?;
    if shape.len() != 2 {
        return Err(FormatError::Rank(shape.len() as u8));
    }
    if used != bytes.len() {
        // the payload must account for the whole file
        return Err(FormatError::Truncated {
            expected: used,
            found: bytes.len(),
        });
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    Ok(RawFeatures {
        rows: shape[0],
        cols: shape[1],
        data,
    })
}

pub fn read_features(path: &Path) -> Result<RawFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads only the `(T, D)` header of a feature file.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = [0u8; HEADER_LEN + 8];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut filled = 0;
    while filled < head.len() {
        let n = f.read(&mut head[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    let fmt_err = |source| Error::Format {
        path: path.to_path_buf(),
        source,
    };
    // decode_tensor validates magic/version/dtype; give it a fake 1x1 payload
    // when the header itself is complete.
    if filled < head.len() {
        return Err(fmt_err(FormatError::Truncated {
            expected: head.len(),
            found: filled,
        }));
    }
    if head[7] != 2 {
        decode_tensor(&head).map_err(fmt_err)?;
        return Err(fmt_err(FormatError::Rank(head[7])));
    }
    let t = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(head[20..24].try_into().unwrap()) as usize;
    let mut probe = head[..HEADER_LEN].to_vec();
    probe.extend_from_slice(&1u32.to_le_bytes());
    probe.extend_from_slice(&1u32.to_le_bytes());
    probe.extend_from_slice(&0f32.to_le_bytes());
    decode_tensor(&probe).map_err(fmt_err)?;
    if t == 0 || d == 0 {
        return Err(fmt_err(FormatError::ZeroDim(vec![t, d])));
    }
    Ok((t, d))
}

pub fn write_features(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_features(rows, cols, data)).map_err(|e| Error::io(path, e))
}
