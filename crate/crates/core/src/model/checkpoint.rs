//! ```text
//! "MMCK" | version u16 | config_len u32 | config JSON | tensor blobs
//! ```
//! Blobs use the feature-file tensor encoding and follow parameter
//! declaration order. All integers are little-endian.

use std::fs;
use std::path::Path;

use super::{plan, ModelConfig, ModelState, Network};
use crate::data::format::{decode_tensor, encode_tensor};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

impl<F: Real> ModelState<F> {
    /// Parameters are stored as f32 regardless of `F`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(self.config()).expect("ModelConfig serializes");
        let mut out = Vec::with_capacity(10 + config.len() + 4 * self.param_count() + 64 * self.params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        for (_, _, t) in self.params.iter() {
            let data: Vec<f32> = t.data().iter().map(|x| x.as_f32()).collect();
            encode_tensor(t.shape(), &data, &mut out);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

impl ModelState<f32> {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes, Path::new("<memory>"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&bytes, path)
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<ModelState<f32>> {
    let fmt = |source: FormatError| Error::Format {
        path: path.to_path_buf(),
        source,
    };
    if bytes.len() < 10 {
        return Err(fmt(FormatError::Truncated {
            expected: 10,
            found: bytes.len(),
        }));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(fmt(FormatError::BadMagic {
            found: magic,
            expected: CHECKPOINT_MAGIC,
        }));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(fmt(FormatError::Version(version)));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let json_end = 10 + len;
    if bytes.len() < json_end {
        return Err(fmt(FormatError::Truncated {
            expected: json_end,
            found: bytes.len(),
        }));
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[10..json_end]).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let net = Network::new(config)?;
    let (_, layout) = plan(net.config());
    let mut params = ParamStore::new();
    let mut pos = json_end;
    for (name, shape, _) in layout.entries {
        let (found, data, used) = decode_tensor(&bytes[pos..]).map_err(fmt)?;
        if found != shape {
            return Err(Error::Data(format!(
                "{}: parameter {name} has shape {found:?}, config implies {shape:?}",
                path.display()
            )));
        }
        params.add(name, Tensor::new(&shape, data)?);
        pos += used;
    }
    if pos != bytes.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after the last parameter",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok(ModelState::from_parts(net, params))
}
