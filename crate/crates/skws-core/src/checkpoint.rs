//! Model checkpoints: a self-describing binary container holding the
//! canonical config text and every parameter tensor.
//!
//! Layout: the magic `SKWS-CKPT`, a u16 format version, a u32-length-prefixed
//! config text, then one record per tensor until end of file. Each record is
//! a u32-length-prefixed name, a u32 rank with that many u32 dims, and the
//! row-major payload as little-endian floats in the precision the embedded
//! config declares. Records are sorted by name, and the config text is
//! canonical, so saving the same model twice yields identical bytes.
//!
//! Loading validates every tensor name and shape against the embedded
//! config; unknown, duplicate, missing, or misshapen tensors are errors.
//! Reading an f32 file into f64 parameters widens each value exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::SplitMix64;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Matrix;

const MAGIC: &[u8; 9] = b"SKWS-CKPT";
const VERSION: u16 = 1;

/// Serialize params and config into the checkpoint container.
pub fn checkpoint_bytes<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Vec<u8>> {
    config.validate()?;
    let text = config.to_text();
    let mut tensors = params.flat();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(text.len()).unwrap().to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, m) in tensors {
        if !m.all_finite() {
            return Err(Error::NonFinite {
                context: format!("tensor {name}"),
            });
        }
        out.extend_from_slice(&u32::try_from(name.len()).unwrap().to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&u32::try_from(m.rows()).unwrap().to_le_bytes());
        out.extend_from_slice(&u32::try_from(m.cols()).unwrap().to_le_bytes());
        match config.precision {
            Precision::F32 => {
                for v in m.data() {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for v in m.data() {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parse a checkpoint, returning the embedded config and the parameters cast
/// to `T`.
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<T>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "SKWS-CKPT",
            found: magic.to_vec(),
        });
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            format: "checkpoint",
            version,
        });
    }
    let text_len = cur.u32("config length")? as usize;
    let text_bytes = cur.take(text_len, "config text")?;
    let text = std::str::from_utf8(text_bytes)
        .map_err(|e| Error::InvalidConfig(format!("config text is not utf-8: {e}")))?;
    let config = ModelConfig::from_text(text)?;
    config.validate()?;

    // Shape skeleton: the config fully determines which tensors exist.
    let mut skeleton = ModelParams::<T>::init(&config, &mut SplitMix64::new(0))?;
    let mut wanted: BTreeMap<String, (usize, usize)> = skeleton
        .flat()
        .into_iter()
        .map(|(name, m)| (name, m.shape()))
        .collect();
    let mut loaded: BTreeMap<String, Matrix<T>> = BTreeMap::new();

    while !cur.done() {
        let name_len = cur.u32("tensor name length")? as usize;
        let name_bytes = cur.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| Error::Truncated(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let rank = cur.u32("tensor rank")?;
        if rank != 2 {
            return Err(Error::TensorMismatch {
                name,
                detail: format!("rank {rank}, expected 2"),
            });
        }
        let rows = cur.u32("tensor rows")? as usize;
        let cols = cur.u32("tensor cols")? as usize;
        let want = match wanted.get(&name) {
            Some(&shape) => shape,
            None => {
                return Err(Error::TensorMismatch {
                    name,
                    detail: "not a tensor of the embedded config".into(),
                })
            }
        };
        if loaded.contains_key(&name) {
            return Err(Error::TensorMismatch {
                name,
                detail: "appears twice".into(),
            });
        }
        if (rows, cols) != want {
            return Err(Error::TensorMismatch {
                name,
                detail: format!("stored {rows}x{cols}, config implies {}x{}", want.0, want.1),
            });
        }
        let count = rows * cols;
        let mut data = Vec::with_capacity(count);
        match config.precision {
            Precision::F32 => {
                let payload = cur.take(count * 4, "tensor payload")?;
                for chunk in payload.chunks_exact(4) {
                    let v = f32::from_le_bytes(chunk.try_into().unwrap());
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("tensor {name}"),
                        });
                    }
                    data.push(T::from_f64(v as f64));
                }
            }
            Precision::F64 => {
                let payload = cur.take(count * 8, "tensor payload")?;
                for chunk in payload.chunks_exact(8) {
                    let v = f64::from_le_bytes(chunk.try_into().unwrap());
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("tensor {name}"),
                        });
                    }
                    data.push(T::from_f64(v));
                }
            }
        }
        loaded.insert(name, Matrix::from_vec(rows, cols, data)?);
    }

    let missing: Vec<&String> = wanted.keys().filter(|n| !loaded.contains_key(*n)).collect();
    if let Some(name) = missing.first() {
        return Err(Error::TensorMismatch {
            name: (*name).clone(),
            detail: format!("absent from checkpoint ({} missing in total)", missing.len()),
        });
    }
    wanted.clear();
    for (name, m) in skeleton.flat_mut() {
        *m = loaded.remove(&name).expect("verified complete above");
    }
    Ok((config, skeleton))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<()> {
    let bytes = checkpoint_bytes(params, config)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}
