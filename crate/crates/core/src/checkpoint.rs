//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"DDTCKPT\0"
//! 8       4     format version, u32 little endian (currently 1)
//! 12      8     header length L, u64 little endian
//! 20      L     header, UTF-8 JSON (see `Header`)
//! 20+L    P     tensor payload: little endian values back to back
//! 20+L+P  32    SHA-256 of bytes [0, 20+L+P)
//! ```
//!
//! The header lists every tensor with its group (`param`, `adam_m`,
//! `adam_v`), name, shape and element offset into the payload, together with
//! the network config, the element dtype, the training iteration, the RNG
//! seed and the optimizer step count.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DDTCKPT\0";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 20;
const DIGEST: usize = 32;

/// Adam-style moment estimates, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub iteration: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub dtype: DType,
    pub iteration: u64,
    pub seed: u64,
    pub optimizer_step: Option<u64>,
    pub config: NetworkConfig,
    tensors: Vec<Entry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Validates framing and checksum, returning the parsed header and the
/// payload slice.
fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE + DIGEST {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_end = bytes.len() - DIGEST;
    if header_len > body_end - PREAMBLE {
        return Err(corrupt("header extends past end of file"));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + header_len])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    Ok((header, &bytes[PREAMBLE + header_len..body_end]))
}

/// Reads only the header, e.g. to find the stored dtype.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    Ok(split(&fs::read(path)?)?.0)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        let mut add = |group: Group, store: &ParamStore<T>| {
            for (name, t) in store.iter() {
                entries.push(Entry {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
                for &v in t.data() {
                    v.write_le(&mut payload);
                }
            }
        };
        add(Group::Param, &self.params);
        if let Some(opt) = &self.optimizer {
            add(Group::AdamM, &opt.first);
            add(Group::AdamV, &opt.second);
        }
        let header = Header {
            dtype: T::DTYPE,
            iteration: self.iteration,
            seed: self.seed,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            config: self.config.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::CheckpointDType {
                stored: header.dtype.to_string(),
                requested: T::DTYPE.to_string(),
            });
        }
        let size = T::DTYPE.size_of();
        let mut params = ParamStore::new();
        let mut first = ParamStore::new();
        let mut second = ParamStore::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset * size;
            let end = start + numel * size;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| corrupt(format!("tensor {} lies outside the payload", e.name)))?;
            let data = raw.chunks_exact(size).map(T::read_le).collect();
            let t = Tensor::new(&e.shape, data)?;
            match e.group {
                Group::Param => params.insert(e.name.clone(), t),
                Group::AdamM => first.insert(e.name.clone(), t),
                Group::AdamV => second.insert(e.name.clone(), t),
            }
        }
        let optimizer = header.optimizer_step.map(|step| OptimizerState {
            step,
            first,
            second,
        });
        Ok(Checkpoint {
            config: header.config,
            params,
            optimizer,
            iteration: header.iteration,
            seed: header.seed,
        })
    }

    /// Writes to a sibling temporary file first so an interrupted save never
    /// leaves a half-written checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Model;

    fn sample() -> Checkpoint<f32> {
        let model = Model::<f32>::build(&NetworkConfig::toy(), 3).unwrap();
        let first = model.params.clone();
        let second = model.params.cast::<f64>().cast();
        Checkpoint {
            config: NetworkConfig::toy(),
            params: model.params,
            optimizer: Some(OptimizerState {
                step: 5,
                first,
                second,
            }),
            iteration: 5,
            seed: 3,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn truncation_and_tampering_detected() {
        let bytes = sample().to_bytes();
        for cut in [0, 10, 100, bytes.len() - 1] {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&flipped),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn dtype_and_version_checked() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::CheckpointDType { .. })
        ));
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }
}
