//! Self-describing binary container for model parameters.
//!
//! Layout: the magic bytes `CHORDJAM`, a little-endian `u32` format version,
//! a `u32` header length, a JSON header, then the raw little-endian tensor
//! payload described by the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::{Mat, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CHORDJAM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// Model kind, e.g. `online`, `offline`, `value`, `contrastive`.
    pub kind: String,
    pub dtype: String,
    pub config: Value,
    #[serde(default)]
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar, C: Serialize>(kind: &str, config: &C, meta: Value, store: &ParamStore<T>) -> Result<Self> {
        let mut payload = Vec::with_capacity(store.num_scalars() * T::WIDTH);
        let mut tensors = Vec::with_capacity(store.len());
        for (_, name, value) in store.iter() {
            let offset = payload.len();
            for v in value.iter() {
                v.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: [value.nrows(), value.ncols()],
                offset,
                len: payload.len() - offset,
            });
        }
        Ok(Checkpoint {
            header: Header {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                dtype: T::DTYPE.to_string(),
                config: serde_json::to_value(config)?,
                meta,
                tensors,
            },
            payload,
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.header.kind)))
        }
    }

    /// Decodes every tensor, converting from the stored dtype to `T`.
    pub fn tensors<T: Scalar>(&self) -> Result<Vec<(String, Mat<T>)>> {
        let width = match self.header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
        };
        self.header
            .tensors
            .iter()
            .map(|e| {
                let [r, c] = e.shape;
                let bytes = self
                    .payload
                    .get(e.offset..e.offset + e.len)
                    .filter(|b| b.len() == r * c * width)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` is truncated", e.name)))?;
                let values: Vec<T> = bytes
                    .chunks_exact(width)
                    .map(|b| if width == 4 { T::of(f32::read_le(b) as f64) } else { T::of(f64::read_le(b)) })
                    .collect();
                let m = Mat::from_shape_vec((r, c), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
                Ok((e.name.clone(), m))
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version} is newer than {FORMAT_VERSION}")));
        }
        input.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut payload = Vec::new();
        input.read_to_end(&mut payload)?;
        Ok(Checkpoint { header, payload })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::read_from(bytes.as_slice())
    }
}

/// Models that round-trip through a [`Checkpoint`].
pub trait Persist: Sized {
    fn to_checkpoint(&self) -> Result<Checkpoint>;
    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self>;

    fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

mod impls {
    use super::*;
    use crate::reward::{ContrastiveModel, DiscriminativeModel};
    use crate::seqmodel::{OfflineModel, OnlineModel, ValueModel};

    impl<T: Scalar> Persist for OnlineModel<T> {
        fn to_checkpoint(&self) -> Result<Checkpoint> {
            Checkpoint::from_store("online", &self.config, Value::Null, self.store())
        }

        fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
            ckpt.expect_kind("online")?;
            OnlineModel::from_tensors(ckpt.config()?, ckpt.tensors()?)
        }
    }

    impl<T: Scalar> Persist for OfflineModel<T> {
        fn to_checkpoint(&self) -> Result<Checkpoint> {
            Checkpoint::from_store("offline", &self.config, Value::Null, self.store())
        }

        fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
            ckpt.expect_kind("offline")?;
            OfflineModel::from_tensors(ckpt.config()?, ckpt.tensors()?)
        }
    }

    impl<T: Scalar> Persist for ValueModel<T> {
        fn to_checkpoint(&self) -> Result<Checkpoint> {
            Checkpoint::from_store("value", &self.config, Value::Null, self.store())
        }

        fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
            ckpt.expect_kind("value")?;
            ValueModel::from_tensors(ckpt.config()?, ckpt.tensors()?)
        }
    }

    impl<T: Scalar> Persist for ContrastiveModel<T> {
        fn to_checkpoint(&self) -> Result<Checkpoint> {
            Checkpoint::from_store("contrastive", &self.config, Value::Null, self.store())
        }

        fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
            ckpt.expect_kind("contrastive")?;
            ContrastiveModel::from_tensors(ckpt.config()?, ckpt.tensors()?)
        }
    }

    impl<T: Scalar> Persist for DiscriminativeModel<T> {
        fn to_checkpoint(&self) -> Result<Checkpoint> {
            Checkpoint::from_store("discriminative", &self.config, Value::Null, self.store())
        }

        fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
            ckpt.expect_kind("discriminative")?;
            DiscriminativeModel::from_tensors(ckpt.config()?, ckpt.tensors()?)
        }
    }
}
