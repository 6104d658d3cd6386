use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::{CodingModel, ParamStore};

use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IABFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus everything needed to rebuild and audit them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub data_dim: usize,
    pub epoch: usize,
    /// Infinite until a validation pass has run.
    pub best_val: f64,
    pub params: ParamStore<f32>,
}

impl ModelCheckpoint {
    pub fn from_model(
        model: &CodingModel<f32>,
        config: &TrainConfig,
        epoch: usize,
        best_val: f64,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            data_dim: model.arch.data_dim,
            epoch,
            best_val,
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<CodingModel<f32>> {
        CodingModel::from_params(
            self.config.architecture(self.data_dim),
            self.config.likelihood,
            self.params.clone(),
        )
    }

    /// Layout, all integers little-endian: magic, `u32` version, `u64`
    /// data dimension, `u64` epoch, `f64` best validation distortion,
    /// `u64` length plus UTF-8 config text, `u32` array count, then per
    /// array a `u32`-length name, `u32` rank, `u64` dims and `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(self.version.to_le_bytes());
        out.extend((self.data_dim as u64).to_le_bytes());
        out.extend((self.epoch as u64).to_le_bytes());
        out.extend(self.best_val.to_le_bytes());
        let text = self.config.to_text();
        out.extend((text.len() as u64).to_le_bytes());
        out.extend(text.as_bytes());
        out.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let data_dim = r.u64()? as usize;
        let epoch = r.u64()? as usize;
        let best_val = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = TrainConfig::parse_text(text)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last array".into()));
        }
        let ckpt = Self {
            version,
            config,
            data_dim,
            epoch,
            best_val,
            params,
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Human-readable metadata.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "checkpoint version {}\nepoch {}\nbest validation distortion {}\ndata dimension {}\n\n[config]\n{}\n[arrays]\n",
            self.version,
            self.epoch,
            self.best_val,
            self.data_dim,
            self.config.to_text()
        );
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            s.push_str(&format!("{name} {:?}\n", t.shape()));
        }
        s
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
