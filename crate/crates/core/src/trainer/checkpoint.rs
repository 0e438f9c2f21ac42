//! Binary checkpoint: parameters, optimizer state, step counter and the raw
//! id maps needed to export embeddings under their original names.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SACK" | version u32 | num_users u64 | num_items u64
//! d u32 | layers u32 | heads u32 | ffn_mult u32 | positions u32 | step u64
//! user raw ids u64 × num_users | item raw ids u64 × num_items
//! parameters f32 … | accumulators f32 …      (canonical tensor order)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::encoder::{EncoderConfig, ModelParams};
use crate::kernels::Tensor;
use crate::scalar::Scalar;
use crate::trainer::AdagradState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint has trailing bytes")]
    Trailing,
    #[error("checkpoint layout is inconsistent: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub encoder: EncoderConfig,
    pub step: u64,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub params: ModelParams<T>,
    pub optimizer: AdagradState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn num_nodes(&self) -> usize {
        self.user_ids.len() + self.item_ids.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        let e = &self.encoder;
        if self.params.num_nodes() != self.num_nodes() || self.params.dim() != e.d {
            return Err(CheckpointError::Layout(
                "parameters do not match id maps or encoder config".into(),
            ));
        }
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.user_ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.item_ids.len() as u64).to_le_bytes())?;
        for v in [
            e.d,
            e.layers,
            e.heads,
            e.ffn_mult,
            self.params.hop_positions.rows(),
        ] {
            w.write_all(
                &u32::try_from(v)
                    .map_err(|_| layout("u32 overflow"))?
                    .to_le_bytes(),
            )?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        for id in self.user_ids.iter().chain(&self.item_ids) {
            w.write_all(&id.to_le_bytes())?;
        }
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .chain(self.optimizer.accumulators.iter());
        for t in tensors {
            write_f32s(w, t.data())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let num_users = read_u64(r)? as usize;
        let num_items = read_u64(r)? as usize;
        let d = read_u32(r)? as usize;
        let layers = read_u32(r)? as usize;
        let heads = read_u32(r)? as usize;
        let ffn_mult = read_u32(r)? as usize;
        let positions = read_u32(r)? as usize;
        let step = read_u64(r)?;
        let encoder = EncoderConfig {
            d,
            layers,
            heads,
            ffn_mult,
        };
        encoder
            .validate()
            .map_err(|e| CheckpointError::Layout(e.to_string()))?;
        if positions == 0 {
            return Err(layout("no hop positions"));
        }
        let mut read_ids = |n: usize| -> Result<Vec<u64>, CheckpointError> {
            (0..n).map(|_| read_u64(r)).collect()
        };
        let user_ids = read_ids(num_users)?;
        let item_ids = read_ids(num_items)?;

        let template = ModelParams::<T>::zeros(num_users + num_items, positions - 1, &encoder);
        let shapes: Vec<Vec<usize>> = template
            .tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        drop(template);
        let mut read_tensors = || -> Result<Vec<Tensor<T>>, CheckpointError> {
            shapes
                .iter()
                .map(|s| {
                    let data = read_f32s::<T, _>(r, s.iter().product())?;
                    Tensor::from_vec(s, data).map_err(|e| layout(&e.to_string()))
                })
                .collect()
        };
        let params =
            ModelParams::from_tensors(read_tensors()?).map_err(|e| layout(&e.to_string()))?;
        let accumulators = read_tensors()?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(CheckpointError::Trailing);
        }
        Ok(Self {
            encoder,
            step,
            user_ids,
            item_ids,
            params,
            optimizer: AdagradState { accumulators },
        })
    }
}

fn layout(msg: &str) -> CheckpointError {
    CheckpointError::Layout(msg.to_string())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_f32s<W: Write, T: Scalar>(w: &mut W, data: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for x in data {
        buf.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s<T: Scalar, R: Read>(r: &mut R, n: usize) -> Result<Vec<T>, CheckpointError> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| T::from_f32_exact(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}
