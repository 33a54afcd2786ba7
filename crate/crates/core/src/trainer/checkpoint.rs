//! MQCK checkpoints: `"MQCK"`, u32 version, 32-byte config hash, u32 block
//! count, then blocks of (u16 name length, UTF-8 name, MQFT matrix).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, TrainError};
use crate::autodiff::Tensor;
use crate::data::mqft::{decode_matrix, encode_matrix};
use crate::model::{Model, ParamStore};

pub const MAGIC: &[u8; 4] = b"MQCK";
pub const VERSION: u32 = 1;

/// Model parameters (codebook included), optimizer state and position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
}

/// SHA-256 of the config's canonical JSON.
pub fn config_hash(config: &TrainConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

fn put_block(out: &mut impl Write, name: &str, t: &Tensor) -> Result<(), TrainError> {
    let len = u16::try_from(name.len()).map_err(|_| TrainError::Checkpoint(format!("block name `{name}` too long")))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    encode_matrix(out, t)?;
    Ok(())
}

impl Checkpoint {
    pub fn write(&self, out: &mut impl Write) -> Result<(), TrainError> {
        let params = self.model.params();
        let n = params.len() * 3 + 2;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&config_hash(&self.config))?;
        out.write_all(&(n as u32).to_le_bytes())?;
        for (name, t) in params.iter() {
            put_block(out, name, t)?;
        }
        for (i, name) in params.names().iter().enumerate() {
            put_block(out, &format!("adam.m.{name}"), &self.optimizer.m[i])?;
            put_block(out, &format!("adam.v.{name}"), &self.optimizer.v[i])?;
        }
        put_block(out, "meta.epoch", &Tensor::new(&[1, 1], vec![self.epoch as f64]))?;
        put_block(out, "meta.adam_step", &Tensor::new(&[1, 1], vec![self.optimizer.step as f64]))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written under `config`; a different config hash is
    /// rejected.
    pub fn read(input: &mut impl Read, config: &TrainConfig) -> Result<Self, TrainError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TrainError::Checkpoint("not an MQCK file".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported MQCK version {version}")));
        }
        let mut hash = [0u8; 32];
        input.read_exact(&mut hash)?;
        if hash != config_hash(config) {
            return Err(TrainError::Checkpoint("config hash does not match the checkpoint".into()));
        }
        input.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let mut lb = [0u8; 2];
            input.read_exact(&mut lb)?;
            let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| TrainError::Checkpoint("block name is not UTF-8".into()))?;
            blocks.push((name, decode_matrix(input)?));
        }
        let find = |name: &str| blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let reference = Model::new(config.model.clone(), 0)?;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let shaped = |name: &str, like: &Tensor| -> Result<Tensor, TrainError> {
            let t = find(name).ok_or_else(|| TrainError::Checkpoint(format!("missing block `{name}`")))?;
            if t.numel() != like.numel() {
                return Err(TrainError::Checkpoint(format!(
                    "block `{name}` has {} values, expected {}",
                    t.numel(),
                    like.numel()
                )));
            }
            Ok(t.reshaped(like.shape()))
        };
        for (name, like) in reference.params().iter() {
            params.insert(name, shaped(name, like)?);
            m.push(shaped(&format!("adam.m.{name}"), like)?);
            v.push(shaped(&format!("adam.v.{name}"), like)?);
        }
        let scalar = |name: &str| find(name).map(|t| t.data()[0]).unwrap_or(0.0);
        Ok(Self {
            config: config.clone(),
            model: Model::from_params(config.model.clone(), params)?,
            optimizer: Adam {
                config: config.optimizer,
                step: scalar("meta.adam_step") as u64,
                m,
                v,
            },
            epoch: scalar("meta.epoch") as usize,
        })
    }

    pub fn load(path: &Path, config: &TrainConfig) -> Result<Self, TrainError> {
        Self::read(&mut BufReader::new(File::open(path)?), config)
    }
}
