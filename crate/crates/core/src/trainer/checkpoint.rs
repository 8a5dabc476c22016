//! Checkpoint file: a header (magic, version, stage, iteration, seed, config
//! hashes) followed by the parameter block and optional momentum buffers.

use std::path::Path;

use crate::nn::{ByteReader, NnError, ParamStore, Tensor};

use super::{Stage, TrainError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Completed iterations of `stage`.
    pub iteration: u64,
    pub seed: u64,
    pub detector_hash: String,
    pub trainer_hash: String,
    pub params: ParamStore<f32>,
    pub velocity: Option<Vec<Tensor<f32>>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut ByteReader<'_>) -> Result<String, NnError> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| NnError::Format("header string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stage as u8);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.detector_hash);
        put_str(&mut out, &self.trainer_hash);
        out.extend_from_slice(&self.params.to_bytes());
        match &self.velocity {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                for t in v {
                    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                    for x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let stage = match r.u8()? {
            0 => Stage::Base,
            1 => Stage::Finetune,
            s => return Err(TrainError::Checkpoint(format!("unknown stage tag {s}"))),
        };
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let detector_hash = get_str(&mut r)?;
        let trainer_hash = get_str(&mut r)?;
        let params = ParamStore::read_from(&mut r)?;
        let velocity = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                if n != params.len() {
                    return Err(TrainError::Checkpoint(
                        "velocity count differs from parameter count".into(),
                    ));
                }
                let mut v = Vec::with_capacity(n);
                for (_, p) in params.iter() {
                    let len = r.u32()? as usize;
                    if len != p.value.len() {
                        return Err(TrainError::Checkpoint(format!(
                            "velocity size mismatch for `{}`",
                            p.name
                        )));
                    }
                    let data = r
                        .take(len * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    v.push(Tensor::new(p.value.shape().to_vec(), data)?);
                }
                Some(v)
            }
            f => return Err(TrainError::Checkpoint(format!("bad velocity flag {f}"))),
        };
        if !r.is_empty() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            stage,
            iteration,
            seed,
            detector_hash,
            trainer_hash,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(NnError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path).map_err(NnError::from)?)
    }
}
