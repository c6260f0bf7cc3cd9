//! Model checkpoint format.
//!
//! Layout: magic `TALCCKPT`, u32 version, u32 header length, JSON header
//! (denoiser config, schedule params, vocabulary size and hash, training
//! conditioning mode), u32 parameter count, then named parameter tensors:
//! u16 name length + UTF-8 name, u32 rank + u32 dims, little-endian f64
//! values. Round-trips are bitwise exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningMode;
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Result, TalcError};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;
use crate::textenc::{TextEncParams, Vocabulary};

pub const CKPT_MAGIC: &[u8; 8] = b"TALCCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub vocab_size: usize,
    /// FNV-1a of the vocabulary file contents, hex encoded.
    pub vocab_hash: String,
    pub train_mode: Option<ConditioningMode>,
}

/// A denoiser bundled with everything needed to run it.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub schedule_config: ScheduleConfig,
    pub params: DenoiserParams,
    pub vocab_size: usize,
    pub vocab_hash: u64,
    pub train_mode: Option<ConditioningMode>,
}

impl DenoiserModel {
    pub fn new(
        config: DenoiserConfig,
        schedule_config: ScheduleConfig,
        vocab: &Vocabulary,
        rng: &mut Rng,
        zero_head: bool,
    ) -> Result<DenoiserModel> {
        config.validate()?;
        let params = DenoiserParams::init(&config, vocab.size(), rng, zero_head);
        Ok(DenoiserModel {
            config,
            schedule_config,
            params,
            vocab_size: vocab.size(),
            vocab_hash: vocab.content_hash(),
            train_mode: None,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.schedule_config)
    }

    /// The text-encoder view over this model's embedding tables.
    pub fn textenc_params(&self) -> TextEncParams {
        TextEncParams {
            token_table: self.params.text_token_table.clone(),
            pos_table: self.params.text_pos_table.clone(),
            max_tokens: self.config.text_tokens,
            dim: self.config.model_dim,
        }
    }

    /// Error unless `vocab` is the vocabulary this model was trained with.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.size() != self.vocab_size || vocab.content_hash() != self.vocab_hash {
            return Err(TalcError::Config(
                "vocabulary does not match the checkpoint (size or hash differs)".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            schedule: self.schedule_config,
            vocab_size: self.vocab_size,
            vocab_hash: format!("{:016x}", self.vocab_hash),
            train_mode: self.train_mode,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| TalcError::Format(format!("header serialization: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        let named = self.params.named_params();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DenoiserModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(TalcError::Format("not a TALCCKPT file".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(TalcError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| TalcError::Format(format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let vocab_hash = u64::from_str_radix(&header.vocab_hash, 16)
            .map_err(|_| TalcError::Format("bad vocab hash in header".into()))?;

        let count = r.u32()? as usize;
        let mut stored: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> =
            std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TalcError::Format("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            stored.insert(name, (shape, data));
        }

        // Materialize parameters with the config-derived structure, then fill
        // from the stored tensors.
        let mut dummy = Rng::new(0);
        let params = DenoiserParams::init(&header.config, header.vocab_size, &mut dummy, true);
        let mut missing = Vec::new();
        let mut fill_err = None;
        params.for_each_param(&mut |name, t: &Tensor| {
            match stored.get(name) {
                Some((shape, data)) if shape == t.shape() => t.set_data(data),
                Some((shape, _)) => {
                    fill_err = Some(format!(
                        "parameter {name}: stored shape {:?} != expected {:?}",
                        shape,
                        t.shape()
                    ));
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(e) = fill_err {
            return Err(TalcError::Format(e));
        }
        if !missing.is_empty() {
            return Err(TalcError::Format(format!(
                "checkpoint is missing parameters: {}",
                missing.join(", ")
            )));
        }
        Ok(DenoiserModel {
            config: header.config,
            schedule_config: header.schedule,
            params,
            vocab_size: header.vocab_size,
            vocab_hash,
            train_mode: header.train_mode,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TalcError::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
