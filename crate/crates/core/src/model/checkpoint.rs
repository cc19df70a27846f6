//! Binary checkpoint container.
//!
//! ```text
//! magic "PM2A" | version u16
//! u32 len | model config (INI text)
//! u32 len | metadata ("key=value" lines)
//! u32 count | count x record
//! record: u16 name len | name | u8 rank | rank x u32 extent | f32 data
//! ```
//! All integers and floats are little-endian.

use super::{Model, ModelConfig, ModelParams, Param};
use crate::bytes::{put_f32s, write_atomic, ByteReader};
use crate::config::{model_from_text, model_to_text};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PM2A";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig) -> Self {
        Checkpoint {
            config,
            meta: BTreeMap::new(),
            records: Vec::new(),
        }
    }

    /// Every model parameter as a record, in declaration order.
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut ck = Checkpoint::new(model.config().clone());
        ck.push_params("", model.params());
        ck
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.records.push(Record {
            name: name.into(),
            shape,
            data,
        });
    }

    /// Appends `params` with `prefix` prepended to each name.
    pub fn push_params(&mut self, prefix: &str, params: &ModelParams<f32>) {
        for p in params.iter() {
            self.push(
                format!("{prefix}{}", p.name),
                p.value.shape().to_vec(),
                p.value.data().to_vec(),
            );
        }
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Records named `prefix*` with the prefix stripped, in stored order.
    pub fn params_with_prefix(&self, prefix: &str) -> Result<ModelParams<f32>> {
        let entries = self
            .records
            .iter()
            .filter_map(|r| {
                r.name.strip_prefix(prefix).map(|name| {
                    Ok(Param {
                        name: name.to_string(),
                        value: Tensor::new(r.shape.clone(), r.data.clone())?,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_entries(entries)
    }

    /// Rebuilds the model; records outside its parameter layout are ignored.
    pub fn model(&self) -> Result<Model<f32>> {
        let expected = ModelParams::<f32>::init(&self.config, 0);
        let by_name: HashMap<&str, &Record> =
            self.records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut entries = Vec::with_capacity(expected.len());
        for p in expected.iter() {
            let r = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {}", p.name)))?;
            if r.shape != p.value.shape() {
                return Err(Error::Parse(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    p.name,
                    r.shape,
                    p.value.shape()
                )));
            }
            entries.push(Param {
                name: p.name.clone(),
                value: Tensor::new(r.shape.clone(), r.data.clone())?,
            });
        }
        Model::from_parts(self.config.clone(), ModelParams::from_entries(entries)?)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Parse(format!("checkpoint metadata lacks {key}")))?;
        v.parse()
            .map_err(|_| Error::Parse(format!("checkpoint metadata {key}={v:?} is not an integer")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = model_to_text(&self.config);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        for text in [config, meta] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.shape.len() as u8);
            for &e in &r.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            put_f32s(&mut out, &r.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Parse("bad magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let config = model_from_text(&r.string(n)?)?;
        let n = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for line in r.string(n)?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            records.push(Record { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Parse(format!(
                "{} trailing bytes at offset {}",
                r.remaining(),
                r.pos()
            )));
        }
        Ok(Checkpoint {
            config,
            meta,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::<f32>::new(ModelConfig::small(), 7).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.meta.insert("step".into(), "12".into());
        ck.push("optim.m.x", vec![2], vec![f32::MIN_POSITIVE, -0.0]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.model().unwrap();
        for (a, b) in model.params().iter().zip(m2.params().iter()) {
            let ab: Vec<u32> = a.value.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
        assert_eq!(back.meta_u64("step").unwrap(), 12);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let err = Checkpoint::from_bytes(b"XXXX\x01\x00").unwrap_err().to_string();
        assert!(err.contains("bad magic"));
        let ck = Checkpoint::from_model(&Model::<f32>::new(ModelConfig::small(), 1).unwrap());
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn ablated_layout_rejected_by_full_config() {
        let mut cfg = ModelConfig::small();
        cfg.flags.skip_connections = false;
        let mut ck = Checkpoint::from_model(&Model::<f32>::new(cfg, 1).unwrap());
        ck.config = ModelConfig::small();
        assert!(ck.model().is_err());
    }
}
