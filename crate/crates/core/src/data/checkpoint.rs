//! Checkpoint files.
//!
//! Layout (little-endian): `CRTK`, u32 version, u64 config hash, u32 config length and the
//! config text, u64 iteration, u32 entry count, then per entry a u32 name length, the UTF-8
//! name and a CRTT tensor. Names are prefixed `param/`, `buffer/` or `momentum/`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::RunConfig;
use super::sgd::Sgd;
use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRTK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub config_text: String,
    pub iteration: u64,
    pub entries: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn capture<M: Module<f32> + ?Sized>(
        config: &RunConfig,
        iteration: u64,
        model: &mut M,
        sgd: Option<&Sgd<f32>>,
    ) -> Self {
        let mut entries = BTreeMap::new();
        model.visit("", &mut |name, kind, t| {
            let prefix = match kind {
                ParamKind::Trainable => "param",
                ParamKind::Buffer => "buffer",
            };
            entries.insert(format!("{prefix}/{name}"), t.detach());
        });
        if let Some(sgd) = sgd {
            for (name, v) in &sgd.velocity {
                let shape = entries[&format!("param/{name}")].shape().to_vec();
                let t = Tensor::new(v.clone(), &shape).expect("velocity matches parameter");
                entries.insert(format!("momentum/{name}"), t);
            }
        }
        Checkpoint {
            config_hash: config.hash(),
            config_text: config.to_text(),
            iteration,
            entries,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::from_text(&self.config_text)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Format(
                "checkpoint config hash does not match its text".into(),
            ));
        }
        Ok(cfg)
    }

    /// Copies stored parameters and buffers into `model`; every model tensor must be present
    /// with the same shape.
    pub fn restore<M: Module<f32> + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut err = None;
        model.visit("", &mut |name, kind, t| {
            if err.is_some() {
                return;
            }
            let prefix = match kind {
                ParamKind::Trainable => "param",
                ParamKind::Buffer => "buffer",
            };
            let key = format!("{prefix}/{name}");
            match self.entries.get(&key) {
                Some(s) if s.shape() == t.shape() => {
                    *t = match kind {
                        ParamKind::Trainable => s.requiring_grad(),
                        ParamKind::Buffer => s.detach(),
                    }
                }
                Some(s) => {
                    err = Some(Error::Format(format!(
                        "{key}: stored shape {:?}, model expects {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::Format(format!("{key} missing from checkpoint"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn restore_optimizer(&self, sgd: &mut Sgd<f32>) {
        sgd.velocity = self
            .entries
            .iter()
            .filter_map(|(k, t)| {
                k.strip_prefix("momentum/")
                    .map(|n| (n.to_string(), t.to_vec()))
            })
            .collect();
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.config_hash.to_le_bytes())?;
        out.write_all(&(self.config_text.len() as u32).to_le_bytes())?;
        out.write_all(self.config_text.as_bytes())?;
        out.write_all(&self.iteration.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            write_tensor(out, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        input.read_exact(&mut b8)?;
        let config_hash = u64::from_le_bytes(b8);
        let config_text = read_string(input)?;
        input.read_exact(&mut b8)?;
        let iteration = u64::from_le_bytes(b8);
        input.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(input)?;
            entries.insert(name, read_tensor(input)?);
        }
        Ok(Checkpoint {
            config_hash,
            config_text,
            iteration,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

fn read_string<R: Read>(input: &mut R) -> Result<String> {
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("name is not UTF-8".into()))
}
