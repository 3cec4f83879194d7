//! Binary checkpoint container.
//!
//! ```text
//! magic       8 bytes   "SEFFCKPT"
//! version     u32 LE
//! header_len  u64 LE
//! header      JSON (architecture, run config echo, counters, tensor table)
//! params      f64 LE, every tensor in table order
//! adam m, v   f64 LE, same order (present when the header says so)
//! ```

use std::fs;
use std::path::Path;

use seffsal_autograd::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msnet::{MsNet, NetConfig};
use crate::trainer::Adam;

pub const MAGIC: &[u8; 8] = b"SEFFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub net: NetConfig,
    pub run_config: serde_json::Value,
    pub epoch: usize,
    pub iteration: usize,
    pub adam_step: u64,
    pub has_optimizer: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<Tensor>,
    pub adam: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

fn put_tensors(buf: &mut Vec<u8>, tensors: impl Iterator<Item = impl AsRef<[f64]>>) {
    for t in tensors {
        for v in t.as_ref() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save(
    path: &Path,
    net: &MsNet,
    adam: Option<&Adam>,
    epoch: usize,
    iteration: usize,
    run_config: &serde_json::Value,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        net: net.config().clone(),
        run_config: run_config.clone(),
        epoch,
        iteration,
        adam_step: adam.map_or(0, |a| a.step),
        has_optimizer: adam.is_some(),
        tensors: net
            .params
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_owned(),
                shape: t.shape().dims(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 8 * net.num_params() * 3 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    put_tensors(&mut buf, net.params.iter().map(|(_, _, t)| t.data()));
    if let Some(a) = adam {
        put_tensors(&mut buf, a.m.iter().map(Tensor::data));
        put_tensors(&mut buf, a.v.iter().map(Tensor::data));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn tensors(&mut self, table: &[TensorEntry]) -> Result<Vec<Tensor>> {
        table
            .iter()
            .map(|e| {
                let [n, c, h, w] = e.shape;
                let shape = Shape::new(n, c, h, w);
                let raw = self.take(shape.numel() * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                Ok(Tensor::from_vec(shape, data)?)
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::ArchitectureMismatch {
                version,
                detail: format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
            });
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let params = r.tensors(&header.tensors)?;
        let adam = if header.has_optimizer {
            Some((r.tensors(&header.tensors)?, r.tensors(&header.tensors)?))
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, params, adam })
    }

    fn mismatch(&self, detail: String) -> Error {
        Error::ArchitectureMismatch {
            version: self.header.format_version,
            detail,
        }
    }

    /// Rebuilds the network, refusing a checkpoint whose architecture differs
    /// from `expected`.
    pub fn restore(&self, expected: &NetConfig) -> Result<MsNet> {
        if &self.header.net != expected {
            return Err(self.mismatch(format!(
                "checkpoint holds variant {} / fusion {} / widths {:?} / inputs {:?}, config asks for variant {} / fusion {} / widths {:?} / inputs {:?}",
                self.header.net.variant,
                self.header.net.fusion.as_str(),
                self.header.net.backbone.stage_channels,
                self.header.net.input_sizes,
                expected.variant,
                expected.fusion.as_str(),
                expected.backbone.stage_channels,
                expected.input_sizes,
            )));
        }
        self.restore_own()
    }

    /// Rebuilds the network described by the checkpoint itself.
    pub fn restore_own(&self) -> Result<MsNet> {
        let mut net = MsNet::new(&self.header.net, 0)?;
        let ids: Vec<_> = net.params.ids().collect();
        if ids.len() != self.header.tensors.len() {
            return Err(self.mismatch(format!(
                "{} tensors stored, network has {}",
                self.header.tensors.len(),
                ids.len()
            )));
        }
        for ((id, entry), value) in ids.into_iter().zip(&self.header.tensors).zip(&self.params) {
            let current = net.params.get(id);
            if net.params.name(id) != entry.name || current.shape() != value.shape() {
                return Err(self.mismatch(format!(
                    "tensor {} {} does not match stored {} {:?}",
                    net.params.name(id),
                    current.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            *net.params.get_mut(id) = value.clone();
        }
        Ok(net)
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn restore_adam(&self, net: &MsNet) -> Option<Adam> {
        let (m, v) = self.adam.as_ref()?;
        let mut adam = Adam::new(&net.params);
        adam.m = m.clone();
        adam.v = v.clone();
        adam.step = self.header.adam_step;
        Some(adam)
    }
}
