//! Weight files: 8-byte magic, u64 header length, JSON header listing
//! tensor names and shapes, then all tensors as little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hresnet::{HResNet, NetworkSpec, Param, RunningStats};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LDWEIGHT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        arch: ck.arch.clone(),
        dtype: "f32".into(),
        tensors: ck
            .tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: ck.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * ck.tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &ck.tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a weight file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype {}", header.dtype)));
    }
    let mut off = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(off..off + 4 * n)
            .ok_or_else(|| bad(format!("payload truncated at tensor {}", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok(Checkpoint {
        arch: header.arch,
        meta: header.meta,
        tensors,
    })
}

pub const HRESNET_ARCH: &str = "hresnet";

impl<T: Scalar> HResNet<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect();
        for (i, s) in self.stats.iter().enumerate() {
            let prefix = format!("block{}.bn{}", i / 2, i % 2 + 1);
            let f = |v: &[f64]| Tensor::from_f64(&[v.len()], v).expect("1-D");
            tensors.push((format!("{prefix}.running_mean"), f(&s.mean)));
            tensors.push((format!("{prefix}.running_var"), f(&s.var)));
        }
        Checkpoint {
            arch: HRESNET_ARCH.into(),
            meta: serde_json::json!({ "spec": self.spec }),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch != HRESNET_ARCH {
            return Err(Error::Checkpoint(format!(
                "expected {HRESNET_ARCH} weights, found {}",
                ck.arch
            )));
        }
        let spec: NetworkSpec = serde_json::from_value(ck.meta["spec"].clone())
            .map_err(|e| Error::Checkpoint(format!("network spec: {e}")))?;
        let mut net = super::build_hresnet::<T>(&spec, 0)?;
        let fetch = |name: &str, shape: &[usize]| -> Result<&Tensor<f32>> {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        for Param { name, value } in &mut net.params {
            *value = fetch(name, value.shape())?.cast();
        }
        for (i, RunningStats { mean, var }) in net.stats.iter_mut().enumerate() {
            let prefix = format!("block{}.bn{}", i / 2, i % 2 + 1);
            *mean = fetch(&format!("{prefix}.running_mean"), &[mean.len()])?.to_f64();
            *var = fetch(&format!("{prefix}.running_var"), &[var.len()])?.to_f64();
        }
        Ok(net)
    }
}
