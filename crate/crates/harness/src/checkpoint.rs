//! Named-tensor checkpoint archive.
//!
//! Layout (little-endian): `"TOFE"`, version `u32`, entry count `u32`, then
//! per entry: name length `u32`, UTF-8 name, rank `u32`, dims `u32` each and
//! the `f32` payload. The last entry, named `__meta__`, has rank 1 and holds
//! a JSON text blob of `dims[0]` bytes instead of scalars. There is no
//! checksum; loading validates names and shapes only.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tofe_core::tofe::{StagePlan, ToFe};
use tofe_core::train::AvgKeepCounts;
use tofe_core::{Backbone, ModelConfig, Module, Rng, Tensor};

use crate::error::{HarnessError, Result};
use crate::fsutil::{read, write_atomic};

pub const MAGIC: &[u8; 4] = b"TOFE";
pub const VERSION: u32 = 1;
pub const META_NAME: &str = "__meta__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Present for ToFe checkpoints.
    pub plan: Option<StagePlan>,
    pub avg_counts: Option<AvgKeepCounts>,
    /// Training budget in FLOPs, for ToFe checkpoints.
    pub target_flops: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub backbone: Backbone<f32>,
    pub tofe: Option<ToFe<f32>>,
}

impl Checkpoint {
    pub fn backbone_only(model: ModelConfig, backbone: Backbone<f32>, seed: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                model,
                plan: None,
                avg_counts: None,
                target_flops: None,
                seed,
            },
            backbone,
            tofe: None,
        }
    }

    pub fn is_tofe(&self) -> bool {
        self.tofe.is_some()
    }

    /// Batch-adaptive keep counts recorded during training.
    pub fn keep_counts(&self) -> Option<Vec<usize>> {
        self.meta
            .avg_counts
            .as_ref()
            .filter(|a| a.updates > 0)
            .map(|a| a.snapshot(self.meta.model.num_patches()))
    }

    /// Fails when the stored model disagrees with `cfg`, naming both values.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let m = &self.meta.model;
        let fields: [(&'static str, usize, usize); 8] = [
            ("dim", m.dim, cfg.dim),
            ("depth", m.depth, cfg.depth),
            ("heads", m.heads, cfg.heads),
            ("mlp_hidden", m.mlp_hidden, cfg.mlp_hidden),
            ("image_size", m.image_size, cfg.image_size),
            ("patch_size", m.patch_size, cfg.patch_size),
            ("channels", m.channels, cfg.channels),
            ("num_classes", m.num_classes, cfg.num_classes),
        ];
        for (field, ck, want) in fields {
            if ck != want {
                return Err(HarnessError::Mismatch {
                    field,
                    checkpoint: ck.to_string(),
                    config: want.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Tensor<f32>)> = self
            .backbone
            .named()
            .into_iter()
            .map(|(n, t)| (format!("backbone.{n}"), t))
            .collect();
        if let Some(t) = &self.tofe {
            entries.extend(t.named().into_iter().map(|(n, t)| (format!("tofe.{n}"), t)));
        }
        let meta = serde_json::to_string(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32 + 1).to_le_bytes());
        for (name, t) in entries {
            put_header(&mut out, &name, t.shape());
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_header(&mut out, META_NAME, &[meta.len()]);
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(HarnessError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(HarnessError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let count = r.u32("entry count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        let mut meta = None;
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| HarnessError::Parse {
                offset: r.pos as u64,
                record: Some(i),
                msg: "entry name is not UTF-8".into(),
            })?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name == META_NAME {
                if rank != 1 || i + 1 != count {
                    return Err(HarnessError::Shape {
                        name,
                        detail: "metadata must be the last, rank-1 entry".into(),
                    });
                }
                let blob = r.take(dims[0], "metadata")?;
                let m: CheckpointMeta = serde_json::from_slice(blob).map_err(|e| HarnessError::Parse {
                    offset: r.pos as u64,
                    record: Some(i),
                    msg: format!("metadata: {e}"),
                })?;
                meta = Some(m);
            } else {
                let numel: usize = dims.iter().product();
                let data: Vec<f32> = r
                    .take(numel * 4, &name)?
                    .chunks_exact(4)
                    .map(|q| f32::from_le_bytes(q.try_into().unwrap()))
                    .collect();
                tensors.push((name, Tensor::new(dims, data)?));
            }
        }
        if r.pos != bytes.len() {
            return Err(HarnessError::Parse {
                offset: r.pos as u64,
                record: None,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let meta = meta.ok_or_else(|| HarnessError::Shape {
            name: META_NAME.into(),
            detail: "missing metadata entry".into(),
        })?;
        meta.model.validate()?;

        let mut backbone = Backbone::<f32>::init(&meta.model, &mut Rng::seed(0));
        let mut rest = fill("backbone.", &mut backbone, tensors)?;
        let tofe = match &meta.plan {
            Some(plan) => {
                let mut t = ToFe::<f32>::init(&meta.model, plan, &mut Rng::seed(0), 0.0)?;
                rest = fill("tofe.", &mut t, rest)?;
                Some(t)
            }
            None => None,
        };
        if let Some((name, _)) = rest.first() {
            return Err(HarnessError::Shape {
                name: name.clone(),
                detail: "unexpected entry".into(),
            });
        }
        Ok(Self { meta, backbone, tofe })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }
}

fn put_header(out: &mut Vec<u8>, name: &str, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

/// Moves the leading `prefix` entries into `module`'s leaves, in order.
fn fill<M: Module<Tensor<f32>>>(
    prefix: &str,
    module: &mut M,
    entries: Vec<(String, Tensor<f32>)>,
) -> Result<Vec<(String, Tensor<f32>)>> {
    let names: Vec<String> = module.named().into_iter().map(|(n, _)| format!("{prefix}{n}")).collect();
    let mut it = entries.into_iter();
    for (slot, want) in module.leaves_mut().into_iter().zip(&names) {
        let (name, t) = it.next().ok_or_else(|| HarnessError::Shape {
            name: want.clone(),
            detail: "missing".into(),
        })?;
        if &name != want {
            return Err(HarnessError::Shape {
                name,
                detail: format!("expected entry {want}"),
            });
        }
        if t.shape() != slot.shape() {
            return Err(HarnessError::Shape {
                name,
                detail: format!("shape {:?}, configuration implies {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    Ok(it.collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(HarnessError::Parse {
                offset: self.pos as u64,
                record: None,
                msg: format!("truncated {what}: needs {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
