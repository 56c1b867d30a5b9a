//! Named-tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTLC" | u32 version=1 | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | f64 data[∏dims]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};
use crate::models::{BnMode, ClassifierHead, ConvBlock, FeatureExtractor, HeadKind, Linear, SSParams, VariantSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTLC";
pub const VERSION: u32 = 1;
const KIND: &str = "checkpoint";

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| Error::Contract(format!("tensor name too long: {}", nb.len())))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Contract(format!("tensor rank too large: {}", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes, KIND);
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            kind: KIND,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            kind: KIND,
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
            kind: KIND,
            reason: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format {
            kind: KIND,
            reason: "tensor size overflows".into(),
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            kind: KIND,
            reason: format!("tensor `{name}`: {e}"),
        })?;
        out.push((name, t));
    }
    if !r.is_empty() {
        return Err(Error::Format {
            kind: KIND,
            reason: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(tensors)?)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Everything a trained model consists of; optional parts are absent for a
/// pre-trained backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub extractor: FeatureExtractor,
    pub ss: Option<SSParams>,
    pub head: Option<ClassifierHead>,
    pub tag: Option<BundleTag>,
}

/// How a meta-trained bundle is meant to be evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BundleTag {
    pub variant: VariantSpec,
    pub bn: BnMode,
}

impl ModelBundle {
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.extractor.blocks().iter().enumerate() {
            let p = format!("extractor.block{i}");
            out.push((format!("{p}.conv.weight"), b.weight.detached()));
            out.push((format!("{p}.conv.bias"), b.bias.detached()));
            out.push((format!("{p}.bn.gamma"), b.bn_gamma.detached()));
            out.push((format!("{p}.bn.beta"), b.bn_beta.detached()));
            out.push((format!("{p}.bn.running_mean"), b.running_mean.detached()));
            out.push((format!("{p}.bn.running_var"), b.running_var.detached()));
            out.push((format!("{p}.pool"), Tensor::scalar(if b.pool { 1.0 } else { 0.0 })));
        }
        if let Some(ss) = &self.ss {
            for (i, (s, t)) in ss.scale.iter().zip(&ss.shift).enumerate() {
                out.push((format!("ss.block{i}.scale"), s.detached()));
                out.push((format!("ss.block{i}.shift"), t.detached()));
            }
        }
        if let Some(h) = &self.head {
            for (i, l) in h.layers.iter().enumerate() {
                out.push((format!("head.layer{i}.weight"), l.weight.detached()));
                out.push((format!("head.layer{i}.bias"), l.bias.detached()));
            }
            if let Some(t) = &h.temperature {
                out.push(("head.temperature".into(), t.detached()));
            }
        }
        if let Some(tag) = &self.tag {
            let idx = VariantSpec::NAMES
                .iter()
                .position(|n| *n == tag.variant.name())
                .expect("every variant has a listed name");
            out.push(("meta.variant".into(), Tensor::scalar(idx as f64)));
            let bn = if tag.bn == BnMode::Running { 1.0 } else { 0.0 };
            out.push(("meta.bn_running".into(), Tensor::scalar(bn)));
        }
        out
    }

    /// Rebuild from named tensors. The extractor comes back frozen.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        fn take(map: &mut std::collections::BTreeMap<String, Tensor>, n: String) -> Result<Tensor> {
            map.remove(&n).ok_or_else(|| Error::Format {
                kind: KIND,
                reason: format!("missing tensor `{n}`"),
            })
        }

        let mut blocks = Vec::new();
        let mut i = 0;
        while let Ok(weight) = take(&mut map, format!("extractor.block{i}.conv.weight")) {
            let p = format!("extractor.block{i}");
            if weight.rank() != 4 {
                return Err(Error::Format {
                    kind: KIND,
                    reason: format!("{p}.conv.weight has rank {}", weight.rank()),
                });
            }
            blocks.push(ConvBlock {
                weight,
                bias: take(&mut map, format!("{p}.conv.bias"))?,
                bn_gamma: take(&mut map, format!("{p}.bn.gamma"))?,
                bn_beta: take(&mut map, format!("{p}.bn.beta"))?,
                running_mean: take(&mut map, format!("{p}.bn.running_mean"))?,
                running_var: take(&mut map, format!("{p}.bn.running_var"))?,
                pool: take(&mut map, format!("{p}.pool"))?.data()[0] != 0.0,
            });
            i += 1;
        }
        let mut extractor = FeatureExtractor::new(blocks).map_err(|e| Error::Format {
            kind: KIND,
            reason: e.to_string(),
        })?;
        extractor.freeze();

        let ss = if map.contains_key("ss.block0.scale") {
            let n = extractor.num_blocks();
            let mut scale = Vec::with_capacity(n);
            let mut shift = Vec::with_capacity(n);
            for i in 0..n {
                scale.push(take(&mut map, format!("ss.block{i}.scale"))?);
                shift.push(take(&mut map, format!("ss.block{i}.shift"))?);
            }
            let ss = SSParams { scale, shift };
            ss.check_bound(&extractor)?;
            Some(ss)
        } else {
            None
        };

        let head = if map.contains_key("head.layer0.weight") {
            let mut layers = Vec::new();
            let mut i = 0;
            while let Ok(weight) = take(&mut map, format!("head.layer{i}.weight")) {
                layers.push(Linear {
                    weight: weight.with_requires_grad(true),
                    bias: take(&mut map, format!("head.layer{i}.bias"))?.with_requires_grad(true),
                });
                i += 1;
            }
            let temperature = take(&mut map, "head.temperature".into()).ok().map(|t| t.with_requires_grad(true));
            let kind = if temperature.is_some() {
                HeadKind::Cosine
            } else {
                HeadKind::FcSoftmax
            };
            Some(ClassifierHead {
                kind,
                layers,
                temperature,
            })
        } else {
            None
        };

        let tag = match take(&mut map, "meta.variant".into()) {
            Ok(v) => {
                let idx = v.data()[0];
                let name = VariantSpec::NAMES
                    .get(idx as usize)
                    .filter(|_| idx >= 0.0 && idx.fract() == 0.0)
                    .ok_or_else(|| Error::Format {
                        kind: KIND,
                        reason: format!("unknown variant index {idx}"),
                    })?;
                let bn = if take(&mut map, "meta.bn_running".into())?.data()[0] != 0.0 {
                    BnMode::Running
                } else {
                    BnMode::Batch
                };
                Some(BundleTag {
                    variant: name.parse()?,
                    bn,
                })
            }
            Err(_) => None,
        };

        if let Some(extra) = map.keys().next() {
            return Err(Error::Format {
                kind: KIND,
                reason: format!("unexpected tensor `{extra}`"),
            });
        }
        Ok(ModelBundle {
            extractor,
            ss,
            head,
            tag,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(load_tensors(path)?)
    }
}
