//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MLFS" | version u16 | count u32 | record* | crc32 u32
//! record = name_len u16 | name (UTF-8) | rank u8 | extent u32 * rank | dtype u8 | payload
//! ```
//!
//! Records are sorted by name. The only dtype is `0` (binary32); values are
//! rounded from binary64 on save. The CRC-32 covers every preceding byte.
//!
//! A supernet is stored as a directory holding `base.ckpt` (frozen weights
//! and metadata), `adapters.ckpt` (low-rank pairs) and `trainable.ckpt`
//! (task head and projection bank), so one base can serve many adapter sets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::distill::ProjectionBank;
use crate::error::{Error, Result};
use crate::lora::AdapterStack;
use crate::model::{ArchConfig, BaseWeights, ConfigSpace, LayerTensor, ModelDims, Supernet, TaskHead, TaskKind, Width};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MLFS";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub const BASE_FILE: &str = "base.ckpt";
pub const ADAPTER_FILE: &str = "adapters.ckpt";
pub const TRAINABLE_FILE: &str = "trainable.ckpt";

/// Rounds every element through binary32, as a save/load would.
pub fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

pub fn encode<'a>(entries: impl IntoIterator<Item = (String, &'a Tensor)>) -> Result<Vec<u8>> {
    let mut sorted: BTreeMap<String, &Tensor> = BTreeMap::new();
    for (name, t) in entries {
        if sorted.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        sorted.insert(name, t);
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for (name, t) in sorted {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("tensor name too long: `{name}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("tensor `{name}` has too many axes")))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("tensor `{name}` extent too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(Error::Format("file too short for a checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor `{name}` has unknown dtype tag {dtype}")));
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("extent overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, entries: impl IntoIterator<Item = (String, &'a Tensor)>) -> Result<()> {
    fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode(&fs::read(path)?)
}

fn meta_tensors(net: &Supernet, space: &ConfigSpace) -> Vec<(String, Tensor)> {
    let a = net.arch();
    let (code, classes) = match net.dims.task {
        TaskKind::Classify { classes } => (0.0, classes as f64),
        TaskKind::LanguageModel => (1.0, 0.0),
    };
    let arch = vec![
        a.hidden as f64,
        a.heads as f64,
        a.ffn as f64,
        a.layers as f64,
        net.dims.vocab as f64,
        net.dims.max_seq as f64,
        code,
        classes,
    ];
    let widths: Vec<f64> = space
        .widths()
        .iter()
        .flat_map(|w| [w.hidden as f64, w.heads as f64, w.ffn as f64])
        .collect();
    let depths: Vec<f64> = space.depths().iter().map(|&d| d as f64).collect();
    vec![
        ("meta.arch".into(), Tensor::vector(&arch)),
        ("meta.widths".into(), Tensor::new(vec![space.widths().len(), 3], widths).unwrap()),
        ("meta.depths".into(), Tensor::vector(&depths)),
    ]
}

fn int(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("metadata field {what} is not a non-negative integer: {v}")))
    }
}

fn take(map: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    map.remove(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
}

/// Writes `net`, its configuration space and an optional projection bank
/// into directory `dir`.
pub fn save_supernet(dir: &Path, net: &Supernet, space: &ConfigSpace, bank: Option<&ProjectionBank>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = meta_tensors(net, space);
    let base = net.base.named_tensors().into_iter().chain(meta.iter().map(|(n, t)| (n.clone(), t)));
    save(&dir.join(BASE_FILE), base)?;
    let adapter_path = dir.join(ADAPTER_FILE);
    if net.adapters.num_stages() > 0 {
        save(&adapter_path, net.adapters.named_tensors())?;
    } else if adapter_path.exists() {
        fs::remove_file(&adapter_path)?;
    }
    let mut trainable = net.head.named_tensors();
    if let Some(bank) = bank {
        trainable.extend(bank.named_tensors());
    }
    save(&dir.join(TRAINABLE_FILE), trainable)
}

/// A supernet directory read back from disk.
pub struct LoadedSupernet {
    pub net: Supernet,
    pub space: ConfigSpace,
    pub bank: Option<ProjectionBank>,
}

pub fn load_supernet(dir: &Path) -> Result<LoadedSupernet> {
    let mut base = load(&dir.join(BASE_FILE))?;
    let arch = take(&mut base, "meta.arch")?;
    let a = arch.data();
    if a.len() != 8 {
        return Err(Error::Format("meta.arch must hold 8 fields".into()));
    }
    let config = ArchConfig::new(int(a[0], "hidden")?, int(a[1], "heads")?, int(a[2], "ffn")?, int(a[3], "layers")?);
    let task = match int(a[6], "task")? {
        0 => TaskKind::Classify {
            classes: int(a[7], "classes")?,
        },
        1 => TaskKind::LanguageModel,
        other => return Err(Error::Format(format!("unknown task code {other}"))),
    };
    let dims = ModelDims {
        vocab: int(a[4], "vocab")?,
        max_seq: int(a[5], "max_seq")?,
        task,
    };
    let widths = take(&mut base, "meta.widths")?;
    let widths = widths
        .data()
        .chunks(3)
        .map(|w| {
            Ok(Width {
                hidden: int(w[0], "width")?,
                heads: int(w[1], "width")?,
                ffn: int(w[2], "width")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let depths = take(&mut base, "meta.depths")?
        .data()
        .iter()
        .map(|&d| int(d, "depth"))
        .collect::<Result<Vec<_>>>()?;
    let space = ConfigSpace::new(widths, depths)?;

    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let mut tensors = Vec::with_capacity(LayerTensor::ALL.len());
        for which in LayerTensor::ALL {
            let t = take(&mut base, &format!("base.layers.{i}.{}", which.name()))?;
            let want = which.shape(config.hidden, config.ffn);
            if t.shape() != want.as_slice() {
                return Err(Error::shape("checkpoint layer tensor", &want, t.shape()));
            }
            tensors.push(t);
        }
        layers.push(tensors);
    }
    let weights = BaseWeights {
        arch: config,
        tok_emb: take(&mut base, "base.tok_emb")?,
        pos_emb: take(&mut base, "base.pos_emb")?,
        layers,
        final_norm_gain: take(&mut base, "base.final_norm.gain")?,
        final_norm_bias: take(&mut base, "base.final_norm.bias")?,
    };
    if let Some(extra) = base.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}` in {BASE_FILE}")));
    }

    let adapter_path = dir.join(ADAPTER_FILE);
    let adapters = if adapter_path.exists() {
        let map = load(&adapter_path)?;
        AdapterStack::from_named(map.iter().map(|(n, t)| (n.as_str(), t)))?
    } else {
        AdapterStack::empty()
    };

    let mut trainable = load(&dir.join(TRAINABLE_FILE))?;
    let head = TaskHead {
        weight: take(&mut trainable, "head.weight")?,
        bias: take(&mut trainable, "head.bias")?,
    };
    let bank = ProjectionBank::from_named("proj", trainable.iter().map(|(n, t)| (n.as_str(), t)))?;

    Ok(LoadedSupernet {
        net: Supernet {
            dims,
            base: weights,
            head,
            adapters,
        },
        space,
        bank,
    })
}
