//! Binary model format.
//!
//! ```text
//! "GNET" | version u32 | header_len u32 | header (JSON) | record_count u32
//! | records ... | FNV-1a 64 of everything before it
//! ```
//!
//! A record is `tag u8 | ndims u32 | dims u64 × ndims` followed by
//! `f64 × prod(dims)` for real tensors, or by `u64` filter words and
//! `f64 × dims[0]` scale and bias for packed binary convolutions. All
//! integers and floats are little-endian. Records appear in the order
//! [`visit`] walks the model.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use groupnet::bitcore::PackedFilters;
use groupnet::structnet::{ArchConfig, PackedFp, PackedHead, PackedModel, PackedUnit, PackedWiring};
use groupnet::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, SyntheticConfig};
use crate::error::{read, write, CliError, Result};

pub const MAGIC: &[u8; 4] = b"GNET";
pub const VERSION: u32 = 1;

const TAG_REAL: u8 = 0;
const TAG_PACKED: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub arch: ArchConfig,
    pub input_shape: [usize; 3],
    pub dataset: DatasetKind,
    /// Generator settings and seed when the data is synthetic.
    pub synthetic: Option<(SyntheticConfig, u64)>,
    pub has_input_mean: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub header: ModelHeader,
    pub model: PackedModel,
}

pub enum Slot<'a> {
    Real(&'a mut Tensor<f64>),
    Vector(&'a mut Vec<f64>),
    Packed(&'a mut PackedUnit),
}

fn visit_fp(fp: &mut PackedFp, f: &mut dyn FnMut(Slot<'_>) -> Result<()>) -> Result<()> {
    f(Slot::Real(&mut fp.weight))?;
    f(Slot::Vector(&mut fp.scale))?;
    f(Slot::Vector(&mut fp.bias))
}

fn visit_opt(v: &mut Option<Vec<f64>>, f: &mut dyn FnMut(Slot<'_>) -> Result<()>) -> Result<()> {
    match v {
        Some(v) => f(Slot::Vector(v)),
        None => Ok(()),
    }
}

/// Every stored tensor of `m`, in file order.
pub fn visit(m: &mut PackedModel, f: &mut dyn FnMut(Slot<'_>) -> Result<()>) -> Result<()> {
    if let Some(mean) = &mut m.input_mean {
        f(Slot::Real(mean))?;
    }
    visit_fp(&mut m.stem, f)?;
    for blk in &mut m.blocks {
        if let Some(p) = &mut blk.projection {
            visit_fp(p, f)?;
        }
        for unit in blk.branches.iter_mut().flatten() {
            f(Slot::Packed(unit))?;
        }
        for l in &mut blk.unit_lambdas {
            visit_opt(l, f)?;
        }
    }
    match &mut m.wiring {
        PackedWiring::Layerwise => {}
        PackedWiring::Groups(groups) => {
            for (_, l) in groups {
                visit_opt(l, f)?;
            }
        }
        PackedWiring::Soft { lambdas, gates } => {
            for l in lambdas.iter_mut().chain(gates.iter_mut()) {
                visit_opt(l, f)?;
            }
        }
    }
    match &mut m.head {
        PackedHead::Linear(w) | PackedHead::Pixelwise(w) => f(Slot::Real(w)),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_dims(out: &mut Vec<u8>, tag: u8, dims: &[usize]) {
    out.push(tag);
    put_u32(out, dims.len() as u32);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CliError::Format(format!("truncated {what} at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CliError::Format(format!("{what} too large")))?, what)?;
        Ok(raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn dims(&mut self, expect_tag: u8, index: usize) -> Result<Vec<usize>> {
        let at = self.pos;
        let tag = self.u8("record tag")?;
        if tag != expect_tag {
            return Err(CliError::Format(format!(
                "record {index} at offset {at} has tag {tag}, expected {expect_tag}"
            )));
        }
        let n = self.u32("record rank")? as usize;
        if n > 8 {
            return Err(CliError::Format(format!("record {index} has rank {n}")));
        }
        (0..n).map(|_| self.u64("record dims").map(|d| d as usize)).collect()
    }
}

fn shape_check(index: usize, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(CliError::Format(format!(
            "record {index} has shape {got:?}, the architecture expects {expected:?}"
        )));
    }
    Ok(())
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        let header = serde_json::to_vec(&self.header).map_err(|e| CliError::Format(e.to_string()))?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        let mut body = Vec::new();
        let mut count = 0u32;
        let mut model = self.model.clone();
        visit(&mut model, &mut |slot| {
            count += 1;
            match slot {
                Slot::Real(t) => {
                    put_dims(&mut body, TAG_REAL, t.shape());
                    put_f64s(&mut body, t.data());
                }
                Slot::Vector(v) => {
                    put_dims(&mut body, TAG_REAL, &[v.len()]);
                    put_f64s(&mut body, v);
                }
                Slot::Packed(u) => {
                    put_dims(&mut body, TAG_PACKED, &[u.out_channels, u.in_channels, u.kernel, u.kernel]);
                    for w in u.filters.words() {
                        body.extend_from_slice(&w.to_le_bytes());
                    }
                    put_f64s(&mut body, &u.scale);
                    put_f64s(&mut body, &u.bias);
                }
            }
            Ok(())
        })?;
        put_u32(&mut out, count);
        out.extend_from_slice(&body);
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(CliError::Format(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CliError::Format(format!("bad magic {:?}, expected \"GNET\"", &bytes[..4])));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let actual = checksum(body);
        if stored != actual {
            return Err(CliError::Format(format!(
                "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CliError::Format(format!(
                "model format version {version} is not supported; this build reads version {VERSION}"
            )));
        }
        let hlen = r.u32("header length")? as usize;
        let header: ModelHeader =
            serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| CliError::Format(format!("header: {e}")))?;
        header.arch.validate()?;
        let count = r.u32("record count")? as usize;
        let mut model = PackedModel::skeleton(&header.arch)?;
        if header.has_input_mean {
            model.input_mean = Some(Tensor::zeros(&header.input_shape));
        }
        let mut index = 0;
        visit(&mut model, &mut |slot| {
            if index >= count {
                return Err(CliError::Format(format!("file has {count} records, the architecture needs more")));
            }
            match slot {
                Slot::Real(t) => {
                    let dims = r.dims(TAG_REAL, index)?;
                    shape_check(index, t.shape(), &dims)?;
                    *t = Tensor::from_vec(&dims, r.f64s(t.len(), "real record")?)?;
                }
                Slot::Vector(v) => {
                    let dims = r.dims(TAG_REAL, index)?;
                    shape_check(index, &[v.len()], &dims)?;
                    *v = r.f64s(v.len(), "vector record")?;
                }
                Slot::Packed(u) => {
                    let dims = r.dims(TAG_PACKED, index)?;
                    shape_check(index, &[u.out_channels, u.in_channels, u.kernel, u.kernel], &dims)?;
                    let n = u.filters.words().len();
                    let words = (0..n).map(|_| r.u64("packed words")).collect::<Result<Vec<_>>>()?;
                    u.filters = PackedFilters::from_raw(u.out_channels, u.filters.fan_in(), words)?;
                    u.scale = r.f64s(u.out_channels, "scale")?;
                    u.bias = r.f64s(u.out_channels, "bias")?;
                }
            }
            index += 1;
            Ok(())
        })?;
        if index != count || r.pos != body.len() {
            return Err(CliError::Format(format!(
                "file has {count} records and {} trailing bytes; the architecture uses {index}",
                body.len() - r.pos
            )));
        }
        Ok(ModelFile { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }
}
