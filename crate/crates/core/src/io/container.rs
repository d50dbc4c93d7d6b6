//! `RLP1` scene container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "RLP1" | version u32 | section*
//! section = tag [u8; 4] | length u64 | payload | crc32(payload) u32
//! ```
//!
//! Readers skip sections with unknown tags; every section's checksum is
//! verified regardless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::fit::{AdamState, Checkpoint, Moments};
use crate::image::Image;
use crate::net::{NetConfig, NetParams};
use crate::scene::{DescriptorSet, LightColors, PointCloud, SceneModel};

use super::formats::{read_file, write_atomic};

pub const MAGIC: &[u8; 4] = b"RLP1";
pub const FORMAT_VERSION: u32 = 1;

const REQUIRED: [&[u8; 4]; 7] = [b"META", b"PNTS", b"DESC", b"NETP", b"LGHT", b"TEXA", b"CONF"];

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    trained_steps: u64,
    points: usize,
    descriptor_width: usize,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

/// Bounds-checked cursor; every read failure is a format error.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!("{} section is truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(elem_bytes as u64).map_or(true, |b| b > left) {
            return Err(Error::format(format!("{} section declares too many elements", self.what)));
        }
        Ok(n as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("name is not UTF-8"))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!("{} section has trailing bytes", self.what)));
        }
        Ok(())
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

/// Serializes a model and, for checkpoints, its optimizer state.
pub fn encode(model: &SceneModel, adam: Option<&AdamState>) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let meta = Meta {
        format_version: FORMAT_VERSION,
        trained_steps: model.trained_steps,
        points: model.cloud.len(),
        descriptor_width: model.descriptors.width(),
    };
    section(&mut out, b"META", &serde_json::to_vec(&meta).expect("plain struct"));

    let mut w = Writer::default();
    w.u64(model.cloud.len() as u64);
    for p in model.cloud.positions() {
        w.f32s(p);
    }
    section(&mut out, b"PNTS", &w.buf);

    let mut w = Writer::default();
    w.u64(model.descriptors.count() as u64);
    w.u32(model.descriptors.width() as u32);
    w.f32s(model.descriptors.values());
    section(&mut out, b"DESC", &w.buf);

    let mut w = Writer::default();
    w.u32(model.net_params.entries().len() as u32);
    for (name, t) in model.net_params.entries() {
        w.name(name);
        w.u8(t.shape().len() as u8);
        for d in t.shape() {
            w.u32(*d as u32);
        }
        w.f32s(t.data());
    }
    section(&mut out, b"NETP", &w.buf);

    let mut w = Writer::default();
    w.f32s(&model.lights.room);
    w.f32s(&model.lights.flash);
    section(&mut out, b"LGHT", &w.buf);

    let mut w = Writer::default();
    let t = &model.albedo_halftex;
    for d in [t.channels, t.height, t.width] {
        w.u32(d as u32);
    }
    w.f32s(&t.data);
    section(&mut out, b"TEXA", &w.buf);

    section(&mut out, b"CONF", &serde_json::to_vec(&model.net_config).expect("plain struct"));

    if let Some(a) = adam {
        let mut w = Writer::default();
        w.u64(a.t);
        w.u32(a.moments.len() as u32);
        for (name, m) in &a.moments {
            w.name(name);
            w.u64(m.m.len() as u64);
            w.f32s(&m.m);
            w.f32s(&m.v);
        }
        section(&mut out, b"ADAM", &w.buf);
    }
    Ok(out)
}

/// Parses a container; the optimizer state is present for checkpoints.
pub fn decode(bytes: &[u8]) -> Result<(SceneModel, Option<AdamState>)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format("not an RLP1 container"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "container version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let mut sections: Vec<([u8; 4], &[u8])> = Vec::new();
    let mut pos = 8;
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(Error::format("truncated section header"));
        }
        let tag: [u8; 4] = bytes[pos..pos + 4].try_into().expect("4 bytes");
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        pos += 12;
        let left = (bytes.len() - pos) as u64;
        if len > left || left - len < 4 {
            return Err(Error::format(format!("section {} is truncated", String::from_utf8_lossy(&tag))));
        }
        let payload = &bytes[pos..pos + len as usize];
        pos += len as usize;
        let crc = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        pos += 4;
        if crc32fast::hash(payload) != crc {
            return Err(Error::format(format!("checksum mismatch in section {}", String::from_utf8_lossy(&tag))));
        }
        if sections.iter().any(|(t, _)| *t == tag) {
            return Err(Error::format(format!("duplicate section {}", String::from_utf8_lossy(&tag))));
        }
        sections.push((tag, payload));
    }
    let find = |tag: &[u8; 4]| sections.iter().find(|(t, _)| t == tag).map(|(_, p)| *p);
    for tag in REQUIRED {
        if find(tag).is_none() {
            return Err(Error::format(format!("missing section {}", String::from_utf8_lossy(tag))));
        }
    }

    let meta: Meta = serde_json::from_slice(find(b"META").expect("checked"))
        .map_err(|e| Error::format(format!("META: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format("META version differs from the header"));
    }
    let net_config: NetConfig = serde_json::from_slice(find(b"CONF").expect("checked"))
        .map_err(|e| Error::format(format!("CONF: {e}")))?;
    net_config.validate().map_err(|e| Error::Format(format!("CONF: {e}")))?;

    let mut r = Reader::new(find(b"PNTS").expect("checked"), "PNTS");
    let n = r.count(12)?;
    let flat = r.f32s(n * 3)?;
    r.done()?;
    let cloud = PointCloud::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
        .map_err(|e| Error::Format(format!("PNTS: {e}")))?;

    let mut r = Reader::new(find(b"DESC").expect("checked"), "DESC");
    let count = r.u64()?;
    let width = r.u32()? as u64;
    let total = count.checked_mul(width).filter(|t| t.checked_mul(4).is_some_and(|b| b <= r.buf.len() as u64));
    let total = total.ok_or_else(|| Error::format("DESC section declares too many elements"))?;
    let values = r.f32s(total as usize)?;
    r.done()?;
    if width == 0 || count as usize != cloud.len() {
        return Err(Error::format("DESC does not match the point cloud"));
    }
    let descriptors = DescriptorSet::new(width as usize, values).map_err(|e| Error::Format(format!("DESC: {e}")))?;

    let mut r = Reader::new(find(b"NETP").expect("checked"), "NETP");
    let entries_n = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..entries_n {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut size = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            size = size.checked_mul(d).ok_or_else(|| Error::format("NETP shape overflow"))?;
            shape.push(d);
        }
        let data = r.f32s(size)?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("NETP {name}: {e}")))?;
        entries.push((name, t));
    }
    r.done()?;
    let net_params = NetParams::from_entries(entries);

    let mut r = Reader::new(find(b"LGHT").expect("checked"), "LGHT");
    let l = r.f32s(6)?;
    r.done()?;
    let lights = LightColors {
        room: [l[0], l[1], l[2]],
        flash: [l[3], l[4], l[5]],
    };

    let mut r = Reader::new(find(b"TEXA").expect("checked"), "TEXA");
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let size = c.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| Error::format("TEXA overflow"))?;
    let data = r.f32s(size)?;
    r.done()?;
    let albedo_halftex = Image::new(c, h, w, data).map_err(|e| Error::Format(format!("TEXA: {e}")))?;

    let model = SceneModel {
        cloud,
        descriptors,
        net_config,
        net_params,
        lights,
        albedo_halftex,
        trained_steps: meta.trained_steps,
    };
    model.validate().map_err(|e| Error::Format(format!("inconsistent container: {e}")))?;
    if meta.points != model.cloud.len() || meta.descriptor_width != model.descriptors.width() {
        return Err(Error::format("META disagrees with the stored arrays"));
    }

    let adam = match find(b"ADAM") {
        None => None,
        Some(p) => {
            let mut r = Reader::new(p, "ADAM");
            let t = r.u64()?;
            let k = r.u32()? as usize;
            let mut moments = Vec::new();
            for _ in 0..k {
                let name = r.name()?;
                let n = r.count(8)?;
                let m = r.f32s(n)?;
                let v = r.f32s(n)?;
                moments.push((name, Moments { m, v }));
            }
            r.done()?;
            Some(AdamState { t, moments })
        }
    };
    Ok((model, adam))
}

pub fn save_model(path: &Path, model: &SceneModel) -> Result<()> {
    write_atomic(path, &encode(model, None)?)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(&ck.model, Some(&ck.adam))?)
}

pub fn load_model(path: &Path) -> Result<SceneModel> {
    let bytes = read_file(path)?;
    decode(&bytes).map(|(m, _)| m).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint; a plain model gets fresh optimizer state only if
/// it has never been trained.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let (model, adam) = decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let adam = adam.ok_or_else(|| Error::Format(format!("{}: no optimizer state", path.display())))?;
    Ok(Checkpoint { model, adam })
}
