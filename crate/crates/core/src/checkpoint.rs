//! Binary checkpoints: named f64 tensors, optional optimizer state and a JSON metadata blob.
//!
//! Layout (little endian): magic, `u32` version, `u64`-prefixed metadata, `u32`
//! parameter count, then per parameter its name, trainable flag, shape and data;
//! finally an optional Adam block.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::trainer::Adam;

const MAGIC: &[u8; 8] = b"DGERCKPT";
const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub meta: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!(
                "length {n} exceeds remaining bytes"
            )));
        }
        Ok(n as usize)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Serializes parameters, optimizer and metadata.
pub fn encode(store: &ParamStore, optimizer: Option<&Adam>, meta: &str) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(meta.as_bytes());
    w.u32(store.len() as u32);
    for (_, p) in store.iter() {
        w.bytes(p.name.as_bytes());
        w.u8(u8::from(p.trainable));
        w.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            w.u64(d as u64);
        }
        w.floats(p.value.data());
    }
    match optimizer {
        None => w.u8(0),
        Some(a) => {
            w.u8(1);
            for v in [a.lr, a.beta1, a.beta2, a.eps, a.clip_norm] {
                w.f64(v);
            }
            w.u64(a.warmup_steps);
            w.u64(a.step);
            w.u32(a.m.len() as u32);
            for (m, v) in a.m.iter().zip(&a.v) {
                w.floats(m);
                w.floats(v);
            }
        }
    }
    w.0
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let n = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = r.u8()? != 0;
        let nd = r.u32()?;
        let shape = (0..nd)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = r.floats()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if params.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        let id = params.add(name, t);
        params.set_trainable(id, trainable);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let mut a = Adam::new(0.0, 0, 0.0);
            a.lr = r.f64()?;
            a.beta1 = r.f64()?;
            a.beta2 = r.f64()?;
            a.eps = r.f64()?;
            a.clip_norm = r.f64()?;
            a.warmup_steps = r.u64()?;
            a.step = r.u64()?;
            let slots = r.u32()?;
            for _ in 0..slots {
                a.m.push(r.floats()?);
                a.v.push(r.floats()?);
            }
            Some(a)
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        meta,
    })
}

pub fn save(path: &Path, store: &ParamStore, optimizer: Option<&Adam>, meta: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(store, optimizer, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode(&buf)
}
