//! Little-endian checkpoint files: magic `HGNN`, version, config block, then
//! named tensors with shape headers. Optimizer moments are stored as tensors
//! named `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use crate::numerics::{AdamConfig, AdamState, RealTensor};

use super::batch::Dims;
use super::model::{Arch, Model, ModelKind};
use super::{HgnnError, Network};

pub const MAGIC: &[u8; 4] = b"HGNN";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, t: &RealTensor) {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.shape().len());
        t.shape().iter().for_each(|&d| self.u32(d));
        t.data().iter().for_each(|&v| self.f64(v));
    }
}

pub fn encode(net: &Network) -> Vec<u8> {
    let a = net.model.arch;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u8(a.kind.code());
    for v in [a.hidden, a.steps, a.dims.n_t, a.dims.r, a.dims.k, a.dims.m] {
        w.u32(v);
    }
    for v in [a.slope, net.eta, net.input_scale, net.p_max_dbm] {
        w.f64(v);
    }
    w.u32(net.epochs_done);
    match &net.adam {
        Some(s) => {
            w.u8(1);
            w.u64(s.step);
            let c = s.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                w.f64(v);
            }
        }
        None => w.u8(0),
    }
    let p = &net.model.params;
    let n = p.len() * if net.adam.is_some() { 3 } else { 1 };
    w.u32(n);
    for (name, t) in p.names().iter().zip(p.tensors()) {
        w.tensor(name, t);
    }
    if let Some(s) = &net.adam {
        for (name, t) in p.names().iter().zip(&s.m) {
            w.tensor(&format!("adam.m.{name}"), t);
        }
        for (name, t) in p.names().iter().zip(&s.v) {
            w.tensor(&format!("adam.v.{name}"), t);
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> HgnnError {
        HgnnError::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], HgnnError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, HgnnError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, HgnnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, HgnnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, HgnnError> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(HgnnError::Format {
                offset: at,
                msg: "non-finite value".into(),
            });
        }
        Ok(v)
    }
    fn tensor(&mut self) -> Result<(String, RealTensor), HgnnError> {
        let len = self.u32()?;
        let name = std::str::from_utf8(self.take(len)?).map_err(|_| self.err("tensor name is not UTF-8"))?.to_string();
        let rank = self.u32()?;
        if rank == 0 || rank > 2 {
            return Err(self.err(format!("tensor {name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(self.err(format!("tensor {name}: {n} values exceed the file")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok((name, RealTensor::new(shape, data)?))
    }
}

pub fn decode(buf: &[u8]) -> Result<Network, HgnnError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(HgnnError::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(HgnnError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let code = r.u8()?;
    let kind = ModelKind::from_code(code).ok_or_else(|| r.err(format!("unknown model kind {code}")))?;
    let hidden = r.u32()?;
    let steps = r.u32()?;
    let dims = Dims {
        n_t: r.u32()?,
        r: r.u32()?,
        k: r.u32()?,
        m: r.u32()?,
    };
    let slope = r.f64()?;
    let eta = r.f64()?;
    let input_scale = r.f64()?;
    let p_max_dbm = r.f64()?;
    let epochs_done = r.u32()?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            Some((step, config))
        }
        f => return Err(r.err(format!("bad optimizer flag {f}"))),
    };
    let n = r.u32()?;
    let mut params = Vec::new();
    let mut moments = Vec::new();
    for _ in 0..n {
        let (name, t) = r.tensor()?;
        if name.starts_with("adam.") {
            moments.push((name, t));
        } else {
            params.push((name, t));
        }
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes"));
    }
    let arch = Arch {
        kind,
        dims,
        hidden,
        steps,
        slope,
    };
    let model = Model::with_params(arch, params)?;
    let adam = match adam {
        None => None,
        Some((step, config)) => {
            let mut s = AdamState::new(config, model.params.tensors())?;
            s.step = step;
            let mut seen = 0;
            for (name, t) in moments {
                let (slot, rest) = if let Some(rest) = name.strip_prefix("adam.m.") {
                    (&mut s.m, rest)
                } else if let Some(rest) = name.strip_prefix("adam.v.") {
                    (&mut s.v, rest)
                } else {
                    return Err(HgnnError::Config(format!("unknown tensor {name}")));
                };
                let idx = model.params.index_of(rest).ok_or_else(|| HgnnError::Config(format!("moment {name} has no parameter")))?;
                if slot[idx].shape() != t.shape() {
                    return Err(HgnnError::Config(format!("moment {name} has the wrong shape")));
                }
                slot[idx] = t;
                seen += 1;
            }
            if seen != 2 * model.params.len() {
                return Err(HgnnError::Config("optimizer moments incomplete".into()));
            }
            Some(s)
        }
    };
    Ok(Network {
        model,
        input_scale,
        eta,
        p_max_dbm,
        epochs_done,
        adam,
    })
}

pub fn write_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<(), HgnnError> {
    let path = path.as_ref();
    std::fs::write(path, encode(net)).map_err(|source| HgnnError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Network, HgnnError> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|source| HgnnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf)
}
