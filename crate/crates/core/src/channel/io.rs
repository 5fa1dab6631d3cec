//! Binary dataset files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RISD" | version u32
//! n_t r k m_x m_y paths : u32 x 6 | array_gain u8
//! bs_position f64 x 2 | ris_positions f64 x 2r | user_region f64 x 4
//! pl_a pl_b shadow_sigma_db nlos_gain_factor noise_power_dbm : f64 x 5
//! seed u64 | n_samples u64 | n_train u64
//! per sample: G_1..G_R (M x N_t), h_11..h_1K, .., h_R1..h_RK (M each),
//!             as interleaved (re, im) f64; then user positions f64 x 2K
//! ```
//!
//! Cascaded channels and distances are rebuilt on load.

use std::path::Path;

use num_complex::Complex64 as C64;

use super::{ChannelError, ChannelRealization, Dataset, Region, ScenarioConfig};
use crate::numerics::ComplexMatrix;

pub const MAGIC: &[u8; 4] = b"RISD";
pub const FORMAT_VERSION: u32 = 1;

/// Bytes before the first sample.
pub fn header_len(s: &ScenarioConfig) -> usize {
    4 + 4 + 6 * 4 + 1 + 16 + 16 * s.r + 32 + 40 + 24
}

pub fn sample_len(s: &ScenarioConfig) -> usize {
    let m = s.m();
    16 * (s.r * m * s.n_t + s.r * s.k * m) + 16 * s.k
}

/// Exact file size of a dataset with `n` samples.
pub fn file_len(s: &ScenarioConfig, n: usize) -> usize {
    header_len(s) + n * sample_len(s)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_c(buf: &mut Vec<u8>, v: &[C64]) {
    for x in v {
        put_f64(buf, x.re);
        put_f64(buf, x.im);
    }
}

pub fn encode(d: &Dataset) -> Vec<u8> {
    let s = &d.scenario;
    let mut buf = Vec::with_capacity(file_len(s, d.samples.len()));
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    for v in [s.n_t, s.r, s.k, s.m_x, s.m_y, s.paths] {
        put_u32(&mut buf, v as u32);
    }
    buf.push(s.array_gain as u8);
    s.bs_position.iter().for_each(|&v| put_f64(&mut buf, v));
    s.ris_positions.iter().flatten().for_each(|&v| put_f64(&mut buf, v));
    let g = s.user_region;
    for v in [g.x_min, g.x_max, g.y_min, g.y_max, s.pl_a, s.pl_b, s.shadow_sigma_db, s.nlos_gain_factor, s.noise_power_dbm] {
        put_f64(&mut buf, v);
    }
    buf.extend_from_slice(&d.seed.to_le_bytes());
    buf.extend_from_slice(&(d.samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(d.n_train as u64).to_le_bytes());
    for smp in &d.samples {
        smp.g.iter().for_each(|m| put_c(&mut buf, m.data()));
        smp.h.iter().for_each(|m| put_c(&mut buf, m.data()));
        smp.user_positions.iter().flatten().for_each(|&v| put_f64(&mut buf, v));
    }
    buf
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), ChannelError> {
    let path = path.as_ref();
    std::fs::write(path, encode(d)).map_err(|source| ChannelError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> ChannelError {
        ChannelError::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ChannelError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ChannelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ChannelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ChannelError> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(ChannelError::Format {
                offset: at,
                msg: "non-finite value".into(),
            });
        }
        Ok(v)
    }

    fn complex(&mut self, n: usize) -> Result<Vec<C64>, ChannelError> {
        (0..n).map(|_| Ok(C64::new(self.f64()?, self.f64()?))).collect()
    }
}

pub fn decode(buf: &[u8]) -> Result<Dataset, ChannelError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ChannelError::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ChannelError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [n_t, ris, k, m_x, m_y, paths] = dims;
    let flag_at = r.pos;
    let array_gain = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => {
            return Err(ChannelError::Format {
                offset: flag_at,
                msg: format!("bad array_gain flag {b}"),
            })
        }
    };
    let bs_position = [r.f64()?, r.f64()?];
    if ris > 1 << 16 {
        return Err(r.err("implausible RIS count"));
    }
    let ris_positions = (0..ris).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<_, ChannelError>>()?;
    let user_region = Region {
        x_min: r.f64()?,
        x_max: r.f64()?,
        y_min: r.f64()?,
        y_max: r.f64()?,
    };
    let scenario = ScenarioConfig {
        n_t,
        r: ris,
        k,
        m_x,
        m_y,
        bs_position,
        ris_positions,
        user_region,
        paths,
        pl_a: r.f64()?,
        pl_b: r.f64()?,
        shadow_sigma_db: r.f64()?,
        nlos_gain_factor: r.f64()?,
        noise_power_dbm: r.f64()?,
        array_gain,
    };
    let header_end = r.pos;
    scenario.validate().map_err(|e| ChannelError::Format {
        offset: header_end,
        msg: e.to_string(),
    })?;
    let seed = r.u64()?;
    let n = r.u64()? as usize;
    let n_train = r.u64()? as usize;
    if n == 0 || n_train > n {
        return Err(r.err(format!("bad sample counts {n_train}/{n}")));
    }
    let expected = file_len(&scenario, n);
    if buf.len() != expected {
        return Err(ChannelError::Format {
            offset: buf.len().min(expected),
            msg: format!("file is {} bytes, header declares {expected}", buf.len()),
        });
    }
    let m = scenario.m();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let g = (0..ris)
            .map(|_| ComplexMatrix::new(m, n_t, r.complex(m * n_t)?).map_err(Into::into))
            .collect::<Result<Vec<_>, ChannelError>>()?;
        let h = (0..ris * k)
            .map(|_| Ok(ComplexMatrix::row_vector(&r.complex(m)?)))
            .collect::<Result<Vec<_>, ChannelError>>()?;
        let users = (0..k).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<Vec<_>, ChannelError>>()?;
        samples.push(ChannelRealization::assemble(&scenario, g, h, users)?);
    }
    Ok(Dataset {
        scenario,
        seed,
        n_train,
        samples,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, ChannelError> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|source| ChannelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScenarioConfig {
        ScenarioConfig {
            n_t: 2,
            m_x: 1,
            m_y: 2,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn round_trip_bit_identical() {
        let d = Dataset::generate(&ScenarioConfig::default(), 7, 8, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.risd");
        write_dataset(&d, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode(&back), encode(&d));
    }

    #[test]
    fn corrupted_header_rejected() {
        let d = Dataset::generate(&tiny(), 1, 2, 1).unwrap();
        let mut buf = encode(&d);
        buf[0] = b'X';
        assert!(matches!(decode(&buf), Err(ChannelError::Format { offset: 0, .. })));
        let mut buf = encode(&d);
        buf[4] = 9;
        assert!(matches!(decode(&buf), Err(ChannelError::Format { offset: 4, .. })));
        let mut buf = encode(&d);
        buf.pop();
        assert!(decode(&buf).is_err());
    }

    #[test]
    fn file_size_matches_declared_layout() {
        let s = tiny();
        let d = Dataset::generate(&s, 3, 9_000, 1_000).unwrap();
        let buf = encode(&d);
        // header: magic+version 8, dims 24, flag 1, bs 16, ris 32, region 32,
        // constants 40, counts 24; sample: (2*2*2 + 2*2*2) complex + 2 users
        assert_eq!(header_len(&s), 177);
        assert_eq!(sample_len(&s), 16 * 16 + 32);
        assert_eq!(buf.len(), 177 + 10_000 * 288);
    }
}
