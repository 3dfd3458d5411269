//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "MASKATN1"
//! version  u32
//! config   u32 length + UTF-8 text
//! phase    u8
//! step     u64
//! params   u32 count, then per entry:
//!            u32 name length + UTF-8 name, u32 ndim, ndim × u64 dims,
//!            product(dims) × f64
//! moments  u8 present flag; if 1: u64 optimizer step, u32 count, then per
//!            entry: u32 name length + name, u64 len, len × f64 m, len × f64 v
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::config::Phase;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"MASKATN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub moments: Vec<Moments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub phase: Phase,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    /// Bitwise comparison of every field, parameter and moment.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.config == other.config
            && self.phase == other.phase
            && self.step == other.step
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((a, x), (b, y))| a == b && x.bitwise_eq(y))
            && match (&self.optimizer, &other.optimizer) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.step == b.step
                        && a.moments.len() == b.moments.len()
                        && a.moments.iter().zip(&b.moments).all(|(x, y)| {
                            x.name == y.name && bits(&x.m) == bits(&y.m) && bits(&x.v) == bits(&y.v)
                        })
                }
                _ => false,
            }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &c.config);
    out.push(c.phase.tag());
    out.extend_from_slice(&c.step.to_le_bytes());
    out.extend_from_slice(&(c.params.len() as u32).to_le_bytes());
    for (name, t) in &c.params {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    match &c.optimizer {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            out.extend_from_slice(&o.step.to_le_bytes());
            out.extend_from_slice(&(o.moments.len() as u32).to_le_bytes());
            for m in &o.moments {
                put_str(&mut out, &m.name);
                out.extend_from_slice(&(m.m.len() as u64).to_le_bytes());
                put_f64s(&mut out, &m.m);
                put_f64s(&mut out, &m.v);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated { what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or(Error::Truncated { what })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 8] = r.take(8, "magic")?.try_into().expect("8 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let config = r.string("config")?;
    let phase = Phase::from_tag(r.u8("phase")?)?;
    let step = r.u64("step")?;
    let n = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.string("parameter name")?;
        let ndim = r.u32("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("parameter shape")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated { what: "parameter payload" })?;
        let data = r.f64s(len, "parameter payload")?;
        params.push((name, Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?));
    }
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let k = r.u32("moment count")? as usize;
            let mut moments = Vec::with_capacity(k.min(1 << 16));
            for _ in 0..k {
                let name = r.string("moment name")?;
                let len = r.u64("moment length")? as usize;
                let m = r.f64s(len, "first moments")?;
                let v = r.f64s(len, "second moments")?;
                moments.push(Moments { name, m, v });
            }
            Some(OptimizerSnapshot { step, moments })
        }
        f => return Err(Error::Corrupt(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        phase,
        step,
        params,
        optimizer,
    })
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    fs::write(path, encode(c))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Checkpoint {
        let r = &mut rng::stream(1, "ckpt");
        Checkpoint {
            config: "seed = 1\n".into(),
            phase: Phase::Gates,
            step: 500,
            params: vec![
                ("a.w".into(), Tensor::randn([3, 2], 1.0, r)),
                ("b".into(), Tensor::new([1], vec![-0.0]).unwrap()),
            ],
            optimizer: Some(OptimizerSnapshot {
                step: 500,
                moments: vec![Moments {
                    name: "b".into(),
                    m: vec![1e-300],
                    v: vec![f64::MIN_POSITIVE],
                }],
            }),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = encode(&c);
        assert_eq!(&bytes[..8], b"MASKATN1");
        assert!(decode(&bytes).unwrap().bitwise_eq(&c));
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
        let mut old = bytes.clone();
        old[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&old), Err(Error::VersionMismatch { found: 7, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Corrupt(_))));
    }
}
