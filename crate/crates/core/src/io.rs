//! Columnar CSV and binary dumps for ensembles, control batches and other
//! `(N x T x d)` arrays.
//!
//! Binary layout (little endian): a 16-byte header
//! `b"MFTC" | version: u16 | N: u32 | T: u32 | d: u16` followed by the
//! primary array `N*T*d` f64 values and the per-step means `T*d` f64 values.
//! `T` counts stored time points (so `N_T + 1` for state trajectories).

use std::io::{Read, Write};

use crate::dynamics::{ControlBatch, Ensemble};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFTC";
pub const BINARY_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub n: u32,
    pub t: u32,
    pub d: u16,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..10].copy_from_slice(&self.n.to_le_bytes());
        b[10..14].copy_from_slice(&self.t.to_le_bytes());
        b[14..16].copy_from_slice(&self.d.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; 16]) -> Result<Self> {
        if &b[0..4] != MAGIC {
            return Err(Error::Parse {
                what: "binary dump",
                reason: "bad magic".into(),
            });
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != BINARY_VERSION {
            return Err(Error::Parse {
                what: "binary dump",
                reason: format!("unsupported version {version}"),
            });
        }
        Ok(Self {
            version,
            n: u32::from_le_bytes([b[6], b[7], b[8], b[9]]),
            t: u32::from_le_bytes([b[10], b[11], b[12], b[13]]),
            d: u16::from_le_bytes([b[14], b[15]]),
        })
    }
}

/// A `(N x T x d)` array with its `(T x d)` means, as stored in a dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayDump {
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub values: Vec<f64>,
    pub means: Vec<f64>,
}

impl ArrayDump {
    pub fn from_ensemble(e: &Ensemble) -> Self {
        Self {
            n: e.n(),
            t: e.steps() + 1,
            d: e.dim(),
            values: e.states().to_vec(),
            means: e.mean_states().to_vec(),
        }
    }

    pub fn from_controls(c: &ControlBatch) -> Self {
        Self {
            n: c.n(),
            t: c.steps(),
            d: c.dim(),
            values: c.controls().to_vec(),
            means: c.means().to_vec(),
        }
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let narrow = |v: usize, what: &str| -> Result<()> {
            if v > u32::MAX as usize {
                Err(Error::invalid(what, "too large for the binary header"))
            } else {
                Ok(())
            }
        };
        narrow(self.n, "N")?;
        narrow(self.t, "T")?;
        if self.d > u16::MAX as usize {
            return Err(Error::invalid("d", "too large for the binary header"));
        }
        let header = Header {
            version: BINARY_VERSION,
            n: self.n as u32,
            t: self.t as u32,
            d: self.d as u16,
        };
        w.write_all(&header.to_bytes())?;
        for v in self.values.iter().chain(&self.means) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut hb = [0u8; 16];
        r.read_exact(&mut hb)?;
        let h = Header::from_bytes(&hb)?;
        let (n, t, d) = (h.n as usize, h.t as usize, h.d as usize);
        let mut read = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let values = read(n * t * d)?;
        let means = read(t * d)?;
        Ok(Self {
            n,
            t,
            d,
            values,
            means,
        })
    }

    /// Long-format CSV with columns `sample,step,coordinate,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sample", "step", "coordinate", "value"])?;
        for i in 0..self.n {
            for k in 0..self.t {
                for c in 0..self.d {
                    let v = self.values[(i * self.t + k) * self.d + c];
                    out.write_record([
                        i.to_string(),
                        k.to_string(),
                        c.to_string(),
                        format!("{v:?}"),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_round_trip(n in 1usize..4, t in 1usize..5, d in 1usize..3, seed in any::<u64>()) {
            let mut x = seed;
            let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
            let dump = ArrayDump {
                n, t, d,
                values: (0..n * t * d).map(|_| next()).collect(),
                means: (0..t * d).map(|_| next()).collect(),
            };
            let mut bytes = Vec::new();
            dump.write_binary(&mut bytes).unwrap();
            prop_assert_eq!(bytes.len(), 16 + 8 * (n * t * d + t * d));
            prop_assert_eq!(&bytes[0..4], b"MFTC");
            let back = ArrayDump::read_binary(bytes.as_slice()).unwrap();
            prop_assert_eq!(back, dump);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = vec![0u8; 16];
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(ArrayDump::read_binary(bytes.as_slice()).is_err());
    }

    #[test]
    fn csv_is_long_format() {
        let dump = ArrayDump {
            n: 1,
            t: 2,
            d: 1,
            values: vec![1.5, -2.0],
            means: vec![1.5, -2.0],
        };
        let mut out = Vec::new();
        dump.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "sample,step,coordinate,value\n0,0,0,1.5\n0,1,0,-2.0\n"
        );
    }
}
