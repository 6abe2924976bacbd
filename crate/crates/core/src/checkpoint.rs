//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"RFMR"            magic
//! u32                format version (1)
//! u32 + bytes        model config as UTF-8 JSON
//! u32                tensor count
//! per tensor:
//!   u32 + bytes      name (UTF-8)
//!   u32              rank
//!   u64 * rank       dims
//!   f64 * prod(dims) values
//! ```
//!
//! Besides model parameters a checkpoint may carry training state under
//! other names (optimizer moments, temperature, step counter).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFMR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(bad(format!("truncated {what}")));
    }
    String::from_utf8(buf).map_err(|_| bad(format!("{what} is not valid UTF-8")))
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| bad("field longer than 4 GiB"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Stores dataset statistics as `stats.*` tensors, replacing earlier ones.
    pub fn set_stats(&mut self, stats: &DatasetStats) {
        self.tensors.retain(|(n, _)| !n.starts_with("stats."));
        self.tensors.push(("stats.state_mean".into(), Tensor::vector(stats.state_mean.clone())));
        self.tensors.push(("stats.state_std".into(), Tensor::vector(stats.state_std.clone())));
        self.tensors.push((
            "stats.returns".into(),
            Tensor::vector(vec![
                stats.min_dataset_return,
                stats.max_dataset_return,
                stats.ref_min_return,
                stats.ref_max_return,
            ]),
        ));
    }

    /// Dataset statistics stored by [`Checkpoint::set_stats`].
    pub fn stats(&self) -> Result<DatasetStats> {
        let get = |name: &str| {
            self.tensor(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let returns = get("stats.returns")?.data();
        if returns.len() != 4 {
            return Err(bad("stats.returns must hold 4 values"));
        }
        Ok(DatasetStats {
            state_mean: get("stats.state_mean")?.data().to_vec(),
            state_std: get("stats.state_std")?.data().to_vec(),
            min_dataset_return: returns[0],
            max_dataset_return: returns[1],
            ref_min_return: returns[2],
            ref_max_return: returns[3],
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config).map_err(|e| bad(e.to_string()))?;
        write_bytes(w, &config)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("file too short for a checkpoint header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_json = read_string(r, "config")?;
        let config: ModelConfig =
            serde_json::from_str(&config_json).map_err(|e| bad(format!("config: {e}")))?;
        let count = read_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = read_string(r, "tensor name")?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = Vec::new();
            r.take(8 * n as u64).read_to_end(&mut bytes)?;
            if bytes.len() != 8 * n {
                return Err(bad(format!("truncated data for tensor {name}")));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionSpace;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: ModelConfig::new(3, ActionSpace::Discrete { count: 4 }),
            tensors: vec![
                ("a".into(), Tensor::vector(vec![1.5, -2.0])),
                ("b.c".into(), Tensor::matrix(2, 1, vec![0.1, f64::MIN_POSITIVE]).unwrap()),
                ("s".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RFMR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_unknown_version_and_magic() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut v2 = buf.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::read_from(&mut v2.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        let mut m = buf.clone();
        m[0] = b'X';
        assert!(Checkpoint::read_from(&mut m.as_slice()).is_err());
    }

    #[test]
    fn stats_round_trip() {
        let mut ck = sample();
        let stats = DatasetStats {
            state_mean: vec![0.5, -1.0],
            state_std: vec![1.0, 2.0],
            max_dataset_return: 3.0,
            min_dataset_return: -1.0,
            ref_min_return: -2.0,
            ref_max_return: 4.0,
        };
        assert!(ck.stats().is_err());
        ck.set_stats(&stats);
        ck.set_stats(&stats);
        assert_eq!(ck.tensors.len(), 6);
        assert_eq!(ck.stats().unwrap(), stats);
    }

    #[test]
    fn rejects_truncation() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        for cut in [2, 10, buf.len() - 3] {
            assert!(Checkpoint::read_from(&mut &buf[..cut]).is_err(), "cut {cut}");
        }
    }
}
