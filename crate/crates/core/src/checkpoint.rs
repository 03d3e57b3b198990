//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NMIM"  u32 version
//! u32 line count, then per line: u32 byte length, UTF-8 `key=value`
//! u32 blob count, then per blob:
//!     u32 name length, name, u32 rank, rank x u64 dims, f64 values
//! ```
//!
//! Header lines are the full run config plus `checkpoint.*` entries.
//! Optimizer moments are stored as blobs `adam.m.<param>` and
//! `adam.v.<param>`.

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::encoder::ParamStore;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NMIM";
pub const VERSION: u32 = 1;
const STEP_KEY: &str = "checkpoint.step";
const ADAM_STEP_KEY: &str = "checkpoint.adam_step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    /// Training steps completed.
    pub step: u64,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut lines = self.config.to_lines();
        lines.push(format!("{STEP_KEY}={}", self.step));
        if let Some(o) = &self.optimizer {
            lines.push(format!("{ADAM_STEP_KEY}={}", o.step));
        }
        let mut blobs: Vec<(String, &Tensor)> = self
            .params
            .params()
            .iter()
            .map(|p| (p.name.clone(), &p.value))
            .collect();
        if let Some(o) = &self.optimizer {
            for (p, m) in self.params.params().iter().zip(&o.m) {
                blobs.push((format!("adam.m.{}", p.name), m));
            }
            for (p, v) in self.params.params().iter().zip(&o.v) {
                blobs.push((format!("adam.v.{}", p.name), v));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(lines.len() as u32).to_le_bytes());
        for l in &lines {
            out.extend_from_slice(&(l.len() as u32).to_le_bytes());
            out.extend_from_slice(l.as_bytes());
        }
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, t) in blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, not a checkpoint".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported checkpoint version {version} (expected {VERSION})"),
            });
        }
        let nlines = r.u32("line count")?;
        let mut config = TrainConfig::default();
        let (mut step, mut adam_step) = (0u64, None);
        for _ in 0..nlines {
            let at = r.pos;
            let len = r.u32("line length")? as usize;
            let line =
                std::str::from_utf8(r.take(len, "header line")?).map_err(|_| Error::Format {
                    offset: at as u64,
                    detail: "header line is not UTF-8".into(),
                })?;
            let bad = |detail: String| Error::Format {
                offset: at as u64,
                detail,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("header line `{line}` lacks '='")))?;
            match k {
                STEP_KEY => step = v.parse().map_err(|_| bad(format!("bad step `{v}`")))?,
                ADAM_STEP_KEY => {
                    adam_step = Some(v.parse().map_err(|_| bad(format!("bad step `{v}`")))?)
                }
                _ => config.set(k, v).map_err(|e| bad(e.to_string()))?,
            }
        }
        config.validate().map_err(|e| Error::Format {
            offset: r.pos as u64,
            detail: e.to_string(),
        })?;

        let mut params = ParamStore::init(&config.encoder, 0)?;
        let n = params.len();
        let expected = if adam_step.is_some() { 3 * n } else { n };
        let blob_at = r.pos;
        let nblobs = r.u32("blob count")? as usize;
        if nblobs != expected {
            return Err(Error::Format {
                offset: blob_at as u64,
                detail: format!("{nblobs} blobs, expected {expected}"),
            });
        }
        let names: Vec<String> = params.params().iter().map(|p| p.name.clone()).collect();
        let mut moments = Vec::with_capacity(2 * n);
        for k in 0..nblobs {
            let (want, shape_of) = match k / n {
                0 => (names[k].clone(), k),
                1 => (format!("adam.m.{}", names[k - n]), k - n),
                _ => (format!("adam.v.{}", names[k - 2 * n]), k - 2 * n),
            };
            let at = r.pos;
            let t = r.blob(&want)?;
            let expect_shape = params.params()[shape_of].value.shape();
            if t.shape() != expect_shape {
                return Err(Error::Format {
                    offset: at as u64,
                    detail: format!(
                        "blob {want} has shape {:?}, expected {expect_shape:?}",
                        t.shape()
                    ),
                });
            }
            if k < n {
                params.params_mut()[k].value = t;
            } else {
                moments.push(t);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let optimizer = adam_step.map(|s| {
            let v = moments.split_off(n);
            AdamState {
                step: s,
                m: moments,
                v,
            }
        });
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            step,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn blob(&mut self, want: &str) -> Result<Tensor> {
        let at = self.pos as u64;
        let len = self.u32("blob name length")? as usize;
        let name = self.take(len, "blob name")?;
        if name != want.as_bytes() {
            return Err(Error::Format {
                offset: at,
                detail: format!(
                    "blob `{}`, expected `{want}`",
                    String::from_utf8_lossy(name)
                ),
            });
        }
        let rank = self.u32("blob rank")? as usize;
        if rank > 8 {
            return Err(Error::Format {
                offset: at,
                detail: format!("blob {want} has implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("blob dims")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format {
                offset: at,
                detail: format!("blob {want} dims overflow"),
            })?;
        let raw = self.take(count * 8, "blob values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&shape, data)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
