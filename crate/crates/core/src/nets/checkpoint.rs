//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `SHADOWAD`, format version `u32`, config
//! fingerprint `u64`, config JSON (`u32` length + bytes), parameter count
//! `u32` followed by one record per parameter, buffer count and records,
//! then an optional optimizer section (`u8` flag, step `u64`, four `f64`
//! hyperparameters, first-moment records, second-moment records).
//!
//! A record is name length `u32` + UTF-8 bytes, rank `u32`, each dim `u32`
//! and the `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::unet::{ModelParams, Param, UNetConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SHADOWAD";
pub const FORMAT_VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.0.write_all(b)
    }

    fn u32(&mut self, v: usize) -> std::io::Result<()> {
        let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
        self.bytes(&v.to_le_bytes())
    }

    fn record(&mut self, name: &str, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
        self.u32(name.len())?;
        self.bytes(name.as_bytes())?;
        self.u32(shape.len())?;
        for &d in shape {
            self.u32(d)?;
        }
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    adam: Option<&AdamState<f32>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer(BufWriter::new(file));
    let body = |w: &mut Writer<BufWriter<File>>| -> std::io::Result<()> {
        let cfg = params.config();
        w.bytes(MAGIC)?;
        w.bytes(&FORMAT_VERSION.to_le_bytes())?;
        w.bytes(&cfg.fingerprint().to_le_bytes())?;
        let json = serde_json::to_string(cfg).map_err(std::io::Error::other)?;
        w.u32(json.len())?;
        w.bytes(json.as_bytes())?;
        for list in [params.params(), params.buffers()] {
            w.u32(list.len())?;
            for p in list {
                w.record(&p.name, &p.shape, &p.data)?;
            }
        }
        match adam {
            None => w.bytes(&[0]),
            Some(s) => {
                w.bytes(&[1])?;
                w.bytes(&s.step.to_le_bytes())?;
                let c = s.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps] {
                    w.bytes(&v.to_le_bytes())?;
                }
                for moments in [&s.m, &s.v] {
                    for (p, m) in params.params().iter().zip(moments) {
                        w.record(&p.name, &p.shape, m)?;
                    }
                }
                Ok(())
            }
        }?;
        w.0.flush()
    };
    body(&mut w).map_err(|e| Error::io(path, e))
}

struct Reader<R: Read>(R);

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Checkpoint(e.to_string())
    }
}

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn vec(&mut self, len: usize) -> Result<Vec<u8>> {
        // Bounded read so a corrupt length cannot trigger a huge allocation.
        let mut buf = Vec::new();
        (&mut self.0).take(len as u64).read_to_end(&mut buf).map_err(truncated)?;
        if buf.len() != len {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        Ok(buf)
    }

    /// Reads one record and checks it against the expected name and shape.
    fn record_into(&mut self, expect: &Param<f32>, out: &mut Vec<f32>) -> Result<()> {
        let name_len = self.u32()?;
        let name = String::from_utf8(self.vec(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        if name != expect.name || shape != expect.shape {
            return Err(Error::Checkpoint(format!(
                "expected tensor {} {:?}, found {name} {shape:?}",
                expect.name, expect.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.vec(n * 4)?;
        out.clear();
        out.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))),
        );
        Ok(())
    }

    fn records(&mut self, expect: &mut [Param<f32>]) -> Result<()> {
        let count = self.u32()?;
        if count != expect.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                expect.len()
            )));
        }
        for p in expect.iter_mut() {
            let mut data = Vec::new();
            self.record_into(p, &mut data)?;
            p.data = data;
        }
        Ok(())
    }
}

pub type Loaded = (ModelParams<f32>, Option<AdamState<f32>>);

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader(BufReader::new(file));
    if &r.array::<8>()? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let stored = r.u64()?;
    let json_len = r.u32()?;
    let config: UNetConfig = serde_json::from_slice(&r.vec(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    if config.fingerprint() != stored {
        return Err(Error::Fingerprint {
            expected: stored,
            found: config.fingerprint(),
        });
    }
    let mut params = ModelParams::<f32>::zeros(&config)?;
    r.records(params.params_mut())?;
    r.records(params.buffers_mut())?;
    let adam = match r.array::<1>()?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut state = AdamState::new(&params, config);
            state.step = step;
            for moments in [&mut state.m, &mut state.v] {
                for (p, m) in params.params().iter().zip(moments.iter_mut()) {
                    r.record_into(p, m)?;
                }
            }
            Some(state)
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    Ok((params, adam))
}

/// Loads a checkpoint and requires its architecture to match `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &UNetConfig) -> Result<Loaded> {
    let loaded = load_checkpoint(path)?;
    let found = loaded.0.config().fingerprint();
    if found != expected.fingerprint() {
        return Err(Error::Fingerprint {
            expected: expected.fingerprint(),
            found,
        });
    }
    Ok(loaded)
}
