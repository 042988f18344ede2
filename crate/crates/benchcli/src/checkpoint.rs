//! Portable binary checkpoints: versioned header, embedded shapes, exact
//! round trip of all trainable parameters.

use fptt_core::autodiff::{Matrix, ParamSet};
use fptt_core::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SNNCKPT1";
const VERSION: u32 = 1;

/// Metadata stored next to the parameters so a checkpoint is loadable
/// without the original config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub arch: String,
    pub task: String,
    pub neuron: String,
    pub seed: u64,
}

pub fn save(path: impl AsRef<Path>, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&meta.seed.to_le_bytes())?;
    write_str(&mut w, &meta.arch)?;
    write_str(&mut w, &meta.task)?;
    write_str(&mut w, &meta.neuron)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for id in params.ids() {
        write_str(&mut w, params.name(id))?;
        let m = params.value(id);
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(CheckpointMeta, Vec<(String, Matrix)>)> {
    let mut r = Counted {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint file (bad magic)".into(),
        });
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let seed = r.read_u64("seed")?;
    let arch = r.read_str("arch")?;
    let task = r.read_str("task")?;
    let neuron = r.read_str("neuron")?;
    let count = r.read_u32("param count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.read_str("param name")?;
        let rows = r.read_u32("rows")? as usize;
        let cols = r.read_u32("cols")? as usize;
        let mut data = vec![0.0f64; rows * cols];
        for v in &mut data {
            let mut b = [0u8; 8];
            r.read_exact(&mut b, "param data")?;
            *v = f64::from_le_bytes(b);
        }
        params.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok((
        CheckpointMeta {
            arch,
            task,
            neuron,
            seed,
        },
        params,
    ))
}

/// Load checkpoint values into an existing parameter set, checking names
/// and shapes.
pub fn load_into(path: impl AsRef<Path>, params: &mut ParamSet) -> Result<CheckpointMeta> {
    let (meta, stored) = load(path)?;
    if stored.len() != params.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, model has {}",
            stored.len(),
            params.len()
        )));
    }
    for (id, (name, m)) in params.ids().collect::<Vec<_>>().into_iter().zip(&stored) {
        if params.name(id) != name {
            return Err(Error::config(format!(
                "checkpoint tensor '{name}' does not match model tensor '{}'",
                params.name(id)
            )));
        }
        if params.value(id).shape() != m.shape() {
            return Err(Error::config(format!(
                "tensor '{name}': checkpoint shape {:?}, model shape {:?}",
                m.shape(),
                params.value(id).shape()
            )));
        }
    }
    let values: Vec<Matrix> = stored.into_iter().map(|(_, m)| m).collect();
    params.load_values(&values)?;
    Ok(meta)
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let offset = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset,
            msg: format!("truncated while reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_str(&mut self, what: &str) -> Result<String> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        let len = u16::from_le_bytes(b) as usize;
        let mut s = vec![0u8; len];
        self.read_exact(&mut s, what)?;
        String::from_utf8(s).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("invalid utf-8 in {what}"),
        })
    }
}
