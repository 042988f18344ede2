//! IDX file parsing and writing, bit-exact with the standard MNIST
//! distribution format. Gzipped files are decompressed transparently.

use crate::{Error, Result};
use flate2::read::GzDecoder;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// A labelled image set: `n` images of `rows x cols` bytes plus `n` labels.
#[derive(Debug, Clone)]
pub struct IdxImageSet {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
}

impl IdxImageSet {
    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.images[i * sz..(i + 1) * sz]
    }
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn new(inner: R) -> Self {
        Counted { inner, offset: 0 }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
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
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }
}

fn open(path: &Path) -> Result<Counted<Box<dyn Read>>> {
    let f = File::open(path)?;
    let mut reader = BufReader::new(f);
    let mut head = [0u8; 2];
    let is_gz = reader.read_exact(&mut head).is_ok() && head == [0x1f, 0x8b];
    // reopen: the header probe consumed bytes
    let f = File::open(path)?;
    let reader: Box<dyn Read> = if is_gz {
        Box::new(GzDecoder::new(BufReader::new(f)))
    } else {
        Box::new(BufReader::new(f))
    };
    Ok(Counted::new(reader))
}

/// Parse a big-endian IDX image file: magic 0x00000803, dims, raw bytes.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = open(path.as_ref())?;
    let magic = r.read_u32("image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32("image count")? as usize;
    let rows = r.read_u32("image rows")? as usize;
    let cols = r.read_u32("image cols")? as usize;
    let mut data = vec![0u8; n * rows * cols];
    r.read_exact_at(&mut data, "image data")?;
    Ok((n, rows, cols, data))
}

/// Parse a big-endian IDX label file: magic 0x00000801, count, raw bytes.
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let mut r = open(path.as_ref())?;
    let magic = r.read_u32("label magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32("label count")? as usize;
    let mut data = vec![0u8; n];
    r.read_exact_at(&mut data, "label data")?;
    Ok(data)
}

/// Load a paired image/label set and validate consistency.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<IdxImageSet> {
    let (n, rows, cols, images) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{n} images but {} labels", labels.len()),
        });
    }
    Ok(IdxImageSet {
        images,
        labels,
        n,
        rows,
        cols,
    })
}

pub fn write_idx_images(
    path: impl AsRef<Path>,
    n: usize,
    rows: usize,
    cols: usize,
    data: &[u8],
) -> Result<()> {
    if data.len() != n * rows * cols {
        return Err(Error::config("image data length mismatch"));
    }
    let mut f = File::create(path)?;
    f.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    f.write_all(data)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(&LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}
