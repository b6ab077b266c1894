//! IDX image/label files: big-endian headers, unsigned-byte payloads.

use std::path::Path;

use super::{DomainDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.pos, format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    /// Reads and checks the magic, then `dims` dimension sizes.
    fn header(&mut self, magic: u32, dims: usize) -> Result<Vec<usize>> {
        let found = self.u32("magic number")?;
        if found != magic {
            return Err(self.fail(0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
        }
        (0..dims)
            .map(|i| self.u32(&format!("dimension {i}")).map(|d| d as usize))
            .collect()
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated payload: expected {len} bytes, found {available}"),
            ));
        }
        if available > len {
            return Err(self.fail(
                self.pos + len,
                format!("{} trailing bytes after payload", available - len),
            ));
        }
        Ok(&self.bytes[self.pos..])
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Images become `[N × 1 × H × W]` scaled to `[0, 1]`; labels are kept as
/// read. Nothing is returned unless both files parse and their counts agree.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DomainDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let image_bytes = read(images_path)?;
    let mut r = Reader {
        path: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    let dims = r.header(IMAGES_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let pixels = r.payload(n * h * w)?;
    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();

    let label_bytes = read(labels_path)?;
    let mut r = Reader {
        path: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    let count = r.header(LABELS_MAGIC, 1)?[0];
    if count != n {
        return Err(r.fail(4, format!("{count} labels for {n} images")));
    }
    let labels = r.payload(count)?.iter().map(|&b| b as usize).collect();

    DomainDataset::new(0, Split::Train, Tensor::new(vec![n, 1, h, w], data)?, Some(labels))
}

/// Writes an image/label pair in the layout [`load_idx`] reads.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    images: &[Vec<u8>],
    height: usize,
    width: usize,
    labels: &[u8],
) -> Result<()> {
    if images.len() != labels.len() || images.iter().any(|im| im.len() != height * width) {
        return Err(Error::invalid("write_idx", "image sizes or label count do not match"));
    }
    let mut out = Vec::with_capacity(16 + images.len() * height * width);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), height, width] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.iter().for_each(|im| out.extend_from_slice(im));
    let path = images_path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;

    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    let path = labels_path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
