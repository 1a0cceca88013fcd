//! Model checkpoints: a flat binary container of named parameters.
//!
//! Layout: magic "BLAM", format version (u32 LE), then one record per
//! parameter: name length (u32 LE), name bytes, shape rank (u32 LE),
//! extents (u32 LE each), raw f64 LE data. Round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"BLAM";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &[(&str, &Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::BadCheckpoint {
        path: path.into(),
        detail,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing BLAM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Reader<'a> {
        fn take(&mut self, len: usize) -> Option<&'a [u8]> {
            if self.pos + len > self.bytes.len() {
                return None;
            }
            let s = &self.bytes[self.pos..self.pos + len];
            self.pos += len;
            Some(s)
        }
        fn u32(&mut self) -> Option<u32> {
            self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        }
    }

    let mut r = Reader {
        bytes: &bytes,
        pos: 8,
    };
    let mut params = Vec::new();
    while r.pos < bytes.len() {
        let record = (|| {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).ok()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Some((name, shape, data))
        })();
        let (name, shape, data) =
            record.ok_or_else(|| bad("truncated or malformed parameter record".into()))?;
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(params)
}
