//! Binary weight files: the 8-byte magic `BLNDCKPT`, a version byte, then
//! records until end of file. Each record is
//! `name_len:u32, name:utf8, rank:u32, shape:u32[rank], data:f64[]`, all
//! little-endian.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BLNDCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn checkpoint_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(buf: &[u8]) -> Result<ParamStore> {
    if buf.len() < 9 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing BLNDCKPT magic".into()));
    }
    if buf[8] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", buf[8])));
    }
    let mut r = Reader { buf, pos: 9 };
    let mut params = ParamStore::new();
    while r.pos < buf.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("record name is not utf8: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8, "data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut ps = ParamStore::new();
        ps.insert("ab", Tensor::new([1, 2], vec![1.0, -2.5]).unwrap());
        let bytes = checkpoint_bytes(&ps);
        let mut expected = b"BLNDCKPT".to_vec();
        expected.push(1);
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(parse_checkpoint(&bytes).unwrap(), ps);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(parse_checkpoint(b"NOTACKPT\x01").is_err());
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::zeros([3]));
        let bytes = checkpoint_bytes(&ps);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn scalar_record() {
        let mut ps = ParamStore::new();
        ps.insert("s", Tensor::scalar(4.0));
        assert_eq!(parse_checkpoint(&checkpoint_bytes(&ps)).unwrap(), ps);
    }
}
