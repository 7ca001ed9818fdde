//! `XBLW1` weight files.
//!
//! Layout: the ASCII line `XBLW1 <num_tensors>\n`, then for each tensor a
//! little-endian u32 name length, the UTF-8 name, a u32 rank, `rank` u32
//! extents, and the raw little-endian f32 values.

use std::path::Path;

use crate::error::{Result, XblError};
use crate::io::{read_file, write_atomic};
use crate::tensor::Tensor;

const MAGIC: &str = "XBLW1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = format!("{MAGIC} {}\n", tensors.len()).into_bytes();
    for nt in tensors {
        out.extend((nt.name.len() as u32).to_le_bytes());
        out.extend(nt.name.as_bytes());
        let shape = nt.tensor.shape();
        out.extend((shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in nt.tensor.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(XblError::Parse {
                offset: self.pos,
                msg: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| XblError::Parse {
            offset: 0,
            msg: "missing header line".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| XblError::Parse {
        offset: 0,
        msg: "header is not text".into(),
    })?;
    let count = header
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.strip_prefix(' '))
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| XblError::Parse {
            offset: 0,
            msg: format!("bad header {header:?}"),
        })?;
    let mut cur = Cursor {
        bytes,
        pos: nl + 1,
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32("name length")?;
        let at = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| XblError::Parse {
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = cur.u32("rank")?;
        let shape = (0..rank)
            .map(|_| cur.u32("shape"))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let at = cur.pos;
        let raw = cur.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| XblError::Parse {
            offset: at,
            msg: e.to_string(),
        })?;
        out.push(NamedTensor { name, tensor });
    }
    if cur.pos != bytes.len() {
        return Err(XblError::Parse {
            offset: cur.pos,
            msg: "trailing bytes".into(),
        });
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    decode(&read_file(path)?)
}
