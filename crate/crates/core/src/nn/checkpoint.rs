//! Versioned binary checkpoint: `PTCK`, version, a JSON header, then named
//! little-endian float32 tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::json(path, e))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(header.len() as u32).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32).map_err(io)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32).map_err(io)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not a PTCK checkpoint"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut header = vec![0u8; n];
        r.read_exact(&mut header).map_err(io)?;
        let header = serde_json::from_slice(&header).map_err(|e| Error::json(path, e))?;
        let count = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(io)?;
            let shape = (0..ndim)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let mut data = vec![0f32; shape.iter().product()];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(path, format!("tensor `{name}` holds non-finite values")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { header, tensors })
    }
}
