//! Binary model checkpoint, all integers and floats little-endian:
//!
//! ```text
//! "LGPT" | u32 version | u32 n_layers | u32 n_heads | u32 d_model
//!        | u32 vocab_size | u32 max_len | f32 dropout
//! then until end of file, per tensor:
//!        u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
//! ```

use std::path::Path;

use logsentinel_core::model::{GptModel, ModelConfig};
use logsentinel_core::tensor::Tensor;

use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 4] = b"LGPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &GptModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, c.n_layers as u32, c.n_heads as u32, c.d_model as u32, c.vocab_size as u32, c.max_len as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.dropout.to_le_bytes());
    for (name, t) in model.named_params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decodes a checkpoint. Format problems come back as a message; shape or
/// name disagreements with the stored configuration as a core error.
pub fn decode(bytes: &[u8]) -> Result<GptModel, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("not a model checkpoint (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut dims = [0usize; 5];
    for (d, what) in dims.iter_mut().zip(["n_layers", "n_heads", "d_model", "vocab_size", "max_len"]) {
        *d = r.u32(what)? as usize;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        n_heads: dims[1],
        d_model: dims[2],
        vocab_size: dims[3],
        max_len: dims[4],
        dropout: r.f32("dropout")?,
    };
    config.validate().map_err(|e| e.to_string())?;
    let mut named = Vec::new();
    while !r.done() {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(format!("tensor {name}: implausible rank {rank}"));
        }
        let shape = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or("tensor too large")?, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        named.push((name, t));
    }
    GptModel::from_named(config, named).map_err(|e| e.to_string())
}

pub fn save(path: &Path, model: &GptModel) -> Result<()> {
    io::write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<GptModel> {
    let bytes = io::read_bytes(path)?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GptModel {
        GptModel::new(
            ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 8,
                vocab_size: 11,
                max_len: 16,
                dropout: 0.1,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"LGPT");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for ((a, ta), (b, tb)) in m.named_params().zip(back.named_params()) {
            assert_eq!(a, b);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&small());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..40]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(decode(&v2).unwrap_err().contains("version"));
    }
}
