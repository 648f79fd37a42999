//! Binary checkpoint container.
//!
//! All integers are little-endian `u32`; values are little-endian IEEE-754
//! of the stated width.
//!
//! ```text
//! magic          8 bytes  "ADBTCKPT"
//! version        u32      1
//! value width    u32      4 (f32) or 8 (f64)
//! config         7 × u32  vocab_size, hidden, n_blocks, n_heads,
//!                         intermediate, max_positions, n_token_types
//! entry count    u32
//! entries, in tree order:
//!   name length  u32
//!   name         UTF-8 bytes
//!   rank         u32
//!   dims         rank × u32
//!   values       product(dims) × width bytes
//! ```

use std::path::Path;

use super::{check_layout, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamTree, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADBTCKPT";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint<R: Real>(config: &EncoderConfig, params: &ParamTree<R>) -> Result<Vec<u8>> {
    check_layout(config, params)?;
    let mut out = Vec::with_capacity(64 + params.num_values() * R::BYTES);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, R::BYTES);
    for v in [
        config.vocab_size,
        config.hidden,
        config.n_blocks,
        config.n_heads,
        config.intermediate,
        config.max_positions,
        config.n_token_types,
    ] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, params.len());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint, converting stored values to `R` if the stored
/// width differs.
pub fn read_checkpoint<R: Real>(bytes: &[u8]) -> Result<(EncoderConfig, ParamTree<R>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let width = r.u32()?;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported value width {width}")));
    }
    let config = EncoderConfig {
        vocab_size: r.u32()?,
        hidden: r.u32()?,
        n_blocks: r.u32()?,
        n_heads: r.u32()?,
        intermediate: r.u32()?,
        max_positions: r.u32()?,
        n_token_types: r.u32()?,
    };
    config.validate()?;
    let count = r.u32()?;
    let mut params = ParamTree::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("entry name: {e}")))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data: Vec<R> = raw
            .chunks(width)
            .map(|c| match width {
                4 => R::of(f32::read_le(c) as f64),
                _ => R::of(f64::read_le(c)),
            })
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    check_layout(&config, &params)?;
    Ok((config, params))
}

pub fn save_checkpoint<R: Real>(path: &Path, config: &EncoderConfig, params: &ParamTree<R>) -> Result<()> {
    crate::io::write_file(path, write_checkpoint(config, params)?)
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<(EncoderConfig, ParamTree<R>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
