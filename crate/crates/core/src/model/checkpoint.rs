//! `HTDM` checkpoint container.
//!
//! ```text
//! "HTDM" | u32 version
//! u32 bands, group_len, embed_dim, state_dim, head_dim, depth | f32 leaky_slope
//! u32 count, then per tensor:
//!     u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f32 data
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::binio::{dim_u32, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"HTDM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode<R: Real>(model: &Model<R>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, CHECKPOINT_VERSION);
    let c = model.config();
    for (v, what) in [
        (c.bands, "bands"),
        (c.group_len, "group_len"),
        (c.embed_dim, "embed_dim"),
        (c.state_dim, "state_dim"),
        (c.head_dim, "head_dim"),
        (c.depth, "depth"),
    ] {
        put_u32(&mut out, dim_u32(v, what)?);
    }
    put_f32s(&mut out, [c.leaky_slope as f32]);
    put_u32(&mut out, dim_u32(model.params().len(), "parameter count")?);
    for (name, t) in model.names().iter().zip(model.params()) {
        put_u32(&mut out, dim_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dim_u32(t.rank(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut out, dim_u32(d, "extent")?);
        }
        put_f32s(&mut out, t.data().iter().map(|v| v.as_f64() as f32));
    }
    Ok(out)
}

pub fn decode<R: Real>(bytes: &[u8]) -> Result<Model<R>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [bands, group_len, embed_dim, state_dim, head_dim, depth] = dims;
    let config = ModelConfig {
        bands,
        group_len,
        embed_dim,
        state_dim,
        head_dim,
        depth,
        leaky_slope: widen(r.f32()?),
    };
    let mut model = Model::<R>::new(config, 0)?;
    let at = r.offset();
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Format {
            offset: at,
            msg: format!("{count} tensors stored, configuration implies {}", model.params().len()),
        });
    }
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "parameter name is not utf-8".into(),
            })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format {
            offset: at,
            msg: format!("shape {shape:?} of {name} overflows"),
        })?;
        let data = r.f32s(numel)?;
        let t = Tensor::new(shape, data.into_iter().map(|v| R::lit(v as f64)).collect())
            .map_err(|e| Error::Format {
                offset: at,
                msg: format!("{name}: {e}"),
            })?;
        named.push((name, t));
    }
    r.finish()?;
    model.set_params(named)?;
    Ok(model)
}

/// The shortest decimal that round-trips through f32, so 0.01 reads back
/// as 0.01 rather than 0.009999999776.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

pub fn save_checkpoint<R: Real>(model: &Model<R>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Model<R>> {
    decode(&std::fs::read(path)?)
}
