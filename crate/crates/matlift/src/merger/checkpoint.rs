//! Merger parameter checkpoints: versioned binary blob with a shape header
//! and a deterministic byte layout for reproducible resume.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::real::Real;

use super::{ChannelMerger, Dense, MaterialChannel, MergerHead, MergerParams};

pub const CKPT_MAGIC: &[u8; 4] = b"MLPW";
pub const CKPT_VERSION: u32 = 1;

fn head_tag(head: MergerHead) -> u8 {
    match head {
        MergerHead::Softmax => 0,
        MergerHead::DirectValue => 1,
    }
}

fn head_from_tag(tag: u8) -> Result<MergerHead> {
    match tag {
        0 => Ok(MergerHead::Softmax),
        1 => Ok(MergerHead::DirectValue),
        t => Err(Error::validation(format!("unknown merger head tag {t}"))),
    }
}

pub(crate) fn write_tensor<R: Real, W: Write>(w: &mut W, data: &[R]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(data.len() as u64)?;
    for &v in data {
        w.write_f64::<LittleEndian>(v.as_f64())?;
    }
    Ok(())
}

pub(crate) fn read_tensor<R: Real>(r: &mut Cursor<&[u8]>) -> std::io::Result<Vec<R>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(R::of(r.read_f64::<LittleEndian>()?));
    }
    Ok(out)
}

fn write_channel<R: Real, W: Write>(w: &mut W, m: &ChannelMerger<R>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(m.views as u32)?;
    w.write_u32::<LittleEndian>(m.pe_levels as u32)?;
    w.write_u8(head_tag(m.head))?;
    w.write_u32::<LittleEndian>(m.layers.len() as u32)?;
    for layer in &m.layers {
        w.write_u32::<LittleEndian>(layer.w.nrows() as u32)?;
        w.write_u32::<LittleEndian>(layer.w.ncols() as u32)?;
        write_tensor(w, layer.w.as_slice().expect("standard layout"))?;
        write_tensor(w, layer.b.as_slice().expect("standard layout"))?;
    }
    Ok(())
}

fn read_channel<R: Real>(
    r: &mut Cursor<&[u8]>,
    channel: MaterialChannel,
) -> std::io::Result<Result<ChannelMerger<R>>> {
    let views = r.read_u32::<LittleEndian>()? as usize;
    let pe_levels = r.read_u32::<LittleEndian>()? as usize;
    let head = match head_from_tag(r.read_u8()?) {
        Ok(h) => h,
        Err(e) => return Ok(Err(e)),
    };
    let layer_count = r.read_u32::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let wdata = read_tensor::<R>(r)?;
        let bdata = read_tensor::<R>(r)?;
        if wdata.len() != rows * cols || bdata.len() != rows {
            return Ok(Err(Error::validation("checkpoint tensor shape mismatch")));
        }
        layers.push(Dense {
            w: Array2::from_shape_vec((rows, cols), wdata).expect("checked shape"),
            b: Array1::from_vec(bdata),
        });
    }
    Ok(Ok(ChannelMerger {
        channel,
        views,
        pe_levels,
        head,
        layers,
    }))
}

/// Writes all three channel mergers (no header) into a stream.
pub(crate) fn write_params_to<R: Real, W: Write>(
    w: &mut W,
    params: &MergerParams<R>,
) -> std::io::Result<()> {
    for c in MaterialChannel::ALL {
        write_channel(w, params.channel(c))?;
    }
    Ok(())
}

/// Inverse of [`write_params_to`].
pub(crate) fn read_params_from<R: Real>(
    r: &mut Cursor<&[u8]>,
) -> std::io::Result<Result<MergerParams<R>>> {
    let mut channels = Vec::new();
    for c in MaterialChannel::ALL {
        match read_channel::<R>(r, c)? {
            Ok(ch) => channels.push(ch),
            Err(e) => return Ok(Err(e)),
        }
    }
    let metallic = channels.pop().unwrap();
    let roughness = channels.pop().unwrap();
    let basecolor = channels.pop().unwrap();
    Ok(Ok(MergerParams {
        basecolor,
        roughness,
        metallic,
    }))
}

pub fn save_params<R: Real>(params: &MergerParams<R>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(CKPT_MAGIC).expect("vec write");
    buf.write_u32::<LittleEndian>(CKPT_VERSION).expect("vec write");
    write_params_to(&mut buf, params).expect("vec write");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_params<R: Real>(path: &Path) -> Result<MergerParams<R>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(bytes.as_slice());
    let parse = |r: &Cursor<&[u8]>, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: r.position() as usize,
        message: msg.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| parse(&r, "truncated"))?;
    if &magic != CKPT_MAGIC {
        return Err(parse(&r, "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| parse(&r, "truncated"))?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CKPT_VERSION,
        });
    }
    read_params_from::<R>(&mut r).map_err(|_| parse(&r, "truncated tensor"))?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merger::init_params;

    #[test]
    fn roundtrip_preserves_every_weight() {
        let params: MergerParams<f64> = init_params(1234, 5, MergerHead::Softmax, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merger.ckpt");
        save_params(&params, &path).unwrap();
        let back: MergerParams<f64> = load_params(&path).unwrap();
        for c in MaterialChannel::ALL {
            let (a, b) = (params.channel(c), back.channel(c));
            assert_eq!(a.views, b.views);
            assert_eq!(a.head, b.head);
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                assert_eq!(la.w, lb.w);
                assert_eq!(la.b, lb.b);
            }
        }
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let params: MergerParams<f32> = init_params(9, 3, MergerHead::Softmax, 4);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_params(&params, &p1).unwrap();
        save_params(&params, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
