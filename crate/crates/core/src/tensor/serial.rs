//! Flat binary tensor record: little-endian u32 rank, u32 dims, u8 dtype tag
//! (0 = f32, 1 = f64), then raw row-major scalars. Checkpoints and the
//! visualization intake both speak this format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Buf, Dtype, Tensor};

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stream>", e)
}

pub fn write_record(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io_err)?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&[t.dtype().tag()]).map_err(io_err)?;
    let mut chunk = Vec::with_capacity(32 * 1024);
    match t.data() {
        Buf::F32(v) => {
            for block in v.chunks(8192) {
                chunk.clear();
                for x in block {
                    chunk.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&chunk).map_err(io_err)?;
            }
        }
        Buf::F64(v) => {
            for block in v.chunks(8192) {
                chunk.clear();
                for x in block {
                    chunk.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&chunk).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

pub fn read_record(r: &mut impl Read) -> Result<Tensor> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::Format {
            path: "<stream>".into(),
            msg: format!("implausible tensor rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b4).map_err(io_err)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io_err)?;
    let dtype = Dtype::from_tag(tag[0]).ok_or_else(|| Error::Format {
        path: "<stream>".into(),
        msg: format!("unknown dtype tag {}", tag[0]),
    })?;
    let n: usize = shape.iter().product();
    let buf = match dtype {
        Dtype::F32 => {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(io_err)?;
            Buf::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        Dtype::F64 => {
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(io_err)?;
            Buf::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect(),
            )
        }
    };
    // Stored tensors may legitimately contain values produced elsewhere, but
    // the finiteness invariant still applies on intake.
    Tensor::new(shape, buf)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 8 + 64);
    write_record(&mut out, t).expect("vec write cannot fail");
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    read_record(&mut cur)
}
