//! FBTN tensor files: magic "FBTN", u8 version, u8 rank, little-endian u32
//! dims, little-endian f32 payload. The f32 payload is the storage
//! precision of the whole lab; anything meant to round-trip exactly is
//! snapped to f32 before it is considered final.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const FBTN_MAGIC: &[u8; 4] = b"FBTN";
pub const FBTN_VERSION: u8 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    if t.shape().len() > u8::MAX as usize {
        return Err(Error::Format("tensor rank exceeds FBTN limit".into()));
    }
    w.write_all(FBTN_MAGIC)?;
    w.write_all(&[FBTN_VERSION, t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != FBTN_MAGIC {
        return Err(Error::Format("bad FBTN magic".into()));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(truncated)?;
    if head[0] != FBTN_VERSION {
        return Err(Error::Format(format!("unsupported FBTN version {}", head[0])));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim).map_err(truncated)?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(truncated)?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_vec(data, &shape)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated FBTN data".into())
    } else {
        Error::Io(e)
    }
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

/// Round every element to f32 storage precision.
pub fn snap_to_storage(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_after_snap_is_exact() {
        let t = Tensor::from_vec(vec![0.1, -2.5, 1.0 / 3.0, 7.25], &[2, 2]).unwrap();
        let snapped = snap_to_storage(&t);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &snapped).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), snapped.shape());
        assert_eq!(back.data(), snapped.data());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros(&[2])).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros(&[4, 4])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
