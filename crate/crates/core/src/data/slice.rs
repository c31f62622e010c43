//! `MMS1` slice files: magic, `u32` version (1), `u32` H, `u32` W, `u32`
//! channels (1), then `H * W` little-endian f32 intensities.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SLICE_MAGIC: &[u8; 4] = b"MMS1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn write_slice(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("slice image must be [H,W], got {s:?}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + image.len() * 4);
    out.extend_from_slice(SLICE_MAGIC);
    for v in [VERSION, s[0] as u32, s[1] as u32, 1] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

fn parse_header(path: &Path, b: &[u8]) -> Result<(usize, usize)> {
    if b.len() < HEADER_LEN {
        return Err(Error::data(format!("{}: truncated slice header", path.display())));
    }
    if &b[..4] != SLICE_MAGIC {
        return Err(Error::data(format!(
            "{}: magic mismatch (expected MMS1)",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported slice version {}",
            path.display(),
            word(0)
        )));
    }
    if word(3) != 1 {
        return Err(Error::data(format!(
            "{}: expected 1 channel, header says {}",
            path.display(),
            word(3)
        )));
    }
    Ok((word(1) as usize, word(2) as usize))
}

/// Reads only the header and returns `(H, W)`.
pub fn read_slice_header(path: &Path) -> Result<(usize, usize)> {
    let mut head = [0u8; HEADER_LEN];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    parse_header(path, &head[..n])
}

pub fn read_slice(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w) = parse_header(path, &bytes)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != h * w * 4 {
        return Err(Error::data(format!(
            "{}: header says {h}x{w} but payload holds {} bytes",
            path.display(),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&[h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.mms");
        let img = Tensor::from_f64(&[2, 3], &[0., 1., 2., 3., 4., 5.5]).unwrap();
        write_slice(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"MMS1");
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(read_slice_header(&p).unwrap(), (2, 3));
        assert_eq!(read_slice(&p).unwrap(), img);
    }

    #[test]
    fn corrupt_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mms");
        fs::write(&p, b"NOPE0000000000000000").unwrap();
        let err = read_slice(&p).unwrap_err().to_string();
        assert!(err.contains("bad.mms") && err.contains("magic"));
    }
}
