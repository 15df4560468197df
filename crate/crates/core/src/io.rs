//! File formats: 8-bit PGM images, `PVL1` float volumes, and JSON lines.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PVOL_MAGIC: &[u8; 4] = b"PVL1";

/// Map `[-1, 1]` to `0..=255`, clamping out-of-range values.
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_u8(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Binary (P5) PGM of a `(H, W)` or `(1, H, W)` tensor. Values are taken
/// as `[-1, 1]` intensities.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = hw(img)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

/// Raw bytes of an 8-bit image, row-major.
pub fn pixels_u8(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = hw(img)?;
    Ok((w, h, img.data().iter().map(|&v| to_u8(v)).collect()))
}

fn hw(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        ref s => Err(Error::Format(format!("expected a single-channel image, got shape {s:?}"))),
    }
}

/// Parse a P5 PGM into a `(1, H, W)` tensor in `[-1, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::Format("non-ASCII PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("unsupported PGM magic {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("only 8-bit PGM is supported, maxval {max}")));
    }
    let data = &bytes[i + 1..];
    if data.len() < w * h {
        return Err(Error::Format("truncated PGM payload".into()));
    }
    Tensor::new(vec![1, h, w], data[..w * h].iter().map(|&b| from_u8(b)).collect())
}

pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    decode_pgm(&std::fs::read(path)?)
}

/// `PVL1`, three little-endian `u32` extents `(D, H, W)`, then `f32` values.
pub fn write_pvol(mut out: impl Write, vol: &Tensor<f32>) -> Result<()> {
    let [d, h, w] = match *vol.shape() {
        [d, h, w] | [1, d, h, w] => [d, h, w],
        ref s => return Err(Error::Format(format!("expected a 3-D volume, got shape {s:?}"))),
    };
    out.write_all(PVOL_MAGIC)?;
    for e in [d, h, w] {
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in vol.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pvol(mut input: impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != PVOL_MAGIC {
        return Err(Error::Format(format!("bad volume magic {magic:?}")));
    }
    let mut ext = [0usize; 3];
    for e in &mut ext {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *e = u32::from_le_bytes(b) as usize;
    }
    let mut raw = vec![0u8; ext.iter().product::<usize>() * 4];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(ext.to_vec(), data)
}

pub fn save_pvol(path: &Path, vol: &Tensor<f32>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pvol(&mut w, vol)?;
    w.flush()?;
    Ok(())
}

pub fn load_pvol(path: &Path) -> Result<Tensor<f32>> {
    read_pvol(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
