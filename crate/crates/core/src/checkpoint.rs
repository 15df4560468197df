//! Parameter checkpoints.
//!
//! Layout: the 4-byte magic `GLT1`, a little-endian `u32` manifest length,
//! the JSON manifest (one `{name, shape, dtype, kind}` entry per tensor, in
//! payload order), then every tensor's values as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GLT1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// `param` or `buffer`.
    pub kind: String,
}

pub fn write(params: &Params, mut out: impl Write) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    let entries = params
        .trainable()
        .iter()
        .map(|e| (e, "param"))
        .chain(params.buffers().iter().map(|e| (e, "buffer")));
    for ((name, t), kind) in entries {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            kind: kind.into(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&manifest)?;
    out.write_all(MAGIC)?;
    out.write_all(&(manifest.len() as u32).to_le_bytes())?;
    out.write_all(&manifest)?;
    out.write_all(&payload)?;
    Ok(())
}

pub fn read(mut input: impl Read) -> Result<Params> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut manifest = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut manifest)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&manifest)?;
    let mut params = Params::new();
    for e in manifest {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {} for {}", e.dtype, e.name)));
        }
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape, data)?;
        match e.kind.as_str() {
            "param" => params.insert(e.name, t),
            "buffer" => params.insert_buffer(e.name, t),
            other => return Err(Error::Format(format!("unknown tensor kind {other}"))),
        }
    }
    Ok(params)
}

pub fn save(params: &Params, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Params> {
    read(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut p = Params::new();
        p.insert("a.w", Tensor::from_fn(vec![2, 3], |i| i as f32 * -0.3 + f32::EPSILON));
        p.insert_buffer("bn.running_var", Tensor::ones(vec![3]));
        let mut buf = Vec::new();
        write(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"GLT1");
        let back = read(&buf[..]).unwrap();
        assert_eq!(back.checksum(), p.checksum());
    }

    #[test]
    fn rejects_foreign_magic() {
        assert!(read(&b"PVL1\0\0\0\0"[..]).is_err());
    }
}
