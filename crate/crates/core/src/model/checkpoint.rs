//! Binary checkpoint: magic, version, a TOML header describing the network
//! and tensors, little-endian f32 payload, SHA-256 trailer over everything
//! before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Adam;
use super::unet::{NetworkSpec, Param, Params, UNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SCRSEGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Params,
    pub optimizer: Option<Adam>,
    /// Epochs completed when saved.
    pub epoch: usize,
    pub best_score: Option<f64>,
    /// Effective training config as TOML.
    pub config: String,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn network(&self) -> Result<UNet> {
        UNet::from_params(self.spec, self.params.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    epoch: usize,
    best_score: Option<f64>,
    config_hash: String,
    config: String,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorHeader>,
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        spec: ck.spec,
        epoch: ck.epoch,
        best_score: ck.best_score,
        config_hash: ck.config_hash.clone(),
        config: ck.config.clone(),
        optimizer_step: ck.optimizer.as_ref().map(|a| a.step),
        tensors: ck
            .params
            .tensors
            .iter()
            .map(|t| TensorHeader { name: t.name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let header = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(64 + header.len() + ck.params.count() * 12);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for t in &ck.params.tensors {
        put_f32s(&mut buf, &t.data);
    }
    if let Some(adam) = &ck.optimizer {
        for m in &adam.m {
            put_f32s(&mut buf, m);
        }
        for v in &adam.v {
            put_f32s(&mut buf, v);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header = std::str::from_utf8(r.take(hlen)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header: Header = toml::from_str(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = Params::default();
    for t in &header.tensors {
        let n = t.shape.iter().product();
        params.tensors.push(Param { name: t.name.clone(), shape: t.shape.clone(), data: r.f32s(n)? });
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut adam = Adam::new(&params);
            adam.step = step;
            for m in adam.m.iter_mut() {
                *m = r.f32s(m.len())?;
            }
            for v in adam.v.iter_mut() {
                *v = r.f32s(v.len())?;
            }
            Some(adam)
        }
        None => None,
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        spec: header.spec,
        params,
        optimizer,
        epoch: header.epoch,
        best_score: header.best_score,
        config: header.config,
        config_hash: header.config_hash,
    })
}

/// Writes to a temporary sibling and renames over `path`.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    atomic_write(path, &bytes)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint; when `expected` is given the stored network spec must
/// match it exactly.
pub fn load(path: &Path, expected: Option<&NetworkSpec>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let ck = decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(want) = expected {
        if &ck.spec != want {
            return Err(Error::Checkpoint(format!(
                "{}: network spec {:?} does not match expected {:?}",
                path.display(),
                ck.spec,
                want
            )));
        }
    }
    ck.network()?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let spec = NetworkSpec { in_channels: 1, num_classes: 3, base_width: 2, depth: 1 };
        let net = UNet::new(spec, 9);
        let mut adam = Adam::new(net.params());
        let mut params = net.params().clone();
        let grads: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.25; t.data.len()]).collect();
        adam.update(&mut params, &grads, 1e-3);
        Checkpoint {
            spec,
            params,
            optimizer: Some(adam),
            epoch: 3,
            best_score: Some(0.5),
            config: "[optim]\nseed = 1\n".into(),
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = decode(&encode(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(decode(&bytes[..20]).is_err());
        assert!(decode(b"garbage").is_err());
    }

    #[test]
    fn spec_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save(&path, &ck).unwrap();
        let other = NetworkSpec { num_classes: 4, ..ck.spec };
        assert!(matches!(load(&path, Some(&other)), Err(Error::Checkpoint(_))));
        assert_eq!(load(&path, Some(&ck.spec)).unwrap(), ck);
    }
}
