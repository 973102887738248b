//! Self-describing weight container.
//!
//! Layout: the 8-byte magic `MRIQNET1`, a little-endian `u64` header length,
//! a JSON header (architecture, output scaling, training seed, manifest
//! hash and the name and shape of every tensor), then every tensor's values
//! as little-endian `f32`, in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DualTaskNet, Group, NetConfig, ScoreScale};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MRIQNET1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: DualTaskNet<f32>,
    pub seed: u64,
    /// Hash of the dataset manifest the net was trained on.
    pub manifest_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    score: ScoreScale,
    seed: u64,
    manifest_hash: String,
    tensors: Vec<TensorInfo>,
}

const GROUPS: [(Group, &str); 3] = [(Group::Trunk, "trunk"), (Group::Noise, "noise"), (Group::Motion, "motion")];

fn tensors(net: &DualTaskNet<f32>) -> Vec<(String, &[f32])> {
    let mut out = Vec::new();
    for (g, name) in GROUPS {
        for (i, p) in net.params(g).into_iter().enumerate() {
            out.push((format!("{name}.{i}"), p));
        }
    }
    let bn = &net.motion.bn;
    out.push(("motion.running_mean".into(), bn.running_mean.as_slice().expect("contiguous")));
    out.push(("motion.running_var".into(), bn.running_var.as_slice().expect("contiguous")));
    out
}

fn tensors_mut(net: &mut DualTaskNet<f32>) -> Vec<&mut [f32]> {
    // split borrows: collect the groups one after another
    let mut out: Vec<&mut [f32]> = Vec::new();
    let DualTaskNet { trunk, noise, motion, .. } = net;
    for (c, d) in trunk.conv.iter_mut().zip(trunk.dn.iter_mut()) {
        out.push(c.weight.as_slice_mut().expect("contiguous"));
        out.push(c.bias.as_slice_mut().expect("contiguous"));
        out.push(d.beta.as_slice_mut().expect("contiguous"));
        out.push(d.gamma.as_slice_mut().expect("contiguous"));
    }
    out.push(noise.conv.weight.as_slice_mut().expect("contiguous"));
    out.push(noise.conv.bias.as_slice_mut().expect("contiguous"));
    out.push(noise.dn.beta.as_slice_mut().expect("contiguous"));
    out.push(noise.dn.gamma.as_slice_mut().expect("contiguous"));
    out.push(noise.head.weight.as_slice_mut().expect("contiguous"));
    out.push(noise.head.bias.as_slice_mut().expect("contiguous"));
    out.push(motion.conv.weight.as_slice_mut().expect("contiguous"));
    out.push(motion.conv.bias.as_slice_mut().expect("contiguous"));
    out.push(motion.bn.scale.as_slice_mut().expect("contiguous"));
    out.push(motion.bn.shift.as_slice_mut().expect("contiguous"));
    out.push(motion.head.weight.as_slice_mut().expect("contiguous"));
    out.push(motion.head.bias.as_slice_mut().expect("contiguous"));
    out.push(motion.bn.running_mean.as_slice_mut().expect("contiguous"));
    out.push(motion.bn.running_var.as_slice_mut().expect("contiguous"));
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let list = tensors(&self.net);
        let header = Header {
            config: self.net.config.clone(),
            score: self.net.score,
            seed: self.seed,
            manifest_hash: self.manifest_hash.clone(),
            tensors: list
                .iter()
                .map(|(name, t)| TensorInfo { name: name.clone(), len: t.len() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.net.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in list {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a network checkpoint"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut net = DualTaskNet::<f32>::new(header.config, 0)?;
        net.score = header.score;
        let mut data = &bytes[16 + len..];
        {
            let slots = tensors_mut(&mut net);
            if slots.len() != header.tensors.len() {
                return Err(bad("tensor count does not match the architecture"));
            }
            for (slot, info) in slots.into_iter().zip(&header.tensors) {
                if slot.len() != info.len {
                    return Err(Error::format(
                        origin,
                        format!("tensor {} has {} values, expected {}", info.name, info.len, slot.len()),
                    ));
                }
                let need = 4 * info.len;
                if data.len() < need {
                    return Err(bad("truncated tensor data"));
                }
                for (v, chunk) in slot.iter_mut().zip(data[..need].chunks_exact(4)) {
                    *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                }
                data = &data[need..];
            }
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint { net, seed: header.seed, manifest_hash: header.manifest_hash })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    crate::io::write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let mut net = DualTaskNet::<f32>::new(
            NetConfig { size: 32, input_scale: 2.5, trunk_widths: [2, 3, 4], branch_width: 3 },
            8,
        )
        .unwrap();
        net.score = ScoreScale { offset: 20.0, scale: 4.0 };
        net.motion.bn.running_mean.fill(0.25);
        Checkpoint { net, seed: 42, manifest_hash: "abc".into() }
    }

    #[test]
    fn round_trip() {
        let c = ckpt();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.net.trunk, c.net.trunk);
        assert_eq!(back.net.noise, c.net.noise);
        assert_eq!(back.net.motion, c.net.motion);
        assert_eq!(back.net.score, c.net.score);
        assert_eq!(back.net.config, c.net.config);
        assert_eq!((back.seed, back.manifest_hash.as_str()), (42, "abc"));
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(b"hello", p).is_err());
        let mut bytes = ckpt().to_bytes();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes, p), Err(Error::Format { .. })));
        let mut bytes = ckpt().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes, p).is_err());
    }

    #[test]
    fn hash_changes_with_weights() {
        let a = ckpt();
        let mut b = a.clone();
        b.net.noise.head.bias[0] += 1.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
