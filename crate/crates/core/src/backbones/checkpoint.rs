//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PNCK" | version: u32 | entries: u32
//! per entry: name_len: u32 | name (utf-8) | dtype: u8 (1 = f64) | ndim: u32
//!            | dims: u64 * ndim | offset: u64 | byte_len: u64
//! payload: raw f64 values, offsets relative to the payload start
//! ```
//!
//! Entry names are prefixed: `param/`, `bn_mean/`, `bn_var/`, `velocity/`
//! and `estimator/`.

use std::collections::HashMap;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::network::Network;
use crate::autodiff::{SgdMomentum, Tensor};
use crate::cost::CostEstimator;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// What a load left untouched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Network parameters absent from the file (kept at their current values).
    pub missing: Vec<String>,
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(entries.len() as u32).unwrap();
    let mut offset = 0u64;
    for e in entries {
        out.write_u32::<LittleEndian>(e.name.len() as u32).unwrap();
        out.extend_from_slice(e.name.as_bytes());
        out.write_u8(DTYPE_F64).unwrap();
        out.write_u32::<LittleEndian>(e.shape.len() as u32).unwrap();
        for &d in &e.shape {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        let len = (e.data.len() * 8) as u64;
        out.write_u64::<LittleEndian>(offset).unwrap();
        out.write_u64::<LittleEndian>(len).unwrap();
        offset += len;
    }
    for e in entries {
        for &v in &e.data {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |_| Error::CheckpointTruncated(what.to_string())
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut r, &mut magic).map_err(truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::CorruptFile {
            path: Default::default(),
            detail: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated("version"))?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.read_u32::<LittleEndian>().map_err(truncated("entry count"))? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(truncated("manifest"))? as usize;
        if r.len() < name_len {
            return Err(Error::CheckpointTruncated("entry name".into()));
        }
        let name = String::from_utf8(r[..name_len].to_vec()).map_err(|_| Error::CorruptFile {
            path: Default::default(),
            detail: "entry name is not utf-8".into(),
        })?;
        r = &r[name_len..];
        let dtype = r.read_u8().map_err(truncated("manifest"))?;
        if dtype != DTYPE_F64 {
            return Err(Error::CorruptFile {
                path: Default::default(),
                detail: format!("entry `{name}` has unsupported dtype {dtype}"),
            });
        }
        let ndim = r.read_u32::<LittleEndian>().map_err(truncated("manifest"))? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(truncated("manifest"))? as usize);
        }
        let offset = r.read_u64::<LittleEndian>().map_err(truncated("manifest"))? as usize;
        let len = r.read_u64::<LittleEndian>().map_err(truncated("manifest"))? as usize;
        if len != shape.iter().product::<usize>() * 8 {
            return Err(Error::CorruptFile {
                path: Default::default(),
                detail: format!("entry `{name}` byte length {len} disagrees with shape {shape:?}"),
            });
        }
        manifest.push((name, shape, offset, len));
    }
    let payload = r;
    manifest
        .into_iter()
        .map(|(name, shape, offset, len)| {
            let end = offset.checked_add(len).filter(|&e| e <= payload.len());
            let Some(end) = end else {
                return Err(Error::CheckpointTruncated(format!("payload of `{name}`")));
            };
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Entry { name, shape, data })
        })
        .collect()
}

/// Serializes the network and, optionally, optimizer and estimator state.
pub fn snapshot(net: &Network, opt: Option<&SgdMomentum>, est: Option<&CostEstimator>) -> Vec<Entry> {
    let mut entries = Vec::new();
    for (_, p) in net.store.iter() {
        entries.push(Entry {
            name: format!("param/{}", p.name),
            shape: p.tensor.shape().to_vec(),
            data: p.tensor.data().to_vec(),
        });
    }
    for (name, stats) in net.bn_stats() {
        entries.push(Entry {
            name: format!("bn_mean/{name}"),
            shape: vec![stats.mean.len()],
            data: stats.mean.clone(),
        });
        entries.push(Entry {
            name: format!("bn_var/{name}"),
            shape: vec![stats.var.len()],
            data: stats.var.clone(),
        });
    }
    if let Some(opt) = opt {
        for (id, p) in net.store.iter() {
            if let Some(v) = opt.velocity(id.index()) {
                entries.push(Entry {
                    name: format!("velocity/{}", p.name),
                    shape: v.shape().to_vec(),
                    data: v.data().to_vec(),
                });
            }
        }
    }
    if let Some(est) = est {
        let window: Vec<f64> = est.window().collect();
        entries.push(Entry {
            name: "estimator/window".into(),
            shape: vec![window.len()],
            data: window,
        });
        entries.push(Entry {
            name: "estimator/state".into(),
            shape: vec![2],
            data: vec![est.capacity() as f64, est.p_t()],
        });
    }
    entries
}

/// Writes entries into the network. Every entry must match a network slot in
/// name and shape; nothing is modified unless all of them do.
pub fn restore(
    net: &mut Network,
    entries: &[Entry],
    mut opt: Option<&mut SgdMomentum>,
    est: Option<&mut CostEstimator>,
) -> Result<LoadReport> {
    let bn_shapes: HashMap<String, usize> = net.bn_stats().iter().map(|(n, s)| (n.to_string(), s.mean.len())).collect();
    let mut seen = vec![false; net.store.len()];
    for e in entries {
        let check = |expected: &[usize]| {
            if e.shape != expected {
                Err(Error::CheckpointShape {
                    name: e.name.clone(),
                    file: e.shape.clone(),
                    network: expected.to_vec(),
                })
            } else {
                Ok(())
            }
        };
        let (kind, name) = e.name.split_once('/').unwrap_or(("", e.name.as_str()));
        match kind {
            "param" | "velocity" => {
                let id = net.store.find(name).ok_or_else(|| Error::CheckpointUnknown(e.name.clone()))?;
                check(net.store.get(id).tensor.shape())?;
                if kind == "param" {
                    seen[id.index()] = true;
                }
            }
            "bn_mean" | "bn_var" => {
                let c = *bn_shapes.get(name).ok_or_else(|| Error::CheckpointUnknown(e.name.clone()))?;
                check(&[c])?;
            }
            "estimator" if name == "window" || name == "state" => {}
            _ => return Err(Error::CheckpointUnknown(e.name.clone())),
        }
    }

    let mut est_window = None;
    let mut est_state = None;
    for e in entries {
        let (kind, name) = e.name.split_once('/').unwrap_or(("", e.name.as_str()));
        match kind {
            "param" => {
                let id = net.store.find(name).expect("validated");
                net.store.get_mut(id).tensor = Tensor::new(e.shape.clone(), e.data.clone())?;
            }
            "velocity" => {
                if let Some(opt) = opt.as_deref_mut() {
                    let id = net.store.find(name).expect("validated");
                    opt.set_velocity(id.index(), Tensor::new(e.shape.clone(), e.data.clone())?);
                }
            }
            "bn_mean" | "bn_var" => {
                for (n, stats) in net.bn_stats_mut() {
                    if n == name {
                        if kind == "bn_mean" {
                            stats.mean = e.data.clone();
                        } else {
                            stats.var = e.data.clone();
                        }
                    }
                }
            }
            "estimator" if name == "window" => est_window = Some(e.data.clone()),
            _ => est_state = Some(e.data.clone()),
        }
    }
    if let (Some(est), Some(window)) = (est, est_window) {
        let p0 = est_state.as_ref().and_then(|s| s.get(1).copied()).unwrap_or(est.p_t());
        est.restore(&window, p0);
    }
    let missing = net
        .store
        .iter()
        .filter(|(id, _)| !seen[id.index()])
        .map(|(_, p)| p.name.clone())
        .collect();
    Ok(LoadReport { missing })
}

/// Hex SHA-256 of the network's serialized parameters and BN statistics.
pub fn checkpoint_hash(net: &Network) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(encode(&snapshot(net, None, None))))
}

pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    opt: Option<&SgdMomentum>,
    est: Option<&CostEstimator>,
) -> Result<()> {
    std::fs::write(path, encode(&snapshot(net, opt, est)))?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    net: &mut Network,
    opt: Option<&mut SgdMomentum>,
    est: Option<&mut CostEstimator>,
) -> Result<LoadReport> {
    let bytes = std::fs::read(path)?;
    let entries = decode(&bytes).map_err(|e| match e {
        Error::CorruptFile { detail, .. } => Error::CorruptFile {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })?;
    restore(net, &entries, opt, est)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Entry> {
        vec![
            Entry {
                name: "param/a".into(),
                shape: vec![2, 2],
                data: vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5],
            },
            Entry {
                name: "estimator/window".into(),
                shape: vec![0],
                data: vec![],
            },
        ]
    }

    #[test]
    fn encode_decode_round_trip() {
        let e = sample();
        let back = decode(&encode(&e)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].data[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, e);
    }

    #[test]
    fn truncation_and_version_are_distinct_errors() {
        let bytes = encode(&sample());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::CheckpointTruncated(_))
        ));
        assert!(matches!(decode(&bytes[..10]), Err(Error::CheckpointTruncated(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode(&v2),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        assert!(matches!(decode(b"NOPE\x01\0\0\0"), Err(Error::CorruptFile { .. })));
    }
}
