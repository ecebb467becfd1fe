//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RFCN" | version u32 | dtype u8 (element byte width)
//! seed u64 | cfg_len u32 | network config TOML (UTF-8)
//! blob_count u32
//! per blob: kind u8 (0 param, 1 buffer) | name_len u16 | name
//!           ndim u8 | dims u32 xN | raw little-endian values
//! ```
//!
//! Blobs appear in network construction order, so a checkpoint of a given
//! seed and config is byte-for-byte reproducible.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{build_network, Network, NetworkConfig};
use crate::tensor::Real;

const MAGIC: &[u8; 4] = b"RFCN";
const VERSION: u32 = 1;

pub fn checkpoint_bytes<F: Real>(net: &Network<F>) -> Vec<u8> {
    let cfg_text = net.config().to_toml_string();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(F::BYTE_WIDTH as u8);
    out.extend_from_slice(&net.seed().to_le_bytes());
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());

    let n_blobs = net.parameters().len() + net.buffers().len();
    out.extend_from_slice(&(n_blobs as u32).to_le_bytes());
    let mut write_blob = |kind: u8, name: &str, shape: &[usize], data: &[F]| {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            v.write_le(&mut out);
        }
    };
    for p in net.parameters() {
        write_blob(0, &p.name, &p.tensor.shape(), &p.tensor.data());
    }
    for (name, t) in net.buffers() {
        write_blob(1, name, &t.shape(), &t.data());
    }
    out
}

pub fn save_checkpoint<F: Real>(net: &Network<F>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(net)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated container at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Rebuilds the network from the embedded config echo, then overwrites every
/// parameter and buffer from the named blobs. Names must cover the rebuilt
/// network exactly.
pub fn network_from_checkpoint_bytes<F: Real>(bytes: &[u8]) -> Result<Network<F>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let width = r.u8()? as usize;
    if width != F::BYTE_WIDTH {
        return Err(Error::Checkpoint(format!(
            "element width {width} does not match requested precision ({} bytes)",
            F::BYTE_WIDTH
        )));
    }
    let seed = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config echo is not UTF-8: {e}")))?;
    let cfg = NetworkConfig::from_toml_str(cfg_text)?;
    let net = build_network::<F>(&cfg, seed)?;

    let n_blobs = r.u32()? as usize;
    let mut filled = std::collections::HashSet::new();
    for _ in 0..n_blobs {
        let kind = r.u8()?;
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("blob name is not UTF-8: {e}")))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * F::BYTE_WIDTH)?;
        let target = match kind {
            0 => net
                .parameters()
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.tensor.clone()),
            1 => net
                .buffers()
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone()),
            k => return Err(Error::Checkpoint(format!("unknown blob kind {k}"))),
        };
        let target = target.ok_or_else(|| {
            Error::Checkpoint(format!("blob '{name}' has no counterpart in the rebuilt network"))
        })?;
        if target.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "blob '{name}' shape {shape:?} does not match network shape {:?}",
                target.shape()
            )));
        }
        target.apply_data(|d| {
            for (i, v) in d.iter_mut().enumerate() {
                *v = F::read_le(&raw[i * F::BYTE_WIDTH..]);
            }
        });
        filled.insert(name);
    }
    let expected = net.parameters().len() + net.buffers().len();
    if filled.len() != expected {
        return Err(Error::Checkpoint(format!(
            "container holds {} blobs but the network has {expected} tensors",
            filled.len()
        )));
    }
    Ok(net)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Network<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    network_from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ArchRow, BlockKind};

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            input_resolution: (8, 8),
            input_channels: 1,
            long_skips: true,
            short_skips: true,
            batch_norm: true,
            dropout_rate: 0.1,
            rows: vec![
                ArchRow {
                    name: "down1".into(),
                    block: BlockKind::Simple,
                    resolution: (4, 4),
                    width: 4,
                    repeat: 2,
                },
                ArchRow {
                    name: "up1".into(),
                    block: BlockKind::Simple,
                    resolution: (8, 8),
                    width: 4,
                    repeat: 1,
                },
                ArchRow {
                    name: "classifier".into(),
                    block: BlockKind::Conv1x1,
                    resolution: (8, 8),
                    width: 1,
                    repeat: 1,
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let net = build_network::<f32>(&cfg(), 42).unwrap();
        let bytes = checkpoint_bytes(&net);
        let restored = network_from_checkpoint_bytes::<f32>(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&restored), bytes);
        for (p, q) in net.parameters().iter().zip(restored.parameters()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.tensor.data_vec(), q.tensor.data_vec());
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_reported() {
        let net = build_network::<f32>(&cfg(), 1).unwrap();
        let mut bytes = checkpoint_bytes(&net);
        assert!(network_from_checkpoint_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        let err = match network_from_checkpoint_bytes::<f32>(&bytes) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("bad magic accepted"),
        };
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn precision_mismatch_is_reported() {
        let net = build_network::<f32>(&cfg(), 1).unwrap();
        let bytes = checkpoint_bytes(&net);
        let err = match network_from_checkpoint_bytes::<f64>(&bytes) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("precision mismatch accepted"),
        };
        assert!(err.contains("width"), "{err}");
    }
}
