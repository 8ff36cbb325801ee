//! Checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes   "PLSN"
//! format_version   u32       currently 1
//! config_len       u32
//! config           config_len bytes of NetworkConfig JSON (UTF-8)
//! tensor_count     u32
//! tensor_count records of:
//!   name_len       u32
//!   name           name_len bytes UTF-8
//!   rank           u32
//!   dims           rank x u32
//!   values         product(dims) x f32 (IEEE 754, little-endian)
//! ```
//!
//! Tensors appear in the stable traversal order of the parameter store and
//! cover every trainable tensor plus normalization running statistics.
//! Loading rebuilds a parameter store for the embedded configuration and
//! fills it in lockstep, verifying every name and shape.

use std::path::Path;

use crate::error::{Error, Result};

use super::params::PlsNetParams;
use super::NetworkConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PLSN";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &PlsNetParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&params.cfg)?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);

    let mut count = 0u32;
    params.for_each_tensor(&mut |_, _| count += 1);
    buf.extend_from_slice(&count.to_le_bytes());

    params.for_each_tensor(&mut |info, data| {
        buf.extend_from_slice(&(info.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(info.name.as_bytes());
        buf.extend_from_slice(&(info.dims.len() as u32).to_le_bytes());
        for &d in &info.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: needed {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<PlsNetParams> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (supported: {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let config_len = cur.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(cur.take(config_len)?)
        .map_err(|e| Error::Format(format!("malformed embedded config: {e}")))?;
    let tensor_count = cur.u32()? as usize;

    let mut params = PlsNetParams::new(config)?;
    let mut expected = 0usize;
    params.for_each_tensor(&mut |_, _| expected += 1);
    if tensor_count != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {tensor_count} tensors, config requires {expected}"
        )));
    }

    let mut failure: Option<Error> = None;
    params.for_each_tensor_mut(&mut |info, data| {
        if failure.is_some() {
            return;
        }
        let mut step = || -> Result<()> {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != info.name {
                return Err(Error::Format(format!(
                    "tensor order mismatch: expected '{}', found '{name}'",
                    info.name
                )));
            }
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            if dims != info.dims {
                return Err(Error::Format(format!(
                    "shape mismatch for '{}': checkpoint {:?}, config requires {:?}",
                    info.name, dims, info.dims
                )));
            }
            let raw = cur.take(data.len() * 4)?;
            for (slot, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
                *slot = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomized_params() -> PlsNetParams {
        let mut params = PlsNetParams::new(NetworkConfig::small_test_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        params.for_each_tensor_mut(&mut |_, data| {
            for v in data {
                *v = rand::Rng::gen_range(&mut rng, -0.5..0.5f64);
            }
        });
        params
    }

    #[test]
    fn round_trip_preserves_names_shapes_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let params = randomized_params();
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, params.cfg);

        let mut original: Vec<(String, Vec<f64>)> = Vec::new();
        params.for_each_tensor(&mut |info, data| original.push((info.name, data.to_vec())));
        let mut reread: Vec<(String, Vec<f64>)> = Vec::new();
        loaded.for_each_tensor(&mut |info, data| reread.push((info.name, data.to_vec())));
        assert_eq!(original.len(), reread.len());
        for ((na, va), (nb, vb)) in original.iter().zip(&reread) {
            assert_eq!(na, nb);
            for (a, b) in va.iter().zip(vb) {
                // values pass through f32 on disk
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn saving_then_loading_twice_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let params = randomized_params();
        save_checkpoint(&a, &params).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let params = randomized_params();
        save_checkpoint(&path, &params).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &bytes).unwrap();
        assert!(load_checkpoint(&trunc).is_err());

        let mut bad_magic = std::fs::read(&path).unwrap();
        bad_magic[0] = b'X';
        std::fs::write(&trunc, &bad_magic).unwrap();
        assert!(load_checkpoint(&trunc).is_err());

        let mut bad_version = std::fs::read(&path).unwrap();
        bad_version[4] = 99;
        std::fs::write(&trunc, &bad_version).unwrap();
        assert!(load_checkpoint(&trunc).is_err());
    }
}
