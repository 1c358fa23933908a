//! Versioned, checksummed checkpoint container for network weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            9 bytes  "NESTFUSE1"
//! version          u32      currently 1
//! deep_supervision u8       0 or 1
//! lambda flag      u8       0 = none, 1 = f64 follows
//! lambda           f64      only when flagged
//! entry count      u32
//! per entry:
//!   name           u16 length + UTF-8 bytes
//!   rank           u8, then u32 dims (weight: [out, in, k, k]; bias: [out])
//!   dtype          u8       0 = f32
//!   data length    u64      bytes
//!   data           f32 LE, row-major
//!   checksum       u32      CRC-32 of the data bytes
//! ```
//!
//! Entries appear in canonical order (`NetworkState::convs`), two per
//! convolution: `<name>.weight` and `<name>.bias`. Loading verifies magic,
//! version, every checksum, and that the entries exactly cover the
//! expected topology. Saving is atomic: a temporary file in the target
//! directory is renamed into place, so interrupted runs never leave a
//! half-written file that loads.

use crate::network::NetworkState;
use std::io::Write;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 9] = b"NESTFUSE1";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Errors from checkpoint serialization, each one a distinct failure class.
#[derive(thiserror::Error, Debug)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum failure in entry '{entry}' (corrupt or truncated data)")]
    Checksum { entry: String },
    #[error("checkpoint does not match the network topology: {0}")]
    Topology(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes the state to `path` atomically (temp file + rename).
pub fn save_checkpoint(state: &NetworkState, path: &Path) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(state.has_heads() as u8);
    match state.trained_lambda {
        Some(l) => {
            buf.push(1);
            buf.extend_from_slice(&l.to_le_bytes());
        }
        None => buf.push(0),
    }
    let convs = state.convs();
    buf.extend_from_slice(&(2 * convs.len() as u32).to_le_bytes());
    for (name, conv) in &convs {
        let wshape = [
            conv.out_channels as u32,
            conv.in_channels as u32,
            conv.kernel as u32,
            conv.kernel as u32,
        ];
        write_entry(&mut buf, &format!("{name}.weight"), &wshape, &conv.weight);
        write_entry(&mut buf, &format!("{name}.bias"), &[conv.out_channels as u32], &conv.bias);
    }

    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(&buf).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_entry(buf: &mut Vec<u8>, name: &str, shape: &[u32], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.push(DTYPE_F32);
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    let crc = crc32fast::hash(&bytes);
    buf.extend_from_slice(&bytes);
    buf.extend_from_slice(&crc.to_le_bytes());
}

/// Byte cursor whose read failures surface as checksum errors for the
/// entry being parsed (truncation is indistinguishable from corruption).
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    entry: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Checksum {
                entry: self.entry.clone(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Entry {
    shape: Vec<u32>,
    data: Vec<f32>,
}

/// Loads and verifies a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<NetworkState, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        buf: &bytes,
        pos: MAGIC.len(),
        entry: "<header>".to_string(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let deep_supervision = r.u8()? != 0;
    let trained_lambda = if r.u8()? != 0 { Some(r.f64()?) } else { None };
    let count = r.u32()? as usize;

    let mut entries = std::collections::HashMap::<String, Entry>::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Topology("entry name is not UTF-8".into()))?
            .to_string();
        r.entry = name.clone();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Topology(format!(
                "entry '{name}' has unsupported dtype {dtype}"
            )));
        }
        let data_len = r.u64()? as usize;
        let expected: usize = shape.iter().map(|&d| d as usize).product::<usize>() * 4;
        if data_len != expected {
            return Err(CheckpointError::Topology(format!(
                "entry '{name}' data length {data_len} does not match shape {shape:?}"
            )));
        }
        let raw = r.take(data_len)?;
        let crc = r.u32()?;
        if crc32fast::hash(raw) != crc {
            return Err(CheckpointError::Checksum { entry: name });
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if entries.insert(name.clone(), Entry { shape, data }).is_some() {
            return Err(CheckpointError::Topology(format!("duplicate entry '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Topology(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        )));
    }

    let mut state = NetworkState::zeros(deep_supervision);
    state.trained_lambda = trained_lambda;
    let names: Vec<&'static str> = state.convs().iter().map(|(n, _)| *n).collect();
    for (name, conv) in names.iter().zip(state.convs_mut()) {
        let wname = format!("{name}.weight");
        let want = vec![
            conv.out_channels as u32,
            conv.in_channels as u32,
            conv.kernel as u32,
            conv.kernel as u32,
        ];
        let e = entries
            .remove(&wname)
            .ok_or_else(|| CheckpointError::Topology(format!("missing entry '{wname}'")))?;
        if e.shape != want {
            return Err(CheckpointError::Topology(format!(
                "entry '{wname}' has shape {:?}, expected {want:?}",
                e.shape
            )));
        }
        conv.weight = e.data;
        let bname = format!("{name}.bias");
        let e = entries
            .remove(&bname)
            .ok_or_else(|| CheckpointError::Topology(format!("missing entry '{bname}'")))?;
        if e.shape != vec![conv.out_channels as u32] {
            return Err(CheckpointError::Topology(format!(
                "entry '{bname}' has shape {:?}, expected [{}]",
                e.shape, conv.out_channels
            )));
        }
        conv.bias = e.data;
    }
    if let Some(extra) = entries.keys().next() {
        return Err(CheckpointError::Topology(format!("unexpected entry '{extra}'")));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_network;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (seed, ds, lambda) in [(1u64, false, None), (2, true, Some(100.0))] {
            let mut state = init_network(seed, ds);
            state.trained_lambda = lambda;
            let path = dir.path().join(format!("ckpt_{seed}.nf"));
            save_checkpoint(&state, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded, state);
            assert!(!path.with_extension("tmp").exists(), "temp file cleaned up");
        }
    }

    #[test]
    fn corruption_classes_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let state = init_network(3, true);
        let path = dir.path().join("base.nf");
        save_checkpoint(&state, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let write = |bytes: &[u8]| {
            let p = dir.path().join("bad.nf");
            std::fs::write(&p, bytes).unwrap();
            p
        };

        let mut bad = good.clone();
        bad[0] ^= 0xff;
        assert!(matches!(load_checkpoint(&write(&bad)), Err(CheckpointError::BadMagic)));

        let mut bad = good.clone();
        bad[9] = 99; // version field
        assert!(matches!(
            load_checkpoint(&write(&bad)),
            Err(CheckpointError::UnsupportedVersion(99))
        ));

        let mut bad = good.clone();
        let mid = good.len() / 2;
        bad[mid] ^= 0x01; // flip one data bit
        assert!(matches!(
            load_checkpoint(&write(&bad)),
            Err(CheckpointError::Checksum { .. })
        ));

        let truncated = &good[..good.len() - 7];
        assert!(matches!(
            load_checkpoint(&write(truncated)),
            Err(CheckpointError::Checksum { .. })
        ));

        // Rename an entry: topology error. The first entry name starts
        // after magic(9) + version(4) + ds(1) + lambda flag(1) + count(4)
        // + name length(2).
        let mut bad = good.clone();
        let name_at = 9 + 4 + 1 + 1 + 4 + 2;
        bad[name_at] = b'x';
        // Fix nothing else: the checksum only covers data bytes, so this
        // parses and fails topology matching.
        assert!(matches!(
            load_checkpoint(&write(&bad)),
            Err(CheckpointError::Topology(_))
        ));

        assert!(matches!(
            load_checkpoint(&dir.path().join("nope.nf")),
            Err(CheckpointError::Io { .. })
        ));
    }

    #[test]
    fn heads_flag_and_lambda_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = init_network(4, true);
        state.trained_lambda = Some(42.5);
        let path = dir.path().join("ds.nf");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.has_heads());
        assert_eq!(loaded.trained_lambda, Some(42.5));
    }
}
