//! Checkpoint container: magic `TIRC`, format version, a config echo, and
//! named f32 tensors, closed by a CRC32. Round trips are bitwise stable;
//! writes go through a temp file and an atomic rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::IoError;

pub const MAGIC: &[u8; 4] = b"TIRC";
pub const VERSION: u32 = 1;

/// One named tensor in the checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let name = name.into();
        assert_eq!(dims.iter().product::<usize>(), data.len(), "{name}");
        NamedTensor { name, dims, data }
    }
}

/// IEEE CRC32 (reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn encode(config_echo: &str, tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_echo.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Serializes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(
    path: &Path,
    config_echo: &str,
    tensors: &[NamedTensor],
) -> Result<(), IoError> {
    let bytes = encode(config_echo, tensors);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| IoError::file(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| IoError::file(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| IoError::file(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.data.len() {
            return Err(IoError::Checkpoint("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads and validates a checkpoint, returning the config echo and
/// tensors.
pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<NamedTensor>), IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::file(path, e))?;
    if bytes.len() < 12 {
        return Err(IoError::Checkpoint("file too small".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let want = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let got = crc32(body);
    if want != got {
        return Err(IoError::Checkpoint(format!(
            "CRC mismatch: stored {want:08x}, computed {got:08x}"
        )));
    }
    let mut cur = Cursor { data: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(IoError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(IoError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let cfg_len = cur.u32()? as usize;
    let cfg = String::from_utf8(cur.take(cfg_len)?.to_vec())
        .map_err(|_| IoError::Checkpoint("config echo is not UTF-8".into()))?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| IoError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok((cfg, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("irvox_ckpt_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_tensors() -> Vec<NamedTensor> {
        vec![
            NamedTensor::new(
                "density.vec.x",
                vec![2, 4],
                (0..8).map(|v| v as f32).collect(),
            ),
            NamedTensor::new("opt.step", vec![1], vec![42.0]),
            NamedTensor::new("empty", vec![0], vec![]),
        ]
    }

    #[test]
    fn save_load_save_produces_identical_bytes() {
        let p1 = tmp("a.ckpt");
        let p2 = tmp("b.ckpt");
        save_checkpoint(&p1, "k = v\nseed = 7\n", &sample_tensors()).unwrap();
        let (cfg, tensors) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg, "k = v\nseed = 7\n");
        save_checkpoint(&p2, &cfg, &tensors).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corruption_and_truncation_are_rejected() {
        let p = tmp("c.ckpt");
        save_checkpoint(&p, "", &sample_tensors()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let corrupted = tmp("c_bad.ckpt");
        std::fs::write(&corrupted, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&corrupted),
            Err(IoError::Checkpoint(_))
        ));
        let truncated = tmp("c_trunc.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());
    }

    #[test]
    fn crc32_matches_known_vector() {
        // Standard test vector: CRC32("123456789") = 0xCBF43926.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }
}
