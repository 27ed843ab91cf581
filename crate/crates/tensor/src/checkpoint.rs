//! Tensor checkpoint files.
//!
//! A text manifest followed by the raw data as little-endian `f64`:
//!
//! ```text
//! tagmt-checkpoint v1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>... <offset>
//! data <element count>
//! checksum sha256 <hex digest of the data bytes>
//! end
//! <binary payload>
//! ```
//!
//! Offsets count elements, not bytes. Writes go to a temporary file that is
//! renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Real, Result, Tensor, TensorError};

const MAGIC: &str = "tagmt-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            check_token(k)?;
            if v.contains('\n') {
                return Err(TensorError::Checkpoint(format!(
                    "meta value for {k} spans lines"
                )));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check_token(name)?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {} {offset}\n", dims.join("x")));
            for &x in t.data() {
                payload.extend_from_slice(&x.as_f64().to_le_bytes());
            }
            offset += t.numel();
        }
        header.push_str(&format!("data {offset}\n"));
        header.push_str(&format!(
            "checksum sha256 {}\n",
            hex::encode(Sha256::digest(&payload))
        ));
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.extend_from_slice(&payload);
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TensorError::Checkpoint(m.to_string());
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("header is not UTF-8"))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(bad("missing magic line"));
        }
        let mut meta = BTreeMap::new();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut count = None;
        let mut checksum = None;
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(2, ' ');
            let kind = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad("malformed tensor line"));
                    }
                    let shape = f[1]
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                        .collect::<Result<Vec<_>>>()?;
                    let offset = f[2].parse().map_err(|_| bad("bad offset"))?;
                    entries.push((f[0].to_string(), shape, offset));
                }
                "data" => count = Some(rest.parse::<usize>().map_err(|_| bad("bad data count"))?),
                "checksum" => {
                    checksum = Some(
                        rest.strip_prefix("sha256 ")
                            .ok_or_else(|| bad("unknown checksum kind"))?
                            .to_string(),
                    )
                }
                _ => return Err(bad("unknown header line")),
            }
        }
        let count = count.ok_or_else(|| bad("missing data line"))?;
        let payload = &bytes[pos..];
        if payload.len() != count * 8 {
            return Err(bad("payload length does not match manifest"));
        }
        if checksum.as_deref() != Some(hex::encode(Sha256::digest(payload)).as_str()) {
            return Err(bad("checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            if offset + n > count {
                return Err(bad("tensor extends past payload"));
            }
            let data = payload[offset * 8..(offset + n) * 8]
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl<T: Real> Default for Checkpoint<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(TensorError::Checkpoint(format!("invalid name {s:?}")));
    }
    Ok(())
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| TensorError::Checkpoint(format!("bad path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut c = Checkpoint::new();
        c.meta.insert("step".into(), "12".into());
        c.tensors.push((
            "w".into(),
            Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.5]).unwrap(),
        ));
        c.tensors.push((
            "b".into(),
            Tensor::from_f64(&[3], &[-0.1, 0.0, 1e-7]).unwrap(),
        ));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        let err = Checkpoint::<f32>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), sample());
        assert!(!dir.path().join(".params.ckpt.tmp").exists());
    }
}
