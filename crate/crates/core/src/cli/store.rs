//! On-disk artifacts: JSON manifests next to raw little-endian `f32`
//! blobs, plus atomic writes and the directory lock.
//!
//! A tensor store `name` is two files, `name.json` and `name.bin`. The
//! manifest lists every tensor with its shape and byte span in the blob,
//! the blob's SHA-256 and a SHA-256 of the manifest body itself.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary sibling of `path` and renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serialises");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Span in bytes.
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest<M> {
    pub kind: String,
    pub version: u32,
    pub meta: M,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    pub blob_sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<M> {
    manifest: Manifest<M>,
    manifest_sha256: String,
}

fn manifest_digest<M: Serialize>(m: &Manifest<M>) -> String {
    sha256_hex(&serde_json::to_vec(m).expect("manifest serialises"))
}

pub fn store_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Writes the blob first and the manifest last, each atomically.
pub fn write_store<M: Serialize>(
    base: &Path,
    kind: &str,
    meta: M,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<Manifest<M>> {
    let (json, bin) = store_paths(base);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        meta,
        tensors: entries,
        blob: bin
            .file_name()
            .expect("store base has a file name")
            .to_string_lossy()
            .into_owned(),
        blob_sha256: sha256_hex(&blob),
    };
    write_atomic(&bin, &blob)?;
    let manifest_sha256 = manifest_digest(&manifest);
    let env = Envelope {
        manifest,
        manifest_sha256,
    };
    write_json(&json, &env)?;
    Ok(env.manifest)
}

/// Reads and verifies a store: manifest hash, blob hash, and every span.
pub fn read_store<M: Serialize + DeserializeOwned>(
    base: &Path,
    kind: &str,
) -> Result<(Manifest<M>, Vec<Tensor<f32>>)> {
    let (json, _) = store_paths(base);
    let env: Envelope<M> = read_json(&json)?;
    let m = env.manifest;
    let integrity = |message: String| Error::Integrity {
        path: json.clone(),
        message,
    };
    if manifest_digest(&m) != env.manifest_sha256 {
        return Err(integrity("manifest hash mismatch".into()));
    }
    if m.kind != kind || m.version != FORMAT_VERSION {
        return Err(Error::format(
            &json,
            format!("expected {kind} v{FORMAT_VERSION}, found {} v{}", m.kind, m.version),
        ));
    }
    let bin = json.with_file_name(&m.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha256_hex(&blob) != m.blob_sha256 {
        return Err(Error::Integrity {
            path: bin,
            message: "blob hash mismatch".into(),
        });
    }
    let mut out = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        let numel: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.bytes);
        if numel as u64 * 4 != e.bytes || end.map_or(true, |end| end > blob.len() as u64) {
            return Err(integrity(format!("tensor {} span does not match its shape", e.name)));
        }
        let bytes = &blob[e.offset as usize..(e.offset + e.bytes) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Tensor::new(e.shape.clone(), data).map_err(|err| integrity(err.to_string()))?);
    }
    Ok((m, out))
}

/// Advisory lock on an artifact directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = ".pmq.lock";

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io {
                path: path.clone(),
                source: std::io::Error::new(
                    e.kind(),
                    "artifact directory is locked by another run (delete the lock file if stale)",
                ),
            }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a".into(), Tensor::from_f64(&[2, 3], &[1., -2., 3.5, 0., 1e-7, -0.0]).unwrap()),
            ("b".into(), Tensor::from_f64(&[1], &[42.]).unwrap()),
        ]
    }

    fn refs(v: &[(String, Tensor<f32>)]) -> Vec<(String, &Tensor<f32>)> {
        v.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    #[test]
    fn round_trip_and_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let ts = sample();
        write_store(&base, "test", vec![1u32, 2], &refs(&ts)).unwrap();
        let (m, back) = read_store::<Vec<u32>>(&base, "test").unwrap();
        assert_eq!(m.meta, vec![1, 2]);
        assert_eq!(back, ts.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
        let blob = fs::read(dir.path().join("ck.bin")).unwrap();
        assert_eq!(&blob[4..8], &(-2.0f32).to_le_bytes());
        assert_eq!(m.tensors[1].offset, 24);
        assert!(matches!(read_store::<Vec<u32>>(&base, "other"), Err(Error::Format { .. })));
    }

    #[test]
    fn tampering_detected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let ts = sample();
        write_store(&base, "test", (), &refs(&ts)).unwrap();
        let bin = dir.path().join("ck.bin");
        let mut blob = fs::read(&bin).unwrap();
        blob[0] ^= 1;
        fs::write(&bin, &blob).unwrap();
        assert!(matches!(read_store::<()>(&base, "test"), Err(Error::Integrity { .. })));

        write_store(&base, "test", (), &refs(&ts)).unwrap();
        let json = dir.path().join("ck.json");
        let text = fs::read_to_string(&json).unwrap().replacen("\"a\"", "\"z\"", 1);
        fs::write(&json, text).unwrap();
        assert!(matches!(read_store::<()>(&base, "test"), Err(Error::Integrity { .. })));

        fs::remove_file(&json).unwrap();
        assert!(matches!(read_store::<()>(&base, "test"), Err(Error::NotFound { .. })));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(!dir.path().join(LOCK_FILE).exists());
        DirLock::acquire(dir.path()).unwrap();
    }
}
