//! Flat binary checkpoint container plus a plain-text manifest.
//!
//! Binary layout (all integers little-endian):
//!   magic "PSEGCKPT" | u32 version | u32 record count
//!   per record: u32 name_len | name bytes | u32 ndim | u64 dims... | f64 values...
//!
//! The manifest `<path>.manifest.txt` lists one `name<TAB>shape<TAB>frozen`
//! line per record and is the authority for frozen flags.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct CheckpointEntry<S = f64> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub frozen: bool,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".manifest.txt");
    PathBuf::from(os)
}

fn shape_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(vec![]);
    }
    s.split('x')
        .map(|p| p.parse::<usize>().map_err(|_| Error::CheckpointFormat(format!("bad shape '{s}'"))))
        .collect()
}

pub fn save<S: Scalar>(path: &Path, entries: &[CheckpointEntry<S>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.tensor.shape().len() as u32).to_le_bytes())?;
        for &d in e.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in e.tensor.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;

    let mut m = BufWriter::new(File::create(manifest_path(path))?);
    for e in entries {
        writeln!(
            m,
            "{}\t{}\t{}",
            e.name,
            shape_string(e.tensor.shape()),
            if e.frozen { "frozen" } else { "trainable" }
        )?;
    }
    m.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<CheckpointEntry<S>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let frozen_by_name = read_manifest(&manifest_path(path))?;

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CheckpointFormat("non-utf8 parameter name".into()))?;
        r.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut u64buf = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f64buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut f64buf)?;
            data.push(S::of(f64::from_le_bytes(f64buf)));
        }
        let (manifest_shape, frozen) = frozen_by_name
            .iter()
            .find(|(n, _, _)| n == &name)
            .map(|(_, s, f)| (s.clone(), *f))
            .ok_or_else(|| Error::CheckpointFormat(format!("'{name}' missing from manifest")))?;
        if manifest_shape != shape {
            return Err(Error::CheckpointFormat(format!(
                "shape mismatch for '{name}': binary {shape:?}, manifest {manifest_shape:?}"
            )));
        }
        out.push(CheckpointEntry { name, tensor: Tensor::new(shape, data)?, frozen });
    }
    Ok(out)
}

fn read_manifest(path: &Path) -> Result<Vec<(String, Vec<usize>, bool)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(name), Some(shape), Some(flag)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::CheckpointFormat(format!("manifest line {} malformed", lineno + 1)));
        };
        let frozen = match flag {
            "frozen" => true,
            "trainable" => false,
            other => {
                return Err(Error::CheckpointFormat(format!("unknown flag '{other}'")));
            }
        };
        out.push((name.to_string(), parse_shape(shape)?, frozen));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let entries = vec![
            CheckpointEntry {
                name: "a.weight".to_string(),
                tensor: Tensor::<f64>::new(vec![2, 3], vec![0.1, -0.2, 1.0 / 3.0, 4.0, 5.5, -6.25])
                    .unwrap(),
                frozen: false,
            },
            CheckpointEntry {
                name: "b.frozen".to_string(),
                tensor: Tensor::<f64>::scalar(std::f64::consts::PI),
                frozen: true,
            },
        ];
        save(&path, &entries).unwrap();
        let loaded = load::<f64>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (orig, got) in entries.iter().zip(&loaded) {
            assert_eq!(orig.name, got.name);
            assert_eq!(orig.frozen, got.frozen);
            assert!(orig.tensor.bit_eq(&got.tensor));
        }
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains("a.weight\t2x3\ttrainable"));
        assert!(manifest.contains("b.frozen\tscalar\tfrozen"));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT0000").unwrap();
        std::fs::write(manifest_path(&path), "").unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save::<f64>(&path, &[]).unwrap();
        std::fs::remove_file(manifest_path(&path)).unwrap();
        assert!(load::<f64>(&path).is_err());
    }
}
