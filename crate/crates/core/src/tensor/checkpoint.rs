//! Parameter checkpoints: one KIFT file per parameter plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::kift::{Dtype, KiftMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub params: Vec<ParamRecord>,
}

fn file_name(i: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{i:04}_{clean}.kift")
}

pub fn save_params(dir: &Path, store: &ParamStore, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(store.len());
    for (i, p) in store.iter().enumerate() {
        let file = file_name(i, &p.name);
        let (rows, cols) = (p.value.rows(), p.value.cols());
        let m = match dtype {
            Dtype::F64 => KiftMatrix::f64(rows, cols, p.value.data().to_vec())?,
            Dtype::F32 => KiftMatrix::f32(rows, cols, p.value.data().iter().map(|&x| x as f32).collect())?,
        };
        m.write(&dir.join(&file))?;
        records.push(ParamRecord {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: dtype.name().to_string(),
            file,
        });
    }
    let manifest = ParamManifest { params: records };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_params(dir: &Path) -> Result<ParamStore> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ParamManifest = serde_json::from_str(&text)?;
    let mut store = ParamStore::new();
    for r in &manifest.params {
        let m = KiftMatrix::read(&dir.join(&r.file))?;
        let declared = Dtype::from_name(&r.dtype).ok_or_else(|| Error::Format(format!("unknown dtype {}", r.dtype)))?;
        if declared != m.dtype() {
            return Err(Error::Format(format!("{}: manifest says {}, file holds {}", r.name, r.dtype, m.dtype().name())));
        }
        let value = Tensor::new(r.shape.clone(), m.to_f64())
            .map_err(|_| Error::Format(format!("{}: shape {:?} does not match file {}x{}", r.name, r.shape, m.rows, m.cols)))?;
        store.add(r.name.clone(), value);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_checkpoint_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("enc.0/w", Tensor::matrix(2, 2, vec![0.1, -0.2, 1e-17, 3.0]).unwrap());
        s.add("bias", Tensor::vector(vec![0.3, 0.7]));
        save_params(dir.path(), &s, Dtype::F64).unwrap();
        let back = load_params(dir.path()).unwrap();
        assert_eq!(back, s);
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"enc.0/w\""));
        assert!(manifest.contains("\"f64\""));
    }

    #[test]
    fn f32_checkpoint_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![0.1]));
        save_params(dir.path(), &s, Dtype::F32).unwrap();
        let back = load_params(dir.path()).unwrap();
        assert_eq!(back.get(0).value.item(), 0.1f32 as f64);
    }
}
