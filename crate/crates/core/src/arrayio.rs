//! Raw little-endian arrays with a JSON sidecar `{rows, cols, dtype}` at
//! `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
}

#[derive(Debug, Error)]
pub enum ArrayError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("array is {found}, expected {expected}")]
    Dtype { expected: &'static str, found: String },
    #[error("{path}: {bytes} bytes does not hold {rows}x{cols} {dtype} values")]
    Size {
        path: PathBuf,
        bytes: usize,
        rows: usize,
        cols: usize,
        dtype: String,
    },
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_array<T: Real>(path: &Path, rows: usize, cols: usize, data: &[T]) -> Result<(), ArrayError> {
    assert_eq!(data.len(), rows * cols, "data does not match shape");
    let mut bytes = Vec::with_capacity(data.len() * T::BYTES);
    for &v in data {
        v.put_le(&mut bytes);
    }
    fs::write(path, bytes)?;
    let meta = ArrayMeta {
        rows,
        cols,
        dtype: T::DTYPE.to_string(),
    };
    fs::write(sidecar_path(path), serde_json::to_string(&meta).expect("meta serializes"))?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<ArrayMeta, ArrayError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side)?;
    serde_json::from_str(&text).map_err(|source| ArrayError::Sidecar { path: side, source })
}

pub fn read_array<T: Real>(path: &Path) -> Result<(ArrayMeta, Vec<T>), ArrayError> {
    let meta = read_meta(path)?;
    if meta.dtype != T::DTYPE {
        return Err(ArrayError::Dtype {
            expected: T::DTYPE,
            found: meta.dtype,
        });
    }
    let bytes = fs::read(path)?;
    if bytes.len() != meta.rows * meta.cols * T::BYTES {
        return Err(ArrayError::Size {
            path: path.to_path_buf(),
            bytes: bytes.len(),
            rows: meta.rows,
            cols: meta.cols,
            dtype: meta.dtype,
        });
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::get_le).collect();
    Ok((meta, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let data = vec![1.5f64, -2.0, 3.25, 0.0, 1e-300, f64::MAX];
        write_array(&path, 2, 3, &data).unwrap();
        let (meta, back) = read_array::<f64>(&path).unwrap();
        assert_eq!(meta, ArrayMeta { rows: 2, cols: 3, dtype: "fp64".into() });
        assert_eq!(back, data);
        assert_eq!(fs::read(&path).unwrap()[..8], 1.5f64.to_le_bytes());
        assert!(matches!(read_array::<f32>(&path), Err(ArrayError::Dtype { .. })));
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(read_array::<f64>(&path), Err(ArrayError::Size { .. })));
    }
}
