//! Self-describing checkpoint container.
//!
//! Layout: `PPCK` magic, format version (u32 LE), header length (u64 LE),
//! JSON header, then the tensor payloads as little-endian scalars at the
//! offsets listed in the header.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, Normalization};
use crate::error::{Error, Result};
use crate::model::{build, Model, ModelSpec};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    seed: u64,
    dataset: DatasetKind,
    normalization: Normalization,
    epochs: usize,
    tensors: Vec<TensorEntry>,
}

/// Trained weights plus what is needed to rebuild and evaluate the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub normalization: Normalization,
    /// Epochs completed when the checkpoint was taken.
    pub epochs: usize,
    /// Every parameter and buffer, by the model's stable names.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        seed: u64,
        dataset: DatasetKind,
        normalization: Normalization,
        epochs: usize,
    ) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            seed,
            dataset,
            normalization,
            epochs,
            tensors: model
                .params()
                .into_iter()
                .map(|(name, p)| (name, p.value().clone()))
                .collect(),
        }
    }

    /// Rebuilds the network and loads every stored tensor into it.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model: Model<f32> = build(&self.spec, &mut ChaCha8Rng::seed_from_u64(self.seed))?;
        let mut params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors but {} expects {}",
                self.tensors.len(),
                self.spec.id(),
                params.len()
            )));
        }
        for ((name, param), (stored_name, value)) in params.iter_mut().zip(&self.tensors) {
            if name != stored_name {
                return Err(Error::Config(format!(
                    "checkpoint tensor {stored_name} where {name} was expected"
                )));
            }
            param.set_value(value.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: f32::DTYPE.to_string(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            dataset: self.dataset,
            normalization: self.normalization.clone(),
            epochs: self.epochs,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// `path` is only used to label errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, detail: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(err(0, "not a checkpoint (missing PPCK magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(4, format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| err(8, format!("header length {header_len} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| err(16, format!("bad header: {e}")))?;
        let payload = &bytes[data_start..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0usize;
        for entry in header.tensors {
            if entry.dtype != f32::DTYPE {
                return Err(err(16, format!("tensor {} has dtype {}, expected f32", entry.name, entry.dtype)));
            }
            let start = entry.offset as usize;
            if start != expected_offset {
                return Err(err(data_start + start, format!("tensor {} is not contiguous", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let end = start + n * 4;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| err(bytes.len(), format!("truncated inside tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(err(
                data_start + expected_offset,
                format!("{} trailing bytes", payload.len() - expected_offset),
            ));
        }
        Ok(Checkpoint {
            spec: header.spec,
            seed: header.seed,
            dataset: header.dataset,
            normalization: header.normalization,
            epochs: header.epochs,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ForwardMode;

    fn sample() -> (Model<f32>, Checkpoint) {
        let spec = ModelSpec::lenet("PD").unwrap();
        let model: Model<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let ck = Checkpoint::from_model(&model, 9, DatasetKind::Mnist, Normalization::mnist(), 2);
        (model, ck)
    }

    #[test]
    fn bytes_round_trip() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rebuilt_model_matches() {
        let (mut model, ck) = sample();
        let mut rebuilt = ck.to_model().unwrap();
        let x = Tensor::from_fn(vec![2, 1, 28, 28], |i| (i % 13) as f32 / 13.0);
        assert_eq!(
            model.forward(&x, ForwardMode::Eval).unwrap(),
            rebuilt.forward(&x, ForwardMode::Eval).unwrap()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("ck");
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { offset: 0, .. })));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version, p), Err(Error::Format { offset: 4, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let (_, mut ck) = sample();
        ck.spec = ModelSpec::lenet("PA").unwrap();
        assert!(ck.to_model().is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ppck");
        let (_, ck) = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
