//! Named-tensor archives.
//!
//! On-disk layout is the safetensors container: an 8-byte little-endian
//! header length, a JSON header mapping each tensor name to
//! `{dtype: "F32", shape, data_offsets}` plus a `__metadata__` string map,
//! then the raw little-endian payload. Every reader in any language with a
//! JSON parser can consume it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.to_le_bytes(), t.shape().to_vec()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Parameter(format!("tensor {}: {}", k, e)))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, &Some(meta))
            .map_err(|e| Error::Parameter(format!("cannot serialize archive: {}", e)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let corrupt = |e: safetensors::SafeTensorError| Error::Integrity(format!("malformed archive: {}", e));
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(corrupt)?;
        let st = SafeTensors::deserialize(bytes).map_err(corrupt)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Integrity(format!(
                    "tensor {} has dtype {:?}, expected F32",
                    name,
                    view.dtype()
                )));
            }
            tensors.insert(name, Tensor::from_le_bytes(view.shape(), view.data())?);
        }
        let metadata = meta.metadata().clone().unwrap_or_default().into_iter().collect();
        Ok(Archive { tensors, metadata })
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension(format!("partial-{}", std::process::id()));
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Archive> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut a = Archive::default();
        a.tensors.insert(
            "x.weight".into(),
            Tensor::from_vec(&[2, 1, 1, 1], vec![1.5, -2.0]).unwrap(),
        );
        a.metadata.insert("k".into(), "v".into());
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let mut a = Archive::default();
        a.tensors.insert("x".into(), Tensor::zeros(&[64]));
        let bytes = a.to_bytes().unwrap();
        for cut in [0, 4, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Archive::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))),
                "cut {}",
                cut
            );
        }
    }
}
