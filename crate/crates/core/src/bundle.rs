//! Versioned model bundles: every trained parameter plus a manifest.
//!
//! A bundle is an [`Archive`] whose `manifest` metadata entry holds JSON
//! ([`Manifest`]). Tensor namespaces:
//!
//! * `extractor/` frozen feature extractor
//! * `drafting/` decoder weights and `drafting/style/<tap>/{mean,std}`
//! * `revision/<k>/` revision level `k`
//! * `discriminator/<k>/` discriminator used to train level `k`

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::discriminator::{self, Discriminator};
use crate::drafting::{DraftingNet, StyleContext};
use crate::error::{Error, Result};
use crate::extractor::{self, Extractor, VggVariant};
use crate::nn::Module;
use crate::optim::AdamConfig;
use crate::revision::{self, RevisionNet, StylizationStack, CONCAT_ORDER};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// SHA-256 of the style image file the model was trained on.
    pub style_sha256: String,
    /// Training resolution of each stage: index 0 is the draft, index `k`
    /// revision level `k`.
    pub stage_resolutions: Vec<usize>,
    pub concat_order: String,
    pub extractor_variant: VggVariant,
    pub adam: AdamConfig,
    /// Training configuration of each stage, same indexing as
    /// `stage_resolutions`.
    pub config_snapshots: Vec<serde_json::Value>,
    /// SHA-256 over every tensor name, shape and payload.
    pub payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub manifest: Manifest,
    pub extractor: Arc<Extractor>,
    pub style: StyleContext,
    pub drafting: DraftingNet,
    /// Level `k` at index `k - 1`.
    pub revisions: Vec<RevisionNet>,
    pub discriminators: BTreeMap<usize, Discriminator>,
}

/// Hash of all tensors in key order; independent of metadata.
pub fn payload_hash(archive: &Archive) -> String {
    let mut h = Sha256::new();
    for (k, t) in &archive.tensors {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ModelBundle {
    pub fn levels(&self) -> usize {
        self.revisions.len()
    }

    /// Inference view sharing this bundle's weights.
    pub fn stack(&self) -> StylizationStack {
        StylizationStack {
            extractor: Arc::clone(&self.extractor),
            style: self.style.clone(),
            drafting: self.drafting.clone(),
            revisions: self.revisions.clone(),
        }
    }

    /// Builds the archive; the manifest's payload hash is recomputed.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        self.extractor.export(&mut a);
        self.drafting.export(&mut a);
        self.style.export(&mut a);
        for r in &self.revisions {
            r.export(&mut a);
        }
        for d in self.discriminators.values() {
            d.export(&mut a);
        }
        let mut manifest = self.manifest.clone();
        manifest.payload_sha256 = payload_hash(&a);
        let json =
            serde_json::to_string(&manifest).map_err(|e| Error::Parameter(format!("cannot encode manifest: {}", e)))?;
        a.metadata.insert(MANIFEST_KEY.into(), json);
        a.metadata.insert("format".into(), "pyrstyle-bundle".into());
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let json = a
            .metadata
            .get(MANIFEST_KEY)
            .ok_or_else(|| Error::Integrity("archive has no bundle manifest".into()))?;
        let raw: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::Integrity(format!("unreadable manifest: {}", e)))?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Integrity("manifest lacks format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("malformed manifest: {}", e)))?;
        let actual = payload_hash(a);
        if actual != manifest.payload_sha256 {
            return Err(Error::Integrity(format!(
                "payload hash mismatch: manifest {}, contents {}",
                manifest.payload_sha256, actual
            )));
        }
        if manifest.concat_order != CONCAT_ORDER {
            return Err(Error::Integrity(format!(
                "bundle uses concat order {:?}, this build uses {:?}",
                manifest.concat_order, CONCAT_ORDER
            )));
        }
        let extractor = Extractor::from_archive_as(a, extractor::NAMESPACE, manifest.extractor_variant)?;
        let levels = manifest.stage_resolutions.len().saturating_sub(1);
        let revisions = (1..=levels)
            .map(|k| RevisionNet::from_archive(a, k))
            .collect::<Result<Vec<_>>>()?;
        let mut discriminators = BTreeMap::new();
        for k in 1..=levels {
            let probe = format!("{}conv1.weight", discriminator::namespace(k));
            if a.tensors.contains_key(&probe) {
                discriminators.insert(k, Discriminator::from_archive(a, k)?);
            }
        }
        let expected_prefixes = |key: &str| {
            key.starts_with(extractor::NAMESPACE)
                || key.starts_with(crate::drafting::NAMESPACE)
                || (1..=levels)
                    .any(|k| key.starts_with(&revision::namespace(k)) || key.starts_with(&discriminator::namespace(k)))
        };
        if let Some(stray) = a.tensors.keys().find(|k| !expected_prefixes(k)) {
            return Err(Error::Integrity(format!("unexpected tensor {} in bundle", stray)));
        }
        Ok(ModelBundle {
            extractor: Arc::new(extractor),
            style: StyleContext::from_archive(a)?,
            drafting: DraftingNet::from_archive(a)?,
            revisions,
            discriminators,
            manifest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::Image;

    pub(crate) fn tiny_bundle() -> ModelBundle {
        let ex = Arc::new(Extractor::random(VggVariant::Vgg16, 1));
        let style = Image::from_fn(32, 32, |c, y, x| ((c + 2 * y + x) % 9) as f32 / 8.0);
        ModelBundle {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                style_sha256: "00".into(),
                stage_resolutions: vec![128, 256],
                concat_order: CONCAT_ORDER.into(),
                extractor_variant: VggVariant::Vgg16,
                adam: AdamConfig::default(),
                config_snapshots: vec![serde_json::json!({"stage": "draft"})],
                payload_sha256: String::new(),
            },
            style: StyleContext::new(&ex, &style).unwrap(),
            extractor: ex,
            drafting: DraftingNet::new(2),
            revisions: vec![RevisionNet::new(1, 3)],
            discriminators: [(1, Discriminator::new(1, 4))].into_iter().collect(),
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let b = tiny_bundle();
        let a = b.to_archive().unwrap();
        let back = ModelBundle::from_archive(&Archive::from_bytes(&a.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.to_archive().unwrap(), a);
        assert_eq!(back.drafting.fingerprint(), b.drafting.fingerprint());
        assert_eq!(back.discriminators.len(), 1);
    }

    #[test]
    fn version_and_hash_are_checked() {
        let b = tiny_bundle();
        let mut a = b.to_archive().unwrap();
        let json = a.metadata["manifest"].replace("\"format_version\":1", "\"format_version\":2");
        a.metadata.insert("manifest".into(), json);
        assert!(matches!(
            ModelBundle::from_archive(&a),
            Err(Error::Version { found: 2, expected: 1 })
        ));

        let mut a = b.to_archive().unwrap();
        let t = a.tensors.get_mut("drafting/f1_conv2.bias").unwrap();
        t.data_mut()[0] += 1.0;
        assert!(matches!(ModelBundle::from_archive(&a), Err(Error::Integrity(_))));

        let mut a = b.to_archive().unwrap();
        a.metadata.remove("manifest");
        assert!(matches!(ModelBundle::from_archive(&a), Err(Error::Integrity(_))));
    }
}
