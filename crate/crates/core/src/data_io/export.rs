//! Manifest written by the pretrained-feature exporter.
//!
//! The exporter writes one directory per image holding `features.visf`
//! (f32, 197 x 768) and `activations.visf` (f32, K x h x w), then
//! `manifest.json` last. Loading validates every file header against the
//! manifest shapes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_tensor, DType, DEFAULT_FEATURE_DIM, DEFAULT_QUERIES};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub id: String,
    #[serde(default)]
    pub source: String,
    /// Relative to the export directory.
    pub features: PathBuf,
    pub activations: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub model: String,
    pub layer: String,
    pub feature_shape: Vec<usize>,
    pub activation_shape: Vec<usize>,
    pub images: Vec<ExportEntry>,
    #[serde(default)]
    pub created: String,
}

pub fn load_export_manifest(dir: impl AsRef<Path>) -> Result<ExportManifest> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ExportManifest = serde_json::from_str(&text)?;

    if manifest.feature_shape != [DEFAULT_QUERIES, DEFAULT_FEATURE_DIM] {
        return Err(Error::shape(format!(
            "exported feature shape {:?}, expected [{DEFAULT_QUERIES}, {DEFAULT_FEATURE_DIM}]",
            manifest.feature_shape
        )));
    }
    if manifest.activation_shape.len() != 3 || manifest.activation_shape.contains(&0) {
        return Err(Error::shape(format!(
            "activation shape {:?} is not (K, h, w)",
            manifest.activation_shape
        )));
    }
    for entry in &manifest.images {
        for (file, shape) in [
            (&entry.features, &manifest.feature_shape),
            (&entry.activations, &manifest.activation_shape),
        ] {
            let tensor = load_tensor(dir.join(file))?;
            if tensor.dtype() != DType::F32 || tensor.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{}: {:?} {:?} does not match manifest f32 {shape:?}",
                    file.display(),
                    tensor.dtype(),
                    tensor.shape()
                )));
            }
        }
    }
    Ok(manifest)
}
