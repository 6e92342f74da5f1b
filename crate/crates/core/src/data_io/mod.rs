//! Dataset model, on-disk formats and deterministic splitting.

mod atlas;
mod dataset;
mod export;
mod split;
mod visf;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

pub use atlas::{load_atlas, save_atlas, Hemisphere, RoiAtlas};
pub use dataset::{
    load_stimulus_set, save_stimulus_set, DatasetPaths, ExtractorInfo, StimuliIndex, StimulusSet,
};
pub use export::{load_export_manifest, ExportEntry, ExportManifest};
pub use split::{make_split, SplitAssignment, MIN_SPLIT_IDS};
pub use visf::{decode, encode, load_tensor, save_tensor, DType, Tensor, TensorData};

use crate::{Error, Result};

pub const DEFAULT_QUERIES: usize = 197;
pub const DEFAULT_FEATURE_DIM: usize = 768;

/// One stimulus's extractor output: `queries x dim` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    values: Array2<f32>,
}

impl FeatureTensor {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("feature tensor is empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature tensor contains non-finite values"));
        }
        Ok(FeatureTensor { values })
    }

    pub fn zeros(queries: usize, dim: usize) -> Self {
        FeatureTensor {
            values: Array2::zeros((queries, dim)),
        }
    }

    pub fn queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.values.view()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        let (q, d) = self.values.dim();
        Tensor::f32(vec![q, d], self.values.iter().copied().collect()).expect("shape matches data")
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (shape, data) = tensor.into_f32()?;
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "feature tensor must be 2-D, found shape {shape:?}"
            )));
        }
        let values = Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| Error::shape(e.to_string()))?;
        Self::new(values)
    }
}

/// Per-voxel noise ceilings in percent explainable variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCeilingVector(Vec<f64>);

impl NoiseCeilingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=100.0).contains(*v))
        {
            return Err(Error::invalid(format!(
                "noise ceiling {v} at voxel {i} outside [0, 100]"
            )));
        }
        Ok(NoiseCeilingVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supercategory {
    Person,
    Animal,
    /// Both a person and an animal are present.
    Both,
    Other,
}

impl Supercategory {
    pub const ALL: [Supercategory; 4] = [
        Supercategory::Person,
        Supercategory::Animal,
        Supercategory::Both,
        Supercategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Supercategory::Person => "person",
            Supercategory::Animal => "animal",
            Supercategory::Both => "both",
            Supercategory::Other => "other",
        }
    }
}

/// Binary `H x W` mask; nonzero pixels are inside the function-relevant area.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    pixels: Array2<u8>,
}

impl ObjectMask {
    pub fn new(pixels: Array2<u8>) -> Self {
        ObjectMask {
            pixels: pixels.mapv(|p| u8::from(p != 0)),
        }
    }

    pub fn from_fn(height: usize, width: usize, inside: impl Fn(usize, usize) -> bool) -> Self {
        ObjectMask {
            pixels: Array2::from_shape_fn((height, width), |(r, c)| u8::from(inside(r, c))),
        }
    }

    pub fn pixels(&self) -> ArrayView2<'_, u8> {
        self.pixels.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn complement(&self) -> Self {
        ObjectMask {
            pixels: self.pixels.mapv(|p| 1 - p),
        }
    }

    pub fn inside_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.pixels.dim();
        Tensor::u8(vec![h, w], self.pixels.iter().copied().collect()).expect("shape matches data")
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (shape, data) = tensor.into_u8()?;
        if shape.len() != 2 {
            return Err(Error::shape(format!("mask must be 2-D, found {shape:?}")));
        }
        Ok(Self::new(
            Array2::from_shape_vec((shape[0], shape[1]), data)
                .map_err(|e| Error::shape(e.to_string()))?,
        ))
    }
}

/// Response matrix helpers shared by training and evaluation.
pub(crate) fn stack_rows(rows: &[ArrayView1<'_, f64>]) -> Array2<f64> {
    let v = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), v));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    out
}
