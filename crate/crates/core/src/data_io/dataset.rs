use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{
    load_tensor, save_tensor, stack_rows, FeatureTensor, NoiseCeilingVector, Supercategory,
    Tensor,
};
use crate::{Error, Result};

/// Where a dataset's features came from; ScoreCAM needs the toy extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractorInfo {
    /// The seeded toy extractor with its patch geometry.
    Toy {
        seed: u64,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default = "default_patch")]
        patch: usize,
        #[serde(default = "default_channels")]
        channels: usize,
    },
    External { model: String, layer: String },
}

fn default_image_size() -> usize {
    224
}

fn default_patch() -> usize {
    16
}

fn default_channels() -> usize {
    3
}

/// Contents of `stimuli.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimuliIndex {
    pub ids: Vec<String>,
    pub num_voxels: usize,
    pub extractor: ExtractorInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<BTreeMap<String, Supercategory>>,
}

/// File locations of a dataset. [`DatasetPaths::under`] gives the default layout:
///
/// ```text
/// stimuli.json
/// features/<id>/features.visf      f32 (Q, D)
/// features/<id>/activations.visf   f32 (K, h, w), optional
/// images/<id>.visf                 u8 (H, W, C), optional
/// masks/<id>.visf                  u8 (H, W), optional
/// responses.visf                   f32|f64 (T, V), rows in id order
/// nc.visf                          f64 (V)
/// atlas.json
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub stimuli: PathBuf,
    pub features_dir: PathBuf,
    pub responses: PathBuf,
    pub nc: PathBuf,
    pub atlas: PathBuf,
    pub images_dir: PathBuf,
    pub masks_dir: PathBuf,
}

impl DatasetPaths {
    pub fn under(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        DatasetPaths {
            stimuli: root.join("stimuli.json"),
            features_dir: root.join("features"),
            responses: root.join("responses.visf"),
            nc: root.join("nc.visf"),
            atlas: root.join("atlas.json"),
            images_dir: root.join("images"),
            masks_dir: root.join("masks"),
        }
    }

    pub fn features(&self, id: &str) -> PathBuf {
        self.features_dir.join(id).join("features.visf")
    }

    pub fn activations(&self, id: &str) -> PathBuf {
        self.features_dir.join(id).join("activations.visf")
    }

    pub fn image(&self, id: &str) -> PathBuf {
        self.images_dir.join(format!("{id}.visf"))
    }

    pub fn mask(&self, id: &str) -> PathBuf {
        self.masks_dir.join(format!("{id}.visf"))
    }
}

/// Stimuli with their features, voxel responses and per-voxel noise ceilings.
#[derive(Debug, Clone)]
pub struct StimulusSet {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    features: Vec<FeatureTensor>,
    responses: Array2<f64>,
    noise_ceiling: NoiseCeilingVector,
    supercategory: Option<Vec<Supercategory>>,
}

impl StimulusSet {
    pub fn new(
        ids: Vec<String>,
        features: Vec<FeatureTensor>,
        responses: Array2<f64>,
        noise_ceiling: NoiseCeilingVector,
        supercategory: Option<Vec<Supercategory>>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::invalid("stimulus set is empty"));
        }
        if features.len() != n || responses.nrows() != n {
            return Err(Error::shape(format!(
                "{n} ids but {} feature tensors and {} response rows",
                features.len(),
                responses.nrows()
            )));
        }
        let shape = (features[0].queries(), features[0].dim());
        if let Some(bad) = features.iter().position(|f| (f.queries(), f.dim()) != shape) {
            return Err(Error::shape(format!(
                "feature tensor of {} differs from shape {shape:?}",
                ids[bad]
            )));
        }
        if responses.ncols() != noise_ceiling.len() {
            return Err(Error::shape(format!(
                "{} voxels in responses but {} noise ceilings",
                responses.ncols(),
                noise_ceiling.len()
            )));
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("responses contain non-finite values"));
        }
        if let Some(cats) = &supercategory {
            if cats.len() != n {
                return Err(Error::shape("supercategory count differs from id count"));
            }
        }
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate id {id}")));
            }
        }
        Ok(StimulusSet {
            ids,
            index,
            features,
            responses,
            noise_ceiling,
            supercategory,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_voxels(&self) -> usize {
        self.responses.ncols()
    }

    pub fn feature_shape(&self) -> (usize, usize) {
        (self.features[0].queries(), self.features[0].dim())
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown stimulus id {id}")))
    }

    pub fn features(&self, i: usize) -> &FeatureTensor {
        &self.features[i]
    }

    pub fn response(&self, i: usize) -> ArrayView1<'_, f64> {
        self.responses.row(i)
    }

    pub fn responses(&self) -> &Array2<f64> {
        &self.responses
    }

    pub fn noise_ceiling(&self) -> &NoiseCeilingVector {
        &self.noise_ceiling
    }

    pub fn supercategory(&self, i: usize) -> Option<Supercategory> {
        self.supercategory.as_ref().map(|c| c[i])
    }

    pub fn indices_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter().map(|id| self.index_of(id)).collect()
    }

    /// Ground-truth rows for the given stimulus indices, as a `T x V` matrix.
    pub fn response_matrix(&self, indices: &[usize]) -> Array2<f64> {
        let rows: Vec<_> = indices.iter().map(|&i| self.response(i)).collect();
        stack_rows(&rows)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_stimulus_set(paths: &DatasetPaths) -> Result<(StimulusSet, StimuliIndex)> {
    let index: StimuliIndex = read_json(&paths.stimuli)?;
    let features = index
        .ids
        .iter()
        .map(|id| FeatureTensor::from_tensor(load_tensor(paths.features(id))?))
        .collect::<Result<Vec<_>>>()?;
    let (shape, data) = load_tensor(&paths.responses)?.into_real()?;
    if shape.len() != 2 || shape[0] != index.ids.len() || shape[1] != index.num_voxels {
        return Err(Error::shape(format!(
            "responses shape {shape:?}, expected [{}, {}]",
            index.ids.len(),
            index.num_voxels
        )));
    }
    let responses = Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|e| Error::shape(e.to_string()))?;
    let nc = NoiseCeilingVector::new(
        load_tensor(&paths.nc)?.into_real_shaped(&[index.num_voxels])?,
    )?;
    let cats = index
        .supercategory
        .as_ref()
        .map(|m| {
            index
                .ids
                .iter()
                .map(|id| {
                    m.get(id)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("no supercategory for {id}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let set = StimulusSet::new(index.ids.clone(), features, responses, nc, cats)?;
    Ok((set, index))
}

/// Writes features, responses, noise ceilings and `stimuli.json`. Atlas, images
/// and masks are written separately by the caller.
pub fn save_stimulus_set(
    set: &StimulusSet,
    extractor: ExtractorInfo,
    paths: &DatasetPaths,
) -> Result<StimuliIndex> {
    for (i, id) in set.ids.iter().enumerate() {
        save_tensor(&set.features[i].to_tensor(), paths.features(id))?;
    }
    let (t, v) = set.responses.dim();
    save_tensor(
        &Tensor::f64(vec![t, v], set.responses.iter().copied().collect())?,
        &paths.responses,
    )?;
    save_tensor(
        &Tensor::f64(vec![v], set.noise_ceiling.as_slice().to_vec())?,
        &paths.nc,
    )?;
    let index = StimuliIndex {
        ids: set.ids.clone(),
        num_voxels: v,
        extractor,
        supercategory: set.supercategory.as_ref().map(|cats| {
            set.ids
                .iter()
                .cloned()
                .zip(cats.iter().copied())
                .collect()
        }),
    };
    let text = serde_json::to_string_pretty(&index)?;
    fs::write(&paths.stimuli, text).map_err(|e| Error::io(&paths.stimuli, e))?;
    Ok(index)
}
