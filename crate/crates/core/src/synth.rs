//! Planted synthetic datasets.
//!
//! Images are constant within each extractor patch: a grey background plus a
//! few seeded latent patterns, with optional square "objects" aligned to the
//! patch grid. The object kinds decide the image's supercategory and its
//! mask. Voxel responses are a fixed random linear readout of the toy
//! extractor's tokens, restricted per region to a block of tokens, scaled to
//! unit variance across stimuli, plus Gaussian noise.

use std::fs;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_io::{
    save_atlas, save_stimulus_set, save_tensor, DatasetPaths, Hemisphere,
    NoiseCeilingVector, ObjectMask, RoiAtlas, StimuliIndex, StimulusSet, Supercategory,
};
use crate::extractor::{ActivationStack, FeatureExtractor, ImageInput, ToyExtractor, ToyExtractorConfig};
use crate::metrics::noise_ceiling;
use crate::{Error, Result};

/// Regions of the synthetic atlas and the token block each one reads.
pub const REGIONS: [&str; 3] = ["V1v", "V3v", "hV4"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub stimuli: usize,
    pub voxels: usize,
    pub seed: u64,
    pub extractor: ToyExtractorConfig,
    pub latents: usize,
    /// `sigma_noise^2 / sigma_signal^2` for every noisy voxel.
    pub noise_ratio: f64,
    /// Voxels generated without noise.
    pub noiseless_voxels: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            stimuli: 200,
            voxels: 30,
            seed: 0,
            extractor: ToyExtractorConfig::default(),
            latents: 6,
            noise_ratio: 0.25,
            noiseless_voxels: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stimuli < 10 {
            return Err(Error::invalid("need at least 10 stimuli for a split"));
        }
        if self.voxels < REGIONS.len() {
            return Err(Error::invalid("need at least one voxel per region"));
        }
        if self.extractor.grid() < 2 {
            return Err(Error::invalid("patch grid must be at least 2 x 2"));
        }
        if !(self.noise_ratio >= 0.0 && self.noise_ratio.is_finite()) {
            return Err(Error::invalid("noise ratio must be finite and non-negative"));
        }
        if let Some(v) = self.noiseless_voxels.iter().find(|&&v| v >= self.voxels) {
            return Err(Error::invalid(format!("noiseless voxel {v} out of range")));
        }
        Ok(())
    }
}

/// Planted variances per voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub sigma_signal_sq: Vec<f64>,
    pub sigma_noise_sq: Vec<f64>,
    pub extractor_seed: u64,
}

pub struct SynthDataset {
    pub set: StimulusSet,
    pub images: Vec<ImageInput>,
    pub activations: Vec<ActivationStack>,
    pub masks: Vec<ObjectMask>,
    pub atlas: RoiAtlas,
    pub planted: PlantedModel,
    pub extractor: ToyExtractor,
    /// Noise-free responses, `stimuli x voxels`.
    pub signal: Array2<f64>,
}

const BACKGROUND: f64 = 0.35;
const LATENT_SCALE: f64 = 0.05;
const PERSON: [f64; 3] = [0.30, 0.15, 0.05];
const ANIMAL: [f64; 3] = [0.05, 0.25, 0.30];

fn voxel_block(region: usize, voxels: usize) -> std::ops::Range<usize> {
    let n = REGIONS.len();
    region * voxels / n..(region + 1) * voxels / n
}

/// Token indices read by each region: the top-left grid quadrant, the top
/// half, and every token including the global one.
pub fn region_tokens(config: &ToyExtractorConfig) -> [Vec<usize>; 3] {
    let g = config.grid();
    let h = g / 2;
    let quadrant = (0..h)
        .flat_map(|r| (0..h).map(move |c| (r, c)))
        .map(|(r, c)| config.token_index(r, c))
        .collect();
    let top = (0..h)
        .flat_map(|r| (0..g).map(move |c| (r, c)))
        .map(|(r, c)| config.token_index(r, c))
        .collect();
    let all = (0..config.queries()).collect();
    [quadrant, top, all]
}

pub fn synth_atlas(voxels: usize) -> Result<RoiAtlas> {
    RoiAtlas::new(
        Hemisphere::Left,
        voxels,
        REGIONS
            .iter()
            .enumerate()
            .map(|(r, name)| (name.to_string(), voxel_block(r, voxels).collect())),
    )
}

struct Scene {
    category: Supercategory,
    /// `(top-left patch row, col, colour)`.
    objects: Vec<(usize, usize, [f64; 3])>,
}

fn draw_scene(rng: &mut ChaCha8Rng, grid: usize, size: usize) -> Scene {
    let anchors = [
        (0, 0),
        (0, grid - size),
        (grid - size, 0),
        (grid - size, grid - size),
    ];
    let u: f64 = rng.random();
    let category = if u < 0.3 {
        Supercategory::Person
    } else if u < 0.6 {
        Supercategory::Animal
    } else if u < 0.75 {
        Supercategory::Both
    } else {
        Supercategory::Other
    };
    let first = rng.random_range(0..anchors.len());
    let second = (first + rng.random_range(1..anchors.len())) % anchors.len();
    let at = |i: usize, colour| (anchors[i].0, anchors[i].1, colour);
    let objects = match category {
        Supercategory::Person => vec![at(first, PERSON)],
        Supercategory::Animal => vec![at(first, ANIMAL)],
        Supercategory::Both => vec![at(first, PERSON), at(second, ANIMAL)],
        Supercategory::Other => vec![],
    };
    Scene { category, objects }
}

/// Generates images, features, responses, masks and an atlas.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let ex_cfg = config.extractor;
    let extractor = ToyExtractor::with_config(ex_cfg, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5157_4e54));
    let (g, p, ch) = (ex_cfg.grid(), ex_cfg.patch, ex_cfg.channels);
    let size = (g / 4).max(1);

    let patterns = Array3::from_shape_simple_fn((config.latents, g * g, ch), || rng.random_range(-1.0..1.0));

    let tokens = region_tokens(&ex_cfg);
    let dim = ex_cfg.token_dim();
    let mut readouts: Vec<Array2<f64>> = Vec::with_capacity(config.voxels);
    for v in 0..config.voxels {
        let region = (0..REGIONS.len()).find(|&r| voxel_block(r, config.voxels).contains(&v)).expect("blocks cover voxels");
        let mut w = Array2::zeros((ex_cfg.queries(), dim));
        for &t in &tokens[region] {
            for d in 0..dim {
                w[[t, d]] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        readouts.push(w);
    }

    let n = config.stimuli;
    let mut images = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    let mut activations = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut categories = Vec::with_capacity(n);
    let mut signal = Array2::zeros((n, config.voxels));
    for i in 0..n {
        let z: Vec<f64> = (0..config.latents).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scene = draw_scene(&mut rng, g, size);
        let mut cells = Array2::from_elem((g * g, ch), BACKGROUND);
        for (k, zk) in z.iter().enumerate() {
            for cell in 0..g * g {
                for c in 0..ch {
                    cells[[cell, c]] += LATENT_SCALE * zk * patterns[[k, cell, c]];
                }
            }
        }
        let mut mask = Array2::<u8>::zeros((g * p, g * p));
        for &(r0, c0, colour) in &scene.objects {
            for r in r0..r0 + size {
                for c in c0..c0 + size {
                    for k in 0..ch {
                        cells[[r * g + c, k]] += colour[k % 3];
                    }
                }
            }
            mask.slice_mut(ndarray::s![r0 * p..(r0 + size) * p, c0 * p..(c0 + size) * p]).fill(1);
        }
        // Quantize first so stored images reproduce the features exactly.
        let img = ImageInput::from_fn((g * p, g * p, ch), |r, c, k| {
            (cells[[(r / p) * g + c / p, k]].clamp(0.0, 1.0) * 255.0).round() / 255.0
        })?;
        let (f, acts) = extractor.extract(&img)?;
        let x = f.to_f64();
        for (v, w) in readouts.iter().enumerate() {
            signal[[i, v]] = (&x * w).sum();
        }
        images.push(img);
        features.push(f);
        activations.push(acts);
        masks.push(ObjectMask::new(mask));
        categories.push(scene.category);
    }

    for mut col in signal.columns_mut() {
        let mean = col.mean().expect("n >= 10");
        let sd = (col.mapv(|s| (s - mean).powi(2)).sum() / n as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::Undefined("planted signal has zero variance".into()));
        }
        col.mapv_inplace(|s| (s - mean) / sd);
    }

    let mut responses = signal.clone();
    let mut sigma_noise_sq = vec![config.noise_ratio; config.voxels];
    for &v in &config.noiseless_voxels {
        sigma_noise_sq[v] = 0.0;
    }
    for i in 0..n {
        for (v, &var) in sigma_noise_sq.iter().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            responses[[i, v]] += var.sqrt() * e;
        }
    }
    let sigma_signal_sq = vec![1.0; config.voxels];
    let nc = sigma_signal_sq
        .iter()
        .zip(&sigma_noise_sq)
        .map(|(&s, &e)| noise_ceiling(s, e))
        .collect::<Result<Vec<f64>>>()?;

    let ids = (0..n).map(|i| format!("syn{i:04}")).collect();
    let set = StimulusSet::new(ids, features, responses, NoiseCeilingVector::new(nc)?, Some(categories))?;
    Ok(SynthDataset {
        set,
        images,
        activations,
        masks,
        atlas: synth_atlas(config.voxels)?,
        planted: PlantedModel {
            sigma_signal_sq,
            sigma_noise_sq,
            extractor_seed: config.seed,
        },
        extractor,
        signal,
    })
}

impl SynthDataset {
    /// Writes the dataset in the standard layout plus `planted.json`.
    pub fn save(&self, paths: &DatasetPaths) -> Result<StimuliIndex> {
        let index = save_stimulus_set(&self.set, self.extractor.info(), paths)?;
        for (i, id) in self.set.ids().iter().enumerate() {
            save_tensor(&self.activations[i].to_tensor(), paths.activations(id))?;
            save_tensor(&self.images[i].to_u8_tensor(), paths.image(id))?;
            save_tensor(&self.masks[i].to_tensor(), paths.mask(id))?;
        }
        save_atlas(&self.atlas, &paths.atlas)?;
        let planted = paths.stimuli.with_file_name("planted.json");
        fs::write(&planted, serde_json::to_string_pretty(&self.planted)?)
            .map_err(|e| Error::io(&planted, e))?;
        Ok(index)
    }
}

/// Sample variance of each column.
pub fn column_variance(a: &Array2<f64>) -> Array1<f64> {
    let n = a.nrows() as f64;
    let mean = a.mean_axis(ndarray::Axis(0)).expect("rows");
    (a - &mean).mapv(|v| v * v).sum_axis(ndarray::Axis(0)) / n
}
