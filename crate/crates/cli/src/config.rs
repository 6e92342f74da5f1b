//! The JSON run configuration shared by every subcommand.
//!
//! Every field has a default, so `{}` is a valid file. Relative paths are
//! resolved against the working directory. One `seed` drives all randomness:
//! it replaces the seeds inside `train` and `synth` when the config is loaded.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use visenc::data_io::DatasetPaths;
use visenc::hypersearch::{Dimension, SearchSpace};
use visenc::metrics::NcUnits;
use visenc::optimize::TrainConfig;
use visenc::saliency::CamMode;
use visenc::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root in the standard layout.
    pub dataset: Option<PathBuf>,
    /// Per-file overrides of the standard layout.
    pub paths: PathOverrides,
    pub out: PathBuf,
    /// Encoder checkpoint directory written by `train`.
    pub checkpoint: Option<PathBuf>,
    /// `split.json` written by `train`; regenerated from the seed when absent.
    pub split: Option<PathBuf>,
    /// Attention-map directory written by `cam`.
    pub maps: Option<PathBuf>,
    pub seed: u64,
    pub encoder: EncoderSettings,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub tune: TuneSettings,
    pub cam: CamSettings,
    pub kl: KlSettings,
    pub pf: PfSettings,
    pub eval: EvalSettings,
    pub embed: EmbedSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            paths: PathOverrides::default(),
            out: PathBuf::from("out"),
            checkpoint: None,
            split: None,
            maps: None,
            seed: 0,
            encoder: EncoderSettings::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            tune: TuneSettings::default(),
            cam: CamSettings::default(),
            kl: KlSettings::default(),
            pf: PfSettings::default(),
            eval: EvalSettings::default(),
            embed: EmbedSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathOverrides {
    pub stimuli: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub nc: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub images_dir: Option<PathBuf>,
    pub masks_dir: Option<PathBuf>,
}

/// Encoder width; query count, feature size and voxel count come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub hidden: usize,
    pub query_out: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            hidden: 256,
            query_out: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSettings {
    pub budget: usize,
    /// Replaces [`default_space`] when given.
    pub space: Option<SearchSpace>,
}

impl Default for TuneSettings {
    fn default() -> Self {
        TuneSettings {
            budget: 20,
            space: None,
        }
    }
}

/// Learning rate, MLP widths and batch size.
pub fn default_space() -> SearchSpace {
    SearchSpace::new([
        (
            "learning_rate".to_string(),
            Dimension::Continuous {
                low: 1e-4,
                high: 1e-2,
                log: true,
            },
        ),
        ("hidden".to_string(), Dimension::Integer { low: 64, high: 512 }),
        ("query_out".to_string(), Dimension::Integer { low: 16, high: 128 }),
        (
            "batch_size".to_string(),
            Dimension::Categorical {
                choices: vec!["16".into(), "32".into(), "64".into()],
            },
        ),
    ])
    .expect("default space is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamSettings {
    pub regions: Vec<String>,
    /// Stimulus ids; the first `limit` ids of the dataset when absent.
    pub images: Option<Vec<String>>,
    pub limit: usize,
    pub mode: CamMode,
}

impl Default for CamSettings {
    fn default() -> Self {
        CamSettings {
            regions: vec!["hV4".into(), "V3v".into(), "V1v".into()],
            images: None,
            limit: 8,
            mode: CamMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlSettings {
    pub anchor: String,
    pub near: String,
    pub far: String,
}

impl Default for KlSettings {
    fn default() -> Self {
        KlSettings {
            anchor: "hV4".into(),
            near: "V3v".into(),
            far: "V1v".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfSettings {
    pub region: String,
}

impl Default for PfSettings {
    fn default() -> Self {
        PfSettings {
            region: "hV4".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub partition: Partition,
    pub nc_units: NcUnits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    pub partition: Partition,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        EmbedSettings {
            partition: Partition::All,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Copies the global seed into the nested configs.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
    }

    /// Dataset layout after overrides, or `None` when nothing points at a dataset.
    pub fn dataset_paths(&self) -> Option<DatasetPaths> {
        let mut paths = match &self.dataset {
            Some(root) => DatasetPaths::under(root),
            None if self.paths.stimuli.is_some() => DatasetPaths::under(""),
            None => return None,
        };
        let o = &self.paths;
        for (slot, value) in [
            (&mut paths.stimuli, &o.stimuli),
            (&mut paths.features_dir, &o.features_dir),
            (&mut paths.responses, &o.responses),
            (&mut paths.nc, &o.nc),
            (&mut paths.atlas, &o.atlas),
            (&mut paths.images_dir, &o.images_dir),
            (&mut paths.masks_dir, &o.masks_dir),
        ] {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        Some(paths)
    }
}
