//! One function per subcommand. Each reads its inputs, writes artifacts into
//! the output directory and returns the `result` object for `summary.json`.
//!
//! Problems found before any computation (missing files, bad config, malformed
//! inputs) are [`Failure::Invalid`]; everything after is [`Failure::Runtime`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use visenc::data_io::{
    load_atlas, load_stimulus_set, load_tensor, make_split, save_tensor, DatasetPaths,
    ObjectMask, RoiAtlas, SplitAssignment, StimuliIndex, StimulusSet, Supercategory,
};
use visenc::embedviz::{rows_to_matrix, EmbeddingResult};
use visenc::encoder::{condensed_feature, load_params, save_params, EncoderConfig, EncoderParams};
use visenc::extractor::{FeatureExtractor, ImageInput, ToyExtractor};
use visenc::hypersearch::{
    append_trial, load_history, resume_search, ParamValue, Point, SearchSpace, TrialStatus,
};
use visenc::metrics::{accuracy, region_accuracy};
use visenc::optimize::{predict_indices, train, TrainConfig};
use visenc::saliency::{
    functional_probability, region_similarity, scorecam_regions, AttentionMap, RegionMaps,
    RegionTarget,
};
use visenc::synth::generate;

use crate::config::{default_space, EncoderSettings, Partition, RunConfig};

#[derive(Debug)]
pub enum Failure {
    /// Bad config or inputs; exit code 1.
    Invalid(String),
    /// The command started and then failed; exit code 2.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for Failure {}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.to_string()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.to_string()))
    }
}

pub type Outcome = Result<Value, Failure>;

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{what} not found: {}", path.display())))
    }
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path, Failure> {
    let path = value
        .as_deref()
        .ok_or_else(|| Failure::Invalid(format!("no {what} given (set \"{flag}\" or --{flag})")))?;
    require(path, what)?;
    Ok(path)
}

fn dataset_paths(cfg: &RunConfig) -> Result<DatasetPaths, Failure> {
    let paths = cfg
        .dataset_paths()
        .ok_or_else(|| Failure::Invalid("no dataset given (set \"dataset\" or --dataset)".into()))?;
    require(&paths.stimuli, "stimulus index")?;
    require(&paths.features_dir, "features directory")?;
    require(&paths.responses, "responses file")?;
    require(&paths.nc, "noise-ceiling file")?;
    Ok(paths)
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.out)
        .map_err(|e| Failure::Invalid(format!("cannot create {}: {e}", cfg.out.display())))?;
    Ok(&cfg.out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).runtime()?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_set(paths: &DatasetPaths) -> Result<(StimulusSet, StimuliIndex), Failure> {
    load_stimulus_set(paths).invalid()
}

/// The configured split file, or a fresh split from the seed.
fn resolve_split(cfg: &RunConfig, set: &StimulusSet) -> Result<(SplitAssignment, &'static str), Failure> {
    match &cfg.split {
        Some(path) => {
            require(path, "split file")?;
            let text = fs::read_to_string(path).invalid()?;
            let split: SplitAssignment = serde_json::from_str(&text)
                .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            for ids in [&split.train, &split.validation, &split.test] {
                set.indices_of(ids).invalid()?;
            }
            Ok((split, "file"))
        }
        None => Ok((make_split(set.ids(), cfg.seed).invalid()?, "seed")),
    }
}

fn partition_indices(
    set: &StimulusSet,
    split: Option<&SplitAssignment>,
    partition: Partition,
) -> Result<Vec<usize>, Failure> {
    let ids = match (partition, split) {
        (Partition::All, _) => return Ok((0..set.len()).collect()),
        (Partition::Train, Some(s)) => &s.train,
        (Partition::Validation, Some(s)) => &s.validation,
        (Partition::Test, Some(s)) => &s.test,
        (_, None) => unreachable!("split resolved for every partition but all"),
    };
    set.indices_of(ids).invalid()
}

fn encoder_config(set: &StimulusSet, settings: EncoderSettings) -> Result<EncoderConfig, Failure> {
    let (queries, dim) = set.feature_shape();
    let cfg = EncoderConfig {
        queries,
        dim,
        hidden: settings.hidden,
        query_out: settings.query_out,
        voxels: set.num_voxels(),
    };
    cfg.validate().invalid()?;
    Ok(cfg)
}

fn load_checkpoint(cfg: &RunConfig, set: &StimulusSet) -> Result<EncoderParams, Failure> {
    let dir = required(&cfg.checkpoint, "checkpoint", "checkpoint")?;
    let (params, _) = load_params(dir).invalid()?;
    let enc = params.config();
    let (queries, dim) = set.feature_shape();
    if (enc.queries, enc.dim, enc.voxels) != (queries, dim, set.num_voxels()) {
        return Err(Failure::Invalid(format!(
            "checkpoint expects {}x{} features and {} voxels; dataset has {queries}x{dim} and {}",
            enc.queries,
            enc.dim,
            enc.voxels,
            set.num_voxels()
        )));
    }
    Ok(params)
}

fn label_counts(labels: impl IntoIterator<Item = Supercategory>) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_insert(0) += 1;
    }
    counts
}

pub fn cmd_synth(cfg: &RunConfig) -> Outcome {
    cfg.synth.validate().invalid()?;
    let out = prepare_out(cfg)?;
    let data = generate(&cfg.synth).runtime()?;
    data.save(&DatasetPaths::under(out)).runtime()?;

    let nc = data.set.noise_ceiling().as_slice();
    let regions: BTreeMap<&String, usize> = data
        .atlas
        .regions
        .iter()
        .map(|(name, voxels)| (name, voxels.len()))
        .collect();
    let cats = (0..data.set.len()).filter_map(|i| data.set.supercategory(i));
    Ok(json!({
        "stimuli": data.set.len(),
        "voxels": data.set.num_voxels(),
        "feature_shape": data.set.feature_shape(),
        "extractor": data.extractor.info(),
        "noise_ratio": cfg.synth.noise_ratio,
        "noiseless_voxels": cfg.synth.noiseless_voxels,
        "nc_min": nc.iter().copied().fold(f64::INFINITY, f64::min),
        "nc_max": nc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "regions": regions,
        "supercategories": label_counts(cats),
        "artifacts": ["stimuli.json", "features", "images", "masks", "responses.visf", "nc.visf", "atlas.json", "planted.json"],
    }))
}

pub fn cmd_train(cfg: &RunConfig) -> Outcome {
    let paths = dataset_paths(cfg)?;
    cfg.train.validate().invalid()?;
    let (set, _) = load_set(&paths)?;
    let (split, split_source) = resolve_split(cfg, &set)?;
    let enc = encoder_config(&set, cfg.encoder)?;
    let out = prepare_out(cfg)?;

    let (params, report) = train(&set, &split, &enc, &cfg.train).runtime()?;
    info!(
        "trained {} epochs, best epoch {} (validation {:.2})",
        report.epochs_run(),
        report.best_epoch,
        report.best_val_accuracy
    );
    write_json(&out.join("split.json"), &split)?;
    save_params(&params, cfg.train.seed, out.join("checkpoint")).runtime()?;
    write_json(&out.join("train_report.json"), &report)?;

    Ok(json!({
        "encoder": enc,
        "train": cfg.train,
        "split": {
            "source": split_source,
            "train": split.train.len(),
            "validation": split.validation.len(),
            "test": split.test.len(),
        },
        "epochs_run": report.epochs_run(),
        "best_epoch": report.best_epoch,
        "best_val_accuracy": report.best_val_accuracy,
        "stopped_early": report.stopped_early,
        "final_train_loss": report.epochs.last().map(|e| e.train_loss),
        "params_fingerprint": format!("{:016x}", params.fingerprint()),
        "artifacts": ["split.json", "checkpoint", "train_report.json"],
    }))
}

pub fn cmd_eval(cfg: &RunConfig) -> Outcome {
    let paths = dataset_paths(cfg)?;
    require(&paths.atlas, "atlas")?;
    let (set, _) = load_set(&paths)?;
    let atlas = load_atlas(&paths.atlas).invalid()?;
    let params = load_checkpoint(cfg, &set)?;
    let split = match cfg.eval.partition {
        Partition::All => None,
        _ => Some(resolve_split(cfg, &set)?.0),
    };
    let idx = partition_indices(&set, split.as_ref(), cfg.eval.partition)?;
    let out = prepare_out(cfg)?;

    let pred = predict_indices(&params, &set, &idx).runtime()?;
    let ground = set.response_matrix(&idx);
    let (report, scores) =
        accuracy(ground.view(), pred.view(), set.noise_ceiling(), cfg.eval.nc_units).runtime()?;
    let report = report.with_regions(region_accuracy(&scores, &atlas).runtime()?);

    write_json(&out.join("accuracy.json"), &report)?;
    write_text(&out.join("accuracy.csv"), &report.to_csv())?;
    write_json(&out.join("voxel_scores.json"), &scores)?;
    Ok(json!({
        "partition": cfg.eval.partition,
        "n_stimuli": idx.len(),
        "accuracy": report,
        "artifacts": ["accuracy.json", "accuracy.csv", "voxel_scores.json"],
    }))
}

fn numeric(value: &ParamValue, name: &str) -> Result<f64, String> {
    match value {
        ParamValue::Choice(s) => s
            .parse()
            .map_err(|_| format!("{name}: choice {s:?} is not a number")),
        v => v.as_f64().ok_or_else(|| format!("{name}: not numeric")),
    }
}

fn whole(value: &ParamValue, name: &str) -> Result<usize, String> {
    let v = numeric(value, name)?;
    if v < 1.0 || v.fract() != 0.0 {
        return Err(format!("{name}: {v} is not a positive integer"));
    }
    Ok(v as usize)
}

/// Applies a search point on top of the base encoder and training settings.
fn apply_point(
    point: &Point,
    encoder: EncoderSettings,
    train: &TrainConfig,
) -> Result<(EncoderSettings, TrainConfig), String> {
    let (mut encoder, mut train) = (encoder, train.clone());
    for (name, value) in point {
        match name.as_str() {
            "learning_rate" => train.learning_rate = numeric(value, name)?,
            "beta1" => train.beta1 = numeric(value, name)?,
            "beta2" => train.beta2 = numeric(value, name)?,
            "epsilon" => train.epsilon = numeric(value, name)?,
            "batch_size" => train.batch_size = whole(value, name)?,
            "max_epochs" => train.max_epochs = whole(value, name)?,
            "patience" => train.patience = whole(value, name)?,
            "hidden" => encoder.hidden = whole(value, name)?,
            "query_out" => encoder.query_out = whole(value, name)?,
            other => return Err(format!("unknown search dimension {other:?}")),
        }
    }
    Ok((encoder, train))
}

pub fn cmd_tune(cfg: &RunConfig) -> Outcome {
    let paths = dataset_paths(cfg)?;
    let space: SearchSpace = cfg.tune.space.clone().unwrap_or_else(default_space);
    space.validate().invalid()?;
    for d in space.dims() {
        let probe: Point = [(d.name.clone(), ParamValue::Int(1))].into();
        if let Err(e) = apply_point(&probe, cfg.encoder, &cfg.train) {
            if e.starts_with("unknown") {
                return Err(Failure::Invalid(e));
            }
        }
    }
    if cfg.tune.budget == 0 {
        return Err(Failure::Invalid("tune budget must be at least 1".into()));
    }
    let (set, _) = load_set(&paths)?;
    let (split, _) = resolve_split(cfg, &set)?;
    let out = prepare_out(cfg)?;
    let log_path = out.join("trials.jsonl");
    let history = load_history(&log_path, &space).invalid()?;
    let resumed = history.len();
    if resumed > 0 {
        info!("resuming search after {resumed} recorded trials");
    }

    let objective = |point: &Point| -> visenc::Result<f64> {
        let (enc_settings, train_cfg) =
            apply_point(point, cfg.encoder, &cfg.train).map_err(visenc::Error::Invalid)?;
        let (queries, dim) = set.feature_shape();
        let enc = EncoderConfig {
            queries,
            dim,
            hidden: enc_settings.hidden,
            query_out: enc_settings.query_out,
            voxels: set.num_voxels(),
        };
        let (_, report) = train(&set, &split, &enc, &train_cfg)?;
        Ok(report.best_val_accuracy)
    };
    let outcome = resume_search(&space, history, cfg.tune.budget, cfg.seed, objective, |record| {
        info!("trial {}: {:?}", record.trial, record.objective);
        append_trial(&log_path, record)
    })
    .runtime()?;

    let (enc_settings, train_cfg) =
        apply_point(&outcome.best.params, cfg.encoder, &cfg.train).map_err(Failure::Runtime)?;
    let best = json!({
        "trial": outcome.best.trial,
        "params": outcome.best.params,
        "val_accuracy": outcome.best.objective,
        "encoder": enc_settings,
        "train": train_cfg,
    });
    write_json(&out.join("best.json"), &best)?;
    let failed = outcome
        .history
        .iter()
        .filter(|t| t.status == TrialStatus::Failed)
        .count();
    Ok(json!({
        "budget": cfg.tune.budget,
        "trials": outcome.history.len(),
        "resumed_from": resumed,
        "failed": failed,
        "space": space,
        "best": best,
        "artifacts": ["trials.jsonl", "best.json"],
    }))
}

fn region_targets(atlas: &RoiAtlas, regions: &[String]) -> Result<Vec<RegionTarget>, Failure> {
    if regions.is_empty() {
        return Err(Failure::Invalid("no regions requested".into()));
    }
    regions
        .iter()
        .map(|r| RegionTarget::from_atlas(atlas, r).invalid())
        .collect()
}

pub fn cmd_cam(cfg: &RunConfig) -> Outcome {
    let paths = dataset_paths(cfg)?;
    require(&paths.atlas, "atlas")?;
    require(&paths.images_dir, "images directory")?;
    let (set, index) = load_set(&paths)?;
    let extractor = ToyExtractor::from_info(&index.extractor)
        .map_err(|e| Failure::Invalid(format!("ScoreCAM needs image-level feature extraction: {e}")))?;
    let atlas = load_atlas(&paths.atlas).invalid()?;
    let targets = region_targets(&atlas, &cfg.cam.regions)?;
    let params = load_checkpoint(cfg, &set)?;
    let ids: Vec<String> = match &cfg.cam.images {
        Some(ids) => ids.clone(),
        None => set.ids().iter().take(cfg.cam.limit).cloned().collect(),
    };
    if ids.is_empty() {
        return Err(Failure::Invalid("no images selected".into()));
    }
    let mut images = Vec::with_capacity(ids.len());
    for id in &ids {
        set.index_of(id).invalid()?;
        let path = paths.image(id);
        require(&path, "image")?;
        let image = ImageInput::from_tensor(load_tensor(&path).invalid()?).invalid()?;
        if image.dim() != extractor.image_shape() {
            return Err(Failure::Invalid(format!(
                "image {id} is {:?}, extractor expects {:?}",
                image.dim(),
                extractor.image_shape()
            )));
        }
        images.push(image);
    }
    let out = prepare_out(cfg)?;
    let maps_dir = out.join("maps");

    let mut degenerate = Vec::new();
    for (id, image) in ids.iter().zip(&images) {
        let results = scorecam_regions(image, &params, &targets, &extractor, cfg.cam.mode).runtime()?;
        for (target, res) in targets.iter().zip(results) {
            let dir = maps_dir.join(&target.name);
            save_tensor(&res.map.to_tensor(), dir.join(format!("{id}.visf"))).runtime()?;
            fs::write(dir.join(format!("{id}.pgm")), res.map.to_pgm()).runtime()?;
            if res.map.degenerate() {
                warn!("{}/{id}: no map raised the region response; map is uniform", target.name);
                degenerate.push(json!({"region": target.name, "id": id}));
            }
        }
        info!("maps for {id} done");
    }
    Ok(json!({
        "mode": cfg.cam.mode,
        "regions": cfg.cam.regions,
        "images": ids,
        "degenerate": degenerate,
        "artifacts": ["maps"],
    }))
}

/// Maps stored as `<dir>/<region>/<id>.visf`, keyed by id.
fn load_region_maps(dir: &Path, region: &str) -> Result<BTreeMap<String, AttentionMap>, Failure> {
    let region_dir = dir.join(region);
    require(&region_dir, &format!("maps for region {region}"))?;
    let mut maps = BTreeMap::new();
    for entry in fs::read_dir(&region_dir).invalid()? {
        let path = entry.invalid()?.path();
        if path.extension().is_some_and(|e| e == "visf") {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let map = AttentionMap::from_tensor(load_tensor(&path).invalid()?)
                .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            maps.insert(id, map);
        }
    }
    if maps.is_empty() {
        return Err(Failure::Invalid(format!("no maps in {}", region_dir.display())));
    }
    Ok(maps)
}

pub fn cmd_kl(cfg: &RunConfig) -> Outcome {
    let dir = required(&cfg.maps, "maps directory", "maps")?;
    let k = &cfg.kl;
    let mut maps = RegionMaps::new();
    for region in [&k.anchor, &k.near, &k.far] {
        maps.insert(region.clone(), load_region_maps(dir, region)?);
    }
    let report = region_similarity(&maps, &k.anchor, [&k.near, &k.far]).invalid()?;
    let out = prepare_out(cfg)?;
    write_json(&out.join("similarity.json"), &report)?;
    let mut result = serde_json::to_value(&report).runtime()?;
    result["artifacts"] = json!(["similarity.json"]);
    Ok(result)
}

pub fn cmd_pf(cfg: &RunConfig) -> Outcome {
    let dir = required(&cfg.maps, "maps directory", "maps")?;
    let masks_dir = cfg
        .dataset_paths()
        .map(|p| p.masks_dir)
        .ok_or_else(|| Failure::Invalid("no dataset given for the masks (set \"dataset\" or paths.masks_dir)".into()))?;
    require(&masks_dir, "masks directory")?;
    let region = &cfg.pf.region;
    let all = load_region_maps(dir, region)?;

    let (mut ids, mut maps, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for (id, map) in all {
        let path = masks_dir.join(format!("{id}.visf"));
        if !path.exists() {
            warn!("no mask for {id}; skipped");
            continue;
        }
        let mask = ObjectMask::from_tensor(load_tensor(&path).invalid()?).invalid()?;
        ids.push(id);
        maps.push(map);
        masks.push(mask);
    }
    if ids.is_empty() {
        return Err(Failure::Invalid(format!("no {region} map has a matching mask")));
    }
    let out = prepare_out(cfg)?;
    let pf = functional_probability(&maps, &masks).runtime()?;

    let per_image: Vec<Value> = ids
        .iter()
        .zip(&pf.per_image)
        .map(|(id, p)| json!({"id": id, "p": p}))
        .collect();
    let excluded: Vec<&String> = pf.excluded.iter().map(|&i| &ids[i]).collect();
    let result = json!({
        "region": region,
        "n_images": ids.len(),
        "n_included": ids.len() - excluded.len(),
        "p_f": pf.p_f,
        "per_image": per_image,
        "excluded": excluded,
    });
    write_json(&out.join("pf.json"), &result)?;
    write_text(&out.join("pf.csv"), &pf.to_csv(&ids))?;
    let mut result = result;
    result["artifacts"] = json!(["pf.json", "pf.csv"]);
    Ok(result)
}

pub fn cmd_embed(cfg: &RunConfig) -> Outcome {
    let paths = dataset_paths(cfg)?;
    let (set, _) = load_set(&paths)?;
    let params = load_checkpoint(cfg, &set)?;
    let split = match cfg.embed.partition {
        Partition::All => None,
        _ => Some(resolve_split(cfg, &set)?.0),
    };
    let idx = partition_indices(&set, split.as_ref(), cfg.embed.partition)?;
    let labels = idx
        .iter()
        .map(|&i| {
            set.supercategory(i).ok_or_else(|| {
                Failure::Invalid(format!("stimulus {} has no supercategory label", set.ids()[i]))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = prepare_out(cfg)?;

    let rows = idx
        .par_iter()
        .map(|&i| condensed_feature(&params, set.features(i)))
        .collect::<visenc::Result<Vec<_>>>()
        .runtime()?;
    let matrix = rows_to_matrix(&rows).runtime()?;
    let ids: Vec<String> = idx.iter().map(|&i| set.ids()[i].clone()).collect();
    let embedding = EmbeddingResult::new(ids, matrix.view(), labels.clone(), "condensed").runtime()?;

    write_text(&out.join("embedding.csv"), &embedding.to_csv())?;
    write_text(&out.join("embedding.svg"), &embedding.to_svg())?;
    write_json(&out.join("embedding.json"), &embedding)?;
    Ok(json!({
        "partition": cfg.embed.partition,
        "n_points": embedding.ids.len(),
        "condensed_dim": matrix.ncols(),
        "explained_variance": embedding.explained_variance,
        "silhouette": embedding.silhouette,
        "labels": label_counts(labels),
        "method": embedding.method,
        "artifacts": ["embedding.csv", "embedding.svg", "embedding.json"],
    }))
}
