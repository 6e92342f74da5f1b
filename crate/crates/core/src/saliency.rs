//! ScoreCAM attention maps, KL comparison of maps and the functional-probability score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data_io::{ObjectMask, RoiAtlas, Tensor};
use crate::encoder::{predict, EncoderParams};
use crate::extractor::{FeatureExtractor, ImageInput};
use crate::{par, Error, Result};

/// Floor applied to both distributions before KL.
pub const KL_EPSILON: f64 = 1e-8;
const SUM_TOLERANCE: f64 = 1e-9;

/// Non-negative `H x W` map summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Array2<f64>,
    degenerate: bool,
}

impl AttentionMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("attention map is empty"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("attention values must be finite and non-negative"));
        }
        let sum = values.sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("attention map sums to {sum}, not 1")));
        }
        Ok(AttentionMap {
            values,
            degenerate: false,
        })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let n = (height * width) as f64;
        AttentionMap {
            values: Array2::from_elem((height, width), 1.0 / n),
            degenerate: false,
        }
    }

    /// Clips negatives to zero and rescales to sum one. An all-zero result
    /// becomes the uniform map with the degeneracy flag set.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::shape("attention map is empty"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("attention weights must be finite"));
        }
        let relu = weights.mapv(|v| v.max(0.0));
        let sum = relu.sum();
        if sum <= 0.0 {
            let (h, w) = relu.dim();
            let mut map = Self::uniform(h, w);
            map.degenerate = true;
            return Ok(map);
        }
        Ok(AttentionMap {
            values: relu / sum,
            degenerate: false,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Set when the weighted map vanished and a uniform map was substituted.
    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    /// Total attention over pixels where `inside(row, col)` holds.
    pub fn mass_where(&self, inside: impl Fn(usize, usize) -> bool) -> f64 {
        self.values
            .indexed_iter()
            .filter(|((r, c), _)| inside(*r, *c))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.dim();
        Tensor::f32(vec![h, w], self.values.iter().map(|&v| v as f32).collect())
            .expect("shape matches data")
    }

    /// Reads a stored map and renormalizes away single-precision rounding.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (shape, data) = tensor.into_real()?;
        if shape.len() != 2 {
            return Err(Error::shape(format!("attention map must be 2-D, found {shape:?}")));
        }
        let values = Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| Error::shape(e.to_string()))?;
        if values.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("stored attention map has negative values"));
        }
        Self::from_weights(values)
    }

    /// Binary PGM (P5), scaled so the maximum maps to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (h, w) = self.dim();
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if max > 0.0 {
                (255.0 * v / max).round() as u8
            } else {
                0
            }
        }));
        out
    }
}

/// ROI whose mean predicted response is the ScoreCAM target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTarget {
    pub name: String,
    pub voxels: Vec<usize>,
}

impl RegionTarget {
    pub fn new(name: impl Into<String>, voxels: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if voxels.is_empty() {
            return Err(Error::invalid(format!("region {name} has no voxels")));
        }
        Ok(RegionTarget { name, voxels })
    }

    pub fn from_atlas(atlas: &RoiAtlas, name: &str) -> Result<Self> {
        let voxels = atlas
            .region(name)
            .ok_or_else(|| Error::invalid(format!("atlas has no region {name}")))?;
        Self::new(name, voxels.to_vec())
    }

    pub fn evaluate(&self, prediction: ArrayView1<'_, f64>) -> Result<f64> {
        let mut sum = 0.0;
        for &v in &self.voxels {
            sum += *prediction.get(v).ok_or_else(|| {
                Error::shape(format!(
                    "region {} references voxel {v}, prediction has {}",
                    self.name,
                    prediction.len()
                ))
            })?;
        }
        Ok(sum / self.voxels.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamMode {
    /// One map for the region-mean prediction.
    #[default]
    RegionMean,
    /// One map per voxel in the region, averaged.
    PerVoxel,
}

/// Rescales each map to `[0, 1]`; a constant map becomes all ones.
pub fn normalize_maps(maps: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = maps.to_owned();
    for mut m in out.axis_iter_mut(Axis(0)) {
        let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            m.mapv_inplace(|v| (v - lo) / (hi - lo));
        } else {
            m.fill(1.0);
        }
    }
    out
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn bilinear_upsample(map: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let axis = |out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * n_in as f64 / out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis(height, h);
    let cols = axis(width, w);
    Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = map[[r0, c0]] * (1.0 - fc) + map[[r0, c1]] * fc;
        let bottom = map[[r1, c0]] * (1.0 - fc) + map[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax-weighted sum of normalized maps, upsampled to `height x width`.
pub fn cam_from_scores(
    normalized: ArrayView3<'_, f64>,
    scores: &[f64],
    height: usize,
    width: usize,
) -> Result<AttentionMap> {
    if normalized.len_of(Axis(0)) != scores.len() || scores.is_empty() {
        return Err(Error::shape(format!(
            "{} maps but {} scores",
            normalized.len_of(Axis(0)),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("ScoreCAM scores must be finite"));
    }
    let alpha = Array1::from(softmax(scores));
    // Upsampling is linear, so combining before upsampling is exact.
    let combined = normalized
        .axis_iter(Axis(0))
        .zip(alpha.iter())
        .fold(Array2::zeros((normalized.shape()[1], normalized.shape()[2])), |acc, (m, &a)| acc + &m * a);
    AttentionMap::from_weights(bilinear_upsample(combined.view(), height, width))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamResult {
    pub map: AttentionMap,
    /// Region-mean score increase `s_k` per activation map.
    pub scores: Vec<f64>,
    pub baseline: f64,
}

/// ScoreCAM attention for the target region's predicted response.
pub fn scorecam<E>(
    image: &ImageInput,
    params: &EncoderParams,
    target: &RegionTarget,
    extractor: &E,
    mode: CamMode,
) -> Result<CamResult>
where
    E: FeatureExtractor + Sync + ?Sized,
{
    let mut out = scorecam_regions(image, params, std::slice::from_ref(target), extractor, mode)?;
    Ok(out.pop().expect("one target"))
}

/// ScoreCAM for several targets on one image. The masked forward passes are
/// shared, so this costs about the same as a single target.
pub fn scorecam_regions<E>(
    image: &ImageInput,
    params: &EncoderParams,
    targets: &[RegionTarget],
    extractor: &E,
    mode: CamMode,
) -> Result<Vec<CamResult>>
where
    E: FeatureExtractor + Sync + ?Sized,
{
    let (h, w, c) = image.dim();
    let (_, acts) = extractor.extract(image)?;
    let normalized = normalize_maps(acts.maps());
    let baseline_pred = predict(params, &extractor.extract_features(&ImageInput::zeros(h, w, c))?)?;
    let ks: Vec<usize> = (0..normalized.len_of(Axis(0))).collect();
    let preds = par::map(&ks, |&k| -> Result<Array1<f64>> {
        let mask = bilinear_upsample(normalized.index_axis(Axis(0), k), h, w);
        predict(params, &extractor.perturbed_extract(image, mask.view())?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    targets
        .iter()
        .map(|target| {
            let baseline = target.evaluate(baseline_pred.view())?;
            let scores = preds
                .iter()
                .map(|p| Ok(target.evaluate(p.view())? - baseline))
                .collect::<Result<Vec<f64>>>()?;
            let map = match mode {
                CamMode::RegionMean => cam_from_scores(normalized.view(), &scores, h, w)?,
                CamMode::PerVoxel => {
                    let mut total = Array2::<f64>::zeros((h, w));
                    for &v in &target.voxels {
                        let s: Vec<f64> = preds.iter().map(|p| p[v] - baseline_pred[v]).collect();
                        total += &cam_from_scores(normalized.view(), &s, h, w)?.values;
                    }
                    AttentionMap::from_weights(total)?
                }
            };
            Ok(CamResult {
                map,
                scores,
                baseline,
            })
        })
        .collect()
}

fn floored(p: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = p.iter().map(|v| v.max(KL_EPSILON)).collect();
    let s: f64 = f.iter().sum();
    f.into_iter().map(|v| v / s).collect()
}

/// `KL(p || q)` in nats on ε-floored, renormalized inputs.
pub fn kl_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("distributions must be finite and non-negative"));
    }
    let (p, q) = (floored(p), floored(q));
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(kl.max(0.0))
}

pub fn kl_divergence(p: &AttentionMap, q: &AttentionMap) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape(format!(
            "attention maps {:?} and {:?} differ",
            p.dim(),
            q.dim()
        )));
    }
    kl_slices(
        p.values.as_slice().expect("standard layout"),
        q.values.as_slice().expect("standard layout"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDivergence {
    pub id: String,
    pub kl_ab: f64,
    pub kl_ba: f64,
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub a: String,
    pub b: String,
    /// Means over shared images.
    pub kl_ab: f64,
    pub kl_ba: f64,
    pub j: f64,
    pub per_image: Vec<ImageDivergence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioFlag {
    /// The near pair's divergence is zero while the far pair's is not.
    Infinite,
    /// Both divergences are zero.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub anchor: String,
    pub near: String,
    pub far: String,
    pub images: Vec<String>,
    pub pairs: Vec<PairSimilarity>,
    /// `J(anchor, far) / J(anchor, near)`; `None` when flagged.
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_flag: Option<RatioFlag>,
}

pub type RegionMaps = BTreeMap<String, BTreeMap<String, AttentionMap>>;

fn pair_similarity(maps: &RegionMaps, a: &str, b: &str, images: &[String]) -> Result<PairSimilarity> {
    let mut per_image = Vec::with_capacity(images.len());
    for id in images {
        let (p, q) = (&maps[a][id], &maps[b][id]);
        let kl_ab = kl_divergence(p, q)?;
        let kl_ba = kl_divergence(q, p)?;
        per_image.push(ImageDivergence {
            id: id.clone(),
            kl_ab,
            kl_ba,
            j: 0.5 * (kl_ab + kl_ba),
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageDivergence) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(PairSimilarity {
        a: a.to_string(),
        b: b.to_string(),
        kl_ab: mean(|d| d.kl_ab),
        kl_ba: mean(|d| d.kl_ba),
        j: mean(|d| d.j),
        per_image,
    })
}

/// `far / near` with flags for zero denominators.
pub fn similarity_ratio(near: f64, far: f64) -> (Option<f64>, Option<RatioFlag>) {
    if near > 0.0 {
        (Some(far / near), None)
    } else if far > 0.0 {
        (None, Some(RatioFlag::Infinite))
    } else {
        (None, Some(RatioFlag::Undefined))
    }
}

/// Compares the anchor region's maps with a near and a far region over the
/// images all three share.
pub fn region_similarity(maps: &RegionMaps, anchor: &str, others: [&str; 2]) -> Result<SimilarityReport> {
    let [near, far] = others;
    let mut shared: Option<BTreeSet<&String>> = None;
    for region in [anchor, near, far] {
        let ids: BTreeSet<&String> = maps
            .get(region)
            .ok_or_else(|| Error::invalid(format!("no maps for region {region}")))?
            .keys()
            .collect();
        shared = Some(match shared {
            None => ids,
            Some(s) => s.intersection(&ids).copied().collect(),
        });
    }
    let images: Vec<String> = shared.unwrap_or_default().into_iter().cloned().collect();
    if images.is_empty() {
        return Err(Error::invalid("regions share no images"));
    }
    let near_pair = pair_similarity(maps, anchor, near, &images)?;
    let far_pair = pair_similarity(maps, anchor, far, &images)?;
    let (ratio, ratio_flag) = similarity_ratio(near_pair.j, far_pair.j);
    Ok(SimilarityReport {
        anchor: anchor.to_string(),
        near: near.to_string(),
        far: far.to_string(),
        images,
        pairs: vec![near_pair, far_pair],
        ratio,
        ratio_flag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalProbability {
    /// Mean of the included `p_i`.
    pub p_f: f64,
    /// `None` where the mask is all ones or all zeros.
    pub per_image: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// `mu_in / (mu_in + mu_out)` for one map and mask; `None` for one-sided masks.
pub fn image_probability(map: &AttentionMap, mask: &ObjectMask) -> Result<Option<f64>> {
    if map.dim() != mask.dim() {
        return Err(Error::shape(format!(
            "attention map {:?} and mask {:?} differ",
            map.dim(),
            mask.dim()
        )));
    }
    let n_in = mask.inside_count();
    let n_out = map.values.len() - n_in;
    if n_in == 0 || n_out == 0 {
        return Ok(None);
    }
    let inside: f64 = map
        .values
        .iter()
        .zip(mask.pixels().iter())
        .filter(|(_, &m)| m == 1)
        .map(|(v, _)| v)
        .sum();
    let outside = map.values.sum() - inside;
    let mu_in = inside / n_in as f64;
    let mu_out = outside.max(0.0) / n_out as f64;
    Ok(Some(mu_in / (mu_in + mu_out)))
}

pub fn functional_probability(maps: &[AttentionMap], masks: &[ObjectMask]) -> Result<FunctionalProbability> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} maps and {} masks; need matching nonempty lists",
            maps.len(),
            masks.len()
        )));
    }
    let mut per_image = Vec::with_capacity(maps.len());
    let mut excluded = Vec::new();
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        let p = image_probability(map, mask)?;
        if p.is_none() {
            log::warn!("image {i}: mask covers all or none of the image; excluded");
            excluded.push(i);
        }
        per_image.push(p);
    }
    let included: Vec<f64> = per_image.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Undefined("every mask is all ones or all zeros".into()));
    }
    Ok(FunctionalProbability {
        p_f: included.iter().sum::<f64>() / included.len() as f64,
        per_image,
        excluded,
    })
}

impl FunctionalProbability {
    /// `index,p_i` rows; excluded images have an empty value.
    pub fn to_csv(&self, ids: &[String]) -> String {
        let mut out = String::from("id,p\n");
        for (i, p) in self.per_image.iter().enumerate() {
            let id = ids.get(i).cloned().unwrap_or_else(|| i.to_string());
            match p {
                Some(p) => writeln!(out, "{id},{p}").unwrap(),
                None => writeln!(out, "{id},").unwrap(),
            }
        }
        out
    }
}

/// Averages maps of equal shape into one distribution.
pub fn mean_map(maps: &[&AttentionMap]) -> Result<AttentionMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("no maps to average"))?;
    let mut total = Array2::<f64>::zeros(first.dim());
    for m in maps {
        if m.dim() != first.dim() {
            return Err(Error::shape("maps differ in shape"));
        }
        total += &m.values;
    }
    AttentionMap::from_weights(total)
}
