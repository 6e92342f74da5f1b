//! Noise ceilings, voxelwise correlation and noise-normalized accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data_io::{NoiseCeilingVector, RoiAtlas};
use crate::{Error, Result};

/// Percent of response variance attributable to signal.
pub fn noise_ceiling(sigma_signal_sq: f64, sigma_noise_sq: f64) -> Result<f64> {
    if !(sigma_signal_sq >= 0.0 && sigma_noise_sq >= 0.0)
        || !sigma_signal_sq.is_finite()
        || !sigma_noise_sq.is_finite()
    {
        return Err(Error::invalid("variances must be finite and non-negative"));
    }
    let total = sigma_signal_sq + sigma_noise_sq;
    if total == 0.0 {
        return Err(Error::Undefined(
            "noise ceiling with zero signal and zero noise variance".into(),
        ));
    }
    Ok(100.0 * sigma_signal_sq / total)
}

/// Pearson correlation; 0 when either input has zero variance.
pub fn pearson(ground: &[f64], pred: &[f64]) -> Result<f64> {
    if ground.len() != pred.len() {
        return Err(Error::shape(format!(
            "pearson inputs differ in length ({} vs {})",
            ground.len(),
            pred.len()
        )));
    }
    let n = ground.len();
    if n < 2 {
        return Err(Error::invalid("pearson needs at least two samples"));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / n as f64;
    let (mg, mp) = (mean(ground), mean(pred));
    let (mut sgp, mut sgg, mut spp) = (0.0, 0.0, 0.0);
    for (&g, &p) in ground.iter().zip(pred) {
        let (dg, dp) = (g - mg, p - mp);
        sgp += dg * dp;
        sgg += dg * dg;
        spp += dp * dp;
    }
    if sgg == 0.0 || spp == 0.0 {
        return Ok(0.0);
    }
    Ok((sgp / (sgg * spp).sqrt()).clamp(-1.0, 1.0))
}

/// How noise ceilings enter the `R^2 / NC` ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NcUnits {
    /// Divide by `nc / 100`; a perfect prediction of fully explainable signal scores 100.
    #[default]
    Fraction,
    /// Divide by the raw percentage.
    Percent,
}

impl NcUnits {
    fn divisor(self, nc: f64) -> f64 {
        match self {
            NcUnits::Fraction => nc / 100.0,
            NcUnits::Percent => nc,
        }
    }
}

/// Per-voxel correlations and noise-normalized scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelScores {
    pub r: Vec<f64>,
    /// `R^2 / NC`; `None` for excluded voxels.
    pub r2_over_nc: Vec<Option<f64>>,
    /// Voxels with a zero noise ceiling.
    pub excluded: Vec<usize>,
}

impl VoxelScores {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn scored(&self) -> impl Iterator<Item = f64> + '_ {
        self.r2_over_nc.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAccuracy {
    pub n_voxels: usize,
    pub n_scored: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub n_voxels: usize,
    pub n_scored: usize,
    pub n_excluded: usize,
    pub nc_units: NcUnits,
    pub regions: BTreeMap<String, RegionAccuracy>,
    /// Regions without any scored voxel; left out of `regions`.
    pub flagged_regions: Vec<String>,
}

impl AccuracyReport {
    /// `region,n_voxels,accuracy` rows; the first row, `all`, is the overall score.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,n_voxels,accuracy\n");
        writeln!(out, "all,{},{}", self.n_scored, self.accuracy).unwrap();
        for (name, r) in &self.regions {
            writeln!(out, "{name},{},{}", r.n_scored, r.accuracy).unwrap();
        }
        out
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Per-voxel scores for `T x V` ground truth and predictions.
pub fn voxel_scores(
    ground: ArrayView2<'_, f64>,
    pred: ArrayView2<'_, f64>,
    nc: &NoiseCeilingVector,
    units: NcUnits,
) -> Result<VoxelScores> {
    if ground.dim() != pred.dim() {
        return Err(Error::shape(format!(
            "ground {:?} and predictions {:?} differ",
            ground.dim(),
            pred.dim()
        )));
    }
    if ground.ncols() != nc.len() {
        return Err(Error::shape(format!(
            "{} voxels but {} noise ceilings",
            ground.ncols(),
            nc.len()
        )));
    }
    let mut scores = VoxelScores {
        r: Vec::with_capacity(nc.len()),
        r2_over_nc: Vec::with_capacity(nc.len()),
        excluded: Vec::new(),
    };
    for (v, &ceiling) in nc.as_slice().iter().enumerate() {
        let g = ground.column(v).to_vec();
        let p = pred.column(v).to_vec();
        let r = pearson(&g, &p)?;
        scores.r.push(r);
        if ceiling == 0.0 {
            scores.excluded.push(v);
            scores.r2_over_nc.push(None);
        } else {
            scores.r2_over_nc.push(Some(r * r / units.divisor(ceiling)));
        }
    }
    Ok(scores)
}

/// Median noise-normalized score times 100, over voxels with a nonzero ceiling.
pub fn accuracy(
    ground: ArrayView2<'_, f64>,
    pred: ArrayView2<'_, f64>,
    nc: &NoiseCeilingVector,
    units: NcUnits,
) -> Result<(AccuracyReport, VoxelScores)> {
    let scores = voxel_scores(ground, pred, nc, units)?;
    let mut scored: Vec<f64> = scores.scored().collect();
    let n_scored = scored.len();
    let med = median(&mut scored)
        .ok_or_else(|| Error::Undefined("every voxel has a zero noise ceiling".into()))?;
    let report = AccuracyReport {
        accuracy: med * 100.0,
        n_voxels: scores.len(),
        n_scored,
        n_excluded: scores.excluded.len(),
        nc_units: units,
        regions: BTreeMap::new(),
        flagged_regions: Vec::new(),
    };
    Ok((report, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBreakdown {
    pub regions: BTreeMap<String, RegionAccuracy>,
    pub flagged: Vec<String>,
}

/// Accuracy restricted to each atlas region's scored voxels.
pub fn region_accuracy(scores: &VoxelScores, atlas: &RoiAtlas) -> Result<RegionBreakdown> {
    if atlas.num_voxels != scores.len() {
        return Err(Error::shape(format!(
            "atlas covers {} voxels, scores cover {}",
            atlas.num_voxels,
            scores.len()
        )));
    }
    let mut out = RegionBreakdown {
        regions: BTreeMap::new(),
        flagged: Vec::new(),
    };
    for (name, voxels) in &atlas.regions {
        let mut vals: Vec<f64> = voxels
            .iter()
            .filter_map(|&v| scores.r2_over_nc[v])
            .collect();
        let n_scored = vals.len();
        match median(&mut vals) {
            Some(m) => {
                out.regions.insert(
                    name.clone(),
                    RegionAccuracy {
                        n_voxels: voxels.len(),
                        n_scored,
                        accuracy: m * 100.0,
                    },
                );
            }
            None => out.flagged.push(name.clone()),
        }
    }
    Ok(out)
}

impl AccuracyReport {
    pub fn with_regions(mut self, breakdown: RegionBreakdown) -> Self {
        self.regions = breakdown.regions;
        self.flagged_regions = breakdown.flagged;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
    /// All paired differences were zero; `t = 0`, `p = 1`.
    pub degenerate: bool,
}

/// Paired two-sided Student t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired samples differ in length"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest {
            t: 0.0,
            p: 1.0,
            df,
            degenerate: true,
        });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / df as f64;
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = if t.is_infinite() {
        0.0
    } else {
        let dist = StudentsT::new(0.0, 1.0, df as f64)
            .map_err(|e| Error::invalid(e.to_string()))?;
        (2.0 * dist.cdf(-t.abs())).min(1.0)
    };
    Ok(TTest {
        t,
        p,
        df,
        degenerate: false,
    })
}
