//! Tree-structured Parzen estimator search.
//!
//! Objectives are maximized. Trials are kept as [`TrialRecord`]s and can be
//! persisted as JSON lines so an interrupted search resumes from its history.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::normal_cdf;
use crate::{Error, Result};

pub const GAMMA: f64 = 0.25;
pub const N_STARTUP: usize = 10;
pub const N_CANDIDATES: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Dimension {
    Continuous {
        low: f64,
        high: f64,
        #[serde(default)]
        log: bool,
    },
    Integer {
        low: i64,
        high: i64,
    },
    Categorical {
        choices: Vec<String>,
    },
}

impl Dimension {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Dimension::Continuous { low, high, log } => {
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return Err(Error::invalid(format!("{name}: need finite low < high")));
                }
                if *log && *low <= 0.0 {
                    return Err(Error::invalid(format!("{name}: log scale needs low > 0")));
                }
            }
            Dimension::Integer { low, high } => {
                if low >= high {
                    return Err(Error::invalid(format!("{name}: need low < high")));
                }
            }
            Dimension::Categorical { choices } => {
                if choices.is_empty() {
                    return Err(Error::invalid(format!("{name}: no choices")));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match (self, value) {
            (Dimension::Continuous { low, high, .. }, ParamValue::Float(x)) => {
                (*low..=*high).contains(x)
            }
            (Dimension::Integer { low, high }, ParamValue::Int(k)) => (*low..=*high).contains(k),
            (Dimension::Categorical { choices }, ParamValue::Choice(c)) => choices.contains(c),
            _ => false,
        }
    }

    /// Bounds of the internal real line the kernels live on.
    fn internal_bounds(&self) -> (f64, f64) {
        match *self {
            Dimension::Continuous { low, high, log } => {
                if log {
                    (low.ln(), high.ln())
                } else {
                    (low, high)
                }
            }
            Dimension::Integer { low, high } => (low as f64 - 0.5, high as f64 + 0.5),
            Dimension::Categorical { .. } => unreachable!("categoricals use a histogram"),
        }
    }

    fn to_internal(&self, value: &ParamValue) -> f64 {
        match (self, value) {
            (Dimension::Continuous { log: true, .. }, ParamValue::Float(x)) => x.ln(),
            (Dimension::Continuous { .. }, ParamValue::Float(x)) => *x,
            (Dimension::Integer { .. }, ParamValue::Int(k)) => *k as f64,
            _ => unreachable!("value checked against its dimension"),
        }
    }

    fn from_internal(&self, x: f64) -> ParamValue {
        match *self {
            Dimension::Continuous { low, high, log } => {
                let v = if log { x.exp() } else { x };
                ParamValue::Float(v.clamp(low, high))
            }
            Dimension::Integer { low, high } => ParamValue::Int((x.round() as i64).clamp(low, high)),
            Dimension::Categorical { .. } => unreachable!("categoricals use a histogram"),
        }
    }

    fn sample_prior(&self, rng: &mut ChaCha8Rng) -> ParamValue {
        match self {
            Dimension::Continuous { .. } => {
                let (a, b) = self.internal_bounds();
                self.from_internal(rng.random_range(a..=b))
            }
            Dimension::Integer { low, high } => ParamValue::Int(rng.random_range(*low..=*high)),
            Dimension::Categorical { choices } => {
                ParamValue::Choice(choices[rng.random_range(0..choices.len())].clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(k) => Some(*k as f64),
            ParamValue::Float(x) => Some(*x),
            ParamValue::Choice(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(k) => Some(*k),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Choice(c) => Some(c),
            _ => None,
        }
    }
}

pub type Point = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDimension {
    pub name: String,
    #[serde(flatten)]
    pub dimension: Dimension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    dims: Vec<NamedDimension>,
}

impl SearchSpace {
    pub fn new(dims: impl IntoIterator<Item = (String, Dimension)>) -> Result<Self> {
        let space = SearchSpace {
            dims: dims
                .into_iter()
                .map(|(name, dimension)| NamedDimension { name, dimension })
                .collect(),
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::invalid("search space has no dimensions"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.dims {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::invalid(format!("dimension {} declared twice", d.name)));
            }
            d.dimension.validate(&d.name)?;
        }
        Ok(())
    }

    pub fn dims(&self) -> &[NamedDimension] {
        &self.dims
    }

    pub fn contains(&self, point: &Point) -> bool {
        point.len() == self.dims.len()
            && self
                .dims
                .iter()
                .all(|d| point.get(&d.name).is_some_and(|v| d.dimension.contains(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub params: Point,
    /// Higher is better; `None` for failed trials.
    pub objective: Option<f64>,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    fn score(&self) -> Option<f64> {
        match self.status {
            TrialStatus::Ok => self.objective.filter(|v| v.is_finite()),
            TrialStatus::Failed => None,
        }
    }
}

/// Truncated-Gaussian Parzen mixture on `[a, b]` with an added prior kernel.
struct Parzen {
    a: f64,
    b: f64,
    mus: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Parzen {
    fn fit(observations: &[f64], a: f64, b: f64) -> Self {
        let width = b - a;
        let mut obs = observations.to_vec();
        obs.sort_by(f64::total_cmp);
        let mut mus = Vec::with_capacity(obs.len() + 1);
        let mut sigmas = Vec::with_capacity(obs.len() + 1);
        for (i, &x) in obs.iter().enumerate() {
            let left = if i == 0 { a } else { obs[i - 1] };
            let right = if i + 1 == obs.len() { b } else { obs[i + 1] };
            let bw = (x - left).max(right - x);
            mus.push(x);
            sigmas.push(bw.clamp(width / 100.0, width));
        }
        mus.push(0.5 * (a + b));
        sigmas.push(width);
        Parzen { a, b, mus, sigmas }
    }

    fn kernel_mass(&self, k: usize) -> f64 {
        let (m, s) = (self.mus[k], self.sigmas[k]);
        normal_cdf((self.b - m) / s) - normal_cdf((self.a - m) / s)
    }

    fn density(&self, x: f64) -> f64 {
        let n = self.mus.len() as f64;
        (0..self.mus.len())
            .map(|k| {
                let (m, s) = (self.mus[k], self.sigmas[k]);
                let z = (x - m) / s;
                (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()) / self.kernel_mass(k)
            })
            .sum::<f64>()
            / n
    }

    /// Mixture mass on `[lo, hi]`, clipped to the support.
    fn mass(&self, lo: f64, hi: f64) -> f64 {
        let (lo, hi) = (lo.max(self.a), hi.min(self.b));
        let n = self.mus.len() as f64;
        (0..self.mus.len())
            .map(|k| {
                let (m, s) = (self.mus[k], self.sigmas[k]);
                (normal_cdf((hi - m) / s) - normal_cdf((lo - m) / s)) / self.kernel_mass(k)
            })
            .sum::<f64>()
            / n
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let k = rng.random_range(0..self.mus.len());
        let (m, s) = (self.mus[k], self.sigmas[k]);
        for _ in 0..256 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let x = m + s * z;
            if (self.a..=self.b).contains(&x) {
                return x;
            }
        }
        m.clamp(self.a, self.b)
    }
}

/// Smoothed categorical histogram: one pseudo-count per choice.
fn categorical_probs(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum::<usize>() + counts.len();
    counts
        .iter()
        .map(|&c| (c + 1) as f64 / total as f64)
        .collect()
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn suggestion_rng(seed: u64, history_len: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(history_len as u64);
    rng
}

/// Next point to evaluate; a pure function of `(space, history, seed)`.
pub fn suggest(space: &SearchSpace, history: &[TrialRecord], seed: u64) -> Result<Point> {
    space.validate()?;
    let mut rng = suggestion_rng(seed, history.len());
    let mut done: Vec<(&TrialRecord, f64)> = history
        .iter()
        .filter_map(|t| t.score().map(|s| (t, s)))
        .filter(|(t, _)| space.contains(&t.params))
        .collect();

    if done.len() < N_STARTUP {
        return Ok(space
            .dims
            .iter()
            .map(|d| (d.name.clone(), d.dimension.sample_prior(&mut rng)))
            .collect());
    }

    // Stable sort keeps earlier trials first among equal objectives.
    done.sort_by(|x, y| y.1.total_cmp(&x.1));
    let n_good = ((GAMMA * done.len() as f64).ceil() as usize).clamp(1, done.len() - 1);
    let (good, bad) = done.split_at(n_good);

    let mut candidates: Vec<(Point, f64)> = (0..N_CANDIDATES).map(|_| (Point::new(), 0.0)).collect();
    for d in &space.dims {
        let name = &d.name;
        match &d.dimension {
            Dimension::Categorical { choices } => {
                let count = |set: &[(&TrialRecord, f64)]| {
                    let mut c = vec![0usize; choices.len()];
                    for (t, _) in set {
                        if let Some(ParamValue::Choice(v)) = t.params.get(name) {
                            c[choices.iter().position(|x| x == v).expect("checked by contains")] += 1;
                        }
                    }
                    categorical_probs(&c)
                };
                let (l, g) = (count(good), count(bad));
                for (point, score) in candidates.iter_mut() {
                    let i = sample_index(&l, &mut rng);
                    *score += l[i].ln() - g[i].ln();
                    point.insert(name.clone(), ParamValue::Choice(choices[i].clone()));
                }
            }
            dim => {
                let (a, b) = dim.internal_bounds();
                let values = |set: &[(&TrialRecord, f64)]| -> Vec<f64> {
                    set.iter().map(|(t, _)| dim.to_internal(&t.params[name])).collect()
                };
                let l = Parzen::fit(&values(good), a, b);
                let g = Parzen::fit(&values(bad), a, b);
                for (point, score) in candidates.iter_mut() {
                    let x = l.sample(&mut rng);
                    let value = dim.from_internal(x);
                    *score += match (dim, &value) {
                        (Dimension::Integer { .. }, ParamValue::Int(k)) => {
                            let k = *k as f64;
                            l.mass(k - 0.5, k + 0.5).ln() - g.mass(k - 0.5, k + 0.5).ln()
                        }
                        _ => l.density(x).ln() - g.density(x).ln(),
                    };
                    point.insert(name.clone(), value);
                }
            }
        }
    }

    let mut best = 0;
    for (i, (_, s)) in candidates.iter().enumerate() {
        if *s > candidates[best].1 {
            best = i;
        }
    }
    Ok(candidates.swap_remove(best).0)
}

/// Highest-objective successful trial; earliest wins ties.
pub fn best_trial(history: &[TrialRecord]) -> Option<&TrialRecord> {
    let mut best: Option<(&TrialRecord, f64)> = None;
    for t in history {
        if let Some(s) = t.score() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((t, s));
            }
        }
    }
    best.map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub history: Vec<TrialRecord>,
}

/// Runs trials until `history` holds `budget` records, then returns the best.
///
/// `on_trial` sees each new record as soon as it is complete, which is where
/// callers append to a JSON-lines log.
pub fn resume_search<F, C>(
    space: &SearchSpace,
    mut history: Vec<TrialRecord>,
    budget: usize,
    seed: u64,
    mut objective: F,
    mut on_trial: C,
) -> Result<SearchOutcome>
where
    F: FnMut(&Point) -> Result<f64>,
    C: FnMut(&TrialRecord) -> Result<()>,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::invalid("search budget must be at least 1"));
    }
    while history.len() < budget {
        let params = suggest(space, &history, seed)?;
        let record = match objective(&params) {
            Ok(v) if v.is_finite() => TrialRecord {
                trial: history.len(),
                params,
                objective: Some(v),
                status: TrialStatus::Ok,
                error: None,
            },
            outcome => TrialRecord {
                trial: history.len(),
                params,
                objective: None,
                status: TrialStatus::Failed,
                error: Some(match outcome {
                    Ok(v) => format!("objective returned {v}"),
                    Err(e) => e.to_string(),
                }),
            },
        };
        on_trial(&record)?;
        history.push(record);
    }
    match best_trial(&history) {
        Some(best) => Ok(SearchOutcome {
            best: best.clone(),
            history,
        }),
        None => Err(Error::AllTrialsFailed {
            trials: history.len(),
            last: history
                .last()
                .and_then(|t| t.error.clone())
                .unwrap_or_default(),
        }),
    }
}

pub fn run_search<F>(space: &SearchSpace, objective: F, budget: usize, seed: u64) -> Result<SearchOutcome>
where
    F: FnMut(&Point) -> Result<f64>,
{
    resume_search(space, Vec::new(), budget, seed, objective, |_| Ok(()))
}

/// Reads a JSON-lines history; a missing file is an empty history.
pub fn load_history(path: impl AsRef<Path>, space: &SearchSpace) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let record: TrialRecord = serde_json::from_str(line)?;
        if record.trial != out.len() || !space.contains(&record.params) {
            return Err(Error::invalid(format!(
                "{}:{}: trial does not continue the history or lies outside the space",
                path.display(),
                line_no + 1
            )));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn append_trial(path: impl AsRef<Path>, record: &TrialRecord) -> Result<()> {
    let path = path.as_ref();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}
