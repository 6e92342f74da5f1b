//! Two-dimensional PCA of condensed features and silhouette scoring.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data_io::Supercategory;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    /// `n x 2` projected coordinates.
    pub points: Array2<f64>,
    /// `d x 2` unit principal directions.
    pub components: Array2<f64>,
    /// Fraction of total variance along each component.
    pub explained: [f64; 2],
}

fn top_two(matrix: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = matrix.nrows();
    let m = DMatrix::from_row_iterator(n, n, matrix.iter().copied());
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vecs = Array2::zeros((n, 2));
    let mut vals = Vec::with_capacity(2);
    for (j, &k) in order.iter().take(2).enumerate() {
        vals.push(eig.eigenvalues[k].max(0.0));
        for i in 0..n {
            vecs[[i, j]] = eig.eigenvectors[(i, k)];
        }
    }
    (vals, vecs)
}

/// Mean-centred projection onto the two leading principal directions.
///
/// Each direction is signed so that its largest-magnitude loading is
/// positive. When `d > n` the eigenproblem is solved on the `n x n` Gram
/// matrix instead of the covariance.
pub fn pca2(features: ArrayView2<'_, f64>) -> Result<Pca2> {
    let (n, d) = features.dim();
    if n < 3 || d < 2 {
        return Err(Error::shape(format!("pca needs n >= 3 and d >= 2, got {n} x {d}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let mean = features.mean_axis(Axis(0)).expect("n >= 3");
    let x = &features - &mean;
    let total: f64 = x.iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Err(Error::Undefined("features have zero variance".into()));
    }

    let (vals, mut components) = if d <= n {
        top_two(x.t().dot(&x))
    } else {
        let (vals, u) = top_two(x.dot(&x.t()));
        let mut v = x.t().dot(&u);
        for (j, mut col) in v.columns_mut().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 && vals[j] > 0.0 {
                col /= norm;
            } else {
                col.fill(0.0);
            }
        }
        (vals, v)
    };

    for mut col in components.columns_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    let points = x.dot(&components);
    Ok(Pca2 {
        points,
        components,
        explained: [vals[0] / total, vals[1] / total],
    })
}

/// Mean silhouette with Euclidean distances; points alone in their cluster score 0.
pub fn silhouette<L: PartialEq>(points: ArrayView2<'_, f64>, labels: &[L]) -> Result<f64> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} points but {} labels", labels.len())));
    }
    let mut groups: Vec<usize> = Vec::with_capacity(n);
    let mut reps: Vec<&L> = Vec::new();
    for l in labels {
        let g = match reps.iter().position(|r| *r == l) {
            Some(g) => g,
            None => {
                reps.push(l);
                reps.len() - 1
            }
        };
        groups.push(g);
    }
    let k = reps.len();
    if k < 2 {
        return Err(Error::invalid("silhouette needs at least two labels"));
    }
    let sizes = groups.iter().fold(vec![0usize; k], |mut acc, &g| {
        acc[g] += 1;
        acc
    });

    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        if sizes[groups[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        let pi = points.row(i);
        for j in 0..n {
            if i != j {
                let dist = (&pi - &points.row(j)).mapv(|v| v * v).sum().sqrt();
                sums[groups[j]] += dist;
            }
        }
        let own = groups[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&g| g != own)
            .map(|g| sums[g] / sizes[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub ids: Vec<String>,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<Supercategory>,
    pub explained_variance: [f64; 2],
    pub silhouette: Option<f64>,
    /// How the coordinates were produced.
    pub method: String,
    /// Which features were projected.
    pub source: String,
}

impl EmbeddingResult {
    pub fn new(
        ids: Vec<String>,
        features: ArrayView2<'_, f64>,
        labels: Vec<Supercategory>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != features.nrows() || labels.len() != features.nrows() {
            return Err(Error::shape("ids, labels and feature rows differ in count"));
        }
        let pca = pca2(features)?;
        let silhouette = match silhouette(pca.points.view(), &labels) {
            Ok(s) => Some(s),
            Err(Error::Invalid(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(EmbeddingResult {
            ids,
            points: pca.points.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
            labels,
            explained_variance: pca.explained,
            silhouette,
            method: "pca (deterministic substitute for UMAP)".into(),
            source: source.into(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,x,y,label\n");
        for ((id, p), l) in self.ids.iter().zip(&self.points).zip(&self.labels) {
            writeln!(out, "{id},{},{},{}", p[0], p[1], l.as_str()).unwrap();
        }
        out
    }

    /// Self-contained scatter plot with one fixed colour per label.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 480.0;
        const MARGIN: f64 = 24.0;
        let xs = self.points.iter().map(|p| p[0]);
        let ys = self.points.iter().map(|p| p[1]);
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
        let (sx, sy) = (span(x0, x1), span(y0, y1));
        let mut out = format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}">"#,
            s = SIZE + 120.0
        );
        out.push_str(r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
        for (p, l) in self.points.iter().zip(&self.labels) {
            let cx = MARGIN + (p[0] - x0) / sx * (SIZE - 2.0 * MARGIN);
            let cy = SIZE - MARGIN - (p[1] - y0) / sy * (SIZE - 2.0 * MARGIN);
            write!(
                out,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{}" fill-opacity="0.8"/>"#,
                colour(*l)
            )
            .unwrap();
        }
        for (i, l) in Supercategory::ALL.iter().enumerate() {
            let y = MARGIN + 18.0 * i as f64;
            write!(
                out,
                r#"<circle cx="{x}" cy="{y}" r="5" fill="{c}"/><text x="{tx}" y="{ty}" font-family="sans-serif" font-size="12">{name}</text>"#,
                x = SIZE + 10.0,
                c = colour(*l),
                tx = SIZE + 20.0,
                ty = y + 4.0,
                name = l.as_str()
            )
            .unwrap();
        }
        out.push_str("</svg>\n");
        out
    }
}

pub fn colour(label: Supercategory) -> &'static str {
    match label {
        Supercategory::Person => "#1f77b4",
        Supercategory::Animal => "#ff7f0e",
        Supercategory::Both => "#2ca02c",
        Supercategory::Other => "#7f7f7f",
    }
}

/// Stacks equal-length vectors into rows.
pub fn rows_to_matrix(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("feature vectors differ in length"));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(crate::data_io::stack_rows(&views))
}
