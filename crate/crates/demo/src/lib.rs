//! Three small interactive views of the library for a static web page:
//! ScoreCAM on a planted quadrant model, KL between two Gaussian blobs, and a
//! PCA embedding of two clusters. Each export returns a JSON string.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use visenc::data_io::ObjectMask;
use visenc::embedviz::{pca2, silhouette};
use visenc::encoder::{EncoderConfig, EncoderParams};
use visenc::extractor::{ImageInput, ToyExtractor, ToyExtractorConfig};
use visenc::saliency::{image_probability, kl_divergence, scorecam, AttentionMap, CamMode, RegionTarget};

const SIZE: usize = 32;
const PATCH: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct CamView {
    pub size: usize,
    pub image: Vec<f64>,
    pub map: Vec<f64>,
    pub target_mass: f64,
    /// Functional probability of the map against the object's mask.
    pub p_object: Option<f64>,
}

fn quadrant(index: u8, r: usize, c: usize) -> bool {
    let half = SIZE / 2;
    let (top, left) = (index < 2, index % 2 == 0);
    (r < half) == top && (c < half) == left
}

/// Encoder whose single output is the mean brightness of one grid quadrant.
fn planted(ex: &ToyExtractor, target: u8) -> EncoderParams {
    let c = ex.config();
    let (g, d) = (c.grid(), c.token_dim());
    let cfg = EncoderConfig {
        queries: c.queries(),
        dim: d,
        hidden: 1,
        query_out: 1,
        voxels: 1,
    };
    let mut p = EncoderParams::zeros(&cfg);
    let q = ex.projection();
    for i in 0..d {
        p.w1[[i, 0]] = q.column(i).sum() / d as f64;
    }
    p.b1[0] = 10.0;
    p.w2[[0, 0]] = 1.0;
    p.b2[0] = -10.0;
    let gain = 20.0 / ((g / 2) * (g / 2)) as f64;
    for r in 0..g {
        for col in 0..g {
            if quadrant(target, r * PATCH, col * PATCH) {
                p.w_head[[c.token_index(r, col), 0]] = gain;
            }
        }
    }
    p
}

/// ScoreCAM for a bright square centred at (`row`, `col`) and a readout of
/// quadrant `target` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
pub fn cam_view(row: usize, col: usize, radius: usize, target: u8, seed: u64) -> Result<CamView, String> {
    if target > 3 {
        return Err("target quadrant must be 0..=3".into());
    }
    let config = ToyExtractorConfig {
        image_size: SIZE,
        patch: PATCH,
        channels: 1,
    };
    let ex = ToyExtractor::with_config(config, seed).map_err(|e| e.to_string())?;
    let inside = |r: usize, c: usize| r.abs_diff(row) <= radius && c.abs_diff(col) <= radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array3::from_shape_simple_fn((SIZE, SIZE, 1), || rng.random_range(0.0..0.1));
    let image = Array3::from_shape_fn((SIZE, SIZE, 1), |(r, c, ch)| {
        noise[[r, c, ch]] + if inside(r, c) { 0.8 } else { 0.1 }
    });
    let image = ImageInput::new(image).map_err(|e| e.to_string())?;
    let params = planted(&ex, target);
    let region = RegionTarget::new("quadrant", vec![0]).map_err(|e| e.to_string())?;
    let cam = scorecam(&image, &params, &region, &ex, CamMode::RegionMean).map_err(|e| e.to_string())?;
    let mask = ObjectMask::from_fn(SIZE, SIZE, inside);
    Ok(CamView {
        size: SIZE,
        image: image.pixels().iter().copied().collect(),
        map: cam.map.values().iter().copied().collect(),
        target_mass: cam.map.mass_where(|r, c| quadrant(target, r, c)),
        p_object: image_probability(&cam.map, &mask).map_err(|e| e.to_string())?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct KlView {
    pub size: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub kl_ab: f64,
    pub kl_ba: f64,
    pub j: f64,
}

fn blob(size: usize, (cy, cx): (f64, f64), sigma: f64) -> Result<AttentionMap, String> {
    let w = Array2::from_shape_fn((size, size), |(r, c)| {
        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    });
    AttentionMap::from_weights(w).map_err(|e| e.to_string())
}

/// Divergences between two isotropic Gaussian attention maps.
pub fn kl_view(size: usize, a: (f64, f64), b: (f64, f64), sigma: f64) -> Result<KlView, String> {
    if size == 0 || size > 256 || !(sigma > 0.0) {
        return Err("size must be 1..=256 and sigma positive".into());
    }
    let (p, q) = (blob(size, a, sigma)?, blob(size, b, sigma)?);
    let kl_ab = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
    let kl_ba = kl_divergence(&q, &p).map_err(|e| e.to_string())?;
    Ok(KlView {
        size,
        a: p.values().iter().copied().collect(),
        b: q.values().iter().copied().collect(),
        kl_ab,
        kl_ba,
        j: 0.5 * (kl_ab + kl_ba),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbedView {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    pub explained: [f64; 2],
    pub silhouette: f64,
}

/// Two Gaussian clusters in `dim` dimensions whose means differ by
/// `separation` along every axis, projected by PCA.
pub fn embed_view(per_cluster: usize, dim: usize, separation: f64, seed: u64) -> Result<EmbedView, String> {
    if per_cluster < 2 || dim < 2 || per_cluster > 2000 || dim > 256 {
        return Err("need 2..=2000 points per cluster and 2..=256 dimensions".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * per_cluster;
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i >= per_cluster)).collect();
    let features = Array2::from_shape_fn((n, dim), |(i, _)| {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        z + separation * f64::from(labels[i])
    });
    let pca = pca2(features.view()).map_err(|e| e.to_string())?;
    let s = silhouette(pca.points.view(), &labels).map_err(|e| e.to_string())?;
    Ok(EmbedView {
        points: pca.points.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
        labels,
        explained: pca.explained,
        silhouette: s,
    })
}

fn to_js<T: Serialize>(result: Result<T, String>) -> Result<String, JsValue> {
    result
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn scorecam_demo(row: usize, col: usize, radius: usize, target: u8, seed: u64) -> Result<String, JsValue> {
    to_js(cam_view(row, col, radius, target, seed))
}

#[wasm_bindgen]
pub fn kl_demo(size: usize, ay: f64, ax: f64, by: f64, bx: f64, sigma: f64) -> Result<String, JsValue> {
    to_js(kl_view(size, (ay, ax), (by, bx), sigma))
}

#[wasm_bindgen]
pub fn embed_demo(per_cluster: usize, dim: usize, separation: f64, seed: u64) -> Result<String, JsValue> {
    to_js(embed_view(per_cluster, dim, separation, seed))
}
