//! Encoding interface network.
//!
//! Every query (token row) passes through the same two-layer MLP
//! `D -> hidden -> query_out` with an exact GELU in between. The per-query
//! outputs are concatenated into the condensed feature (`Q * query_out`
//! values) and an affine head maps it to `V` voxel predictions.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{load_tensor, save_tensor, FeatureTensor, Tensor};
use crate::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub queries: usize,
    pub dim: usize,
    pub hidden: usize,
    pub query_out: usize,
    pub voxels: usize,
}

impl EncoderConfig {
    /// Default widths (197 x 768 input, hidden 256, query_out 64) for `voxels` outputs.
    pub fn with_voxels(voxels: usize) -> Self {
        EncoderConfig {
            queries: 197,
            dim: 768,
            hidden: 256,
            query_out: 64,
            voxels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("queries", self.queries),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("query_out", self.query_out),
            ("voxels", self.voxels),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::invalid(format!("encoder {name} must be positive"))),
            None => Ok(()),
        }
    }

    pub fn condensed_len(&self) -> usize {
        self.queries * self.query_out
    }
}

/// Weights and biases. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_head: Array2<f64>,
    pub b_head: Array1<f64>,
}

pub type EncoderGrads = EncoderParams;

pub const TENSOR_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w_head", "b_head"];

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let EncoderConfig {
            queries,
            dim,
            hidden,
            query_out,
            voxels,
        } = *config;
        EncoderParams {
            w1: Array2::zeros((dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, query_out)),
            b2: Array1::zeros(query_out),
            w_head: Array2::zeros((queries * query_out, voxels)),
            b_head: Array1::zeros(voxels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            w_head: Array2::zeros(self.w_head.raw_dim()),
            b_head: Array1::zeros(self.b_head.raw_dim()),
        }
    }

    /// Configuration implied by the tensor shapes.
    pub fn config(&self) -> EncoderConfig {
        let query_out = self.w2.ncols();
        EncoderConfig {
            queries: self.w_head.nrows() / query_out.max(1),
            dim: self.w1.nrows(),
            hidden: self.w1.ncols(),
            query_out,
            voxels: self.w_head.ncols(),
        }
    }

    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        let expected = EncoderParams::zeros(config);
        let shapes = |p: &EncoderParams| -> Vec<Vec<usize>> {
            p.tensors().iter().map(|(_, s, _)| s.clone()).collect()
        };
        if shapes(self) != shapes(&expected) {
            return Err(Error::shape(format!(
                "parameter shapes {:?} do not match config {config:?}",
                shapes(self)
            )));
        }
        Ok(())
    }

    /// `(name, shape, values)` in a fixed order.
    pub fn tensors(&self) -> [(&'static str, Vec<usize>, &[f64]); 6] {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("parameters are kept in standard layout")
        }
        [
            ("w1", self.w1.shape().to_vec(), flat(&self.w1)),
            ("b1", self.b1.shape().to_vec(), flat(&self.b1)),
            ("w2", self.w2.shape().to_vec(), flat(&self.w2)),
            ("b2", self.b2.shape().to_vec(), flat(&self.b2)),
            ("w_head", self.w_head.shape().to_vec(), flat(&self.w_head)),
            ("b_head", self.b_head.shape().to_vec(), flat(&self.b_head)),
        ]
    }

    /// Mutable flat views in the same order as [`EncoderParams::tensors`].
    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        fn flat<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("parameters are kept in standard layout")
        }
        [
            flat(&mut self.w1),
            flat(&mut self.b1),
            flat(&mut self.w2),
            flat(&mut self.b2),
            flat(&mut self.w_head),
            flat(&mut self.b_head),
        ]
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
        self.w_head += &other.w_head;
        self.b_head += &other.b_head;
    }

    pub fn scale(&mut self, factor: f64) {
        for slice in self.slices_mut() {
            slice.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// FNV-1a over every parameter bit pattern; used to detect stale traces.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, shape, values) in self.tensors() {
            for &d in &shape {
                h = (h ^ d as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in values {
                h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn uniform_fan(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Fan-scaled uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = EncoderParams::zeros(config);
    p.w1 = uniform_fan(&mut rng, config.dim, config.hidden);
    p.w2 = uniform_fan(&mut rng, config.hidden, config.query_out);
    p.w_head = uniform_fan(&mut rng, config.condensed_len(), config.voxels);
    Ok(p)
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    hidden: Array2<f64>,
    condensed: Array1<f64>,
    params_fingerprint: u64,
}

impl ForwardTrace {
    pub fn condensed(&self) -> &Array1<f64> {
        &self.condensed
    }

    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }
}

fn check_input(params: &EncoderParams, features: &FeatureTensor) -> Result<()> {
    let cfg = params.config();
    if (features.queries(), features.dim()) != (cfg.queries, cfg.dim) {
        return Err(Error::shape(format!(
            "features {}x{}, encoder expects {}x{}",
            features.queries(),
            features.dim(),
            cfg.queries,
            cfg.dim
        )));
    }
    Ok(())
}

fn run(params: &EncoderParams, features: &FeatureTensor) -> Result<ForwardTrace> {
    check_input(params, features)?;
    let input = features.to_f64();
    let pre_activation = input.dot(&params.w1) + &params.b1;
    let hidden = pre_activation.mapv(gelu);
    let per_query = hidden.dot(&params.w2) + &params.b2;
    let condensed = per_query
        .to_shape(params.w_head.nrows())
        .map_err(|e| Error::shape(e.to_string()))?
        .into_owned();
    Ok(ForwardTrace {
        input,
        pre_activation,
        hidden,
        condensed,
        params_fingerprint: params.fingerprint(),
    })
}

/// Voxel predictions plus the trace needed by [`backward`].
pub fn forward(params: &EncoderParams, features: &FeatureTensor) -> Result<(Array1<f64>, ForwardTrace)> {
    let trace = run(params, features)?;
    let prediction = trace.condensed.dot(&params.w_head) + &params.b_head;
    Ok((prediction, trace))
}

/// Prediction only; skips keeping the trace.
pub fn predict(params: &EncoderParams, features: &FeatureTensor) -> Result<Array1<f64>> {
    Ok(forward(params, features)?.0)
}

/// The concatenated per-query outputs that feed the voxel head.
pub fn condensed_feature(params: &EncoderParams, features: &FeatureTensor) -> Result<Array1<f64>> {
    Ok(run(params, features)?.condensed)
}

/// Gradients of `prediction . grad_out` with respect to every parameter.
pub fn backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_out: ArrayView1<'_, f64>,
) -> Result<EncoderGrads> {
    let cfg = params.config();
    if grad_out.len() != cfg.voxels {
        return Err(Error::shape(format!(
            "grad_out has {} entries, encoder has {} voxels",
            grad_out.len(),
            cfg.voxels
        )));
    }
    if trace.params_fingerprint != params.fingerprint()
        || trace.condensed.len() != cfg.condensed_len()
    {
        return Err(Error::invalid("forward trace does not belong to these parameters"));
    }

    let mut grads = params.zeros_like();
    grads.b_head.assign(&grad_out);
    let g_col = grad_out.insert_axis(Axis(0));
    let c_col = trace.condensed.view().insert_axis(Axis(1));
    grads.w_head.assign(&c_col.dot(&g_col));

    let d_condensed = params.w_head.dot(&grad_out);
    let d_per_query = d_condensed
        .to_shape((cfg.queries, cfg.query_out))
        .map_err(|e| Error::shape(e.to_string()))?
        .into_owned();
    grads.w2.assign(&trace.hidden.t().dot(&d_per_query));
    grads.b2 = d_per_query.sum_axis(Axis(0));

    let mut d_pre = d_per_query.dot(&params.w2.t());
    ndarray::Zip::from(&mut d_pre)
        .and(&trace.pre_activation)
        .for_each(|d, &a| *d *= gelu_derivative(a));
    grads.w1.assign(&trace.input.t().dot(&d_pre));
    grads.b1 = d_pre.sum_axis(Axis(0));
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamsManifest {
    format: String,
    version: u32,
    config: EncoderConfig,
    seed: u64,
    tensors: std::collections::BTreeMap<String, TensorEntry>,
}

const MANIFEST_FORMAT: &str = "visenc-encoder";

/// Writes `manifest.json` plus one f64 VISF file per tensor into `dir`.
pub fn save_params(params: &EncoderParams, seed: u64, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = std::collections::BTreeMap::new();
    for (name, shape, values) in params.tensors() {
        let file = format!("{name}.visf");
        save_tensor(&Tensor::f64(shape.clone(), values.to_vec())?, dir.join(&file))?;
        tensors.insert(name.to_string(), TensorEntry { file, shape });
    }
    let manifest = ParamsManifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        config: params.config(),
        seed,
        tensors,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Loads a bundle written by [`save_params`]; returns the parameters and their init seed.
pub fn load_params(dir: impl AsRef<Path>) -> Result<(EncoderParams, u64)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ParamsManifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(Error::invalid(format!(
            "unsupported parameter manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    let config = manifest.config;
    config.validate()?;
    let expected = EncoderParams::zeros(&config);
    let mut params = expected.clone();
    for ((name, shape, _), slot) in expected.tensors().into_iter().zip(params.slices_mut()) {
        let entry = manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("manifest lacks tensor {name}")))?;
        if entry.shape != shape {
            return Err(Error::shape(format!(
                "{name}: manifest shape {:?} disagrees with config shape {shape:?}",
                entry.shape
            )));
        }
        let (file_shape, values) = load_tensor(dir.join(&entry.file))?.into_f64()?;
        if file_shape != shape {
            return Err(Error::shape(format!(
                "{name}: file shape {file_shape:?}, manifest says {shape:?}"
            )));
        }
        slot.copy_from_slice(&values);
    }
    Ok((params, manifest.seed))
}

/// Rows of the head belonging to query `q`.
pub fn head_block(params: &EncoderParams, q: usize) -> ndarray::ArrayView2<'_, f64> {
    let qo = params.w2.ncols();
    params.w_head.slice(s![q * qo..(q + 1) * qo, ..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features(q: usize, d: usize, seed: u64) -> FeatureTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureTensor::new(Array2::from_shape_simple_fn((q, d), || rng.random_range(-2.0f32..2.0)))
            .unwrap()
    }

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            queries: 3,
            dim: 5,
            hidden: 4,
            query_out: 2,
            voxels: 3,
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        // 1 * Phi(1) = 0.5 * (1 + erf(1 / sqrt 2))
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-22);
        assert!(gelu(-10.0) < 0.0);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn init_is_seeded_bounded_and_zero_biased() {
        let cfg = EncoderConfig {
            queries: 2,
            dim: 768,
            hidden: 4,
            query_out: 3,
            voxels: 5,
        };
        let a = init_params(&cfg, 9).unwrap();
        assert_eq!(a, init_params(&cfg, 9).unwrap());
        assert_ne!(a, init_params(&cfg, 10).unwrap());
        let bound = (6.0f64 / 772.0).sqrt();
        assert!(a.w1.iter().all(|w| w.abs() <= bound));
        for b in [&a.b1, &a.b2, &a.b_head] {
            assert!(b.iter().all(|&v| v == 0.0));
        }
        assert!(init_params(&EncoderConfig { hidden: 0, ..cfg }, 0).is_err());
    }

    #[test]
    fn zero_params_predict_head_bias() {
        let cfg = tiny_config();
        let mut p = EncoderParams::zeros(&cfg);
        p.b_head = Array1::from(vec![0.5, -1.0, 2.0]);
        let (pred, trace) = forward(&p, &features(3, 5, 1)).unwrap();
        assert_eq!(pred, p.b_head);
        assert!(trace.condensed().iter().all(|&v| v == 0.0));
        assert_eq!(condensed_feature(&p, &features(3, 5, 2)).unwrap(), Array1::<f64>::zeros(6));
    }

    #[test]
    fn hand_computed_scalar_network() {
        let cfg = EncoderConfig {
            queries: 1,
            dim: 2,
            hidden: 1,
            query_out: 1,
            voxels: 1,
        };
        let mut p = EncoderParams::zeros(&cfg);
        p.w1 = Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap();
        p.w2 = Array2::from_elem((1, 1), 1.0);
        p.w_head = Array2::from_elem((1, 1), 2.0);
        p.b_head = Array1::from(vec![3.0]);
        let f = FeatureTensor::new(Array2::from_shape_vec((1, 2), vec![5.0, 7.0]).unwrap()).unwrap();
        let (pred, _) = forward(&p, &f).unwrap();
        // 2 * 5 * Phi(5) + 3, Phi(5) = 0.99999971334842808
        let expect = 2.0 * 5.0 * 0.999_999_713_348_428_1 + 3.0;
        assert!((pred[0] - expect).abs() < 1e-9);
        assert!((pred[0] - 12.999_997).abs() < 1e-5);
    }

    #[test]
    fn output_length_and_shape_errors() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 0).unwrap();
        assert_eq!(predict(&p, &features(3, 5, 0)).unwrap().len(), 3);
        assert!(matches!(forward(&p, &features(3, 4, 0)), Err(Error::Shape(_))));
        assert!(matches!(forward(&p, &features(2, 5, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn condensed_length_at_defaults() {
        assert_eq!(EncoderConfig::with_voxels(10).condensed_len(), 12_608);
    }

    #[test]
    fn backward_trivial_cases() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 4).unwrap();
        let (_, trace) = forward(&p, &features(3, 5, 4)).unwrap();
        let zero = backward(&p, &trace, Array1::zeros(3).view()).unwrap();
        assert_eq!(zero, p.zeros_like());
        let g = Array1::from(vec![0.25, -1.5, 3.0]);
        let grads = backward(&p, &trace, g.view()).unwrap();
        assert_eq!(grads.b_head, g);
    }

    #[test]
    fn unit_widths_keep_standard_layout() {
        // Products with a width of one can come back column-major from ndarray.
        for (q, d) in [(1, 1), (3, 1), (1, 4), (2, 3)] {
            let cfg = EncoderConfig {
                queries: q,
                dim: d,
                hidden: 1,
                query_out: 1,
                voxels: 1,
            };
            let params = init_params(&cfg, 3).unwrap();
            let (pred, trace) = forward(&params, &features(q, d, 5)).unwrap();
            let grads = backward(&params, &trace, Array1::ones(1).view()).unwrap();
            assert_eq!(pred.len(), 1);
            assert!(grads.is_finite());
            assert_eq!(grads.tensors()[0].2.len(), d);
        }
    }

    #[test]
    fn stale_or_mismatched_trace_rejected() {
        let cfg = tiny_config();
        let mut p = init_params(&cfg, 4).unwrap();
        let (_, trace) = forward(&p, &features(3, 5, 4)).unwrap();
        assert!(backward(&p, &trace, Array1::zeros(2).view()).is_err());
        p.w2[[0, 0]] += 1.0;
        assert!(backward(&p, &trace, Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn save_load_round_trip_and_identical_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let p = init_params(&cfg, 12).unwrap();
        save_params(&p, 12, dir.path()).unwrap();
        let (back, seed) = load_params(dir.path()).unwrap();
        assert_eq!(seed, 12);
        assert_eq!(back, p);
        let f = features(3, 5, 8);
        assert_eq!(predict(&back, &f).unwrap(), predict(&p, &f).unwrap());
    }

    #[test]
    fn corrupted_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params(&tiny_config(), 1).unwrap();
        save_params(&p, 1, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_params(dir.path()), Err(Error::Json(_))));

        let bad_shape = text.replacen("\"hidden\": 4", "\"hidden\": 5", 1);
        fs::write(&path, bad_shape).unwrap();
        assert!(matches!(load_params(dir.path()), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // With every query's head block identical, swapping two queries' inputs
        // leaves the prediction unchanged while swapping their condensed blocks.
        #[test]
        fn query_weights_are_shared(seed in any::<u64>(), a in 0usize..3, b in 0usize..3) {
            let cfg = tiny_config();
            let mut p = init_params(&cfg, seed).unwrap();
            let block = head_block(&p, 0).to_owned();
            for q in 1..cfg.queries {
                p.w_head.slice_mut(s![q * 2..q * 2 + 2, ..]).assign(&block);
            }
            let f = features(3, 5, seed ^ 1);
            let mut swapped = f.clone().into_inner();
            let (ra, rb) = (swapped.row(a).to_owned(), swapped.row(b).to_owned());
            swapped.row_mut(a).assign(&rb);
            swapped.row_mut(b).assign(&ra);
            let g = FeatureTensor::new(swapped).unwrap();

            let (pf, tf) = forward(&p, &f).unwrap();
            let (pg, tg) = forward(&p, &g).unwrap();
            for (x, y) in pf.iter().zip(pg.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(tf.condensed().slice(s![a * 2..a * 2 + 2]), tg.condensed().slice(s![b * 2..b * 2 + 2]));
        }

        #[test]
        fn condensed_matches_forward_intermediate(seed in any::<u64>()) {
            let p = init_params(&tiny_config(), seed).unwrap();
            let f = features(3, 5, seed);
            let (_, trace) = forward(&p, &f).unwrap();
            prop_assert_eq!(&condensed_feature(&p, &f).unwrap(), trace.condensed());
        }
    }
}
