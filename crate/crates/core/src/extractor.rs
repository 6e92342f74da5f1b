//! Feature extraction interface and the seeded toy extractor.
//!
//! The toy extractor mirrors vision-transformer token geometry: the image is cut
//! into a grid of square patches, each flattened patch is multiplied by a fixed
//! random orthonormal matrix to give one token per patch, and one extra global
//! token (mean of the patch tokens plus a constant) is appended last. With the
//! default 224 px image, 16 px patches and 3 channels this yields 196 + 1 = 197
//! tokens of 768 values.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_io::{ExtractorInfo, FeatureTensor, Tensor, DEFAULT_FEATURE_DIM};
use crate::{Error, Result};

pub const QUERY_ROWS: usize = 32;
pub const QUERY_COLS: usize = 24;

/// `H x W x C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pixels: Array3<f64>,
}

impl ImageInput {
    /// Rejects non-finite values; clamps the rest into `[0, 1]`.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::shape("image is empty"));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(ImageInput {
            pixels: pixels.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageInput {
            pixels: Array3::zeros((height, width, channels)),
        }
    }

    pub fn from_fn(
        (height, width, channels): (usize, usize, usize),
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, channels), |(r, c, ch)| f(r, c, ch)))
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    /// Pixelwise product with an `H x W` mask in `[0, 1]`, broadcast over channels.
    pub fn masked(&self, mask: ArrayView2<'_, f64>) -> Result<ImageInput> {
        let (h, w, _) = self.dim();
        if mask.dim() != (h, w) {
            return Err(Error::shape(format!(
                "mask shape {:?} does not match image {h}x{w}",
                mask.dim()
            )));
        }
        if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        let mut pixels = self.pixels.clone();
        for ((r, c, _), p) in pixels.indexed_iter_mut() {
            *p *= mask[[r, c]];
        }
        Ok(ImageInput { pixels })
    }

    /// 8-bit quantized tensor (`round(255 v)`).
    pub fn to_u8_tensor(&self) -> Tensor {
        let (h, w, c) = self.dim();
        let data = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        Tensor::u8(vec![h, w, c], data).expect("shape matches data")
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(format!("image must be 3-D, found {shape:?}")));
        }
        let data: Vec<f64> = match tensor.dtype() {
            crate::data_io::DType::U8 => tensor
                .into_u8()?
                .1
                .into_iter()
                .map(|b| f64::from(b) / 255.0)
                .collect(),
            _ => tensor.into_real()?.1,
        };
        Self::new(
            Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
                .map_err(|e| Error::shape(e.to_string()))?,
        )
    }
}

/// `K` spatial activation maps of size `h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    maps: Array3<f64>,
}

impl ActivationStack {
    pub fn new(maps: Array3<f64>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::shape("activation stack needs at least one map"));
        }
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("activation stack contains non-finite values"));
        }
        Ok(ActivationStack { maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map_dim(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    pub fn map(&self, k: usize) -> ArrayView2<'_, f64> {
        self.maps.index_axis(Axis(0), k)
    }

    pub fn maps(&self) -> ArrayView3<'_, f64> {
        self.maps.view()
    }

    pub fn to_tensor(&self) -> Tensor {
        let (k, h, w) = self.maps.dim();
        Tensor::f32(vec![k, h, w], self.maps.iter().map(|&v| v as f32).collect())
            .expect("shape matches data")
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (shape, data) = tensor.into_real()?;
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "activation stack must be (K, h, w), found {shape:?}"
            )));
        }
        Self::new(
            Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
                .map_err(|e| Error::shape(e.to_string()))?,
        )
    }
}

/// Each feature row viewed as a `32 x 24` matrix: `(q, r, c)` is flat `(q, 24 r + c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryView {
    queries: Array3<f32>,
}

impl QueryView {
    pub fn len(&self) -> usize {
        self.queries.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn query(&self, q: usize) -> ArrayView2<'_, f32> {
        self.queries.index_axis(Axis(0), q)
    }

    pub fn get(&self, q: usize, row: usize, col: usize) -> f32 {
        self.queries[[q, row, col]]
    }

    pub fn flatten(&self) -> FeatureTensor {
        let q = self.len();
        let flat = self
            .queries
            .to_shape((q, QUERY_ROWS * QUERY_COLS))
            .expect("standard layout")
            .to_owned();
        FeatureTensor::new(flat).expect("values were finite")
    }
}

pub fn reshape_to_queries(features: &FeatureTensor) -> Result<QueryView> {
    if features.dim() != DEFAULT_FEATURE_DIM {
        return Err(Error::shape(format!(
            "query reshape needs {DEFAULT_FEATURE_DIM} values per token, found {}",
            features.dim()
        )));
    }
    let q = features.queries();
    let queries = features
        .view()
        .to_shape((q, QUERY_ROWS, QUERY_COLS))
        .map_err(|e| Error::shape(e.to_string()))?
        .to_owned();
    Ok(QueryView { queries })
}

/// Produces token features and spatial activation maps for an image.
pub trait FeatureExtractor {
    /// Expected `(height, width, channels)` of inputs.
    fn image_shape(&self) -> (usize, usize, usize);

    fn extract(&self, image: &ImageInput) -> Result<(FeatureTensor, ActivationStack)>;

    fn extract_features(&self, image: &ImageInput) -> Result<FeatureTensor> {
        Ok(self.extract(image)?.0)
    }

    /// Features of `image` multiplied by `mask` (`H x W`, values in `[0, 1]`).
    fn perturbed_extract(
        &self,
        image: &ImageInput,
        mask: ArrayView2<'_, f64>,
    ) -> Result<FeatureTensor> {
        self.extract_features(&image.masked(mask)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyExtractorConfig {
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
}

impl Default for ToyExtractorConfig {
    fn default() -> Self {
        ToyExtractorConfig {
            image_size: 224,
            patch: 16,
            channels: 3,
        }
    }
}

impl ToyExtractorConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn queries(&self) -> usize {
        self.patches() + 1
    }

    /// Index of patch token `(row, col)` in the grid; the global token is last.
    pub fn token_index(&self, row: usize, col: usize) -> usize {
        row * self.grid() + col
    }
}

/// Linear, patch-local extractor with a seeded orthonormal projection.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    config: ToyExtractorConfig,
    seed: u64,
    projection: Array2<f64>,
    global_bias: Array1<f64>,
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_config(ToyExtractorConfig::default(), seed).expect("default config is valid")
    }

    pub fn with_config(config: ToyExtractorConfig, seed: u64) -> Result<Self> {
        let ToyExtractorConfig {
            image_size,
            patch,
            channels,
        } = config;
        if patch == 0 || channels == 0 || image_size == 0 || image_size % patch != 0 {
            return Err(Error::invalid(format!(
                "image size {image_size} must be a positive multiple of patch size {patch}"
            )));
        }
        if config.token_dim() < config.patches() {
            return Err(Error::invalid(
                "token dimension must be at least the number of patches",
            ));
        }
        let d = config.token_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussian = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let qr = gaussian.qr();
        let (q, r) = (qr.q(), qr.r());
        // Fix column signs so the factorization is unique.
        let projection = Array2::from_shape_fn((d, d), |(i, j)| {
            if r[(j, j)] < 0.0 {
                -q[(i, j)]
            } else {
                q[(i, j)]
            }
        });
        let global_bias = Array1::from_shape_fn(d, |_| rng.random_range(-0.1..0.1));
        Ok(ToyExtractor {
            config,
            seed,
            projection,
            global_bias,
        })
    }

    /// Rebuilds the extractor a dataset was generated with.
    pub fn from_info(info: &ExtractorInfo) -> Result<Self> {
        match *info {
            ExtractorInfo::Toy {
                seed,
                image_size,
                patch,
                channels,
            } => Self::with_config(
                ToyExtractorConfig {
                    image_size,
                    patch,
                    channels,
                },
                seed,
            ),
            ExtractorInfo::External { ref model, .. } => Err(Error::invalid(format!(
                "features come from external model {model}; the toy extractor cannot reproduce them"
            ))),
        }
    }

    pub fn info(&self) -> ExtractorInfo {
        ExtractorInfo::Toy {
            seed: self.seed,
            image_size: self.config.image_size,
            patch: self.config.patch,
            channels: self.config.channels,
        }
    }

    pub fn config(&self) -> ToyExtractorConfig {
        self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Orthonormal `D x D` matrix; patch token = flattened patch row times this.
    pub fn projection(&self) -> ArrayView2<'_, f64> {
        self.projection.view()
    }

    pub fn global_bias(&self) -> &Array1<f64> {
        &self.global_bias
    }

    fn check_image(&self, image: &ImageInput) -> Result<()> {
        let expected = self.image_shape();
        if image.dim() != expected {
            return Err(Error::shape(format!(
                "image shape {:?}, extractor expects {expected:?}",
                image.dim()
            )));
        }
        Ok(())
    }

    /// Flattened patches, one row per patch in row-major grid order; each row
    /// is the patch's pixels in `(row, col, channel)` order.
    pub fn patch_matrix(&self, image: &ImageInput) -> Result<Array2<f64>> {
        self.check_image(image)?;
        let ToyExtractorConfig { patch, .. } = self.config;
        let g = self.config.grid();
        let pixels = image.pixels();
        let mut out = Array2::zeros((self.config.patches(), self.config.token_dim()));
        for pr in 0..g {
            for pc in 0..g {
                let block = pixels.slice(s![pr * patch..(pr + 1) * patch, pc * patch..(pc + 1) * patch, ..]);
                let mut row = out.row_mut(self.config.token_index(pr, pc));
                for (dst, src) in row.iter_mut().zip(block.iter()) {
                    *dst = *src;
                }
            }
        }
        Ok(out)
    }

    fn tokens(&self, image: &ImageInput) -> Result<Array2<f64>> {
        Ok(self.patch_matrix(image)?.dot(&self.projection))
    }

    fn assemble(&self, tokens: &Array2<f64>) -> FeatureTensor {
        let (n, d) = tokens.dim();
        let global = tokens.mean_axis(Axis(0)).expect("at least one patch") + &self.global_bias;
        let mut out = Array2::<f32>::zeros((n + 1, d));
        out.slice_mut(s![..n, ..]).assign(&tokens.mapv(|v| v as f32));
        out.row_mut(n).assign(&global.mapv(|v| v as f32));
        FeatureTensor::new(out).expect("finite tokens")
    }

    /// Map `k` holds, at each patch cell, the mean absolute token value over
    /// the `k`-th contiguous group of channels.
    fn activations(&self, tokens: &Array2<f64>) -> ActivationStack {
        let g = self.config.grid();
        let k_maps = self.config.patches();
        let d = self.config.token_dim();
        let mut maps = Array3::zeros((k_maps, g, g));
        for k in 0..k_maps {
            let (lo, hi) = (k * d / k_maps, (k + 1) * d / k_maps);
            for (p, token) in tokens.rows().into_iter().enumerate() {
                let group = token.slice(s![lo..hi]);
                maps[[k, p / g, p % g]] =
                    group.iter().map(|v| v.abs()).sum::<f64>() / (hi - lo) as f64;
            }
        }
        ActivationStack { maps }
    }
}

impl FeatureExtractor for ToyExtractor {
    fn image_shape(&self) -> (usize, usize, usize) {
        let c = self.config;
        (c.image_size, c.image_size, c.channels)
    }

    fn extract(&self, image: &ImageInput) -> Result<(FeatureTensor, ActivationStack)> {
        let tokens = self.tokens(image)?;
        Ok((self.assemble(&tokens), self.activations(&tokens)))
    }

    fn extract_features(&self, image: &ImageInput) -> Result<FeatureTensor> {
        Ok(self.assemble(&self.tokens(image)?))
    }
}
