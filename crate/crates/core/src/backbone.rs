//! Progressive synthesis backbone.
//!
//! A backbone maps a latent `z` to a per-layer code (`W+`), then runs `L`
//! blocks `f(l) = block_l(f(l-1), w(l))` starting from a constant tensor.
//! The image is the sum of RGB heads attached to a subset of layers, each
//! upsampled to the output resolution.
//!
//! Layer numbers in configuration (RGB layer sets, edit cutoffs, toggles) are
//! 1-based. Vectors of per-layer data are indexed from 0, so layer `l` lives
//! at index `l - 1`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::{self, BlobEntry, Precision};
use crate::error::{CoralError, Result};
use crate::tensor::{FeatureMap, ImageRgb, ParamTensors, Tensor};

pub const CHECKPOINT_FORMAT: &str = "coral-backbone";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Seed of the toy backbone used when no checkpoint is given.
pub const DEFAULT_TOY_SEED: u64 = 7;
const MANIFEST_FILE: &str = "manifest.toml";
const LEAKY_SLOPE: f64 = 0.2;

/// A point in the input latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentZ(pub Vec<f64>);

impl LatentZ {
    /// Standard normal draw from `ChaCha8Rng::seed_from_u64(seed)`, consuming
    /// `dim` samples of `rand_distr::StandardNormal` in order. This is the
    /// seed-to-latent mapping used everywhere a seed crosses an API boundary.
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentZ::sample(&mut rng, dim)
    }

    pub fn sample<R: Rng>(rng: &mut R, dim: usize) -> Self {
        LatentZ((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Per-layer extended latent code: `layers` rows of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct WPlusCode {
    layers: usize,
    dim: usize,
    data: Vec<f64>,
}

impl WPlusCode {
    pub fn zeros(layers: usize, dim: usize) -> Self {
        WPlusCode {
            layers,
            dim,
            data: vec![0.0; layers * dim],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let layers = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(CoralError::DimensionMismatch {
                what: "w+ row",
                expected: dim,
                got: bad.len(),
            });
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoralError::InvalidArgument("w+ code has non-finite entries".into()));
        }
        Ok(WPlusCode { layers, dim, data })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row at 0-based index `index`.
    pub fn row(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn row_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn check_shape(&self, config: &BackboneConfig) -> Result<()> {
        if self.layers != config.layer_count {
            return Err(CoralError::DimensionMismatch {
                what: "w+ layer count",
                expected: config.layer_count,
                got: self.layers,
            });
        }
        if self.dim != config.latent_dim {
            return Err(CoralError::DimensionMismatch {
                what: "w+ latent dim",
                expected: config.latent_dim,
                got: self.dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layer_count: usize,
    pub latent_dim: usize,
    /// Square feature resolution of each layer.
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    /// 1-based layers carrying an RGB head.
    pub rgb_layers: Vec<usize>,
    pub const_resolution: usize,
    pub const_channels: usize,
}

impl BackboneConfig {
    /// Six-block desk-scale configuration: resolutions 4,4,8,8,16,32 with 16
    /// channels and RGB heads on layers 2, 4 and 6.
    pub fn toy() -> Self {
        BackboneConfig {
            layer_count: 6,
            latent_dim: 32,
            resolutions: vec![4, 4, 8, 8, 16, 32],
            channels: vec![16; 6],
            rgb_layers: vec![2, 4, 6],
            const_resolution: 4,
            const_channels: 16,
        }
    }

    /// The 18-block, 1024x1024 layout of a StyleGAN2 FFHQ generator.
    pub fn stylegan2_1024() -> Self {
        let resolutions: Vec<usize> = (0..18).map(|l| 4usize << (l / 2)).collect();
        let channels = resolutions
            .iter()
            .map(|&r| match r {
                0..=64 => 512,
                128 => 256,
                256 => 128,
                512 => 64,
                _ => 32,
            })
            .collect();
        BackboneConfig {
            layer_count: 18,
            latent_dim: 512,
            resolutions,
            channels,
            rgb_layers: (1..=9).map(|k| 2 * k).collect(),
            const_resolution: 4,
            const_channels: 512,
        }
    }

    pub fn image_resolution(&self) -> usize {
        *self.resolutions.last().unwrap_or(&0)
    }

    /// Resolution of layer `l`'s input (index `l - 1` is its output).
    pub fn input_resolution(&self, index: usize) -> usize {
        if index == 0 {
            self.const_resolution
        } else {
            self.resolutions[index - 1]
        }
    }

    pub fn input_channels(&self, index: usize) -> usize {
        if index == 0 {
            self.const_channels
        } else {
            self.channels[index - 1]
        }
    }

    pub fn upsample_factor(&self, index: usize) -> usize {
        self.resolutions[index] / self.input_resolution(index)
    }

    pub fn has_rgb(&self, index: usize) -> bool {
        self.rgb_layers.contains(&(index + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(CoralError::InvalidArgument(reason));
        let l = self.layer_count;
        if l == 0 || self.latent_dim == 0 {
            return bad("layer count and latent dim must be positive".into());
        }
        if self.resolutions.len() != l || self.channels.len() != l {
            return bad(format!("need {l} resolutions and channel counts"));
        }
        if self.channels.iter().any(|&c| c == 0) || self.const_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.rgb_layers.is_empty() || self.rgb_layers.iter().any(|&r| r == 0 || r > l) {
            return bad(format!("rgb layers must be a non-empty subset of 1..={l}"));
        }
        if self.const_resolution == 0 {
            return bad("constant resolution must be positive".into());
        }
        for index in 0..l {
            let prev = self.input_resolution(index);
            let cur = self.resolutions[index];
            if cur != prev && cur != 2 * prev {
                return bad(format!(
                    "layer {} resolution {cur} must equal or double {prev}",
                    index + 1
                ));
            }
        }
        Ok(())
    }
}

/// A synthesis network that can be driven block by block.
///
/// Block indices are 0-based. Implementations are immutable after
/// construction and safe to share across threads.
pub trait Synthesis: Send + Sync {
    fn config(&self) -> &BackboneConfig;

    /// Stable identifier of the weights; edit artifacts are bound to it.
    fn fingerprint(&self) -> &str;

    fn map_latent(&self, z: &LatentZ) -> Result<WPlusCode>;

    fn constant_input(&self) -> &FeatureMap;

    fn block(&self, index: usize, input: &FeatureMap, w: &[f64]) -> Result<FeatureMap>;

    /// Vector-Jacobian product of [`block`](Self::block): returns the
    /// gradients with respect to the block input and the layer code.
    fn block_vjp(
        &self,
        index: usize,
        input: &FeatureMap,
        w: &[f64],
        grad_out: &FeatureMap,
    ) -> Result<(FeatureMap, Vec<f64>)>;

    /// RGB contribution of layer `index` at the output resolution, or `None`
    /// if the layer has no head.
    fn to_rgb(&self, index: usize, features: &FeatureMap) -> Option<ImageRgb>;

    /// Gradient with respect to the layer features given the image gradient.
    fn to_rgb_vjp(&self, index: usize, grad_image: &ImageRgb) -> Option<FeatureMap>;
}

/// Plain forward pass. Returns the image and every layer's features.
pub fn forward(backbone: &dyn Synthesis, w: &WPlusCode) -> Result<(ImageRgb, Vec<FeatureMap>)> {
    let config = backbone.config();
    w.check_shape(config)?;
    let res = config.image_resolution();
    let mut image = FeatureMap::zeros(res, res, 3);
    let mut features: Vec<FeatureMap> = Vec::with_capacity(config.layer_count);
    for index in 0..config.layer_count {
        let input = features.last().unwrap_or(backbone.constant_input());
        let f = backbone.block(index, input, w.row(index))?;
        if let Some(rgb) = backbone.to_rgb(index, &f) {
            image.add_assign(&rgb);
        }
        features.push(f);
    }
    Ok((image, features))
}

/// Gradient of `<grad_image, forward(w).image>` with respect to `w`.
pub fn forward_vjp(backbone: &dyn Synthesis, w: &WPlusCode, grad_image: &ImageRgb) -> Result<WPlusCode> {
    let (_, features) = forward(backbone, w)?;
    features_vjp(backbone, w, &features, grad_image)
}

/// [`forward_vjp`] reusing the features of an earlier [`forward`] of `w`.
pub fn features_vjp(
    backbone: &dyn Synthesis,
    w: &WPlusCode,
    features: &[FeatureMap],
    grad_image: &ImageRgb,
) -> Result<WPlusCode> {
    let config = backbone.config();
    w.check_shape(config)?;
    if features.len() != config.layer_count {
        return Err(CoralError::DimensionMismatch {
            what: "feature list length",
            expected: config.layer_count,
            got: features.len(),
        });
    }
    let res = config.image_resolution();
    if grad_image.shape() != (res, res, 3) {
        return Err(CoralError::ShapeMismatch(format!(
            "image gradient is {:?}, expected {res}x{res}x3",
            grad_image.shape()
        )));
    }
    let mut grad_w = WPlusCode::zeros(config.layer_count, config.latent_dim);
    let mut grad: Option<FeatureMap> = None;
    for index in (0..config.layer_count).rev() {
        let mut g = grad.take().unwrap_or_else(|| {
            let f = &features[index];
            FeatureMap::zeros(f.height, f.width, f.channels)
        });
        if let Some(gr) = backbone.to_rgb_vjp(index, grad_image) {
            g.add_assign(&gr);
        }
        let input = if index == 0 {
            backbone.constant_input()
        } else {
            &features[index - 1]
        };
        let (g_in, g_w) = backbone.block_vjp(index, input, w.row(index), &g)?;
        grad_w.row_mut(index).copy_from_slice(&g_w);
        grad = Some(g_in);
    }
    Ok(grad_w)
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn filled_tensor(shape: &[usize], value: f64) -> Tensor {
    Tensor {
        shape: shape.to_vec(),
        data: vec![value; shape.iter().product()],
    }
}

/// 3x3 "same" convolution. `weight` is laid out `(3, 3, c_in, c_out)`.
pub(crate) fn conv3x3(input: &FeatureMap, weight: &[f64], bias: &[f64]) -> FeatureMap {
    let (h, w, cin) = input.shape();
    let cout = bias.len();
    let mut out = FeatureMap::zeros(h, w, cout);
    for i in 0..h {
        for j in 0..w {
            let start = (i * w + j) * cout;
            let acc = &mut out.data[start..start + cout];
            acc.copy_from_slice(bias);
            for di in 0..3 {
                let ii = i + di;
                if ii < 1 || ii > h {
                    continue;
                }
                for dj in 0..3 {
                    let jj = j + dj;
                    if jj < 1 || jj > w {
                        continue;
                    }
                    let px = input.pixel(ii - 1, jj - 1);
                    let kbase = (di * 3 + dj) * cin * cout;
                    for (ci, &x) in px.iter().enumerate() {
                        let k = &weight[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(k) {
                            *a += x * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`] with respect to its input.
pub(crate) fn conv3x3_adjoint(grad_out: &FeatureMap, weight: &[f64], cin: usize) -> FeatureMap {
    let (h, w, cout) = grad_out.shape();
    let mut out = FeatureMap::zeros(h, w, cin);
    for i in 0..h {
        for j in 0..w {
            let g = grad_out.pixel(i, j);
            for di in 0..3 {
                let ii = i + di;
                if ii < 1 || ii > h {
                    continue;
                }
                for dj in 0..3 {
                    let jj = j + dj;
                    if jj < 1 || jj > w {
                        continue;
                    }
                    let kbase = (di * 3 + dj) * cin * cout;
                    let dst = out.pixel_mut(ii - 1, jj - 1);
                    for (ci, d) in dst.iter_mut().enumerate() {
                        let k = &weight[kbase + ci * cout..kbase + (ci + 1) * cout];
                        *d += k.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct MappingNet {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    offsets: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    /// `(c_in, d)`: style = affine_w * w + affine_b.
    affine_w: Tensor,
    affine_b: Tensor,
    /// `(3, 3, c_in, c_out)`.
    conv_w: Tensor,
    conv_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct RgbHead {
    /// `(c, 3)`.
    w: Tensor,
    b: Tensor,
}

/// Modulated-convolution backbone.
///
/// Each block upsamples its input (nearest, when the layer doubles the
/// resolution), scales every input channel by an affine projection of the
/// layer code, applies a 3x3 convolution with bias and a `tanh`. RGB heads
/// are 1x1 convolutions whose outputs are nearest-upsampled to the image
/// resolution and summed. The mapping network is a two-layer perceptron
/// shared by all layers plus a learned per-layer offset.
#[derive(Debug, Clone)]
pub struct ModulatedBackbone {
    config: BackboneConfig,
    mapping: MappingNet,
    constant: FeatureMap,
    blocks: Vec<Block>,
    rgb: Vec<Option<RgbHead>>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    format_version: u32,
    #[serde(flatten)]
    config: BackboneConfig,
    blobs: Vec<BlobEntry>,
}

impl ModulatedBackbone {
    /// Fixed-seed initialisation. Weights are unit-variance normals scaled by
    /// fan-in and rounded to `f32`, so a saved checkpoint reloads exactly.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.latent_dim;
        let inv_d = 1.0 / (d as f64).sqrt();
        let mapping = MappingNet {
            w1: normal_tensor(&mut rng, &[d, d], inv_d),
            b1: Tensor::zeros(&[d]),
            w2: normal_tensor(&mut rng, &[d, d], inv_d),
            b2: Tensor::zeros(&[d]),
            offsets: normal_tensor(&mut rng, &[config.layer_count, d], 0.3),
        };
        let cr = config.const_resolution;
        let constant_t = normal_tensor(&mut rng, &[cr, cr, config.const_channels], 1.0);
        let constant = FeatureMap::from_vec(cr, cr, config.const_channels, constant_t.data)?;
        let mut blocks = Vec::with_capacity(config.layer_count);
        let mut rgb = Vec::with_capacity(config.layer_count);
        let rgb_bias = 0.5 / config.rgb_layers.len() as f64;
        for index in 0..config.layer_count {
            let cin = config.input_channels(index);
            let cout = config.channels[index];
            blocks.push(Block {
                affine_w: normal_tensor(&mut rng, &[cin, d], 0.5 * inv_d),
                affine_b: filled_tensor(&[cin], 1.0),
                conv_w: normal_tensor(&mut rng, &[3, 3, cin, cout], 1.0 / ((9 * cin) as f64).sqrt()),
                conv_b: Tensor::zeros(&[cout]),
            });
            rgb.push(if config.has_rgb(index) {
                Some(RgbHead {
                    w: normal_tensor(&mut rng, &[cout, 3], 1.0 / (cout as f64).sqrt()),
                    b: filled_tensor(&[3], rgb_bias),
                })
            } else {
                None
            });
        }
        let mut backbone = ModulatedBackbone {
            config,
            mapping,
            constant,
            blocks,
            rgb,
            fingerprint: String::new(),
        };
        backbone.round_to_f32();
        backbone.fingerprint = backbone.compute_fingerprint();
        Ok(backbone)
    }

    /// The desk-scale backbone used by tests, examples and the default CLI.
    pub fn toy(seed: u64) -> Self {
        ModulatedBackbone::random(BackboneConfig::toy(), seed).expect("toy config is valid")
    }

    fn round_to_f32(&mut self) {
        ParamTensors::round_to_f32(self);
        for v in &mut self.constant.data {
            *v = *v as f32 as f64;
        }
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let c = &self.constant;
        out.push((
            "constant".into(),
            Tensor {
                shape: vec![c.height, c.width, c.channels],
                data: c.data.clone(),
            },
        ));
        out
    }

    fn compute_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(toml::to_string(&self.config).unwrap_or_default().as_bytes());
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            hasher.update(blob::encode(&t, Precision::F32));
        }
        hex::encode(&hasher.finalize()[..8])
    }

    /// Writes a checkpoint directory: `manifest.toml` plus one blob per
    /// parameter tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoralError::io(dir, e))?;
        let mut blobs = Vec::new();
        for (name, t) in self.named_tensors() {
            let file = format!("{name}.bin");
            let sha256 = blob::write(&dir.join(&file), &t, Precision::F32)?;
            blobs.push(BlobEntry { name, file, sha256 });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            blobs,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| CoralError::layout(dir, format!("manifest encoding: {e}")))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| CoralError::io(path, e))
    }

    /// Loads a checkpoint written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CoralError::io(&path, e))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| CoralError::layout(&path, e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(CoralError::layout(&path, format!("unknown format {:?}", manifest.format)));
        }
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(CoralError::VersionMismatch {
                path,
                reason: format!(
                    "format version {} (supported: {CHECKPOINT_VERSION})",
                    manifest.format_version
                ),
            });
        }
        manifest
            .config
            .validate()
            .map_err(|e| CoralError::layout(&path, e.to_string()))?;
        // Build the parameter skeleton from the config, then fill it.
        let mut backbone = ModulatedBackbone::random(manifest.config, 0)?;
        blob::load_params(dir, "", &manifest.blobs, &mut backbone)?;
        let entry = manifest
            .blobs
            .iter()
            .find(|e| e.name == "constant")
            .ok_or_else(|| CoralError::layout(&path, "missing constant blob"))?;
        let constant = blob::read(&dir.join(&entry.file), Some(&entry.sha256))?;
        let c = &backbone.constant;
        if constant.shape != [c.height, c.width, c.channels] {
            return Err(CoralError::layout(&path, "constant tensor has the wrong shape"));
        }
        backbone.constant.data = constant.data;
        backbone.fingerprint = backbone.compute_fingerprint();
        Ok(backbone)
    }

    /// Loads a checkpoint and checks it against the layer count the caller
    /// was built for.
    pub fn load_expecting(dir: &Path, layer_count: usize) -> Result<Self> {
        let backbone = ModulatedBackbone::load(dir)?;
        if backbone.config.layer_count != layer_count {
            return Err(CoralError::VersionMismatch {
                path: dir.to_path_buf(),
                reason: format!(
                    "checkpoint has {} layers, expected {layer_count}",
                    backbone.config.layer_count
                ),
            });
        }
        Ok(backbone)
    }

    fn check_block_input(&self, index: usize, input: &FeatureMap, w: &[f64]) -> Result<()> {
        if index >= self.config.layer_count {
            return Err(CoralError::InvalidArgument(format!("no block at index {index}")));
        }
        let res = self.config.input_resolution(index);
        let ch = self.config.input_channels(index);
        if input.shape() != (res, res, ch) {
            return Err(CoralError::ShapeMismatch(format!(
                "layer {} expects input {res}x{res}x{ch}, got {:?}",
                index + 1,
                input.shape()
            )));
        }
        if w.len() != self.config.latent_dim {
            return Err(CoralError::DimensionMismatch {
                what: "layer code",
                expected: self.config.latent_dim,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn style(&self, index: usize, w: &[f64]) -> Vec<f64> {
        let block = &self.blocks[index];
        let d = self.config.latent_dim;
        block
            .affine_b
            .data
            .iter()
            .enumerate()
            .map(|(c, &b)| {
                b + block.affine_w.data[c * d..(c + 1) * d]
                    .iter()
                    .zip(w)
                    .map(|(a, x)| a * x)
                    .sum::<f64>()
            })
            .collect()
    }

    fn modulated_input(&self, index: usize, input: &FeatureMap, style: &[f64]) -> (FeatureMap, FeatureMap) {
        let x = input.upsample_nearest(self.config.upsample_factor(index));
        let mut y = x.clone();
        for px in y.data.chunks_exact_mut(style.len()) {
            for (v, s) in px.iter_mut().zip(style) {
                *v *= s;
            }
        }
        (x, y)
    }
}

impl ParamTensors for ModulatedBackbone {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let m = &self.mapping;
        let mut out = vec![
            ("mapping.w1".to_string(), &m.w1),
            ("mapping.b1".to_string(), &m.b1),
            ("mapping.w2".to_string(), &m.w2),
            ("mapping.b2".to_string(), &m.b2),
            ("mapping.offsets".to_string(), &m.offsets),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            let l = k + 1;
            out.push((format!("block{l}.affine_w"), &b.affine_w));
            out.push((format!("block{l}.affine_b"), &b.affine_b));
            out.push((format!("block{l}.conv_w"), &b.conv_w));
            out.push((format!("block{l}.conv_b"), &b.conv_b));
        }
        for (k, head) in self.rgb.iter().enumerate() {
            if let Some(h) = head {
                out.push((format!("rgb{}.w", k + 1), &h.w));
                out.push((format!("rgb{}.b", k + 1), &h.b));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let m = &mut self.mapping;
        let mut out = vec![&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2, &mut m.offsets];
        for b in &mut self.blocks {
            out.push(&mut b.affine_w);
            out.push(&mut b.affine_b);
            out.push(&mut b.conv_w);
            out.push(&mut b.conv_b);
        }
        for h in self.rgb.iter_mut().flatten() {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }
}

impl Synthesis for ModulatedBackbone {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn map_latent(&self, z: &LatentZ) -> Result<WPlusCode> {
        let d = self.config.latent_dim;
        if z.dim() != d {
            return Err(CoralError::DimensionMismatch {
                what: "latent z",
                expected: d,
                got: z.dim(),
            });
        }
        if z.0.iter().any(|v| !v.is_finite()) {
            return Err(CoralError::InvalidArgument("latent z has non-finite entries".into()));
        }
        let m = &self.mapping;
        let affine = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|o| {
                    b.data[o]
                        + w.data[o * d..(o + 1) * d]
                            .iter()
                            .zip(x)
                            .map(|(a, v)| a * v)
                            .sum::<f64>()
                })
                .collect()
        };
        let hidden: Vec<f64> = affine(&m.w1, &m.b1, &z.0).into_iter().map(leaky).collect();
        let base = affine(&m.w2, &m.b2, &hidden);
        let mut code = WPlusCode::zeros(self.config.layer_count, d);
        for l in 0..self.config.layer_count {
            let off = &m.offsets.data[l * d..(l + 1) * d];
            for ((dst, b), o) in code.row_mut(l).iter_mut().zip(&base).zip(off) {
                *dst = b + o;
            }
        }
        Ok(code)
    }

    fn constant_input(&self) -> &FeatureMap {
        &self.constant
    }

    fn block(&self, index: usize, input: &FeatureMap, w: &[f64]) -> Result<FeatureMap> {
        self.check_block_input(index, input, w)?;
        let block = &self.blocks[index];
        let style = self.style(index, w);
        let (_, y) = self.modulated_input(index, input, &style);
        let mut out = conv3x3(&y, &block.conv_w.data, &block.conv_b.data);
        for v in &mut out.data {
            *v = v.tanh();
        }
        Ok(out)
    }

    fn block_vjp(
        &self,
        index: usize,
        input: &FeatureMap,
        w: &[f64],
        grad_out: &FeatureMap,
    ) -> Result<(FeatureMap, Vec<f64>)> {
        self.check_block_input(index, input, w)?;
        let block = &self.blocks[index];
        let style = self.style(index, w);
        let (x, y) = self.modulated_input(index, input, &style);
        let pre = conv3x3(&y, &block.conv_w.data, &block.conv_b.data);
        if !pre.same_shape(grad_out) {
            return Err(CoralError::ShapeMismatch(format!(
                "layer {} gradient has shape {:?}, expected {:?}",
                index + 1,
                grad_out.shape(),
                pre.shape()
            )));
        }
        let mut grad_pre = grad_out.clone();
        for (g, p) in grad_pre.data.iter_mut().zip(&pre.data) {
            let t = p.tanh();
            *g *= 1.0 - t * t;
        }
        let cin = style.len();
        let grad_y = conv3x3_adjoint(&grad_pre, &block.conv_w.data, cin);
        let mut grad_style = vec![0.0; cin];
        let mut grad_x = grad_y.clone();
        for (gx_px, x_px) in grad_x
            .data
            .chunks_exact_mut(cin)
            .zip(x.data.chunks_exact(cin))
        {
            for c in 0..cin {
                grad_style[c] += gx_px[c] * x_px[c];
                gx_px[c] *= style[c];
            }
        }
        let grad_in = grad_x.upsample_nearest_adjoint(self.config.upsample_factor(index));
        let d = self.config.latent_dim;
        let mut grad_w = vec![0.0; d];
        for (c, gs) in grad_style.iter().enumerate() {
            for (gw, a) in grad_w.iter_mut().zip(&block.affine_w.data[c * d..(c + 1) * d]) {
                *gw += gs * a;
            }
        }
        Ok((grad_in, grad_w))
    }

    fn to_rgb(&self, index: usize, features: &FeatureMap) -> Option<ImageRgb> {
        let head = self.rgb.get(index)?.as_ref()?;
        let (h, w, c) = features.shape();
        let mut out = FeatureMap::zeros(h, w, 3);
        for (px, dst) in features.data.chunks_exact(c).zip(out.data.chunks_exact_mut(3)) {
            dst.copy_from_slice(&head.b.data);
            for (ci, &x) in px.iter().enumerate() {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d += x * head.w.data[ci * 3 + k];
                }
            }
        }
        Some(out.upsample_nearest(self.config.image_resolution() / h))
    }

    fn to_rgb_vjp(&self, index: usize, grad_image: &ImageRgb) -> Option<FeatureMap> {
        let head = self.rgb.get(index)?.as_ref()?;
        let res = self.config.resolutions[index];
        let c = self.config.channels[index];
        let g = grad_image.upsample_nearest_adjoint(grad_image.height / res);
        let mut out = FeatureMap::zeros(res, res, c);
        for (gpx, dst) in g.data.chunks_exact(3).zip(out.data.chunks_exact_mut(c)) {
            for (ci, d) in dst.iter_mut().enumerate() {
                let wrow = &head.w.data[ci * 3..ci * 3 + 3];
                *d = wrow[0] * gpx[0] + wrow[1] * gpx[1] + wrow[2] * gpx[2];
            }
        }
        Some(out)
    }
}
