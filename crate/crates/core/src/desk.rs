//! Deterministic stand-ins for the pretrained scorer, identity network and
//! segmenter, small enough to train against on a CPU.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editors::EditorKind;
use crate::error::{CoralError, Result};
use crate::losses::{IdentityEmbedder, LossWeights, SemanticScorer};
use crate::selectors::{sigmoid, Variant};
use crate::tensor::{FeatureMap, ImageRgb};
use crate::trainer::TrainConfig;

/// Rectangle in fractions of the image side, `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl Region {
    pub const UPPER_LEFT: Region = Region {
        top: 0.0,
        left: 0.0,
        bottom: 0.5,
        right: 0.5,
    };

    /// Pixel bounds `(i0, i1, j0, j1)` for an `h x w` image.
    pub fn pixel_bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let at = |f: f64, n: usize| ((f * n as f64).round() as usize).min(n);
        (at(self.top, h), at(self.bottom, h), at(self.left, w), at(self.right, w))
    }

    /// Row-major membership of each cell of an `h x w` grid.
    pub fn cells(&self, h: usize, w: usize) -> Vec<bool> {
        let (i0, i1, j0, j1) = self.pixel_bounds(h, w);
        (0..h * w)
            .map(|k| (i0..i1).contains(&(k / w)) && (j0..j1).contains(&(k % w)))
            .collect()
    }
}

/// `1 - sigmoid(gain * (mean intensity inside region - offset))`.
///
/// The prompt is ignored: the target is fixed at construction, so the
/// distance is low exactly when the region is bright.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionIntensityScorer {
    pub region: Region,
    pub gain: f64,
    pub offset: f64,
}

impl RegionIntensityScorer {
    fn region_mean(&self, image: &ImageRgb) -> Result<(f64, usize)> {
        let (i0, i1, j0, j1) = self.region.pixel_bounds(image.height, image.width);
        let n = (i1.saturating_sub(i0)) * (j1.saturating_sub(j0)) * image.channels;
        if n == 0 {
            return Err(CoralError::Component("scoring region is empty".into()));
        }
        let mut sum = 0.0;
        for i in i0..i1 {
            for j in j0..j1 {
                sum += image.pixel(i, j).iter().sum::<f64>();
            }
        }
        Ok((sum / n as f64, n))
    }
}

impl SemanticScorer for RegionIntensityScorer {
    fn distance(&self, image: &ImageRgb, _prompt: &str) -> Result<f64> {
        let (mean, _) = self.region_mean(image)?;
        Ok(1.0 - sigmoid(self.gain * (mean - self.offset)))
    }

    fn distance_grad(&self, image: &ImageRgb, _prompt: &str) -> Result<ImageRgb> {
        let (mean, n) = self.region_mean(image)?;
        let s = sigmoid(self.gain * (mean - self.offset));
        let per = -s * (1.0 - s) * self.gain / n as f64;
        let mut g = FeatureMap::zeros(image.height, image.width, image.channels);
        let (i0, i1, j0, j1) = self.region.pixel_bounds(image.height, image.width);
        for i in i0..i1 {
            for j in j0..j1 {
                g.pixel_mut(i, j).fill(per);
            }
        }
        Ok(g)
    }
}

/// Block-average the image to `grid x grid x channels`.
pub fn pool(image: &ImageRgb, grid: usize) -> Result<Vec<f64>> {
    if grid == 0 || image.height % grid != 0 || image.width % grid != 0 {
        return Err(CoralError::ShapeMismatch(format!(
            "{}x{} image cannot be pooled to {grid}x{grid}",
            image.height, image.width
        )));
    }
    let (fh, fw, c) = (image.height / grid, image.width / grid, image.channels);
    let inv = 1.0 / (fh * fw) as f64;
    let mut out = vec![0.0; grid * grid * c];
    for i in 0..image.height {
        for j in 0..image.width {
            let cell = ((i / fh) * grid + j / fw) * c;
            for (o, v) in out[cell..cell + c].iter_mut().zip(image.pixel(i, j)) {
                *o += v * inv;
            }
        }
    }
    Ok(out)
}

fn pool_adjoint(grad: &[f64], grid: usize, height: usize, width: usize, channels: usize) -> ImageRgb {
    let (fh, fw) = (height / grid, width / grid);
    let inv = 1.0 / (fh * fw) as f64;
    let mut g = FeatureMap::zeros(height, width, channels);
    for i in 0..height {
        for j in 0..width {
            let cell = ((i / fh) * grid + j / fw) * channels;
            for (o, v) in g.pixel_mut(i, j).iter_mut().zip(&grad[cell..cell + channels]) {
                *o = v * inv;
            }
        }
    }
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: Vec<f64>, what: &str) -> Result<(Vec<f64>, f64)> {
    let n = norm(&v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(CoralError::Component(format!("{what} has zero or non-finite norm")));
    }
    Ok((v.into_iter().map(|x| x / n).collect(), n))
}

/// Gradient of `u / |u|` pulled back from `g`, given the unit vector and norm.
fn normalize_vjp(unit: &[f64], n: f64, g: &[f64]) -> Vec<f64> {
    let proj: f64 = unit.iter().zip(g).map(|(u, v)| u * v).sum();
    unit.iter().zip(g).map(|(u, v)| (v - proj * u) / n).collect()
}

/// Identity embedding by block-averaging to a coarse grid and normalizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PooledIdentityEmbedder {
    pub grid: usize,
}

impl Default for PooledIdentityEmbedder {
    fn default() -> Self {
        PooledIdentityEmbedder { grid: 4 }
    }
}

impl IdentityEmbedder for PooledIdentityEmbedder {
    fn embed(&self, image: &ImageRgb) -> Result<Vec<f64>> {
        Ok(normalized(pool(image, self.grid)?, "identity embedding")?.0)
    }

    fn embed_vjp(&self, image: &ImageRgb, grad: &[f64]) -> Result<ImageRgb> {
        let (unit, n) = normalized(pool(image, self.grid)?, "identity embedding")?;
        if grad.len() != unit.len() {
            return Err(CoralError::DimensionMismatch {
                what: "identity embedding gradient",
                expected: unit.len(),
                got: grad.len(),
            });
        }
        let g = normalize_vjp(&unit, n, grad);
        Ok(pool_adjoint(&g, self.grid, image.height, image.width, image.channels))
    }
}

/// Cosine distance between a pooled image embedding and a text embedding
/// derived from the prompt's hash. Exercises the text path without a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubClipScorer {
    pub grid: usize,
}

impl Default for StubClipScorer {
    fn default() -> Self {
        StubClipScorer { grid: 4 }
    }
}

impl StubClipScorer {
    /// Unit vector of length `dim` with entries drawn from the prompt hash.
    pub fn text_embedding(prompt: &str, dim: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(dim);
        let mut counter = 0u32;
        while out.len() < dim {
            let digest = Sha256::new()
                .chain_update(prompt.as_bytes())
                .chain_update(counter.to_le_bytes())
                .finalize();
            out.extend(digest.iter().map(|&b| b as f64 / 127.5 - 1.0));
            counter += 1;
        }
        out.truncate(dim);
        let n = norm(&out);
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    fn parts(&self, image: &ImageRgb, prompt: &str) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        let (unit, n) = normalized(pool(image, self.grid)?, "image embedding")?;
        let text = Self::text_embedding(prompt, unit.len());
        Ok((unit, n, text))
    }
}

impl SemanticScorer for StubClipScorer {
    fn distance(&self, image: &ImageRgb, prompt: &str) -> Result<f64> {
        let (unit, _, text) = self.parts(image, prompt)?;
        Ok(1.0 - unit.iter().zip(&text).map(|(a, b)| a * b).sum::<f64>())
    }

    fn distance_grad(&self, image: &ImageRgb, prompt: &str) -> Result<ImageRgb> {
        let (unit, n, text) = self.parts(image, prompt)?;
        let neg: Vec<f64> = text.iter().map(|v| -v).collect();
        let g = normalize_vjp(&unit, n, &neg);
        Ok(pool_adjoint(&g, self.grid, image.height, image.width, image.channels))
    }
}

/// Serializable description of a semantic scorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    RegionIntensity(RegionIntensityScorer),
    StubClip(StubClipScorer),
}

impl ScorerSpec {
    pub fn build(&self) -> Box<dyn SemanticScorer> {
        match *self {
            ScorerSpec::RegionIntensity(s) => Box::new(s),
            ScorerSpec::StubClip(s) => Box::new(s),
        }
    }
}

/// Region scorer rewarding a bright upper-left quadrant. The toy backbone
/// averages about 0.42 there, so the initial distance is close to 0.8.
pub const QUADRANT_SCORER: RegionIntensityScorer = RegionIntensityScorer {
    region: Region::UPPER_LEFT,
    gain: 8.0,
    offset: 0.6,
};

/// Training settings that localize a [`QUADRANT_SCORER`] edit on the toy
/// backbone within 2000 steps.
///
/// The published weights are tuned for a 1024px generator and a real
/// scorer. At toy scale two of them are too weak: the attention variants
/// need stronger area and smoothness terms (and a larger step) to keep masks
/// out of the other quadrants, and the segment-selection mapper needs a
/// larger step so its logits can cross the 0.85 threshold at all.
pub fn quadrant_recipe(variant: Variant, editor: EditorKind) -> TrainConfig {
    let mut c = TrainConfig::new("bright upper left", variant, editor);
    c.edit_cutoff = 6;
    c.seed = 11;
    c.scorer = ScorerSpec::RegionIntensity(QUADRANT_SCORER);
    c.max_iterations = 2000;
    let mut w = LossWeights::defaults_for(variant, editor);
    match (variant, editor) {
        (Variant::Ss, EditorKind::Global) => c.max_iterations = 500,
        (Variant::Ss, EditorKind::Mapper) => {
            c.learning_rate = Some(0.01);
            w.lambda_l2 = SS_MAPPER_TOY_L2;
        }
        (Variant::Can, _) => {
            c.learning_rate = Some(0.002);
            w.lambda_area = 0.01;
            w.lambda_tv = 0.003;
        }
    }
    c.weights = Some(w);
    c
}

const SS_MAPPER_TOY_L2: f64 = 0.003;
