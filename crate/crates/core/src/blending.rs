//! Multi-layer feedforwarded feature blending.
//!
//! Every block runs twice on the blended upstream features, once with the
//! edited code and once with the original code, and the two outputs are mixed
//! by that layer's mask:
//!
//! ```text
//! edited   = block_l(blend(l-1), w2(l))
//! original = block_l(blend(l-1), w1(l))
//! blend(l) = original + m(l) * (edited - original)
//! ```
//!
//! A zero mask therefore forwards whatever earlier layers already changed.
//! RGB heads read the blended stream only.

use crate::backbone::{forward, BackboneConfig, Synthesis, WPlusCode};
use crate::editors::EditDelta;
use crate::error::{CoralError, Result};
use crate::tensor::{FeatureMap, ImageRgb};

/// Soft spatial selection for one layer, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl LayerMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoralError::ShapeMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoralError::InvalidArgument(format!("mask value {v} outside [0, 1]")));
        }
        Ok(LayerMask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value), "mask value outside [0, 1]");
        LayerMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LayerMask::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        LayerMask::filled(height, width, 1.0)
    }

    /// Mask equal to one on cells where `select(i, j)` holds.
    pub fn indicator(height: usize, width: usize, select: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|k| if select(k / width, k % width) { 1.0 } else { 0.0 })
            .collect();
        LayerMask { height, width, data }
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_one(&self) -> bool {
        self.data.iter().all(|&v| v == 1.0)
    }

    /// Fraction of the layer covered, `sum(m) / (H * W)`.
    pub fn area_fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> LayerMask {
        LayerMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// One mask per backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    masks: Vec<LayerMask>,
}

impl MaskStack {
    pub fn new(masks: Vec<LayerMask>) -> Self {
        MaskStack { masks }
    }

    pub fn filled(config: &BackboneConfig, value: f64) -> Self {
        MaskStack {
            masks: config
                .resolutions
                .iter()
                .map(|&r| LayerMask::filled(r, r, value))
                .collect(),
        }
    }

    pub fn zeros(config: &BackboneConfig) -> Self {
        MaskStack::filled(config, 0.0)
    }

    pub fn ones(config: &BackboneConfig) -> Self {
        MaskStack::filled(config, 1.0)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.masks
    }

    /// Mask at 0-based index.
    pub fn get(&self, index: usize) -> &LayerMask {
        &self.masks[index]
    }

    pub fn set(&mut self, index: usize, mask: LayerMask) {
        self.masks[index] = mask;
    }

    pub fn area_fractions(&self) -> Vec<f64> {
        self.masks.iter().map(LayerMask::area_fraction).collect()
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        if self.masks.len() != config.layer_count {
            return Err(CoralError::DimensionMismatch {
                what: "mask stack length",
                expected: config.layer_count,
                got: self.masks.len(),
            });
        }
        for (index, (m, &r)) in self.masks.iter().zip(&config.resolutions).enumerate() {
            if m.height != r || m.width != r {
                return Err(CoralError::ShapeMismatch(format!(
                    "layer {} mask is {}x{}, features are {r}x{r}",
                    index + 1,
                    m.height,
                    m.width
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer gradient with respect to mask entries, same layout as the masks.
pub type MaskGrad = Vec<Vec<f64>>;

/// `original + m * (edited - original)`, the mask broadcast over channels.
fn mix(original: &FeatureMap, edited: &FeatureMap, mask: &LayerMask) -> FeatureMap {
    let c = original.channels;
    let mut out = original.clone();
    for ((o, e), &m) in out
        .data
        .chunks_exact_mut(c)
        .zip(edited.data.chunks_exact(c))
        .zip(mask.values())
    {
        if m != 0.0 {
            for (ov, ev) in o.iter_mut().zip(e) {
                *ov += m * (ev - *ov);
            }
        }
    }
    out
}

fn check_pair(config: &BackboneConfig, w1: &WPlusCode, w2: &WPlusCode) -> Result<()> {
    w1.check_shape(config)?;
    w2.check_shape(config)
}

struct BlendTrace {
    /// Blended features per layer; entry `l` is the input of block `l + 1`.
    blended: Vec<FeatureMap>,
    /// `edited - original` per layer, `None` when the two codes coincide.
    difference: Vec<Option<FeatureMap>>,
    image: ImageRgb,
}

fn blended_trace(
    backbone: &dyn Synthesis,
    w1: &WPlusCode,
    w2: &WPlusCode,
    masks: &MaskStack,
    keep_difference: bool,
) -> Result<BlendTrace> {
    let config = backbone.config();
    check_pair(config, w1, w2)?;
    masks.validate(config)?;
    let res = config.image_resolution();
    let mut image = FeatureMap::zeros(res, res, 3);
    let mut blended: Vec<FeatureMap> = Vec::with_capacity(config.layer_count);
    let mut difference = Vec::with_capacity(config.layer_count);
    for index in 0..config.layer_count {
        let input = blended.last().unwrap_or(backbone.constant_input());
        let mask = masks.get(index);
        let same_code = w1.row(index) == w2.row(index);
        let (f, diff) = if same_code || mask.is_zero() && !keep_difference {
            (backbone.block(index, input, w1.row(index))?, None)
        } else {
            let original = backbone.block(index, input, w1.row(index))?;
            let edited = backbone.block(index, input, w2.row(index))?;
            let f = mix(&original, &edited, mask);
            let diff = keep_difference.then(|| {
                let mut d = edited;
                for (dv, ov) in d.data.iter_mut().zip(&original.data) {
                    *dv -= ov;
                }
                d
            });
            (f, diff)
        };
        if let Some(rgb) = backbone.to_rgb(index, &f) {
            image.add_assign(&rgb);
        }
        blended.push(f);
        difference.push(diff);
    }
    Ok(BlendTrace {
        blended,
        difference,
        image,
    })
}

/// Blended forward pass between an original code `w1` and an edited code
/// `w2`. Returns the blended image and the blended features of every layer.
pub fn blended_forward(
    backbone: &dyn Synthesis,
    w1: &WPlusCode,
    w2: &WPlusCode,
    masks: &MaskStack,
) -> Result<(ImageRgb, Vec<FeatureMap>)> {
    let trace = blended_trace(backbone, w1, w2, masks, false)?;
    Ok((trace.image, trace.blended))
}

/// Gradients of `<grad_image, blended_forward(..).image>`.
#[derive(Debug, Clone)]
pub struct BlendGrads {
    pub w1: WPlusCode,
    pub w2: WPlusCode,
    pub masks: MaskGrad,
}

pub fn blended_forward_vjp(
    backbone: &dyn Synthesis,
    w1: &WPlusCode,
    w2: &WPlusCode,
    masks: &MaskStack,
    grad_image: &ImageRgb,
) -> Result<BlendGrads> {
    let trace = blended_trace(backbone, w1, w2, masks, true)?;
    backprop(backbone, &trace, w1, w2, masks, grad_image)
}

/// Blended forward pass followed by its vjp, where the image gradient is
/// computed from the blended image by `grad_of`.
pub fn blended_forward_and_vjp(
    backbone: &dyn Synthesis,
    w1: &WPlusCode,
    w2: &WPlusCode,
    masks: &MaskStack,
    grad_of: impl FnOnce(&ImageRgb) -> Result<ImageRgb>,
) -> Result<(ImageRgb, BlendGrads)> {
    let trace = blended_trace(backbone, w1, w2, masks, true)?;
    let grad_image = grad_of(&trace.image)?;
    let grads = backprop(backbone, &trace, w1, w2, masks, &grad_image)?;
    Ok((trace.image, grads))
}

fn backprop(
    backbone: &dyn Synthesis,
    trace: &BlendTrace,
    w1: &WPlusCode,
    w2: &WPlusCode,
    masks: &MaskStack,
    grad_image: &ImageRgb,
) -> Result<BlendGrads> {
    let config = backbone.config();
    let res = config.image_resolution();
    if grad_image.shape() != (res, res, 3) {
        return Err(CoralError::ShapeMismatch(format!(
            "image gradient is {:?}, expected {res}x{res}x3",
            grad_image.shape()
        )));
    }
    let mut grad_w1 = WPlusCode::zeros(config.layer_count, config.latent_dim);
    let mut grad_w2 = WPlusCode::zeros(config.layer_count, config.latent_dim);
    let mut grad_masks: MaskGrad = masks.layers().iter().map(|m| vec![0.0; m.values().len()]).collect();
    let mut grad: Option<FeatureMap> = None;
    for index in (0..config.layer_count).rev() {
        let f = &trace.blended[index];
        let mut g = grad
            .take()
            .unwrap_or_else(|| FeatureMap::zeros(f.height, f.width, f.channels));
        if let Some(gr) = backbone.to_rgb_vjp(index, grad_image) {
            g.add_assign(&gr);
        }
        let input = if index == 0 {
            backbone.constant_input()
        } else {
            &trace.blended[index - 1]
        };
        let grad_in = match &trace.difference[index] {
            None => {
                let (g_in, g_w) = backbone.block_vjp(index, input, w1.row(index), &g)?;
                // Identical codes: the single block output feeds both paths.
                let m = masks.get(index);
                let c = g.channels;
                let mut split_w2 = vec![0.0; g_w.len()];
                let mut split_w1 = g_w.clone();
                if !m.is_zero() {
                    // Attribute the gradient by the mask weight; the sum is exact.
                    let mut g_edit = g.clone();
                    for (px, &mv) in g_edit.data.chunks_exact_mut(c).zip(m.values()) {
                        px.iter_mut().for_each(|v| *v *= mv);
                    }
                    let (_, gw_edit) = backbone.block_vjp(index, input, w2.row(index), &g_edit)?;
                    for ((a, b), e) in split_w1.iter_mut().zip(split_w2.iter_mut()).zip(&gw_edit) {
                        *a -= e;
                        *b = *e;
                    }
                }
                grad_w1.row_mut(index).copy_from_slice(&split_w1);
                grad_w2.row_mut(index).copy_from_slice(&split_w2);
                g_in
            }
            Some(diff) => {
                let m = masks.get(index);
                let c = g.channels;
                let mut g_edit = g.clone();
                let mut g_orig = g.clone();
                for (((ge, go), (gp, dp)), (&mv, gm)) in g_edit
                    .data
                    .chunks_exact_mut(c)
                    .zip(g_orig.data.chunks_exact_mut(c))
                    .zip(g.data.chunks_exact(c).zip(diff.data.chunks_exact(c)))
                    .zip(m.values().iter().zip(grad_masks[index].iter_mut()))
                {
                    *gm = gp.iter().zip(dp).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        ge[k] *= mv;
                        go[k] *= 1.0 - mv;
                    }
                }
                let (gin_e, gw_e) = backbone.block_vjp(index, input, w2.row(index), &g_edit)?;
                let (mut gin_o, gw_o) = backbone.block_vjp(index, input, w1.row(index), &g_orig)?;
                grad_w2.row_mut(index).copy_from_slice(&gw_e);
                grad_w1.row_mut(index).copy_from_slice(&gw_o);
                gin_o.add_assign(&gin_e);
                gin_o
            }
        };
        grad = Some(grad_in);
    }
    Ok(BlendGrads {
        w1: grad_w1,
        w2: grad_w2,
        masks: grad_masks,
    })
}

/// Forward pass of the fully edited code `w1 + delta`.
pub fn edited_forward(
    backbone: &dyn Synthesis,
    w1: &WPlusCode,
    delta: &EditDelta,
) -> Result<(ImageRgb, Vec<FeatureMap>)> {
    let w2 = delta.apply_to(w1)?;
    forward(backbone, &w2)
}

/// Single-layer blending baseline.
///
/// Layers before `blend_layer` (1-based) run two independent streams, the
/// edited one with `w2` and the original one with `w1`. At `blend_layer` the
/// two streams are mixed once by `mask`, and every later layer propagates the
/// mixed features with the original code `w1`. The RGB contributions of the
/// pre-blend layers are mixed with the same mask, upsampled to the image.
pub fn feat_blend_forward(
    backbone: &dyn Synthesis,
    w1: &WPlusCode,
    w2: &WPlusCode,
    mask: &LayerMask,
    blend_layer: usize,
) -> Result<ImageRgb> {
    let config = backbone.config();
    check_pair(config, w1, w2)?;
    if blend_layer == 0 || blend_layer > config.layer_count {
        return Err(CoralError::InvalidArgument(format!(
            "blend layer {blend_layer} outside 1..={}",
            config.layer_count
        )));
    }
    let blend_index = blend_layer - 1;
    let r = config.resolutions[blend_index];
    if mask.height != r || mask.width != r {
        return Err(CoralError::ShapeMismatch(format!(
            "blend mask is {}x{}, layer {blend_layer} is {r}x{r}",
            mask.height, mask.width
        )));
    }
    let res = config.image_resolution();
    let mut rgb_original = FeatureMap::zeros(res, res, 3);
    let mut rgb_edited = FeatureMap::zeros(res, res, 3);
    let mut original = backbone.constant_input().clone();
    let mut edited = original.clone();
    for index in 0..blend_index {
        original = backbone.block(index, &original, w1.row(index))?;
        edited = backbone.block(index, &edited, w2.row(index))?;
        if let Some(rgb) = backbone.to_rgb(index, &original) {
            rgb_original.add_assign(&rgb);
        }
        if let Some(rgb) = backbone.to_rgb(index, &edited) {
            rgb_edited.add_assign(&rgb);
        }
    }
    let image_mask = upsample_mask(mask, res / r);
    let mut image = mix(&rgb_original, &rgb_edited, &image_mask);
    let at_original = backbone.block(blend_index, &original, w1.row(blend_index))?;
    let at_edited = backbone.block(blend_index, &edited, w2.row(blend_index))?;
    let mut f = mix(&at_original, &at_edited, mask);
    if let Some(rgb) = backbone.to_rgb(blend_index, &f) {
        image.add_assign(&rgb);
    }
    for index in blend_layer..config.layer_count {
        f = backbone.block(index, &f, w1.row(index))?;
        if let Some(rgb) = backbone.to_rgb(index, &f) {
            image.add_assign(&rgb);
        }
    }
    Ok(image)
}

fn upsample_mask(mask: &LayerMask, factor: usize) -> LayerMask {
    let (h, w) = (mask.height * factor, mask.width * factor);
    let data = (0..h * w)
        .map(|k| mask.at(k / w / factor, k % w / factor))
        .collect();
    LayerMask {
        height: h,
        width: w,
        data,
    }
}

/// Image pixels that can depend on features of layer `layer` (1-based)
/// inside `region` (row-major booleans at that layer's resolution).
///
/// Follows the backbone's propagation rule: nearest upsampling when a layer
/// doubles the resolution, then a 3x3 neighbourhood per block; every RGB
/// layer projects the current support onto the image.
pub fn receptive_support(config: &BackboneConfig, layer: usize, region: &[bool]) -> Result<Vec<bool>> {
    if layer == 0 || layer > config.layer_count {
        return Err(CoralError::InvalidArgument(format!("layer {layer} out of range")));
    }
    let index = layer - 1;
    let mut r = config.resolutions[index];
    if region.len() != r * r {
        return Err(CoralError::ShapeMismatch(format!(
            "region has {} cells, layer {layer} has {}",
            region.len(),
            r * r
        )));
    }
    let res = config.image_resolution();
    let mut support = vec![false; res * res];
    let mut cur = region.to_vec();
    let project = |cur: &[bool], r: usize, support: &mut [bool]| {
        let f = res / r;
        for (k, s) in support.iter_mut().enumerate() {
            let (i, j) = (k / res, k % res);
            *s |= cur[(i / f) * r + j / f];
        }
    };
    if config.has_rgb(index) {
        project(&cur, r, &mut support);
    }
    for next in layer..config.layer_count {
        let up = config.upsample_factor(next);
        let nr = r * up;
        let upsampled: Vec<bool> = (0..nr * nr)
            .map(|k| cur[(k / nr / up) * r + (k % nr) / up])
            .collect();
        let mut dilated = vec![false; nr * nr];
        for i in 0..nr {
            for j in 0..nr {
                if !upsampled[i * nr + j] {
                    continue;
                }
                for ii in i.saturating_sub(1)..=(i + 1).min(nr - 1) {
                    for jj in j.saturating_sub(1)..=(j + 1).min(nr - 1) {
                        dilated[ii * nr + jj] = true;
                    }
                }
            }
        }
        cur = dilated;
        r = nr;
        if config.has_rgb(next) {
            project(&cur, r, &mut support);
        }
    }
    Ok(support)
}
