//! Region selectors: both produce a [`MaskStack`] with one soft mask per
//! layer and zero masks past the edit cutoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::blending::{LayerMask, MaskGrad, MaskStack};
use crate::error::{CoralError, Result};
use crate::tensor::{FeatureMap, ImageRgb, ParamTensors, Tensor};

pub const ATTENTION_HIDDEN: usize = 32;
pub const DEFAULT_TAU: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Segment selection.
    Ss,
    /// Convolutional attention network.
    Can,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ss => "ss",
            Variant::Can => "can",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = CoralError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ss" => Ok(Variant::Ss),
            "can" => Ok(Variant::Can),
            other => Err(CoralError::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel class labels at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

pub trait Segmenter: Send + Sync {
    fn class_count(&self) -> usize;
    fn segment(&self, image: &ImageRgb) -> Result<SegmentMap>;
}

/// Image-independent partition of the plane into a `rows x cols` grid of
/// classes, numbered row-major. Horizontal bands are `cols = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSegmenter {
    pub rows: usize,
    pub cols: usize,
}

impl Segmenter for GridSegmenter {
    fn class_count(&self) -> usize {
        self.rows * self.cols
    }

    fn segment(&self, image: &ImageRgb) -> Result<SegmentMap> {
        let (h, w) = (image.height, image.width);
        let labels = (0..h * w)
            .map(|k| {
                let (i, j) = (k / w, k % w);
                ((i * self.rows / h) * self.cols + j * self.cols / w) as u32
            })
            .collect();
        Ok(SegmentMap {
            height: h,
            width: w,
            labels,
        })
    }
}

/// Serializable description of a segmenter, recorded in artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SegmenterSpec {
    Grid { rows: usize, cols: usize },
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        SegmenterSpec::Grid { rows: 2, cols: 2 }
    }
}

impl SegmenterSpec {
    pub fn build(&self) -> Box<dyn Segmenter> {
        match *self {
            SegmenterSpec::Grid { rows, cols } => Box::new(GridSegmenter { rows, cols }),
        }
    }

    pub fn class_count(&self) -> usize {
        match *self {
            SegmenterSpec::Grid { rows, cols } => rows * cols,
        }
    }
}

/// Trainable segment-by-layer selection logits, shape `(P, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSelectionMatrix {
    pub logits: Tensor,
}

impl SegmentSelectionMatrix {
    pub fn zeros(classes: usize, layers: usize) -> Self {
        SegmentSelectionMatrix {
            logits: Tensor::zeros(&[classes, layers]),
        }
    }

    pub fn classes(&self) -> usize {
        self.logits.shape[0]
    }

    pub fn layers(&self) -> usize {
        self.logits.shape[1]
    }

    pub fn weight(&self, class: usize, index: usize) -> f64 {
        sigmoid(self.logits.data[class * self.layers() + index])
    }
}

impl ParamTensors for SegmentSelectionMatrix {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("logits".into(), &self.logits)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.logits]
    }
}

/// Class fractions of each cell of a `res x res` grid over the segment map.
fn cell_fractions(seg: &SegmentMap, res: usize, classes: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if seg.height < res || seg.width < res || seg.height % res != 0 || seg.width % res != 0 {
        return Err(CoralError::ShapeMismatch(format!(
            "segment map {}x{} cannot be pooled to {res}x{res}",
            seg.height, seg.width
        )));
    }
    let (fh, fw) = (seg.height / res, seg.width / res);
    let inv = 1.0 / (fh * fw) as f64;
    let mut cells = Vec::with_capacity(res * res);
    let mut counts = vec![0usize; classes];
    for ci in 0..res {
        for cj in 0..res {
            counts.fill(0);
            for i in ci * fh..(ci + 1) * fh {
                for j in cj * fw..(cj + 1) * fw {
                    let label = seg.labels[i * seg.width + j] as usize;
                    if label >= classes {
                        return Err(CoralError::InvalidArgument(format!(
                            "class id {label} >= class count {classes}"
                        )));
                    }
                    counts[label] += 1;
                }
            }
            cells.push(
                counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &n)| n > 0)
                    .map(|(p, &n)| (p, n as f64 * inv))
                    .collect(),
            );
        }
    }
    Ok(cells)
}

fn check_selection(config: &BackboneConfig, e: &SegmentSelectionMatrix, edit_cutoff: usize) -> Result<()> {
    if e.layers() != config.layer_count {
        return Err(CoralError::DimensionMismatch {
            what: "selection matrix layers",
            expected: config.layer_count,
            got: e.layers(),
        });
    }
    if edit_cutoff > config.layer_count {
        return Err(CoralError::InvalidArgument(format!(
            "edit cutoff {edit_cutoff} exceeds layer count {}",
            config.layer_count
        )));
    }
    Ok(())
}

/// Renders `sigmoid(e[class(i, j), l])` at full resolution and area-averages
/// it down to every layer resolution.
pub fn segment_masks(
    config: &BackboneConfig,
    seg: &SegmentMap,
    e: &SegmentSelectionMatrix,
    edit_cutoff: usize,
) -> Result<MaskStack> {
    check_selection(config, e, edit_cutoff)?;
    let mut masks = Vec::with_capacity(config.layer_count);
    for (index, &res) in config.resolutions.iter().enumerate() {
        let cells = cell_fractions(seg, res, e.classes())?;
        if index >= edit_cutoff {
            masks.push(LayerMask::zeros(res, res));
            continue;
        }
        let data = cells
            .iter()
            .map(|cell| {
                cell.iter()
                    .map(|&(p, frac)| frac * e.weight(p, index))
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
            .collect();
        masks.push(LayerMask::new(res, res, data)?);
    }
    Ok(MaskStack::new(masks))
}

pub fn segment_masks_vjp(
    config: &BackboneConfig,
    seg: &SegmentMap,
    e: &SegmentSelectionMatrix,
    edit_cutoff: usize,
    grad_masks: &MaskGrad,
) -> Result<SegmentSelectionMatrix> {
    check_selection(config, e, edit_cutoff)?;
    let mut grad = SegmentSelectionMatrix::zeros(e.classes(), e.layers());
    let layers = e.layers();
    for index in 0..edit_cutoff {
        let cells = cell_fractions(seg, config.resolutions[index], e.classes())?;
        for (cell, &g) in cells.iter().zip(&grad_masks[index]) {
            for &(p, frac) in cell {
                grad.logits.data[p * layers + index] += g * frac;
            }
        }
    }
    for (g, &x) in grad.logits.data.iter_mut().zip(&e.logits.data) {
        let s = sigmoid(x);
        *g *= s * (1.0 - s);
    }
    Ok(grad)
}

/// Two 1x1 convolutions with a ReLU between and a sigmoid on top.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    /// `(c, hidden)`.
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    /// `(hidden)`.
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
}

/// One attention head per editable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNetParams {
    pub layers: Vec<AttentionLayer>,
}

impl AttentionNetParams {
    pub fn zeros(config: &BackboneConfig, edit_cutoff: usize) -> Self {
        AttentionNetParams {
            layers: config.channels[..edit_cutoff.min(config.layer_count)]
                .iter()
                .map(|&c| AttentionLayer {
                    conv1_w: Tensor::zeros(&[c, ATTENTION_HIDDEN]),
                    conv1_b: Tensor::zeros(&[ATTENTION_HIDDEN]),
                    conv2_w: Tensor::zeros(&[ATTENTION_HIDDEN]),
                    conv2_b: Tensor::zeros(&[1]),
                })
                .collect(),
        }
    }

    /// Small fixed-seed weights and zero biases: the first masks sit near
    /// 0.5.
    pub fn init(config: &BackboneConfig, edit_cutoff: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = AttentionNetParams::zeros(config, edit_cutoff);
        for layer in &mut params.layers {
            let c = layer.conv1_w.shape[0];
            let s1 = 1.0 / (c as f64).sqrt();
            let s2 = 0.1 / (ATTENTION_HIDDEN as f64).sqrt();
            for v in &mut layer.conv1_w.data {
                *v = rng.sample::<f64, _>(StandardNormal) * s1;
            }
            for v in &mut layer.conv2_w.data {
                *v = rng.sample::<f64, _>(StandardNormal) * s2;
            }
        }
        params
    }

    pub fn edit_cutoff(&self) -> usize {
        self.layers.len()
    }
}

impl ParamTensors for AttentionNetParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            let n = k + 1;
            out.push((format!("layer{n}.conv1_w"), &l.conv1_w));
            out.push((format!("layer{n}.conv1_b"), &l.conv1_b));
            out.push((format!("layer{n}.conv2_w"), &l.conv2_w));
            out.push((format!("layer{n}.conv2_b"), &l.conv2_b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.conv1_w);
            out.push(&mut l.conv1_b);
            out.push(&mut l.conv2_w);
            out.push(&mut l.conv2_b);
        }
        out
    }
}

fn check_features(config: &BackboneConfig, features: &[FeatureMap], params: &AttentionNetParams) -> Result<()> {
    if features.len() != config.layer_count {
        return Err(CoralError::DimensionMismatch {
            what: "feature list length",
            expected: config.layer_count,
            got: features.len(),
        });
    }
    if params.layers.len() > config.layer_count {
        return Err(CoralError::InvalidArgument("more attention heads than layers".into()));
    }
    for (index, (f, p)) in features.iter().zip(&params.layers).enumerate() {
        if f.channels != p.conv1_w.shape[0] {
            return Err(CoralError::DimensionMismatch {
                what: "attention input channels",
                expected: p.conv1_w.shape[0],
                got: f.channels,
            });
        }
        let r = config.resolutions[index];
        if f.height != r || f.width != r {
            return Err(CoralError::ShapeMismatch(format!(
                "layer {} features are {}x{}, expected {r}x{r}",
                index + 1,
                f.height,
                f.width
            )));
        }
    }
    Ok(())
}

fn hidden_pre(layer: &AttentionLayer, px: &[f64], out: &mut [f64]) {
    out.copy_from_slice(&layer.conv1_b.data);
    for (c, &x) in px.iter().enumerate() {
        let row = &layer.conv1_w.data[c * ATTENTION_HIDDEN..(c + 1) * ATTENTION_HIDDEN];
        for (h, w) in out.iter_mut().zip(row) {
            *h += x * w;
        }
    }
}

/// Masks predicted from each layer's own features.
pub fn attention_masks(
    config: &BackboneConfig,
    features: &[FeatureMap],
    params: &AttentionNetParams,
) -> Result<MaskStack> {
    check_features(config, features, params)?;
    let mut masks = Vec::with_capacity(config.layer_count);
    let mut hidden = [0.0; ATTENTION_HIDDEN];
    for (index, f) in features.iter().enumerate() {
        let Some(layer) = params.layers.get(index) else {
            masks.push(LayerMask::zeros(f.height, f.width));
            continue;
        };
        let data = f
            .data
            .chunks_exact(f.channels)
            .map(|px| {
                hidden_pre(layer, px, &mut hidden);
                let logit = layer.conv2_b.data[0]
                    + hidden
                        .iter()
                        .zip(&layer.conv2_w.data)
                        .map(|(h, w)| h.max(0.0) * w)
                        .sum::<f64>();
                sigmoid(logit)
            })
            .collect();
        masks.push(LayerMask::new(f.height, f.width, data)?);
    }
    Ok(MaskStack::new(masks))
}

pub fn attention_masks_vjp(
    config: &BackboneConfig,
    features: &[FeatureMap],
    params: &AttentionNetParams,
    grad_masks: &MaskGrad,
) -> Result<AttentionNetParams> {
    check_features(config, features, params)?;
    let mut grad = AttentionNetParams {
        layers: params
            .layers
            .iter()
            .map(|l| AttentionLayer {
                conv1_w: l.conv1_w.zeros_like(),
                conv1_b: l.conv1_b.zeros_like(),
                conv2_w: l.conv2_w.zeros_like(),
                conv2_b: l.conv2_b.zeros_like(),
            })
            .collect(),
    };
    let mut hidden = [0.0; ATTENTION_HIDDEN];
    for (index, (layer, g)) in params.layers.iter().zip(grad.layers.iter_mut()).enumerate() {
        let f = &features[index];
        for (px, &gm) in f.data.chunks_exact(f.channels).zip(&grad_masks[index]) {
            if gm == 0.0 {
                continue;
            }
            hidden_pre(layer, px, &mut hidden);
            let logit = layer.conv2_b.data[0]
                + hidden
                    .iter()
                    .zip(&layer.conv2_w.data)
                    .map(|(h, w)| h.max(0.0) * w)
                    .sum::<f64>();
            let s = sigmoid(logit);
            let gl = gm * s * (1.0 - s);
            g.conv2_b.data[0] += gl;
            for k in 0..ATTENTION_HIDDEN {
                if hidden[k] <= 0.0 {
                    continue;
                }
                g.conv2_w.data[k] += gl * hidden[k];
                let gh = gl * layer.conv2_w.data[k];
                g.conv1_b.data[k] += gh;
                for (c, &x) in px.iter().enumerate() {
                    g.conv1_w.data[c * ATTENTION_HIDDEN + k] += gh * x;
                }
            }
        }
    }
    Ok(grad)
}

/// `m * 1{m >= tau}`: entries below `tau` drop to zero, the rest keep their
/// soft value.
pub fn apply_threshold(masks: &MaskStack, tau: f64) -> Result<MaskStack> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoralError::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    Ok(MaskStack::new(
        masks
            .layers()
            .iter()
            .map(|m| m.map(|v| if v >= tau { v } else { 0.0 }))
            .collect(),
    ))
}

/// A trained or trainable region selector.
#[derive(Debug, Clone, PartialEq)]
pub enum Selector {
    SegmentSelection(SegmentSelectionMatrix),
    Attention(AttentionNetParams),
}

impl Selector {
    pub fn init(
        variant: Variant,
        config: &BackboneConfig,
        classes: usize,
        edit_cutoff: usize,
        seed: u64,
    ) -> Self {
        match variant {
            Variant::Ss => Selector::SegmentSelection(SegmentSelectionMatrix::zeros(classes, config.layer_count)),
            Variant::Can => Selector::Attention(AttentionNetParams::init(config, edit_cutoff, seed)),
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Selector::SegmentSelection(_) => Variant::Ss,
            Selector::Attention(_) => Variant::Can,
        }
    }

    /// Masks for one image. The segment map is required by segment
    /// selection; the features (of the unedited pass) by the attention net.
    pub fn masks(
        &self,
        config: &BackboneConfig,
        seg: Option<&SegmentMap>,
        features: &[FeatureMap],
        edit_cutoff: usize,
    ) -> Result<MaskStack> {
        match self {
            Selector::SegmentSelection(e) => {
                let seg = seg.ok_or_else(|| CoralError::InvalidArgument("segment selection needs a segment map".into()))?;
                segment_masks(config, seg, e, edit_cutoff)
            }
            Selector::Attention(p) => attention_masks(config, features, p),
        }
    }

    pub fn masks_vjp(
        &self,
        config: &BackboneConfig,
        seg: Option<&SegmentMap>,
        features: &[FeatureMap],
        edit_cutoff: usize,
        grad_masks: &MaskGrad,
    ) -> Result<Selector> {
        Ok(match self {
            Selector::SegmentSelection(e) => {
                let seg = seg.ok_or_else(|| CoralError::InvalidArgument("segment selection needs a segment map".into()))?;
                Selector::SegmentSelection(segment_masks_vjp(config, seg, e, edit_cutoff, grad_masks)?)
            }
            Selector::Attention(p) => Selector::Attention(attention_masks_vjp(config, features, p, grad_masks)?),
        })
    }

    pub fn zeros_like(&self) -> Selector {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }
}

impl ParamTensors for Selector {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Selector::SegmentSelection(e) => e.tensors(),
            Selector::Attention(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Selector::SegmentSelection(e) => e.tensors_mut(),
            Selector::Attention(p) => p.tensors_mut(),
        }
    }
}
