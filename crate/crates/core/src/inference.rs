//! Trained edit artifacts and their application.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, BackboneConfig, LatentZ, Synthesis};
use crate::blending::{blended_forward, LayerMask, MaskStack};
use crate::blob::{self, BlobEntry, Precision};
use crate::editors::{scale_delta, Editor, EditorKind};
use crate::error::{CoralError, Result};
use crate::losses::{IdentityEmbedder, LossWeights};
use crate::selectors::{apply_threshold, SegmenterSpec, Selector, Variant};
use crate::tensor::{ImageRgb, ParamTensors};
use crate::trainer::{TrainConfig, TrainState};

pub const ARTIFACT_FORMAT: &str = "coral-edit";
pub const ARTIFACT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Everything about an edit except its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactInfo {
    pub prompt: String,
    pub variant: Variant,
    pub editor_kind: EditorKind,
    pub edit_cutoff: usize,
    pub default_tau: f64,
    pub learning_rate: f64,
    pub backbone_fingerprint: String,
    pub weights: LossWeights,
    pub segmenter: SegmenterSpec,
    pub backbone: BackboneConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    edit: ArtifactInfo,
    blobs: Vec<BlobEntry>,
}

/// A trained selector and editor bound to one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct EditArtifact {
    pub info: ArtifactInfo,
    pub selector: Selector,
    pub editor: Editor,
}

impl EditArtifact {
    /// Snapshot of a training state, with parameters rounded to their stored
    /// precision so that saving and loading is exact.
    pub fn from_training(config: &TrainConfig, state: &TrainState, backbone: &dyn Synthesis) -> Result<Self> {
        let mut selector = state.selector.clone();
        let mut editor = state.editor.clone();
        selector.round_to_f32();
        editor.round_to_f32();
        Ok(EditArtifact {
            info: ArtifactInfo {
                prompt: config.prompt.clone(),
                variant: config.variant,
                editor_kind: config.editor,
                edit_cutoff: config.edit_cutoff,
                default_tau: config.default_tau,
                learning_rate: config.resolved_learning_rate(),
                backbone_fingerprint: backbone.fingerprint().to_string(),
                weights: config.loss_weights(),
                segmenter: config.segmenter,
                backbone: backbone.config().clone(),
            },
            selector,
            editor,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoralError::io(dir, e))?;
        let mut blobs = blob::save_params(dir, "selector", &self.selector, Precision::F32)?;
        blobs.extend(blob::save_params(dir, "editor", &self.editor, Precision::F32)?);
        let manifest = Manifest {
            format: ARTIFACT_FORMAT.into(),
            format_version: ARTIFACT_VERSION,
            edit: self.info.clone(),
            blobs,
        };
        let text = toml::to_string(&manifest).map_err(|e| CoralError::Encode(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| CoralError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CoralError::io(&path, e))?;
        let raw: toml::Table = toml::from_str(&text).map_err(|e| CoralError::layout(&path, e.to_string()))?;
        match raw.get("format").and_then(|v| v.as_str()) {
            Some(ARTIFACT_FORMAT) => {}
            other => return Err(CoralError::layout(&path, format!("not an edit artifact (format {other:?})"))),
        }
        match raw.get("format_version").and_then(|v| v.as_integer()) {
            Some(v) if v == ARTIFACT_VERSION as i64 => {}
            other => {
                return Err(CoralError::VersionMismatch {
                    path,
                    reason: format!("artifact version {other:?} (supported: {ARTIFACT_VERSION})"),
                })
            }
        }
        let manifest: Manifest = toml::from_str(&text).map_err(|e| CoralError::layout(&path, e.to_string()))?;
        let info = manifest.edit;
        info.backbone.validate()?;
        if info.edit_cutoff == 0 || info.edit_cutoff > info.backbone.layer_count {
            return Err(CoralError::layout(&path, format!("edit cutoff {} out of range", info.edit_cutoff)));
        }
        if !(0.0..=1.0).contains(&info.default_tau) {
            return Err(CoralError::layout(&path, format!("default tau {} out of range", info.default_tau)));
        }
        let mut selector = Selector::init(
            info.variant,
            &info.backbone,
            info.segmenter.class_count(),
            info.edit_cutoff,
            0,
        );
        let mut editor = Editor::init(
            info.editor_kind,
            info.backbone.layer_count,
            info.backbone.latent_dim,
            info.edit_cutoff,
            0,
        );
        blob::load_params(dir, "selector", &manifest.blobs, &mut selector)?;
        blob::load_params(dir, "editor", &manifest.blobs, &mut editor)?;
        Ok(EditArtifact { info, selector, editor })
    }

    /// Errors unless `backbone` is the one this edit was trained against.
    pub fn check_backbone(&self, backbone: &dyn Synthesis) -> Result<()> {
        if backbone.fingerprint() != self.info.backbone_fingerprint || backbone.config() != &self.info.backbone {
            return Err(CoralError::FingerprintMismatch {
                expected: self.info.backbone_fingerprint.clone(),
                found: backbone.fingerprint().to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub edited: ImageRgb,
    pub original: ImageRgb,
    /// Masks after thresholding and layer toggles.
    pub masks: MaskStack,
    pub area_fractions: Vec<f64>,
}

/// Applies a trained edit to the image of `z`.
///
/// `alpha` scales the latent delta (negative values reverse the edit),
/// mask entries below `tau` are dropped and layers whose toggle is `false`
/// get a zero mask.
pub fn apply_edit(
    backbone: &dyn Synthesis,
    z: &LatentZ,
    artifact: &EditArtifact,
    alpha: f64,
    tau: f64,
    layer_toggles: Option<&[bool]>,
) -> Result<EditResult> {
    artifact.check_backbone(backbone)?;
    if !alpha.is_finite() {
        return Err(CoralError::InvalidArgument(format!("alpha {alpha} is not finite")));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoralError::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let config = backbone.config();
    if let Some(t) = layer_toggles {
        if t.len() != config.layer_count {
            return Err(CoralError::DimensionMismatch {
                what: "layer toggles",
                expected: config.layer_count,
                got: t.len(),
            });
        }
    }
    let w = backbone.map_latent(z)?;
    let delta = scale_delta(&artifact.editor.delta(&w)?, alpha);
    let w2 = delta.apply_to(&w)?;
    let (original, features) = forward(backbone, &w)?;
    let seg = match artifact.info.variant {
        Variant::Ss => Some(artifact.info.segmenter.build().segment(&original)?),
        Variant::Can => None,
    };
    let soft = artifact
        .selector
        .masks(config, seg.as_ref(), &features, artifact.info.edit_cutoff)?;
    let mut masks = apply_threshold(&soft, tau)?;
    for index in 0..config.layer_count {
        let off = layer_toggles.is_some_and(|t| !t[index]);
        if off || index >= artifact.info.edit_cutoff {
            let m = masks.get(index);
            masks.set(index, LayerMask::zeros(m.height, m.width));
        }
    }
    let (edited, _) = blended_forward(backbone, &w, &w2, &masks)?;
    let area_fractions = masks.area_fractions();
    Ok(EditResult {
        edited,
        original,
        masks,
        area_fractions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    /// Mean squared per-channel pixel difference.
    pub l2: f64,
    /// Cosine of the identity embeddings of the two images.
    pub id_similarity: f64,
    /// Mean absolute per-channel pixel difference.
    pub mean_abs_change: f64,
    /// Per-layer edit-area fractions of the result.
    pub area_fractions: Vec<f64>,
}

pub fn edit_metrics(result: &EditResult, embedder: &dyn IdentityEmbedder) -> Result<EditMetrics> {
    let (a, b) = (&result.edited, &result.original);
    if !a.same_shape(b) {
        return Err(CoralError::ShapeMismatch("edited and original differ in shape".into()));
    }
    let n = a.data.len().max(1) as f64;
    let l2 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    let mean_abs_change = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    let id_similarity = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    Ok(EditMetrics {
        l2,
        id_similarity,
        mean_abs_change,
        area_fractions: result.area_fractions.clone(),
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_bytes(write: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(Vec::new());
    write(&mut cur).map_err(|e| CoralError::Encode(e.to_string()))?;
    Ok(cur.into_inner())
}

/// 8-bit PNG of an RGB image, values clamped to `[0, 1]`.
pub fn encode_png(image: &ImageRgb) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(CoralError::ShapeMismatch(format!("PNG export needs 3 channels, got {}", image.channels)));
    }
    let buf: Vec<u8> = image.data.iter().map(|&v| to_byte(v)).collect();
    let img = RgbImage::from_raw(image.width as u32, image.height as u32, buf)
        .ok_or_else(|| CoralError::Encode("image buffer size".into()))?;
    png_bytes(|c| img.write_to(c, ImageFormat::Png))
}

/// 8-bit grayscale PNG of a mask at its own resolution.
pub fn encode_mask_png(mask: &LayerMask) -> Result<Vec<u8>> {
    let buf: Vec<u8> = mask.values().iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, buf)
        .ok_or_else(|| CoralError::Encode("mask buffer size".into()))?;
    png_bytes(|c| img.write_to(c, ImageFormat::Png))
}

pub fn write_png(path: &Path, image: &ImageRgb) -> Result<()> {
    fs::write(path, encode_png(image)?).map_err(|e| CoralError::io(path, e))
}

pub fn write_mask_png(path: &Path, mask: &LayerMask) -> Result<()> {
    fs::write(path, encode_mask_png(mask)?).map_err(|e| CoralError::io(path, e))
}
