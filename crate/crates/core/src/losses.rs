//! Training objectives and their gradients.

use serde::{Deserialize, Serialize};

use crate::blending::{MaskGrad, MaskStack};
use crate::editors::{EditDelta, EditorKind};
use crate::error::{CoralError, Result};
use crate::selectors::{sigmoid, SegmentSelectionMatrix, Variant};
use crate::tensor::ImageRgb;

/// Distance between an image and a text prompt; lower is better aligned.
pub trait SemanticScorer: Send + Sync {
    fn distance(&self, image: &ImageRgb, prompt: &str) -> Result<f64>;
    /// Gradient of [`SemanticScorer::distance`] with respect to the image.
    fn distance_grad(&self, image: &ImageRgb, prompt: &str) -> Result<ImageRgb>;
}

/// Unit-norm identity embedding of an image.
pub trait IdentityEmbedder: Send + Sync {
    fn embed(&self, image: &ImageRgb) -> Result<Vec<f64>>;
    /// Pulls `grad` (with respect to the embedding) back to the image.
    fn embed_vjp(&self, image: &ImageRgb, grad: &[f64]) -> Result<ImageRgb>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_id: f64,
    pub lambda_area: f64,
    #[serde(default)]
    pub lambda_tv: f64,
}

impl LossWeights {
    /// Face-domain weights for each variant and editor.
    pub fn defaults_for(variant: Variant, editor: EditorKind) -> Self {
        let (lambda_l2, lambda_id, lambda_area, lambda_tv) = match (variant, editor) {
            (Variant::Ss, EditorKind::Global) => (0.0007, 0.015, 0.10, 0.0),
            (Variant::Ss, EditorKind::Mapper) => (0.0002, 0.020, 0.08, 0.0),
            (Variant::Can, EditorKind::Global) => (0.0009, 0.08, 0.00009, 0.00003),
            (Variant::Can, EditorKind::Mapper) => (0.0006, 0.08, 0.00002, 0.00003),
        };
        LossWeights {
            lambda_l2,
            lambda_id,
            lambda_area,
            lambda_tv,
        }
    }

    /// Weights for domains without an identity to keep (cars and similar):
    /// identity term off and a lighter latent penalty.
    pub fn non_face(variant: Variant, editor: EditorKind) -> Self {
        LossWeights {
            lambda_l2: 0.0002,
            lambda_id: 0.0,
            ..Self::defaults_for(variant, editor)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_l2", self.lambda_l2),
            ("lambda_id", self.lambda_id),
            ("lambda_area", self.lambda_area),
            ("lambda_tv", self.lambda_tv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoralError::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms. `tv` is present exactly for the attention variant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub clip: f64,
    pub l2: f64,
    pub id: f64,
    pub area: f64,
    pub tv: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub clip: f64,
    pub l2: f64,
    pub id: f64,
    pub area: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.clip, self.l2, self.id, self.area, self.tv, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights, variant: Variant) -> Result<LossReport> {
    let base = parts.clip + weights.lambda_l2 * parts.l2 + weights.lambda_id * parts.id + weights.lambda_area * parts.area;
    let (tv, total) = match (variant, parts.tv) {
        (Variant::Ss, None) => (0.0, base),
        (Variant::Can, Some(tv)) => (tv, base + weights.lambda_tv * tv),
        (Variant::Ss, Some(_)) => {
            return Err(CoralError::InvalidArgument("segment selection has no tv term".into()))
        }
        (Variant::Can, None) => {
            return Err(CoralError::InvalidArgument("attention variant needs a tv term".into()))
        }
    };
    Ok(LossReport {
        clip: parts.clip,
        l2: parts.l2,
        id: parts.id,
        area: parts.area,
        tv,
        total,
    })
}

fn check_same_resolution(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if !a.same_shape(b) {
        return Err(CoralError::ShapeMismatch(format!(
            "images {:?} and {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Semantic alignment of the blended image, optionally averaged with that of
/// the fully edited image.
pub fn clip_loss(
    i_star: &ImageRgb,
    i_tilde: &ImageRgb,
    prompt: &str,
    scorer: &dyn SemanticScorer,
    dual: bool,
) -> Result<f64> {
    check_same_resolution(i_star, i_tilde)?;
    let d_star = scorer.distance(i_star, prompt)?;
    if !dual {
        return Ok(d_star);
    }
    Ok(0.5 * (d_star + scorer.distance(i_tilde, prompt)?))
}

/// Gradients of [`clip_loss`] with respect to `i_star` and `i_tilde`; the
/// second is `None` when `dual` is off.
pub fn clip_loss_grads(
    i_star: &ImageRgb,
    i_tilde: &ImageRgb,
    prompt: &str,
    scorer: &dyn SemanticScorer,
    dual: bool,
) -> Result<(ImageRgb, Option<ImageRgb>)> {
    check_same_resolution(i_star, i_tilde)?;
    let mut g_star = scorer.distance_grad(i_star, prompt)?;
    if !dual {
        return Ok((g_star, None));
    }
    let mut g_tilde = scorer.distance_grad(i_tilde, prompt)?;
    g_star.data.iter_mut().for_each(|v| *v *= 0.5);
    g_tilde.data.iter_mut().for_each(|v| *v *= 0.5);
    Ok((g_star, Some(g_tilde)))
}

/// Sum of squared entries over all rows.
pub fn l2_loss(delta: &EditDelta) -> f64 {
    delta.squared_norm()
}

/// `2 * delta`, laid out as the delta rows.
pub fn l2_loss_grad(delta: &EditDelta) -> Vec<f64> {
    delta.as_code().as_slice().iter().map(|v| 2.0 * v).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One minus the cosine between identity embeddings.
pub fn id_loss(i_star: &ImageRgb, i_orig: &ImageRgb, embedder: &dyn IdentityEmbedder) -> Result<f64> {
    check_same_resolution(i_star, i_orig)?;
    let a = embedder.embed(i_star)?;
    let b = embedder.embed(i_orig)?;
    Ok(1.0 - dot(&a, &b))
}

/// Gradient of [`id_loss`] with respect to `i_star`; the original is fixed.
pub fn id_loss_grad(i_star: &ImageRgb, i_orig: &ImageRgb, embedder: &dyn IdentityEmbedder) -> Result<ImageRgb> {
    check_same_resolution(i_star, i_orig)?;
    let b: Vec<f64> = embedder.embed(i_orig)?.iter().map(|v| -v).collect();
    embedder.embed_vjp(i_star, &b)
}

/// Sum of the sigmoid of every selection logit.
pub fn area_loss_ss(e: &SegmentSelectionMatrix) -> f64 {
    e.logits.data.iter().map(|&x| sigmoid(x)).sum()
}

pub fn area_loss_ss_grad(e: &SegmentSelectionMatrix) -> SegmentSelectionMatrix {
    let mut g = SegmentSelectionMatrix::zeros(e.classes(), e.layers());
    for (gv, &x) in g.logits.data.iter_mut().zip(&e.logits.data) {
        let s = sigmoid(x);
        *gv = s * (1.0 - s);
    }
    g
}

/// Mask sums normalized by each layer's side length.
pub fn area_loss_can(masks: &MaskStack) -> f64 {
    masks.layers().iter().map(|m| m.sum() / m.height as f64).sum()
}

pub fn area_loss_can_grad(masks: &MaskStack) -> MaskGrad {
    masks
        .layers()
        .iter()
        .map(|m| vec![1.0 / m.height as f64; m.values().len()])
        .collect()
}

/// Squared differences between horizontal and vertical neighbours, over
/// interior pairs only.
pub fn tv_loss(masks: &MaskStack) -> f64 {
    let mut total = 0.0;
    for m in masks.layers() {
        let (h, w) = (m.height, m.width);
        for i in 0..h {
            for j in 0..w {
                let v = m.at(i, j);
                if j + 1 < w {
                    total += (v - m.at(i, j + 1)).powi(2);
                }
                if i + 1 < h {
                    total += (v - m.at(i + 1, j)).powi(2);
                }
            }
        }
    }
    total
}

pub fn tv_loss_grad(masks: &MaskStack) -> MaskGrad {
    masks
        .layers()
        .iter()
        .map(|m| {
            let (h, w) = (m.height, m.width);
            let mut g = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = m.at(i, j);
                    if j + 1 < w {
                        let d = 2.0 * (v - m.at(i, j + 1));
                        g[i * w + j] += d;
                        g[i * w + j + 1] -= d;
                    }
                    if i + 1 < h {
                        let d = 2.0 * (v - m.at(i + 1, j));
                        g[i * w + j] += d;
                        g[(i + 1) * w + j] -= d;
                    }
                }
            }
            g
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::WPlusCode;
    use crate::blending::LayerMask;

    #[test]
    fn weights_table() {
        let w = LossWeights::defaults_for(Variant::Ss, EditorKind::Global);
        assert_eq!((w.lambda_l2, w.lambda_id, w.lambda_area), (0.0007, 0.015, 0.10));
        let w = LossWeights::defaults_for(Variant::Ss, EditorKind::Mapper);
        assert_eq!((w.lambda_l2, w.lambda_id, w.lambda_area), (0.0002, 0.020, 0.08));
        let w = LossWeights::defaults_for(Variant::Can, EditorKind::Global);
        assert_eq!(
            (w.lambda_l2, w.lambda_id, w.lambda_area, w.lambda_tv),
            (0.0009, 0.08, 0.00009, 0.00003)
        );
        let w = LossWeights::defaults_for(Variant::Can, EditorKind::Mapper);
        assert_eq!(
            (w.lambda_l2, w.lambda_id, w.lambda_area, w.lambda_tv),
            (0.0006, 0.08, 0.00002, 0.00003)
        );
        let w = LossWeights::non_face(Variant::Ss, EditorKind::Global);
        assert_eq!((w.lambda_l2, w.lambda_id), (0.0002, 0.0));
    }

    #[test]
    fn negative_weight_rejected() {
        let mut w = LossWeights::defaults_for(Variant::Ss, EditorKind::Global);
        w.lambda_id = -1.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn total_of_unit_parts() {
        let w = LossWeights::defaults_for(Variant::Ss, EditorKind::Global);
        let parts = LossParts {
            clip: 1.0,
            l2: 1.0,
            id: 1.0,
            area: 1.0,
            tv: None,
        };
        let r = total_loss(&parts, &w, Variant::Ss).unwrap();
        assert!((r.total - 1.1157).abs() < 1e-12);
        let zero = total_loss(&LossParts::default(), &w, Variant::Ss).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn total_rejects_variant_mismatch() {
        let w = LossWeights::defaults_for(Variant::Can, EditorKind::Global);
        let mut parts = LossParts::default();
        assert!(total_loss(&parts, &w, Variant::Can).is_err());
        parts.tv = Some(0.0);
        assert!(total_loss(&parts, &w, Variant::Ss).is_err());
        assert!(total_loss(&parts, &w, Variant::Can).is_ok());
    }

    #[test]
    fn l2_three_four_five() {
        let mut rows = vec![vec![0.0; 4]; 3];
        rows[1][0] = 3.0;
        rows[1][1] = 4.0;
        let d = EditDelta::from_code(WPlusCode::from_rows(rows).unwrap(), 3);
        assert_eq!(l2_loss(&d), 25.0);
    }

    #[test]
    fn area_examples() {
        assert_eq!(area_loss_ss(&SegmentSelectionMatrix::zeros(5, 18)), 45.0);
        let mut e = SegmentSelectionMatrix::zeros(2, 3);
        e.logits.data.fill(-800.0);
        assert!(area_loss_ss(&e) < 1e-300);
        let m = MaskStack::new(vec![LayerMask::ones(32, 32)]);
        assert_eq!(area_loss_can(&m), 32.0);
        assert_eq!(area_loss_can(&MaskStack::new(vec![LayerMask::zeros(8, 8)])), 0.0);
    }

    #[test]
    fn tv_examples() {
        let checker = MaskStack::new(vec![LayerMask::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()]);
        assert_eq!(tv_loss(&checker), 4.0);
        let pair = MaskStack::new(vec![LayerMask::new(1, 2, vec![0.25, 0.75]).unwrap()]);
        assert_eq!(tv_loss(&pair), 0.25);
        assert_eq!(tv_loss(&MaskStack::new(vec![LayerMask::filled(5, 5, 0.3)])), 0.0);
    }

    #[test]
    fn tv_grad_matches_difference() {
        let m = MaskStack::new(vec![LayerMask::new(2, 3, vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.5]).unwrap()]);
        let g = tv_loss_grad(&m);
        let eps = 1e-6;
        for k in 0..6 {
            let bump = |s: f64| {
                let mut v = m.get(0).values().to_vec();
                v[k] += s;
                tv_loss(&MaskStack::new(vec![LayerMask::new(2, 3, v).unwrap()]))
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            assert!((fd - g[0][k]).abs() < 1e-8);
        }
    }
}
