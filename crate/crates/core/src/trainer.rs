//! Joint optimization of a region selector and a latent editor against a
//! frozen backbone.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{features_vjp, forward, BackboneConfig, LatentZ, Synthesis};
use crate::blending::{blended_forward, blended_forward_and_vjp};
use crate::blob::{self, BlobEntry, Precision};
use crate::desk::{ScorerSpec, StubClipScorer};
use crate::editors::{Editor, EditorKind};
use crate::error::{CoralError, Result};
use crate::inference::EditArtifact;
use crate::losses::{
    area_loss_can, area_loss_can_grad, area_loss_ss, area_loss_ss_grad, id_loss, id_loss_grad, l2_loss,
    l2_loss_grad, total_loss, tv_loss, tv_loss_grad, IdentityEmbedder, LossParts, LossReport, LossWeights,
    SemanticScorer,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::selectors::{Segmenter, SegmenterSpec, Selector, Variant, DEFAULT_TAU};
use crate::tensor::{axpy_params, ImageRgb, ParamTensors, Tensor};

pub const DEFAULT_BATCH_SIZE: usize = 3;
pub const DEFAULT_MAX_ITERATIONS: u64 = 20_000;
pub const DEFAULT_EDIT_CUTOFF: usize = 13;
/// Iterations between plateau checks of the smoothed clip loss.
pub const PLATEAU_WINDOW: u64 = 500;
/// Minimum relative improvement per window to keep training.
pub const PLATEAU_TOLERANCE: f64 = 1e-3;
/// Smoothing factor of the running loss averages.
pub const RUNNING_DECAY: f64 = 0.99;

const CHECKPOINT_FORMAT: &str = "coral-train-state";
const CHECKPOINT_VERSION: u32 = 1;
const STATE_FILE: &str = "state.toml";

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_max_iterations() -> u64 {
    DEFAULT_MAX_ITERATIONS
}
fn default_edit_cutoff() -> usize {
    DEFAULT_EDIT_CUTOFF
}
fn default_eval_every() -> u64 {
    100
}
fn default_true() -> bool {
    true
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_scorer() -> ScorerSpec {
    ScorerSpec::StubClip(StubClipScorer::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub prompt: String,
    pub variant: Variant,
    pub editor: EditorKind,
    /// Falls back to the per-variant defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_edit_cutoff")]
    pub edit_cutoff: usize,
    /// Loss rows are logged every this many iterations.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Zero disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Average the clip distance of the blended and the fully edited image.
    #[serde(default = "default_true")]
    pub dual_clip: bool,
    /// Stop once the smoothed clip loss plateaus.
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default = "default_tau")]
    pub default_tau: f64,
    #[serde(default)]
    pub segmenter: SegmenterSpec,
    #[serde(default = "default_scorer")]
    pub scorer: ScorerSpec,
}

impl TrainConfig {
    pub fn new(prompt: impl Into<String>, variant: Variant, editor: EditorKind) -> Self {
        TrainConfig {
            prompt: prompt.into(),
            variant,
            editor,
            weights: None,
            batch_size: DEFAULT_BATCH_SIZE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            learning_rate: None,
            seed: 0,
            edit_cutoff: DEFAULT_EDIT_CUTOFF,
            eval_every: default_eval_every(),
            checkpoint_every: 0,
            dual_clip: true,
            early_stop: false,
            default_tau: DEFAULT_TAU,
            segmenter: SegmenterSpec::default(),
            scorer: default_scorer(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoralError::InvalidArgument(format!("train config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoralError::Encode(e.to_string()))
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights
            .unwrap_or_else(|| LossWeights::defaults_for(self.variant, self.editor))
    }

    pub fn resolved_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match (self.variant, self.editor) {
            (Variant::Ss, EditorKind::Global) => 0.01,
            _ => 0.0005,
        })
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let bad = |m: String| Err(CoralError::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if self.edit_cutoff == 0 || self.edit_cutoff > backbone.layer_count {
            return bad(format!(
                "edit_cutoff {} outside 1..={}",
                self.edit_cutoff, backbone.layer_count
            ));
        }
        let lr = self.resolved_learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return bad(format!("learning rate {lr} must be positive"));
        }
        if !(0.0..=1.0).contains(&self.default_tau) {
            return bad(format!("default_tau {} outside [0, 1]", self.default_tau));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.segmenter.class_count() == 0 {
            return bad("segmenter has no classes".into());
        }
        self.loss_weights().validate()
    }
}

/// The frozen pieces a training run evaluates against.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub backbone: &'a dyn Synthesis,
    pub scorer: &'a dyn SemanticScorer,
    pub embedder: &'a dyn IdentityEmbedder,
    pub segmenter: &'a dyn Segmenter,
}

/// Parameter gradients, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub selector: Selector,
    pub editor: Editor,
}

struct SampleOutcome {
    parts: LossParts,
    grads: Option<Gradients>,
}

fn scaled(mut image: ImageRgb, s: f64) -> ImageRgb {
    image.data.iter_mut().for_each(|v| *v *= s);
    image
}

fn sample(
    c: &Components<'_>,
    config: &TrainConfig,
    weights: &LossWeights,
    selector: &Selector,
    editor: &Editor,
    z: &LatentZ,
    want_grad: bool,
) -> Result<SampleOutcome> {
    let bb = c.backbone;
    let bc = bb.config();
    let cutoff = config.edit_cutoff;
    let w = bb.map_latent(z)?;
    let delta = editor.delta(&w)?;
    let w2 = delta.apply_to(&w)?;
    let (image, feats) = forward(bb, &w)?;
    let seg = match selector.variant() {
        Variant::Ss => Some(c.segmenter.segment(&image)?),
        Variant::Can => None,
    };
    let masks = selector.masks(bc, seg.as_ref(), &feats, cutoff)?;
    let tilde = if config.dual_clip {
        Some(forward(bb, &w2)?)
    } else {
        None
    };
    let clip_scale = if config.dual_clip { 0.5 } else { 1.0 };
    let prompt = config.prompt.as_str();

    let mut parts = LossParts {
        l2: l2_loss(&delta),
        ..LossParts::default()
    };
    if selector.variant() == Variant::Can {
        parts.area = area_loss_can(&masks);
        parts.tv = Some(tv_loss(&masks));
    }
    let d_tilde = match &tilde {
        Some((t, _)) => c.scorer.distance(t, prompt)?,
        None => 0.0,
    };

    if !want_grad {
        let (i_star, _) = blended_forward(bb, &w, &w2, &masks)?;
        let d_star = c.scorer.distance(&i_star, prompt)?;
        parts.clip = if config.dual_clip { 0.5 * (d_star + d_tilde) } else { d_star };
        parts.id = id_loss(&i_star, &image, c.embedder)?;
        return Ok(SampleOutcome { parts, grads: None });
    }

    let mut d_star = 0.0;
    let mut id = 0.0;
    let (_, bgrads) = blended_forward_and_vjp(bb, &w, &w2, &masks, |i_star| {
        d_star = c.scorer.distance(i_star, prompt)?;
        id = id_loss(i_star, &image, c.embedder)?;
        let mut g = scaled(c.scorer.distance_grad(i_star, prompt)?, clip_scale);
        if weights.lambda_id != 0.0 {
            let gid = id_loss_grad(i_star, &image, c.embedder)?;
            for (a, b) in g.data.iter_mut().zip(&gid.data) {
                *a += weights.lambda_id * b;
            }
        }
        Ok(g)
    })?;
    parts.clip = if config.dual_clip { 0.5 * (d_star + d_tilde) } else { d_star };
    parts.id = id;

    let mut grad_delta = bgrads.w2;
    if let Some((t, tfeats)) = &tilde {
        let g = scaled(c.scorer.distance_grad(t, prompt)?, clip_scale);
        let gw = features_vjp(bb, &w2, tfeats, &g)?;
        for (a, b) in grad_delta.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *a += b;
        }
    }
    for (a, b) in grad_delta.as_mut_slice().iter_mut().zip(l2_loss_grad(&delta)) {
        *a += weights.lambda_l2 * b;
    }
    let editor_grad = editor.delta_vjp(&w, &grad_delta)?;

    let mut mask_grad = bgrads.masks;
    if selector.variant() == Variant::Can {
        let ga = area_loss_can_grad(&masks);
        let gt = tv_loss_grad(&masks);
        for ((g, a), t) in mask_grad.iter_mut().zip(&ga).zip(&gt) {
            for ((gv, av), tv) in g.iter_mut().zip(a).zip(t) {
                *gv += weights.lambda_area * av + weights.lambda_tv * tv;
            }
        }
    }
    let selector_grad = selector.masks_vjp(bc, seg.as_ref(), &feats, cutoff, &mask_grad)?;
    Ok(SampleOutcome {
        parts,
        grads: Some(Gradients {
            selector: selector_grad,
            editor: editor_grad,
        }),
    })
}

fn evaluate(
    c: &Components<'_>,
    config: &TrainConfig,
    selector: &Selector,
    editor: &Editor,
    zs: &[LatentZ],
    want_grad: bool,
) -> Result<(LossReport, Option<Gradients>)> {
    if zs.is_empty() {
        return Err(CoralError::InvalidArgument("empty latent batch".into()));
    }
    let weights = config.loss_weights();
    let outcomes = zs
        .par_iter()
        .map(|z| sample(c, config, &weights, selector, editor, z, want_grad))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / zs.len() as f64;
    let mut parts = LossParts::default();
    if selector.variant() == Variant::Can {
        parts.tv = Some(0.0);
    }
    let mut grads = want_grad.then(|| Gradients {
        selector: selector.zeros_like(),
        editor: editor.zeros_like(),
    });
    // Fixed summation order keeps the result independent of scheduling.
    for o in &outcomes {
        parts.clip += o.parts.clip * inv;
        parts.l2 += o.parts.l2 * inv;
        parts.id += o.parts.id * inv;
        parts.area += o.parts.area * inv;
        if let (Some(t), Some(ot)) = (parts.tv.as_mut(), o.parts.tv) {
            *t += ot * inv;
        }
        if let (Some(g), Some(og)) = (grads.as_mut(), o.grads.as_ref()) {
            axpy_params(&mut g.selector, &og.selector, inv);
            axpy_params(&mut g.editor, &og.editor, inv);
        }
    }
    if let Selector::SegmentSelection(e) = selector {
        parts.area = area_loss_ss(e);
        if let Some(g) = grads.as_mut() {
            if let Selector::SegmentSelection(ge) = &mut g.selector {
                axpy_params(ge, &area_loss_ss_grad(e), weights.lambda_area);
            }
        }
    }
    Ok((total_loss(&parts, &weights, selector.variant())?, grads))
}

/// Batch-averaged loss at the given parameters.
pub fn objective(
    c: &Components<'_>,
    config: &TrainConfig,
    selector: &Selector,
    editor: &Editor,
    zs: &[LatentZ],
) -> Result<LossReport> {
    Ok(evaluate(c, config, selector, editor, zs, false)?.0)
}

/// Batch-averaged loss and its gradient with respect to the selector and
/// editor parameters.
pub fn objective_and_grad(
    c: &Components<'_>,
    config: &TrainConfig,
    selector: &Selector,
    editor: &Editor,
    zs: &[LatentZ],
) -> Result<(LossReport, Gradients)> {
    let (report, grads) = evaluate(c, config, selector, editor, zs, true)?;
    Ok((report, grads.expect("gradients requested")))
}

/// Latent batch for an iteration; depends only on the seed and iteration.
pub fn sample_batch(seed: u64, iteration: u64, batch_size: usize, dim: usize) -> Vec<LatentZ> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration + 1);
    (0..batch_size).map(|_| LatentZ::sample(&mut rng, dim)).collect()
}

/// Plateau tracking on the smoothed clip loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Plateau {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    #[serde(default)]
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub selector: Selector,
    pub editor: Editor,
    pub adam: AdamState,
    /// Batches are drawn from a stream keyed by this seed and the iteration.
    pub rng_seed: u64,
    /// Exponentially smoothed loss terms.
    pub running: LossReport,
    pub plateau: Plateau,
}

impl TrainState {
    pub fn new(config: &TrainConfig, backbone: &BackboneConfig) -> Result<Self> {
        config.validate(backbone)?;
        let selector = Selector::init(
            config.variant,
            backbone,
            config.segmenter.class_count(),
            config.edit_cutoff,
            config.seed.wrapping_add(1),
        );
        let editor = Editor::init(
            config.editor,
            backbone.layer_count,
            backbone.latent_dim,
            config.edit_cutoff,
            config.seed.wrapping_add(2),
        );
        let adam = {
            let mut params: Vec<&Tensor> = selector.tensors().into_iter().map(|(_, t)| t).collect();
            params.extend(editor.tensors().into_iter().map(|(_, t)| t));
            AdamState::for_params(&params)
        };
        Ok(TrainState {
            iteration: 0,
            selector,
            editor,
            adam,
            rng_seed: config.seed,
            running: LossReport::default(),
            plateau: Plateau::default(),
        })
    }

    /// Writes an exact (f64) checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoralError::io(dir, e))?;
        let mut blobs = Vec::new();
        blobs.extend(blob::save_params(dir, "selector", &self.selector, Precision::F64)?);
        blobs.extend(blob::save_params(dir, "editor", &self.editor, Precision::F64)?);
        for (k, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            for (kind, t) in [("m", m), ("v", v)] {
                let file = format!("adam.{kind}{k}.bin");
                let sha256 = blob::write(&dir.join(&file), t, Precision::F64)?;
                blobs.push(BlobEntry {
                    name: format!("adam.{kind}{k}"),
                    file,
                    sha256,
                });
            }
        }
        let manifest = StateManifest {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            adam_step: self.adam.step,
            rng_seed: self.rng_seed,
            running: self.running,
            plateau: self.plateau,
            blobs,
        };
        let text = toml::to_string(&manifest).map_err(|e| CoralError::Encode(e.to_string()))?;
        let path = dir.join(STATE_FILE);
        fs::write(&path, text).map_err(|e| CoralError::io(&path, e))
    }

    /// Restores a checkpoint written by [`TrainState::save`] for the same
    /// configuration.
    pub fn load(dir: &Path, config: &TrainConfig, backbone: &BackboneConfig) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CoralError::io(&path, e))?;
        let manifest: StateManifest = toml::from_str(&text).map_err(|e| CoralError::layout(&path, e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(CoralError::layout(&path, format!("not a training checkpoint: {:?}", manifest.format)));
        }
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(CoralError::VersionMismatch {
                path: path.clone(),
                reason: format!(
                    "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                    manifest.format_version
                ),
            });
        }
        let mut state = TrainState::new(config, backbone)?;
        blob::load_params(dir, "selector", &manifest.blobs, &mut state.selector)?;
        blob::load_params(dir, "editor", &manifest.blobs, &mut state.editor)?;
        for (k, (m, v)) in state.adam.m.iter_mut().zip(state.adam.v.iter_mut()).enumerate() {
            for (kind, t) in [("m", m), ("v", v)] {
                let name = format!("adam.{kind}{k}");
                let entry = manifest
                    .blobs
                    .iter()
                    .find(|b| b.name == name)
                    .ok_or_else(|| CoralError::layout(&path, format!("missing blob {name}")))?;
                let loaded = blob::read(&dir.join(&entry.file), Some(&entry.sha256))?;
                if loaded.shape != t.shape {
                    return Err(CoralError::layout(&path, format!("blob {name} has shape {:?}", loaded.shape)));
                }
                *t = loaded;
            }
        }
        state.iteration = manifest.iteration;
        state.adam.step = manifest.adam_step;
        state.rng_seed = manifest.rng_seed;
        state.running = manifest.running;
        state.plateau = manifest.plateau;
        Ok(state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateManifest {
    format: String,
    format_version: u32,
    iteration: u64,
    adam_step: u64,
    rng_seed: u64,
    running: LossReport,
    plateau: Plateau,
    blobs: Vec<BlobEntry>,
}

fn non_finite(iteration: u64, detail: String) -> CoralError {
    CoralError::NonFiniteLoss { iteration, detail }
}

/// One optimizer update on `z_batch`. Returns the loss at the parameters
/// before the update.
pub fn train_step(
    c: &Components<'_>,
    state: &mut TrainState,
    z_batch: &[LatentZ],
    config: &TrainConfig,
) -> Result<LossReport> {
    if z_batch.len() != config.batch_size {
        return Err(CoralError::DimensionMismatch {
            what: "latent batch",
            expected: config.batch_size,
            got: z_batch.len(),
        });
    }
    let (report, grads) = objective_and_grad(c, config, &state.selector, &state.editor, z_batch)?;
    if !report.is_finite() {
        return Err(non_finite(state.iteration, format!("{report:?}")));
    }
    if !(grads.selector.all_finite() && grads.editor.all_finite()) {
        return Err(non_finite(state.iteration, "non-finite gradient".into()));
    }
    let mut grad_tensors: Vec<&Tensor> = grads.selector.tensors().into_iter().map(|(_, t)| t).collect();
    grad_tensors.extend(grads.editor.tensors().into_iter().map(|(_, t)| t));
    let mut params = state.selector.tensors_mut();
    params.extend(state.editor.tensors_mut());
    let adam = AdamConfig::with_learning_rate(config.resolved_learning_rate());
    adam_step(&adam, &mut state.adam, params, &grad_tensors)?;

    state.running = if state.iteration == 0 {
        report
    } else {
        let mix = |a: f64, b: f64| RUNNING_DECAY * a + (1.0 - RUNNING_DECAY) * b;
        let r = &state.running;
        LossReport {
            clip: mix(r.clip, report.clip),
            l2: mix(r.l2, report.l2),
            id: mix(r.id, report.id),
            area: mix(r.area, report.area),
            tv: mix(r.tv, report.tv),
            total: mix(r.total, report.total),
        }
    };
    state.iteration += 1;
    if state.iteration % PLATEAU_WINDOW == 0 {
        let now = state.running.clip;
        if let Some(reference) = state.plateau.reference {
            let improvement = (reference - now) / reference.abs().max(f64::MIN_POSITIVE);
            if improvement < PLATEAU_TOLERANCE {
                state.plateau.reached = true;
            }
        }
        state.plateau.reference = Some(now);
    }
    Ok(report)
}

/// Where a run writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    /// Loss rows are appended here.
    pub loss_csv: Option<PathBuf>,
    /// Periodic checkpoints go to `checkpoint-{iteration}` below this.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifact: EditArtifact,
    pub state: TrainState,
    /// Loss of every executed step, tagged with its iteration.
    pub history: Vec<(u64, LossReport)>,
    pub stopped_early: bool,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    iteration: u64,
    clip: f64,
    l2: f64,
    id: f64,
    area: f64,
    tv: f64,
    total: f64,
}

fn append_rows(path: &Path, rows: &[(u64, LossReport)]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoralError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for &(iteration, r) in rows {
        w.serialize(CsvRow {
            iteration,
            clip: r.clip,
            l2: r.l2,
            id: r.id,
            area: r.area,
            tv: r.tv,
            total: r.total,
        })
        .map_err(|e| CoralError::Encode(e.to_string()))?;
    }
    w.flush().map_err(|e| CoralError::io(path, e))
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration}"))
}

/// Runs training from scratch.
pub fn train(c: &Components<'_>, config: &TrainConfig, outputs: &RunOutputs) -> Result<TrainOutcome> {
    let state = TrainState::new(config, c.backbone.config())?;
    resume(c, config, state, outputs)
}

/// Continues training from `state` until `max_iterations` (or a plateau).
pub fn resume(
    c: &Components<'_>,
    config: &TrainConfig,
    mut state: TrainState,
    outputs: &RunOutputs,
) -> Result<TrainOutcome> {
    let bc = c.backbone.config();
    config.validate(bc)?;
    let mut history = Vec::new();
    let mut pending = Vec::new();
    let mut stopped_early = false;
    while state.iteration < config.max_iterations {
        let zs = sample_batch(state.rng_seed, state.iteration, config.batch_size, bc.latent_dim);
        let iteration = state.iteration;
        let report = train_step(c, &mut state, &zs, config)?;
        history.push((iteration, report));
        let last = state.iteration == config.max_iterations;
        if iteration % config.eval_every == 0 || last {
            log::info!(
                "iteration {iteration}: total {:.6} clip {:.6} area {:.6}",
                report.total,
                report.clip,
                report.area
            );
            pending.push((iteration, report));
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
                state.save(&checkpoint_path(dir, state.iteration))?;
            }
        }
        if let Some(path) = &outputs.loss_csv {
            if pending.len() >= 64 || last {
                append_rows(path, &pending)?;
                pending.clear();
            }
        }
        if config.early_stop && state.plateau.reached {
            stopped_early = true;
            break;
        }
    }
    if let Some(path) = &outputs.loss_csv {
        if !pending.is_empty() {
            append_rows(path, &pending)?;
        }
    }
    let artifact = EditArtifact::from_training(config, &state, c.backbone)?;
    Ok(TrainOutcome {
        artifact,
        state,
        history,
        stopped_early,
    })
}
