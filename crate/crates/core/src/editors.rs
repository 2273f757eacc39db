//! Latent edit producers.
//!
//! A global direction is one trainable row per editable layer, shared by
//! every image. The mapper predicts an image-conditioned edit per layer with
//! three group networks (coarse layers 1-4, medium 5-8, fine 9 up to the
//! edit cutoff). Each group network is four BiEqual layers followed by a
//! plain linear layer; a BiEqual layer is two parallel linear maps, each
//! followed by a leaky ReLU, with the outputs differenced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::WPlusCode;
use crate::error::{CoralError, Result};
use crate::tensor::{ParamTensors, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BIEQUAL_DEPTH: usize = 4;
/// Last layer (1-based, inclusive) of the coarse and medium groups.
pub const GROUP_ENDS: [usize; 2] = [4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditorKind {
    Global,
    Mapper,
}

impl std::fmt::Display for EditorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EditorKind::Global => "global",
            EditorKind::Mapper => "mapper",
        })
    }
}

impl std::str::FromStr for EditorKind {
    type Err = CoralError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(EditorKind::Global),
            "mapper" => Ok(EditorKind::Mapper),
            other => Err(CoralError::InvalidArgument(format!("unknown editor {other:?}"))),
        }
    }
}

/// Per-layer latent edit; rows past the edit cutoff are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EditDelta {
    rows: WPlusCode,
    edit_cutoff: usize,
}

impl EditDelta {
    pub fn zeros(layers: usize, dim: usize, edit_cutoff: usize) -> Self {
        EditDelta {
            rows: WPlusCode::zeros(layers, dim),
            edit_cutoff: edit_cutoff.min(layers),
        }
    }

    /// Builds a delta from explicit rows, zeroing everything past the cutoff.
    pub fn from_code(mut rows: WPlusCode, edit_cutoff: usize) -> Self {
        let edit_cutoff = edit_cutoff.min(rows.layers());
        for index in edit_cutoff..rows.layers() {
            rows.row_mut(index).fill(0.0);
        }
        EditDelta { rows, edit_cutoff }
    }

    pub fn layers(&self) -> usize {
        self.rows.layers()
    }

    pub fn dim(&self) -> usize {
        self.rows.dim()
    }

    pub fn edit_cutoff(&self) -> usize {
        self.edit_cutoff
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.rows.row(index)
    }

    pub fn as_code(&self) -> &WPlusCode {
        &self.rows
    }

    pub fn is_zero(&self) -> bool {
        self.rows.as_slice().iter().all(|&v| v == 0.0)
    }

    /// `w + delta`.
    pub fn apply_to(&self, w: &WPlusCode) -> Result<WPlusCode> {
        if w.layers() != self.layers() || w.dim() != self.dim() {
            return Err(CoralError::ShapeMismatch(format!(
                "delta is {}x{}, code is {}x{}",
                self.layers(),
                self.dim(),
                w.layers(),
                w.dim()
            )));
        }
        let mut out = w.clone();
        for (o, d) in out.as_mut_slice().iter_mut().zip(self.rows.as_slice()) {
            *o += d;
        }
        Ok(out)
    }

    pub fn squared_norm(&self) -> f64 {
        self.rows.as_slice().iter().map(|v| v * v).sum()
    }
}

/// Elementwise `alpha * delta`. Negative strengths reverse the edit.
pub fn scale_delta(delta: &EditDelta, alpha: f64) -> EditDelta {
    let mut out = delta.clone();
    for v in out.rows.as_mut_slice() {
        *v *= alpha;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDirectionParams {
    /// `(edit_cutoff, d)`.
    pub direction: Tensor,
    pub layers: usize,
}

impl GlobalDirectionParams {
    pub fn zeros(layers: usize, dim: usize, edit_cutoff: usize) -> Self {
        GlobalDirectionParams {
            direction: Tensor::zeros(&[edit_cutoff.min(layers), dim]),
            layers,
        }
    }

    pub fn edit_cutoff(&self) -> usize {
        self.direction.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.direction.shape[1]
    }
}

impl ParamTensors for GlobalDirectionParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("direction".into(), &self.direction)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.direction]
    }
}

/// The image-independent edit: rows `1..=edit_cutoff` from the parameters.
pub fn global_delta(params: &GlobalDirectionParams) -> EditDelta {
    let d = params.dim();
    let cutoff = params.edit_cutoff();
    let mut rows = WPlusCode::zeros(params.layers, d);
    rows.as_mut_slice()[..cutoff * d].copy_from_slice(&params.direction.data);
    EditDelta {
        rows,
        edit_cutoff: cutoff,
    }
}

/// Gradient of a loss with respect to the global direction given its
/// gradient with respect to the delta.
pub fn global_delta_vjp(params: &GlobalDirectionParams, grad_delta: &WPlusCode) -> GlobalDirectionParams {
    let n = params.direction.len();
    let mut grad = params.clone();
    grad.direction.data.copy_from_slice(&grad_delta.as_slice()[..n]);
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiEqual {
    /// `(d, d)` row-major, output index first.
    pub left_w: Tensor,
    pub left_b: Tensor,
    pub right_w: Tensor,
    pub right_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperGroup {
    pub bi_equal: Vec<BiEqual>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams {
    /// Coarse, medium, fine.
    pub groups: Vec<MapperGroup>,
    pub layers: usize,
    pub edit_cutoff: usize,
    pub dim: usize,
}

/// Group (0 coarse, 1 medium, 2 fine) of a 1-based layer.
pub fn mapper_group(layer: usize) -> usize {
    if layer <= GROUP_ENDS[0] {
        0
    } else if layer <= GROUP_ENDS[1] {
        1
    } else {
        2
    }
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn linear(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.data
        .iter()
        .enumerate()
        .map(|(o, &bo)| bo + w.data[o * n..(o + 1) * n].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

/// Accumulates `grad_w += g x^T`, `grad_b += g` and returns `W^T g`.
fn linear_vjp(w: &Tensor, x: &[f64], g: &[f64], grad_w: &mut Tensor, grad_b: &mut Tensor) -> Vec<f64> {
    let n = x.len();
    let mut gx = vec![0.0; n];
    for (o, &go) in g.iter().enumerate() {
        grad_b.data[o] += go;
        let row = &w.data[o * n..(o + 1) * n];
        let grow = &mut grad_w.data[o * n..(o + 1) * n];
        for k in 0..n {
            grow[k] += go * x[k];
            gx[k] += go * row[k];
        }
    }
    gx
}

struct GroupTrace {
    /// Input of each BiEqual layer, then the input of the output layer.
    inputs: Vec<Vec<f64>>,
    left_pre: Vec<Vec<f64>>,
    right_pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MapperGroup {
    fn init(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Self {
        let mut normal = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor {
                shape: shape.to_vec(),
                data: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect(),
            }
        };
        let bi_equal = (0..BIEQUAL_DEPTH)
            .map(|_| BiEqual {
                left_w: normal(&[dim, dim]),
                left_b: Tensor::zeros(&[dim]),
                right_w: normal(&[dim, dim]),
                right_b: Tensor::zeros(&[dim]),
            })
            .collect();
        MapperGroup {
            bi_equal,
            out_w: Tensor::zeros(&[dim, dim]),
            out_b: Tensor::zeros(&[dim]),
        }
    }

    fn run(&self, w: &[f64]) -> GroupTrace {
        let mut inputs = Vec::with_capacity(BIEQUAL_DEPTH + 1);
        let mut left_pre = Vec::with_capacity(BIEQUAL_DEPTH);
        let mut right_pre = Vec::with_capacity(BIEQUAL_DEPTH);
        let mut x = w.to_vec();
        for layer in &self.bi_equal {
            let l = linear(&layer.left_w, &layer.left_b, &x);
            let r = linear(&layer.right_w, &layer.right_b, &x);
            let next = l.iter().zip(&r).map(|(a, b)| leaky(*a) - leaky(*b)).collect();
            inputs.push(std::mem::replace(&mut x, next));
            left_pre.push(l);
            right_pre.push(r);
        }
        let output = linear(&self.out_w, &self.out_b, &x);
        inputs.push(x);
        GroupTrace {
            inputs,
            left_pre,
            right_pre,
            output,
        }
    }

    fn vjp(&self, trace: &GroupTrace, grad_out: &[f64], grad: &mut MapperGroup) {
        let mut g = linear_vjp(
            &self.out_w,
            &trace.inputs[BIEQUAL_DEPTH],
            grad_out,
            &mut grad.out_w,
            &mut grad.out_b,
        );
        for k in (0..BIEQUAL_DEPTH).rev() {
            let layer = &self.bi_equal[k];
            let gl: Vec<f64> = g
                .iter()
                .zip(&trace.left_pre[k])
                .map(|(gv, p)| gv * leaky_grad(*p))
                .collect();
            let gr: Vec<f64> = g
                .iter()
                .zip(&trace.right_pre[k])
                .map(|(gv, p)| -gv * leaky_grad(*p))
                .collect();
            let gk = &mut grad.bi_equal[k];
            let a = linear_vjp(&layer.left_w, &trace.inputs[k], &gl, &mut gk.left_w, &mut gk.left_b);
            let b = linear_vjp(&layer.right_w, &trace.inputs[k], &gr, &mut gk.right_w, &mut gk.right_b);
            g = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        }
    }
}

impl MapperParams {
    /// Small fixed-seed weights with a zero output layer, so the initial edit
    /// is exactly zero.
    pub fn init(layers: usize, dim: usize, edit_cutoff: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        MapperParams {
            groups: (0..3).map(|_| MapperGroup::init(&mut rng, dim, scale)).collect(),
            layers,
            edit_cutoff: edit_cutoff.min(layers),
            dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }
}

impl ParamTensors for MapperParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let names = ["coarse", "medium", "fine"];
        let mut out = Vec::new();
        for (name, g) in names.iter().zip(&self.groups) {
            for (k, b) in g.bi_equal.iter().enumerate() {
                out.push((format!("{name}.bieq{k}.left_w"), &b.left_w));
                out.push((format!("{name}.bieq{k}.left_b"), &b.left_b));
                out.push((format!("{name}.bieq{k}.right_w"), &b.right_w));
                out.push((format!("{name}.bieq{k}.right_b"), &b.right_b));
            }
            out.push((format!("{name}.out_w"), &g.out_w));
            out.push((format!("{name}.out_b"), &g.out_b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for g in &mut self.groups {
            for b in &mut g.bi_equal {
                out.push(&mut b.left_w);
                out.push(&mut b.left_b);
                out.push(&mut b.right_w);
                out.push(&mut b.right_b);
            }
            out.push(&mut g.out_w);
            out.push(&mut g.out_b);
        }
        out
    }
}

fn check_mapper_input(w: &WPlusCode, params: &MapperParams) -> Result<()> {
    if w.dim() != params.dim {
        return Err(CoralError::DimensionMismatch {
            what: "mapper input dim",
            expected: params.dim,
            got: w.dim(),
        });
    }
    if w.layers() != params.layers {
        return Err(CoralError::DimensionMismatch {
            what: "mapper input layers",
            expected: params.layers,
            got: w.layers(),
        });
    }
    Ok(())
}

/// `delta(l) = g_group(l)(w(l))` for `l <= edit_cutoff`, zero beyond.
pub fn mapper_delta(w: &WPlusCode, params: &MapperParams) -> Result<EditDelta> {
    check_mapper_input(w, params)?;
    let mut rows = WPlusCode::zeros(params.layers, params.dim);
    for index in 0..params.edit_cutoff {
        let group = &params.groups[mapper_group(index + 1)];
        rows.row_mut(index).copy_from_slice(&group.run(w.row(index)).output);
    }
    Ok(EditDelta {
        rows,
        edit_cutoff: params.edit_cutoff,
    })
}

/// Gradient with respect to the mapper parameters (the input code is
/// treated as constant).
pub fn mapper_delta_vjp(w: &WPlusCode, params: &MapperParams, grad_delta: &WPlusCode) -> Result<MapperParams> {
    check_mapper_input(w, params)?;
    let mut grad = params.zeros_like();
    for index in 0..params.edit_cutoff {
        let g = mapper_group(index + 1);
        let group = &params.groups[g];
        let trace = group.run(w.row(index));
        group.vjp(&trace, grad_delta.row(index), &mut grad.groups[g]);
    }
    Ok(grad)
}

/// A trained or trainable edit producer.
#[derive(Debug, Clone, PartialEq)]
pub enum Editor {
    Global(GlobalDirectionParams),
    Mapper(MapperParams),
}

impl Editor {
    pub fn init(kind: EditorKind, layers: usize, dim: usize, edit_cutoff: usize, seed: u64) -> Self {
        match kind {
            EditorKind::Global => Editor::Global(GlobalDirectionParams::zeros(layers, dim, edit_cutoff)),
            EditorKind::Mapper => Editor::Mapper(MapperParams::init(layers, dim, edit_cutoff, seed)),
        }
    }

    pub fn kind(&self) -> EditorKind {
        match self {
            Editor::Global(_) => EditorKind::Global,
            Editor::Mapper(_) => EditorKind::Mapper,
        }
    }

    pub fn delta(&self, w: &WPlusCode) -> Result<EditDelta> {
        match self {
            Editor::Global(p) => {
                if w.layers() != p.layers || w.dim() != p.dim() {
                    return Err(CoralError::ShapeMismatch(format!(
                        "global direction is for {}x{} codes, got {}x{}",
                        p.layers,
                        p.dim(),
                        w.layers(),
                        w.dim()
                    )));
                }
                Ok(global_delta(p))
            }
            Editor::Mapper(p) => mapper_delta(w, p),
        }
    }

    /// Parameter gradient given `d loss / d delta`.
    pub fn delta_vjp(&self, w: &WPlusCode, grad_delta: &WPlusCode) -> Result<Editor> {
        Ok(match self {
            Editor::Global(p) => Editor::Global(global_delta_vjp(p, grad_delta)),
            Editor::Mapper(p) => Editor::Mapper(mapper_delta_vjp(w, p, grad_delta)?),
        })
    }

    pub fn zeros_like(&self) -> Editor {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.fill(0.0);
        }
        out
    }
}

impl ParamTensors for Editor {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Editor::Global(p) => p.tensors(),
            Editor::Mapper(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Editor::Global(p) => p.tensors_mut(),
            Editor::Mapper(p) => p.tensors_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(layers: usize, dim: usize, f: impl Fn(usize, usize) -> f64) -> WPlusCode {
        WPlusCode::from_rows(
            (0..layers)
                .map(|l| (0..dim).map(|k| f(l, k)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn group_boundaries() {
        let groups: Vec<usize> = (1..=18).map(mapper_group).collect();
        assert_eq!(&groups[..4], &[0; 4]);
        assert_eq!(&groups[4..8], &[1; 4]);
        assert!(groups[8..].iter().all(|&g| g == 2));
    }

    #[test]
    fn zero_global_params_give_zero_delta() {
        let p = GlobalDirectionParams::zeros(6, 8, 4);
        assert!(global_delta(&p).is_zero());
    }

    #[test]
    fn global_delta_ignores_the_image() {
        let mut p = GlobalDirectionParams::zeros(6, 8, 4);
        p.direction.data.iter_mut().enumerate().for_each(|(k, v)| *v = k as f64);
        let e = Editor::Global(p);
        let a = e.delta(&code(6, 8, |l, k| (l + k) as f64)).unwrap();
        let b = e.delta(&code(6, 8, |l, k| (l * k) as f64 - 3.0)).unwrap();
        assert_eq!(a, b);
        assert!(a.row(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_mapper_is_the_identity_edit() {
        let p = MapperParams::init(6, 8, 6, 1);
        let d = mapper_delta(&code(6, 8, |l, k| (l as f64 - k as f64) * 0.3), &p).unwrap();
        assert!(d.is_zero());
    }

    #[test]
    fn all_zero_mapper_gives_zero_delta() {
        let p = MapperParams::init(6, 8, 6, 1).zeros_like();
        let d = mapper_delta(&code(6, 8, |l, k| (l + k) as f64), &p).unwrap();
        assert!(d.is_zero());
    }

    #[test]
    fn mapper_rejects_dimension_mismatch() {
        let p = MapperParams::init(6, 8, 6, 1);
        assert!(matches!(
            mapper_delta(&WPlusCode::zeros(6, 7), &p),
            Err(CoralError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn scale_delta_identities() {
        let d = EditDelta::from_code(code(3, 4, |l, k| (l * 4 + k) as f64 - 5.0), 3);
        assert_eq!(scale_delta(&d, 1.0), d);
        assert!(scale_delta(&d, 0.0).is_zero());
        let neg = scale_delta(&d, -1.5);
        let pos = scale_delta(&d, 1.5);
        for (a, b) in neg.as_code().as_slice().iter().zip(pos.as_code().as_slice()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn from_code_zeroes_rows_past_cutoff() {
        let d = EditDelta::from_code(code(4, 2, |_, _| 1.0), 2);
        assert_eq!(d.row(1), &[1.0, 1.0]);
        assert_eq!(d.row(2), &[0.0, 0.0]);
        assert_eq!(d.row(3), &[0.0, 0.0]);
    }
}
