use coral_core::backbone::WPlusCode;
use coral_core::editors::{
    global_delta, mapper_delta, mapper_delta_vjp, mapper_group, scale_delta, EditorKind, GlobalDirectionParams,
    MapperParams,
};
use coral_core::tensor::ParamTensors;
use coral_core::Editor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_code(layers: usize, dim: usize, seed: u64) -> WPlusCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WPlusCode::zeros(layers, dim);
    w.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    w
}

fn randomize(p: &mut impl ParamTensors, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

#[test]
fn mapper_at_zero_input_returns_output_bias() {
    let mut params = MapperParams::init(18, 8, 13, 1);
    for (g, group) in params.groups.iter_mut().enumerate() {
        group.out_b.data = (0..8).map(|k| (g * 10 + k) as f64).collect();
        group.out_w.data.iter_mut().for_each(|v| *v = 0.5);
    }
    let delta = mapper_delta(&WPlusCode::zeros(18, 8), &params).unwrap();
    for l in 1..=18 {
        let row = delta.row(l - 1);
        if l > 13 {
            assert!(row.iter().all(|&v| v == 0.0));
        } else {
            let g = mapper_group(l);
            let want: Vec<f64> = (0..8).map(|k| (g * 10 + k) as f64).collect();
            assert_eq!(row, want.as_slice(), "layer {l}");
        }
    }
}

#[test]
fn group_parameters_only_touch_their_layers() {
    let w = random_code(18, 8, 2);
    let mut params = MapperParams::init(18, 8, 18, 3);
    randomize(&mut params, 4, 0.3);
    let base = mapper_delta(&w, &params).unwrap();
    for g in 0..3 {
        let mut moved = params.clone();
        moved.groups[g].bi_equal[0].left_w.data[5] += 0.7;
        moved.groups[g].out_b.data[0] += 0.1;
        let d = mapper_delta(&w, &moved).unwrap();
        for l in 1..=18 {
            let same = d.row(l - 1) == base.row(l - 1);
            assert_eq!(same, mapper_group(l) != g, "group {g} layer {l}");
        }
    }
}

#[test]
fn global_rows_oracle() {
    let mut params = GlobalDirectionParams::zeros(6, 4, 4);
    params.direction.data = (0..16).map(|k| k as f64 * 0.25).collect();
    let delta = global_delta(&params);
    for l in 0..6 {
        for k in 0..4 {
            let want = if l < 4 { (l * 4 + k) as f64 * 0.25 } else { 0.0 };
            assert_eq!(delta.row(l)[k], want);
        }
    }
    let editor = Editor::Global(params);
    assert_eq!(
        editor.delta(&random_code(6, 4, 1)).unwrap(),
        editor.delta(&random_code(6, 4, 2)).unwrap()
    );
}

#[test]
fn mapper_gradient_matches_finite_differences() {
    let w = random_code(6, 8, 5);
    let mut params = MapperParams::init(6, 8, 5, 6);
    randomize(&mut params, 7, 0.4);
    let weights = random_code(6, 8, 8);
    let f = |p: &MapperParams| {
        let d = mapper_delta(&w, p).unwrap();
        d.as_code().as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum::<f64>()
    };
    let g = mapper_delta_vjp(&w, &params, &weights).unwrap();
    let flat: Vec<f64> = g.tensors().iter().flat_map(|(_, t)| t.data.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let eps = 1e-6;
    for _ in 0..60 {
        let k = rng.random_range(0..flat.len());
        let bump = |s: f64| {
            let mut p = params.clone();
            let mut kk = k;
            for t in p.tensors_mut() {
                if kk < t.data.len() {
                    t.data[kk] += s;
                    break;
                }
                kk -= t.data.len();
            }
            f(&p)
        };
        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
        let err = (fd - flat[k]).abs() / fd.abs().max(flat[k].abs()).max(1e-8);
        assert!(err < 1e-4, "param {k}: {fd} vs {}", flat[k]);
    }
}

#[test]
fn editor_init_kinds() {
    assert_eq!(Editor::init(EditorKind::Global, 6, 4, 3, 0).kind(), EditorKind::Global);
    let m = Editor::init(EditorKind::Mapper, 6, 4, 3, 0);
    assert_eq!(m.kind(), EditorKind::Mapper);
    assert!(m.delta(&random_code(6, 4, 0)).unwrap().is_zero());
    assert_eq!(Editor::init(EditorKind::Mapper, 6, 4, 3, 0), m);
}

proptest! {
    #[test]
    fn scaling_is_linear(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let w = random_code(6, 4, seed);
        let mut params = MapperParams::init(6, 4, 6, seed);
        randomize(&mut params, seed + 1, 0.5);
        let d = mapper_delta(&w, &params).unwrap();
        let ab = scale_delta(&scale_delta(&d, a), b);
        let direct = scale_delta(&d, a * b);
        for (x, y) in ab.as_code().as_slice().iter().zip(direct.as_code().as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn negative_alpha_is_antisymmetric(seed in 0u64..500, a in 0.0f64..3.0) {
        let mut params = GlobalDirectionParams::zeros(6, 4, 5);
        randomize(&mut params, seed, 1.0);
        let d = global_delta(&params);
        let w = random_code(6, 4, seed + 7);
        let plus = scale_delta(&d, a).apply_to(&w).unwrap();
        let minus = scale_delta(&d, -a).apply_to(&w).unwrap();
        for ((p, m), base) in plus.as_slice().iter().zip(minus.as_slice()).zip(w.as_slice()) {
            prop_assert!(((p - base) + (m - base)).abs() < 1e-12);
        }
    }
}
