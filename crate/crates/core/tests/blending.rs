use coral_core::backbone::{forward, LatentZ, ModulatedBackbone, Synthesis, WPlusCode};
use coral_core::blending::{
    blended_forward, blended_forward_vjp, edited_forward, feat_blend_forward, receptive_support, LayerMask, MaskStack,
};
use coral_core::editors::EditDelta;
use coral_core::tensor::FeatureMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> ModulatedBackbone {
    ModulatedBackbone::toy(7)
}

fn code(bb: &ModulatedBackbone, seed: u64) -> WPlusCode {
    bb.map_latent(&LatentZ::from_seed(seed, bb.config().latent_dim)).unwrap()
}

fn perturbed(w: &WPlusCode, rows: &[usize], seed: u64, scale: f64) -> WPlusCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = w.clone();
    for &r in rows {
        for v in out.row_mut(r) {
            *v += rng.random_range(-scale..scale);
        }
    }
    out
}

fn one_hot_masks(bb: &ModulatedBackbone, index: usize, mask: LayerMask) -> MaskStack {
    let mut masks = MaskStack::zeros(bb.config());
    masks.set(index, mask);
    masks
}

fn l2(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ones_and_zeros_collapse(s1 in 0u64..10_000, s2 in 0u64..10_000) {
        let bb = toy();
        let w1 = code(&bb, s1);
        let w2 = code(&bb, s2);
        let (ones, _) = blended_forward(&bb, &w1, &w2, &MaskStack::ones(bb.config())).unwrap();
        let (zeros, _) = blended_forward(&bb, &w1, &w2, &MaskStack::zeros(bb.config())).unwrap();
        prop_assert!(ones.max_abs_diff(&forward(&bb, &w2).unwrap().0) <= 1e-5);
        prop_assert!(zeros.max_abs_diff(&forward(&bb, &w1).unwrap().0) <= 1e-5);
    }

    #[test]
    fn edited_forward_is_ones_blend(s in 0u64..10_000) {
        let bb = toy();
        let w = code(&bb, s);
        let w2 = perturbed(&w, &[0, 1, 2, 3, 4, 5], s, 0.5);
        let delta = EditDelta::from_code(
            WPlusCode::from_rows((0..6).map(|r| w2.row(r).iter().zip(w.row(r)).map(|(a, b)| a - b).collect()).collect()).unwrap(),
            6,
        );
        let (ed, _) = edited_forward(&bb, &w, &delta).unwrap();
        let (bl, _) = blended_forward(&bb, &w, &w2, &MaskStack::ones(bb.config())).unwrap();
        prop_assert!(ed.max_abs_diff(&bl) <= 1e-5);
    }
}

#[test]
fn zero_delta_edited_forward_is_identity() {
    let bb = toy();
    let w = code(&bb, 3);
    let (a, _) = edited_forward(&bb, &w, &EditDelta::zeros(6, 32, 6)).unwrap();
    assert_eq!(a, forward(&bb, &w).unwrap().0);
}

#[test]
fn single_row_edit_matches_block_oracle() {
    let bb = toy();
    let w = code(&bb, 4);
    let w2 = perturbed(&w, &[3], 9, 1.0);
    let (img, _) = edited_forward(
        &bb,
        &w,
        &EditDelta::from_code(
            WPlusCode::from_rows(
                (0..6)
                    .map(|r| w2.row(r).iter().zip(w.row(r)).map(|(a, b)| a - b).collect())
                    .collect(),
            )
            .unwrap(),
            6,
        ),
    )
    .unwrap();
    // Drive the blocks by hand: identical to the original up to layer 3, then
    // the perturbed code at layer 4.
    let mut f = bb.constant_input().clone();
    let mut oracle = FeatureMap::zeros(32, 32, 3);
    for index in 0..6 {
        let row = if index == 3 { w2.row(index) } else { w.row(index) };
        f = bb.block(index, &f, row).unwrap();
        if let Some(rgb) = bb.to_rgb(index, &f) {
            oracle.add_assign(&rgb);
        }
    }
    assert!(img.max_abs_diff(&oracle) <= 1e-12);
}

#[test]
fn quadrant_mask_at_one_layer_matches_direct_arithmetic() {
    let bb = toy();
    let w1 = code(&bb, 5);
    let w2 = perturbed(&w1, &[0, 1, 2, 3, 4, 5], 6, 0.8);
    for index in 0..6 {
        let r = bb.config().resolutions[index];
        let quad = LayerMask::indicator(r, r, |i, j| i < r / 2 && j < r / 2);
        let masks = one_hot_masks(&bb, index, quad.clone());
        let (_, feats) = blended_forward(&bb, &w1, &w2, &masks).unwrap();
        // Upstream layers are untouched, so the input equals the original
        // stream's features.
        let (_, orig_feats) = forward(&bb, &w1).unwrap();
        let input = if index == 0 {
            bb.constant_input().clone()
        } else {
            orig_feats[index - 1].clone()
        };
        let e = bb.block(index, &input, w2.row(index)).unwrap();
        let o = bb.block(index, &input, w1.row(index)).unwrap();
        let c = e.channels;
        for i in 0..r {
            for j in 0..r {
                let m = quad.at(i, j);
                for ch in 0..c {
                    let want = m * e.get(i, j, ch) + (1.0 - m) * o.get(i, j, ch);
                    assert!((feats[index].get(i, j, ch) - want).abs() <= 1e-12);
                }
            }
        }
        let _ = c;
    }
}

#[test]
fn locality_outside_receptive_support() {
    let bb = toy();
    let cfg = bb.config().clone();
    let w1 = code(&bb, 12);
    for index in 0..6 {
        let r = cfg.resolutions[index];
        // A small region near the upper-left corner.
        let cut = (r / 4).max(1);
        let region: Vec<bool> = (0..r * r).map(|k| k / r < cut && k % r < cut).collect();
        let mask = LayerMask::indicator(r, r, |i, j| i < cut && j < cut);
        let w2 = perturbed(&w1, &[index], 13, 1.5);
        let (img, _) = blended_forward(&bb, &w1, &w2, &one_hot_masks(&bb, index, mask)).unwrap();
        let (orig, _) = forward(&bb, &w1).unwrap();
        let support = receptive_support(&cfg, index + 1, &region).unwrap();
        let mut changed_inside = false;
        for (k, &inside) in support.iter().enumerate() {
            for ch in 0..3 {
                let d = (img.data[k * 3 + ch] - orig.data[k * 3 + ch]).abs();
                if inside {
                    changed_inside |= d > 1e-9;
                } else {
                    assert!(d <= 1e-4, "layer {} pixel {k} changed by {d}", index + 1);
                }
            }
        }
        assert!(changed_inside, "edit at layer {} had no effect", index + 1);
        assert!(support.iter().any(|s| !s), "support of layer {} covers everything", index + 1);
    }
}

#[test]
fn zero_mask_keeps_upstream_edits() {
    let bb = toy();
    let w1 = code(&bb, 21);
    for k in 0..5 {
        for l in (k + 1)..6 {
            let w2 = perturbed(&w1, &[k], 22, 1.0);
            let mut masks = MaskStack::ones(bb.config());
            let r = bb.config().resolutions[l];
            masks.set(l, LayerMask::zeros(r, r));
            let (img, _) = blended_forward(&bb, &w1, &w2, &masks).unwrap();
            let (orig, _) = forward(&bb, &w1).unwrap();
            let (edited, _) = forward(&bb, &w2).unwrap();
            if edited.max_abs_diff(&orig) > 1e-9 {
                assert!(img.max_abs_diff(&orig) > 1e-9, "edit at layer {} erased at {}", k + 1, l + 1);
            }
        }
    }
}

#[test]
fn feat_blend_examples() {
    let bb = toy();
    let w1 = code(&bb, 30);
    // Ones at the last layer: the whole edited stream.
    let w2 = perturbed(&w1, &[0, 1, 2, 3, 4, 5], 31, 0.7);
    let full = feat_blend_forward(&bb, &w1, &w2, &LayerMask::ones(32, 32), 6).unwrap();
    let (ones, _) = blended_forward(&bb, &w1, &w2, &MaskStack::ones(bb.config())).unwrap();
    assert!(full.max_abs_diff(&ones) <= 1e-5);
    // Zeros at layer 1: the original image.
    let zero1 = feat_blend_forward(&bb, &w1, &w2, &LayerMask::zeros(4, 4), 1).unwrap();
    assert!(zero1.max_abs_diff(&forward(&bb, &w1).unwrap().0) <= 1e-5);
    // Edits at layers 2 and 5, zero mask at layer 3.
    let w25 = perturbed(&w1, &[1, 4], 32, 1.0);
    let feat = feat_blend_forward(&bb, &w1, &w25, &LayerMask::zeros(8, 8), 3).unwrap();
    assert!(feat.max_abs_diff(&forward(&bb, &w1).unwrap().0) <= 1e-5);
    let mut masks = MaskStack::ones(bb.config());
    masks.set(2, LayerMask::zeros(8, 8));
    let (ours, _) = blended_forward(&bb, &w1, &w25, &masks).unwrap();
    assert!(l2(&ours, &forward(&bb, &w1).unwrap().0) > 1e-3);
}

#[test]
fn feat_blend_rejects_bad_layer_and_shape() {
    let bb = toy();
    let w = code(&bb, 1);
    assert!(feat_blend_forward(&bb, &w, &w, &LayerMask::zeros(4, 4), 0).is_err());
    assert!(feat_blend_forward(&bb, &w, &w, &LayerMask::zeros(4, 4), 7).is_err());
    assert!(feat_blend_forward(&bb, &w, &w, &LayerMask::zeros(4, 4), 3).is_err());
}

#[test]
fn blended_forward_rejects_bad_masks() {
    let bb = toy();
    let w = code(&bb, 1);
    let short = MaskStack::new(vec![LayerMask::zeros(4, 4)]);
    assert!(blended_forward(&bb, &w, &w, &short).is_err());
    let mut wrong = MaskStack::zeros(bb.config());
    wrong.set(0, LayerMask::zeros(8, 8));
    assert!(blended_forward(&bb, &w, &w, &wrong).is_err());
}

/// Central differences of `<g, blended image>` against the vjp.
#[test]
fn vjp_matches_finite_differences() {
    let bb = toy();
    let cfg = bb.config().clone();
    let w1 = code(&bb, 40);
    let w2 = perturbed(&w1, &[0, 1, 2, 3, 4], 41, 0.6);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let masks = MaskStack::new(
        cfg.resolutions
            .iter()
            .map(|&r| LayerMask::new(r, r, (0..r * r).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap())
            .collect(),
    );
    let mut g = FeatureMap::zeros(32, 32, 3);
    g.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let f = |a: &WPlusCode, b: &WPlusCode, m: &MaskStack| {
        let (img, _) = blended_forward(&bb, a, b, m).unwrap();
        img.data.iter().zip(&g.data).map(|(x, y)| x * y).sum::<f64>()
    };
    let grads = blended_forward_vjp(&bb, &w1, &w2, &masks, &g).unwrap();
    let eps = 1e-6;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
    for _ in 0..10 {
        let k = rng.random_range(0..cfg.layer_count * cfg.latent_dim);
        let mut p = w2.clone();
        p.as_mut_slice()[k] += eps;
        let mut m = w2.clone();
        m.as_mut_slice()[k] -= eps;
        let fd = (f(&w1, &p, &masks) - f(&w1, &m, &masks)) / (2.0 * eps);
        assert!(rel(fd, grads.w2.as_slice()[k]) < 1e-4, "w2[{k}] fd {fd} vs {}", grads.w2.as_slice()[k]);
        let mut p = w1.clone();
        p.as_mut_slice()[k] += eps;
        let mut m = w1.clone();
        m.as_mut_slice()[k] -= eps;
        let fd = (f(&p, &w2, &masks) - f(&m, &w2, &masks)) / (2.0 * eps);
        assert!(rel(fd, grads.w1.as_slice()[k]) < 1e-4, "w1[{k}] fd {fd} vs {}", grads.w1.as_slice()[k]);
    }
    for _ in 0..10 {
        let l = rng.random_range(0..cfg.layer_count);
        let r = cfg.resolutions[l];
        let k = rng.random_range(0..r * r);
        let bump = |s: f64| {
            let mut v = masks.get(l).values().to_vec();
            v[k] += s;
            let mut m = masks.clone();
            m.set(l, LayerMask::new(r, r, v).unwrap());
            f(&w1, &w2, &m)
        };
        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
        assert!(rel(fd, grads.masks[l][k]) < 1e-4, "mask[{l}][{k}] fd {fd} vs {}", grads.masks[l][k]);
    }
}
