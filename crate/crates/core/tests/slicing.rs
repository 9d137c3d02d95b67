mod common;

use bpam::grid::{decompose, slice, slice_backward, slice_decomposed, trilinear_weights, DecompositionKind};
use bpam::{GridGeometry, Image};
use common::{naive_slice, random_cells, random_image, rng};
use proptest::prelude::*;
use rand::Rng;

fn geometry(gh: usize, gw: usize, d: usize, ih: usize, iw: usize, align: bool) -> GridGeometry {
    GridGeometry::new(gh, gw, d, ih, iw, align).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slice_matches_brute_force_f64(
        gh in 1usize..6, gw in 1usize..6, d in 1usize..7, p in 1usize..33,
        eh in 0usize..12, ew in 0usize..12, align: bool, seed: u64,
    ) {
        let mut r = rng(seed);
        let geom = geometry(gh, gw, d, gh + eh, gw + ew, align);
        let grid = random_cells::<f64>(geom, p, 1.0, &mut r);
        // guidance slightly outside [0, 1] exercises the clamp
        let g = Image::from_fn(geom.image_h, geom.image_w, 1, |_, _, _| r.random_range(-0.1..1.1));
        let fast = slice(&grid, &g).unwrap();
        let slow = naive_slice(&grid, &g);
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn slice_is_linear_in_cells(seed: u64, a in -2.0f64..2.0) {
        let mut r = rng(seed);
        let geom = geometry(3, 4, 5, 9, 13, true);
        let g1 = random_cells::<f64>(geom, 6, 1.0, &mut r);
        let g2 = random_cells::<f64>(geom, 6, 1.0, &mut r);
        let guide = random_image::<f64>(9, 13, 1, &mut r);
        let mix = bpam::BilateralGrid::new(
            geom,
            6,
            g1.cells().iter().zip(g2.cells()).map(|(x, y)| a * x + y).collect(),
        ).unwrap();
        let s1 = slice(&g1, &guide).unwrap();
        let s2 = slice(&g2, &guide).unwrap();
        let sm = slice(&mix, &guide).unwrap();
        for i in 0..sm.data().len() {
            prop_assert!((sm.data()[i] - (a * s1.data()[i] + s2.data()[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn f32_slice_matches_brute_force() {
    let mut r = rng(5);
    for _ in 0..50 {
        let (gh, gw, d, p) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..9), r.random_range(1..33));
        let geom = geometry(gh, gw, d, r.random_range(gh..33), r.random_range(gw..33), r.random_bool(0.5));
        let grid = random_cells::<f32>(geom, p, 1.0, &mut r);
        let g = random_image::<f32>(geom.image_h, geom.image_w, 1, &mut r);
        let err = slice(&grid, &g).unwrap().cast::<f64>().max_abs_diff(&naive_slice(&grid, &g));
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn backward_is_the_adjoint() {
    let mut r = rng(8);
    let geom = geometry(3, 5, 4, 11, 17, true);
    let grid = random_cells::<f64>(geom, 7, 1.0, &mut r);
    let guide = random_image::<f64>(11, 17, 1, &mut r);
    let up = random_image::<f64>(11, 17, 7, &mut r);
    let fwd = slice(&grid, &guide).unwrap();
    let (dgrid, _) = slice_backward(&grid, &guide, &up).unwrap();
    let lhs: f64 = fwd.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = grid.cells().iter().zip(dgrid.cells()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
}

#[test]
fn guidance_gradient_matches_central_differences() {
    let mut r = rng(13);
    let geom = geometry(3, 3, 5, 6, 6, true);
    let grid = random_cells::<f64>(geom, 4, 1.0, &mut r);
    let guide = Image::from_fn(6, 6, 1, |_, _, _| r.random_range(0.05..0.95));
    let up = random_image::<f64>(6, 6, 4, &mut r);
    let loss = |g: &Image<f64>| -> f64 {
        slice(&grid, g).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    let (_, dg) = slice_backward(&grid, &guide, &up).unwrap();
    let h = 1e-6;
    for i in 0..36 {
        let r_pos = guide.data()[i] * 4.0;
        if (r_pos - r_pos.round()).abs() < 1e-3 {
            continue;
        }
        let mut a = guide.clone();
        let mut b = guide.clone();
        a.data_mut()[i] += h;
        b.data_mut()[i] -= h;
        let num = (loss(&a) - loss(&b)) / (2.0 * h);
        assert!((num - dg.data()[i]).abs() < 1e-6 * num.abs().max(1.0), "{i}: {num} vs {}", dg.data()[i]);
    }
}

#[test]
fn decomposed_with_equal_guidance_matches_monolithic() {
    let mut r = rng(21);
    for kind in [DecompositionKind::Stage1, DecompositionKind::Stage2, DecompositionKind::Affine] {
        for _ in 0..10 {
            let geom = geometry(r.random_range(1..6), r.random_range(1..6), r.random_range(1..9), 20, 24, true);
            let grid = random_cells::<f32>(geom, kind.params(), 1.0, &mut r);
            let set = decompose(&grid, kind).unwrap();
            let g = random_image::<f32>(20, 24, 1, &mut r);
            let k = set.len();
            let gk = Image::from_fn(20, 24, k, |y, x, _| g.get(y, x, 0));
            let a = slice_decomposed(&set, &gk).unwrap();
            let b = slice(&set.recompose(), &g).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-5);
            assert_eq!(set.recompose(), grid);
        }
    }
}

#[test]
fn trilinear_weights_sum_to_one() {
    let mut r = rng(1);
    for _ in 0..100_000 {
        let w = trilinear_weights::<f32>(r.random(), r.random(), r.random());
        let s: f64 = w.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(w.iter().all(|&v| v >= 0.0));
    }
}
