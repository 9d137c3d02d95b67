mod common;

use bpam::imaging::{quantize, synthetic_image, BitDepth};
use bpam::producer::{identity_model, init_identity_grids};
use bpam::{par, GuidanceNet, Image, Pipeline, PipelineConfig, TransformMode};
use common::{all_configs, naive_enhance, random_image, random_model, rng};
use proptest::prelude::*;

#[test]
fn matches_scalar_oracle_f64() {
    for (i, cfg) in all_configs(4, 5).into_iter().enumerate() {
        let model = random_model::<f64>(&cfg, 16, 16, 100 + i as u64);
        let img = random_image::<f64>(16, 16, 3, &mut rng(i as u64));
        let fast = Pipeline::new(cfg.clone(), model.clone()).unwrap().enhance(&img).unwrap();
        let slow = naive_enhance(&img, &model, &cfg);
        let err = fast.max_abs_diff(&slow);
        assert!(err < 1e-10, "{cfg:?}: {err}");
    }
}

#[test]
fn f32_pipeline_tracks_the_oracle() {
    for (i, cfg) in all_configs(4, 8).into_iter().enumerate() {
        let model = random_model::<f32>(&cfg, 16, 16, 200 + i as u64);
        let img = random_image::<f32>(16, 16, 3, &mut rng(50 + i as u64));
        let fast = Pipeline::new(cfg.clone(), model.clone()).unwrap().enhance(&img).unwrap();
        let err = fast.cast::<f64>().max_abs_diff(&naive_enhance(&img, &model, &cfg));
        assert!(err < 1e-5, "{cfg:?}: {err}");
    }
}

#[test]
fn enhance_and_forward_agree_bitwise() {
    for (i, cfg) in all_configs(8, 8).into_iter().enumerate() {
        let model = random_model::<f32>(&cfg, 37, 70, 300 + i as u64);
        let img = synthetic_image(37, 70, i as u64);
        let mut pipe = Pipeline::new(cfg, model).unwrap();
        let a = pipe.enhance(&img).unwrap();
        let b = pipe.forward(&img).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = PipelineConfig::default();
    let model = random_model::<f32>(&cfg, 48, 40, 9);
    let img = synthetic_image(48, 40, 3);
    let up = random_image::<f32>(48, 40, 3, &mut rng(4));
    let run = |threads: usize| {
        par::with_threads(threads, || {
            let mut pipe = Pipeline::new(cfg.clone(), model.clone()).unwrap();
            let out = pipe.forward(&img).unwrap();
            (out, pipe.backward(&up).unwrap())
        })
    };
    let (o1, g1) = run(1);
    for t in [2, 3, 5] {
        let (o, g) = run(t);
        assert_eq!(o, o1);
        assert_eq!(g, g1);
    }
}

#[test]
fn identity_grids_reproduce_the_input() {
    let mut r = rng(77);
    for cfg in all_configs(8, 8) {
        let img = random_image::<f32>(24, 40, 3, &mut r);
        let geom = cfg.geometry_for(24, 40).unwrap();
        let mut model = identity_model::<f32, _>(&cfg, geom, &mut r);
        let (k1, k2) = cfg.guidance_channels();
        model.gnet1 = GuidanceNet::random(3, 16, k1, 2.0, &mut r);
        if let Some(k2) = k2 {
            model.gnet2 = Some(GuidanceNet::random(8, 16, k2, 2.0, &mut r));
        }
        let out = Pipeline::new(cfg.clone(), model).unwrap().enhance(&img).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6, "{cfg:?}");
    }
}

#[test]
fn identity_grids_have_the_documented_layout() {
    let geom = PipelineConfig::default().geometry_for(16, 16).unwrap();
    let (g1, g2) = init_identity_grids::<f64>(geom);
    assert_eq!((g1.params(), g2.params()), (32, 27));
    let c1 = g1.cell(0, 0, 0);
    let c2 = g2.cell(1, 1, 3);
    for h in 0..8 {
        for c in 0..3 {
            assert_eq!(c1[h * 3 + c], if h == c { 1.0 } else { 0.0 });
        }
        assert_eq!(c1[24 + h], 0.0);
    }
    for o in 0..3 {
        for h in 0..8 {
            assert_eq!(c2[o * 8 + h], if o == h { 1.0 } else { 0.0 });
        }
        assert_eq!(c2[24 + o], 0.0);
    }
}

#[test]
fn output_is_clamped_to_unit_range() {
    let cfg = PipelineConfig {
        mode: TransformMode::Affine,
        decomposed: false,
        ..PipelineConfig::default()
    };
    let mut model = random_model::<f32>(&cfg, 16, 16, 1);
    // O = 3·I - 1 in every cell
    let mut cell = [0.0f32; 12];
    for r in 0..3 {
        cell[r * 3 + r] = 3.0;
        cell[9 + r] = -1.0;
    }
    model.grid1 = bpam::BilateralGrid::uniform(*model.grid1.geometry(), &cell);
    let img = Image::from_fn(16, 16, 3, |y, x, _| (y * 16 + x) as f32 / 255.0);
    let out = Pipeline::new(cfg, model).unwrap().enhance(&img).unwrap();
    for (o, i) in out.data().iter().zip(img.data()) {
        assert!((o - (3.0 * i - 1.0).clamp(0.0, 1.0)).abs() < 1e-6);
    }
    assert!(out.data().contains(&0.0) && out.data().contains(&1.0));
}

#[test]
fn mismatched_image_is_rejected() {
    let cfg = PipelineConfig::default();
    let pipe = Pipeline::new(cfg.clone(), random_model::<f32>(&cfg, 16, 16, 1)).unwrap();
    assert!(pipe.enhance(&Image::zeros(16, 17, 3)).is_err());
    assert!(pipe.enhance(&Image::zeros(16, 16, 1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_survives_8_bit_round_trip(seed: u64, h in 8usize..40, w in 8usize..40) {
        let cfg = PipelineConfig::default();
        let mut r = rng(seed);
        let codes = random_image::<f64>(h, w, 3, &mut r);
        let img: Image<f32> = Image::from_fn(h, w, 3, |y, x, c| {
            (quantize(codes.get(y, x, c), BitDepth::Eight) as f64 / 255.0) as f32
        });
        let geom = cfg.geometry_for(h, w).unwrap();
        let model = identity_model::<f32, _>(&cfg, geom, &mut r);
        let out = Pipeline::new(cfg, model).unwrap().enhance(&img).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            prop_assert_eq!(quantize(*a as f64, BitDepth::Eight), quantize(*b as f64, BitDepth::Eight));
        }
    }
}
