mod common;

use bpam::container::TensorFile;
use bpam::grid::{grids_from_bytes, grids_to_bytes, load_grids, save_grids};
use bpam::imaging::{load_image, save_image, synthetic_image, BitDepth};
use bpam::transform::GridModel;
use bpam::{GridGeometry, Pipeline};
use common::{all_configs, random_cells, random_model, rng};
use proptest::prelude::*;

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grid_bytes_round_trip_bit_exact(
        gh in 1usize..5, gw in 1usize..5, d in 1usize..6, p in 1usize..33, align: bool, seed: u64,
    ) {
        let geom = GridGeometry::new(gh, gw, d, gh * 3, gw * 5, align).unwrap();
        let mut r = rng(seed);
        let a = random_cells::<f32>(geom, p, 10.0, &mut r);
        let b = random_cells::<f32>(geom, 3, 1e-20, &mut r);
        let back = grids_from_bytes(&grids_to_bytes(&[&a, &b])).unwrap();
        prop_assert_eq!(back.len(), 2);
        prop_assert_eq!(back[0].geometry(), a.geometry());
        prop_assert_eq!(bits(back[0].cells()), bits(a.cells()));
        prop_assert_eq!(bits(back[1].cells()), bits(b.cells()));
    }

    #[test]
    fn tensor_file_round_trip_bit_exact(values in prop::collection::vec(any::<f32>(), 0..64)) {
        let mut t = TensorFile::new();
        t.insert("a.weight", &[values.len()], &values);
        t.insert("b", &[1, 1], &[f32::NEG_INFINITY]);
        let back = TensorFile::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(bits(&back.get("a.weight").unwrap().data), bits(&values));
        prop_assert_eq!(back.get("b").unwrap().dims.clone(), vec![1, 1]);
    }
}

#[test]
fn model_files_round_trip_and_enhance_is_invariant() {
    let dir = tempfile::tempdir().unwrap();
    for (i, cfg) in all_configs(8, 8).into_iter().enumerate() {
        let model = random_model::<f32>(&cfg, 40, 56, i as u64);
        let (g, w) = (dir.path().join(format!("m{i}.bpg")), dir.path().join(format!("m{i}.bpt")));
        model.save(&g, &w, None).unwrap();
        let back = GridModel::<f32>::load(&g, &w).unwrap();
        assert_eq!(back, model);
        let img = synthetic_image(40, 56, 9);
        let a = Pipeline::new(cfg.clone(), model).unwrap().enhance(&img).unwrap();
        let b = Pipeline::new(cfg, back).unwrap().enhance(&img).unwrap();
        assert_eq!(bits(a.data()), bits(b.data()));
    }
}

#[test]
fn grid_file_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.bpg");
    let geom = GridGeometry::new(2, 2, 2, 4, 4, true).unwrap();
    let g = random_cells::<f32>(geom, 4, 1.0, &mut rng(0));
    save_grids(&path, &[&g]).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"BPG1");
    assert_eq!(load_grids(&path).unwrap()[0], g);
    bytes.truncate(bytes.len() - 2);
    assert!(grids_from_bytes(&bytes).is_err());
    bytes[0] = b'Q';
    assert!(grids_from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    let missing = load_grids(dir.path().join("nope.bpg")).unwrap_err().to_string();
    assert!(missing.contains("nope.bpg"), "{missing}");
}

#[test]
fn png_round_trip_at_both_depths() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic_image(13, 21, 4);
    for (depth, tol) in [(BitDepth::Eight, 0.5 / 255.0), (BitDepth::Sixteen, 0.5 / 65535.0)] {
        let p = dir.path().join("x.png");
        save_image(&img, &p, depth).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= tol + 1e-7);
        // a second pass is exact
        save_image(&back, &p, depth).unwrap();
        assert_eq!(load_image(&p).unwrap(), back);
    }
}
