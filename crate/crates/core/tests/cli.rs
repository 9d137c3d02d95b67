use std::path::Path;

use bpam::cli::main_with_args;
use bpam::imaging::{load_image, save_image, synthetic_image, BitDepth};

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("bpam").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn init_enhance_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (input, grids, weights, out, report) =
        (d.join("in.png"), d.join("g.bpg"), d.join("w.bpt"), d.join("out.png"), d.join("m.csv"));
    save_image(&synthetic_image(48, 64, 1), &input, BitDepth::Eight).unwrap();
    assert_eq!(run(&["init", "--input", s(&input), "--grids", s(&grids), "--weights", s(&weights)]), 0);
    let enhance = ["enhance", "--input", s(&input), "--grids", s(&grids), "--weights", s(&weights), "--out", s(&out)];
    assert_eq!(run(&enhance), 0);
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out).unwrap());
    assert_eq!(run(&["eval", "--input", s(&out), "--target", s(&input), "--out", s(&report)]), 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("psnr,ssim,delta_e"), "{csv}");
}

#[test]
fn affine_and_undecomposed_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (input, grids, weights, out) = (d.join("in.png"), d.join("g.bpg"), d.join("w.bpt"), d.join("out.png"));
    save_image(&synthetic_image(32, 32, 2), &input, BitDepth::Sixteen).unwrap();
    let flags = ["--mode", "affine", "--decomposed", "off", "--grid-ratio", "4", "--depth", "4"];
    let mut init = vec!["init", "--input", s(&input), "--grids", s(&grids), "--weights", s(&weights)];
    init.extend(flags);
    assert_eq!(run(&init), 0);
    let mut enhance = vec!["enhance", "--input", s(&input), "--grids", s(&grids), "--weights", s(&weights)];
    enhance.extend(["--out", s(&out), "--bits", "16", "--precision", "64", "--threads", "2"]);
    enhance.extend(flags);
    assert_eq!(run(&enhance), 0);
    assert!(load_image(&out).unwrap().max_abs_diff(&load_image(&input).unwrap()) < 1e-6);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (input, grids, weights, cfg) = (d.join("in.png"), d.join("g.bpg"), d.join("w.bpt"), d.join("c.json"));
    save_image(&synthetic_image(16, 16, 3), &input, BitDepth::Eight).unwrap();
    std::fs::write(&cfg, r#"{"mode": "affine", "decomposed": false, "grid_ratio": 4}"#).unwrap();
    let base = ["init", "--input", s(&input), "--grids", s(&grids), "--weights", s(&weights), "--config", s(&cfg)];
    assert_eq!(run(&base), 0);
    let affine = bpam::grid::load_grids(&grids).unwrap();
    assert_eq!((affine.len(), affine[0].params(), affine[0].geometry().grid_w), (1, 12, 4));
    let mut over = base.to_vec();
    over.extend(["--mode", "mlp"]);
    assert_eq!(run(&over), 0);
    assert_eq!(bpam::grid::load_grids(&grids).unwrap().len(), 2);

    std::fs::write(&cfg, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(run(&base), 2);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let input = d.join("in.png");
    save_image(&synthetic_image(16, 16, 3), &input, BitDepth::Eight).unwrap();
    let missing = d.join("missing.bpg");
    let code = run(&[
        "enhance", "--input", s(&input), "--grids", s(&missing), "--weights", s(&missing), "--out", s(&d.join("o.png")),
    ]);
    assert_eq!(code, 2);
    assert_eq!(run(&["enhance", "--input", s(&input)]), 2);
    assert_eq!(run(&["train-toy", "--input", s(&input), "--target", s(&input), "--out", s(d)]), 2);
    assert_eq!(run(&["enhance", "--grid-ratio", "5"]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn train_toy_writes_model_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (input, target) = (d.join("in.png"), d.join("t.png"));
    let img = synthetic_image(32, 32, 5);
    let mut darker = img.clone();
    darker.data_mut().iter_mut().for_each(|v| *v *= 0.8);
    save_image(&img, &input, BitDepth::Eight).unwrap();
    save_image(&darker, &target, BitDepth::Eight).unwrap();
    let out = d.join("run");
    std::fs::create_dir(&out).unwrap();
    let args = ["train-toy", "--input", s(&input), "--target", s(&target), "--out", s(&out), "--seed", "3", "--iters", "20"];
    assert_eq!(run(&args), 0);
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,lr,mse,ssim,total");
    assert_eq!(lines.len(), 22);
    let total = |l: &str| l.rsplit(',').next().unwrap().parse::<f64>().unwrap();
    assert!(total(lines[21]) < total(lines[1]));
    let model = bpam::transform::GridModel::<f32>::load(out.join("grids.bpg"), out.join("weights.bpt")).unwrap();
    assert!(model.grid2.is_some());

    let again = d.join("again");
    std::fs::create_dir(&again).unwrap();
    let mut args2 = args.to_vec();
    args2[6] = s(&again);
    assert_eq!(run(&args2), 0);
    assert_eq!(std::fs::read(out.join("grids.bpg")).unwrap(), std::fs::read(again.join("grids.bpg")).unwrap());
}

#[test]
fn gradcheck_passes_and_detects_a_broken_backward() {
    assert_eq!(run(&["gradcheck"]), 0);
    assert_eq!(run(&["gradcheck", "--mode", "affine", "--decomposed", "off"]), 0);
    assert_eq!(run(&["gradcheck", "--corrupt-backward"]), 1);
}
