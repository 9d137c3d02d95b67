//! Central-difference gradient checking.
//!
//! [`gradcheck`] works on any [`ParamSet`]. [`check_pipeline`] builds a small
//! seeded pipeline instance and checks every parameter group: both grids,
//! both guidance nets and the grid producer.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{slice, slice_decomposed, decompose, BilateralGrid, GridGeometry};
use crate::guidance::{GuidanceNet, DEFAULT_HIDDEN};
use crate::imaging::Image;
use crate::layout::{COLORS, HIDDEN};
use crate::optim::ParamSet;
use crate::producer::{identity_model, ProducerConfig, ProducerNet};
use crate::transform::{GridModel, Pipeline, PipelineConfig, PixelMlpParams, TransformMode};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_PROBES: usize = 64;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Minimum distance from any kink for an accepted instance.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub step: f64,
    /// Probes per tensor; smaller tensors are checked exhaustively.
    pub probes: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            probes: DEFAULT_PROBES,
            seed: 0,
        }
    }
}

/// Worst probe of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`; infinite when either side is not finite.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }

    /// Prefixes every tensor name with `group.`.
    fn prefixed(mut self, group: &str) -> Self {
        for t in &mut self.tensors {
            t.name = format!("{group}.{}", t.name);
        }
        self
    }

    /// Aggregates tensors by the name component before the first dot.
    pub fn groups(&self) -> Vec<TensorCheck> {
        let mut out: Vec<TensorCheck> = Vec::new();
        for t in &self.tensors {
            let group = t.name.split('.').next().unwrap_or(&t.name);
            match out.iter_mut().find(|g| g.name == group) {
                Some(g) => {
                    g.probes += t.probes;
                    if t.max_rel_err > g.max_rel_err {
                        *g = TensorCheck {
                            name: g.name.clone(),
                            probes: g.probes,
                            ..t.clone()
                        };
                    }
                }
                None => out.push(TensorCheck {
                    name: group.to_owned(),
                    ..t.clone()
                }),
            }
        }
        out
    }
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn gradcheck<P, F>(params: &P, analytic: &P, mut loss: F, opts: &ProbeOptions) -> Result<GradReport>
where
    P: ParamSet<f64> + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let mut grads = Vec::new();
    analytic.for_each_param(&mut |n, g| grads.push((n.to_owned(), g.to_vec())));
    let mut sizes = Vec::new();
    params.for_each_param(&mut |n, p| sizes.push((n.to_owned(), p.len())));
    if sizes.len() != grads.len() || sizes.iter().zip(&grads).any(|((a, la), (b, g))| a != b || *la != g.len()) {
        return Err(Error::arg("gradient set does not match the parameter set"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    for (name, grad) in &grads {
        let n = grad.len();
        if n == 0 {
            continue;
        }
        let indices: Vec<usize> = if n <= opts.probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = TensorCheck {
            name: name.clone(),
            probes: indices.len(),
            max_rel_err: 0.0,
            worst_index: indices[0],
            analytic: grad[indices[0]],
            numeric: f64::NAN,
        };
        for &i in &indices {
            let mut eval = |delta: f64| {
                let mut p = params.clone();
                p.for_each_param_mut(&mut |pn, v| {
                    if pn == name {
                        v[i] += delta;
                    }
                });
                loss(&p)
            };
            let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
            let err = rel_err(grad[i], numeric);
            if err > check.max_rel_err || check.numeric.is_nan() {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = grad[i];
                check.numeric = numeric;
            }
        }
        report.tensors.push(check);
    }
    Ok(report)
}

/// Settings of the seeded pipeline instance.
#[derive(Clone, Debug)]
pub struct PipelineCheck {
    pub pipeline: PipelineConfig,
    pub image_h: usize,
    pub image_w: usize,
    pub probes: ProbeOptions,
    pub tolerance: f64,
    /// Attempts at drawing an instance away from every kink.
    pub max_attempts: usize,
    /// Scales analytic gradients by 1.01; a negative control that must fail.
    pub corrupt_backward: bool,
}

impl Default for PipelineCheck {
    /// 8×8 image, 2×2×4 grids, MLP mode with decomposition.
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig {
                grid_ratio: 4,
                depth: 4,
                downsample: 1,
                ..PipelineConfig::default()
            },
            image_h: 8,
            image_w: 8,
            probes: ProbeOptions::default(),
            tolerance: DEFAULT_TOLERANCE,
            max_attempts: 10_000,
            corrupt_backward: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineCheckReport {
    pub report: GradReport,
    pub attempts: usize,
    pub tolerance: f64,
}

impl PipelineCheckReport {
    pub fn passed(&self) -> bool {
        self.report.passed(self.tolerance)
    }
}

struct Instance {
    image: Image<f64>,
    model: GridModel<f64>,
    producer: ProducerNet<f64>,
    weights: Image<f64>,
}

fn random_gnet<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> GuidanceNet<f64> {
    let mut net = GuidanceNet::random(n_in, DEFAULT_HIDDEN, n_out, 0.8, rng);
    // Mostly active hidden units keep guidance varied across pixels.
    net.b1.iter_mut().for_each(|b| *b += 0.5);
    net
}

fn draw(cfg: &PipelineCheck, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = &cfg.pipeline;
    let (h, w) = (cfg.image_h, cfg.image_w);
    let geom = p.geometry_for(h, w)?;
    let image = Image::from_fn(h, w, COLORS, |_, _, _| rng.random_range(0.2..0.8));
    let (k1, k2) = p.guidance_channels();
    let mut producer = ProducerNet::init(ProducerConfig::for_pipeline(p)?, rng)?;
    // Wide pre-activations keep conv ReLUs clear of zero.
    for conv in &mut producer.convs {
        conv.weight.iter_mut().for_each(|w| *w *= 4.0);
        conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    }
    for head in &mut producer.heads {
        head.weight.iter_mut().for_each(|v| *v = 5e-4 * rng.sample::<f64, _>(StandardNormal));
        head.bias.iter_mut().for_each(|v| *v += 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    let mut grids = producer.produce(&image, &geom)?.into_iter();
    let mut model = identity_model::<f64, _>(p, geom, rng);
    model.grid1 = grids.next().expect("one head at least");
    model.gnet1 = random_gnet(COLORS, k1, rng);
    if model.grid2.is_some() {
        model.grid2 = grids.next();
        model.gnet2 = Some(random_gnet(HIDDEN, k2.unwrap_or(1), rng));
    }
    let weights = Image::from_fn(h, w, COLORS, |_, _, _| rng.random_range(-1.0..1.0));
    Ok(Instance {
        image,
        model,
        producer,
        weights,
    })
}

/// Interior depth-cell boundaries are kinks of the trilinear weights; the
/// endpoints 0 and `D − 1` are not reachable from both sides.
fn clear_of_boundaries(r: f64, depth: usize) -> bool {
    let k = r.round();
    k < 1.0 || k > (depth - 2) as f64 || (r - k).abs() >= KINK_MARGIN
}

fn gnet_clear(net: &GuidanceNet<f64>, input: &Image<f64>, depth: usize) -> Result<bool> {
    let (n_in, n_hid) = (net.in_channels(), net.hidden());
    for px in input.data().chunks_exact(n_in) {
        for j in 0..n_hid {
            let a: f64 = net.b1[j] + (0..n_in).map(|i| net.w1[j * n_in + i] * px[i]).sum::<f64>();
            if a.abs() < KINK_MARGIN {
                return Ok(false);
            }
        }
    }
    let g = net.forward(input)?;
    let scale = depth.saturating_sub(1) as f64;
    Ok(depth < 3 || g.data().iter().all(|&v| clear_of_boundaries(v * scale, depth)))
}

fn sliced(grid: &BilateralGrid<f64>, cfg: &PipelineConfig, kind_stage2: bool, guidance: &Image<f64>) -> Result<Image<f64>> {
    if cfg.decomposed {
        let kind = if kind_stage2 {
            crate::grid::DecompositionKind::Stage2
        } else {
            cfg.stage1_kind()
        };
        slice_decomposed(&decompose(grid, kind)?, guidance)
    } else {
        slice(grid, guidance)
    }
}

/// True when no ReLU, depth-cell boundary or output clamp lies within
/// [`KINK_MARGIN`] of the instance.
fn clear_of_kinks(inst: &Instance, cfg: &PipelineCheck, geom: &GridGeometry) -> Result<bool> {
    let p = &cfg.pipeline;
    let m = &inst.model;
    let d = geom.depth;
    if !gnet_clear(&m.gnet1, &inst.image, d)? {
        return Ok(false);
    }
    for pre in inst.producer.conv_preactivations(&inst.image) {
        if pre.data().iter().any(|v| v.abs() < KINK_MARGIN) {
            return Ok(false);
        }
    }
    if p.mode == TransformMode::Mlp {
        let g1 = m.gnet1.forward(&inst.image)?;
        let p1 = sliced(&m.grid1, p, false, &g1)?;
        let stage2 = vec![0.0; crate::layout::STAGE2_PARAMS];
        let mut z = Image::zeros(inst.image.height(), inst.image.width(), HIDDEN);
        for (i, (px, params)) in inst.image.data().chunks_exact(COLORS).zip(p1.data().chunks_exact(p1.channels())).enumerate() {
            let mlp = PixelMlpParams::from_slots(params, &stage2);
            for h in 0..HIDDEN {
                let a = mlp.b1[h] + (0..COLORS).map(|c| mlp.w1[h][c] * px[c]).sum::<f64>();
                if a.abs() < KINK_MARGIN {
                    return Ok(false);
                }
                z.data_mut()[i * HIDDEN + h] = a.max(0.0);
            }
        }
        if let Some(n2) = &m.gnet2 {
            if !gnet_clear(n2, &z, d)? {
                return Ok(false);
            }
        }
    }
    let out = Pipeline::new(p.clone(), m.clone())?.enhance(&inst.image)?;
    let unclamped = raw_output(inst, p)?;
    Ok(out.data().iter().zip(unclamped.data()).all(|(&a, &b)| (a - b).abs() < 1e-12 && a > KINK_MARGIN && a < 1.0 - KINK_MARGIN))
}

/// Output computed through the public slicing API, without the clamp.
fn raw_output(inst: &Instance, p: &PipelineConfig) -> Result<Image<f64>> {
    let m = &inst.model;
    let g1 = m.gnet1.forward(&inst.image)?;
    let p1 = sliced(&m.grid1, p, false, &g1)?;
    let (h, w) = (inst.image.height(), inst.image.width());
    let mut out = Image::zeros(h, w, COLORS);
    match p.mode {
        TransformMode::Affine => {
            for (i, (px, params)) in inst.image.data().chunks_exact(COLORS).zip(p1.data().chunks_exact(p1.channels())).enumerate() {
                let a = crate::transform::AffineParams::from_slots(params);
                let o = crate::transform::apply_affine(&a, &[px[0], px[1], px[2]]);
                out.data_mut()[i * COLORS..(i + 1) * COLORS].copy_from_slice(&o);
            }
        }
        TransformMode::Mlp => {
            let (Some(grid2), Some(gnet2)) = (&m.grid2, &m.gnet2) else {
                return Err(Error::arg("MLP instance without stage 2"));
            };
            let zeros = vec![0.0; crate::layout::STAGE2_PARAMS];
            let mut z = Image::zeros(h, w, HIDDEN);
            for (i, (px, params)) in inst.image.data().chunks_exact(COLORS).zip(p1.data().chunks_exact(p1.channels())).enumerate() {
                let mlp = PixelMlpParams::from_slots(params, &zeros);
                let zz = crate::transform::mlp_stage1(&mlp.w1, &mlp.b1, &[px[0], px[1], px[2]]);
                z.data_mut()[i * HIDDEN..(i + 1) * HIDDEN].copy_from_slice(&zz);
            }
            let g2 = gnet2.forward(&z)?;
            let p2 = sliced(grid2, p, true, &g2)?;
            let zeros1 = vec![0.0; crate::layout::STAGE1_PARAMS];
            for i in 0..h * w {
                let mlp = PixelMlpParams::from_slots(&zeros1, &p2.data()[i * p2.channels()..(i + 1) * p2.channels()]);
                let zz: [f64; HIDDEN] = z.data()[i * HIDDEN..(i + 1) * HIDDEN].try_into().expect("8 values");
                let o = crate::transform::mlp_stage2(&mlp.w2, &mlp.b2, &zz);
                out.data_mut()[i * COLORS..(i + 1) * COLORS].copy_from_slice(&o);
            }
        }
    }
    Ok(out)
}

fn weighted_sum(a: &Image<f64>, w: &Image<f64>) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

fn corrupt<P: ParamSet<f64>>(grads: &mut P) {
    grads.for_each_param_mut(&mut |_, g| g.iter_mut().for_each(|v| *v *= 1.01));
}

/// Draws an instance clear of kinks and checks every parameter group
/// against central differences of `Σ R ⊙ enhance(image)` for random `R`.
pub fn check_pipeline(cfg: &PipelineCheck, seed: u64) -> Result<PipelineCheckReport> {
    let p = &cfg.pipeline;
    let geom = p.geometry_for(cfg.image_h, cfg.image_w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0;
    let inst = loop {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return Err(Error::Config(format!(
                "no kink-free instance found in {} attempts",
                cfg.max_attempts
            )));
        }
        let inst = draw(cfg, &mut rng)?;
        if clear_of_kinks(&inst, cfg, &geom)? {
            break inst;
        }
    };
    let opts = ProbeOptions { seed, ..cfg.probes };

    let mut pipe = Pipeline::new(p.clone(), inst.model.clone())?;
    pipe.forward(&inst.image)?;
    let exact = pipe.backward(&inst.weights)?;
    let mut grads = exact.clone();
    if cfg.corrupt_backward {
        corrupt(&mut grads);
    }
    let loss = |m: &GridModel<f64>| -> Result<f64> {
        let out = Pipeline::new(p.clone(), m.clone())?.enhance(&inst.image)?;
        Ok(weighted_sum(&out, &inst.weights))
    };
    let mut report = gradcheck(&inst.model, &grads, loss, &opts)?;

    // Producer: the instance grids are its output; guidance nets stay fixed.
    let lowres = &inst.image;
    let at_producer = |grids: Vec<BilateralGrid<f64>>| {
        let mut it = grids.into_iter();
        GridModel {
            grid1: it.next().expect("one head at least"),
            grid2: it.next(),
            gnet1: inst.model.gnet1.clone(),
            gnet2: inst.model.gnet2.clone(),
        }
    };
    let mut up = vec![&exact.grid1];
    up.extend(exact.grid2.as_ref());
    let mut pgrads = inst.producer.backward(lowres, &geom, &up)?;
    if cfg.corrupt_backward {
        corrupt(&mut pgrads);
    }
    let ploss = |net: &ProducerNet<f64>| -> Result<f64> {
        let model = at_producer(net.produce(lowres, &geom)?);
        let out = Pipeline::new(p.clone(), model)?.enhance(&inst.image)?;
        Ok(weighted_sum(&out, &inst.weights))
    };
    let preport = gradcheck(&inst.producer, &pgrads, ploss, &opts)?.prefixed("producer");
    report.tensors.extend(preport.tensors);

    Ok(PipelineCheckReport {
        report,
        attempts,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_constant() {
        let x = vec![3.0f64];
        let g = vec![6.0f64];
        let r = gradcheck(&x, &g, |p: &Vec<f64>| Ok(p[0] * p[0]), &ProbeOptions::default()).unwrap();
        assert!(r.max_rel_err() < 1e-9);
        let r = gradcheck(&x, &vec![0.0], |_: &Vec<f64>| Ok(5.0), &ProbeOptions::default()).unwrap();
        assert_eq!(r.max_rel_err(), 0.0);
    }

    #[test]
    fn detects_wrong_gradient_and_nan() {
        let x = vec![1.0f64, 2.0];
        let r = gradcheck(&x, &vec![2.0, 4.4], |p: &Vec<f64>| Ok(p[0] * p[0] + p[1] * p[1]), &ProbeOptions::default()).unwrap();
        let w = r.worst().unwrap();
        assert_eq!(w.worst_index, 1);
        assert!(!r.passed(1e-4));
        let r = gradcheck(&x, &vec![f64::NAN, 4.0], |p: &Vec<f64>| Ok(p[0] + p[1]), &ProbeOptions::default()).unwrap();
        assert_eq!(r.max_rel_err(), f64::INFINITY);
    }

    #[test]
    fn subsamples_large_tensors() {
        let x: Vec<f64> = (0..500).map(|i| i as f64 * 0.01).collect();
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = gradcheck(&x, &g, |p: &Vec<f64>| Ok(p.iter().map(|v| v * v).sum()), &ProbeOptions::default()).unwrap();
        assert_eq!(r.tensors[0].probes, DEFAULT_PROBES);
        assert!(r.passed(1e-6));
    }

    #[test]
    fn groups_aggregate_by_prefix() {
        let t = |name: &str, e: f64| TensorCheck {
            name: name.into(),
            probes: 2,
            max_rel_err: e,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let r = GradReport {
            tensors: vec![t("gnet1.w1", 1e-7), t("gnet1.b1", 1e-6), t("grid1.cells", 1e-8)],
        };
        let g = r.groups();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].name.as_str(), g[0].probes, g[0].max_rel_err), ("gnet1", 4, 1e-6));
    }

    #[test]
    fn every_ablation_setting_passes() {
        for setting in 1..=4 {
            let mut cfg = PipelineCheck::default();
            cfg.pipeline = PipelineConfig {
                grid_ratio: 4,
                depth: 4,
                downsample: 1,
                ..PipelineConfig::ablation(setting).unwrap()
            };
            cfg.probes.probes = 16;
            let r = check_pipeline(&cfg, 11).unwrap();
            let groups = r.report.groups();
            let want = if setting % 2 == 1 { 3 } else { 5 };
            assert_eq!(groups.len(), want, "setting {setting}");
            assert!(r.passed(), "setting {setting}: {:?}", r.report.worst());
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let cfg = PipelineCheck {
            corrupt_backward: true,
            ..PipelineCheck::default()
        };
        let r = check_pipeline(&cfg, 3).unwrap();
        assert!(!r.passed());
    }
}
