//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use bpam::grid::DecompositionKind;
use bpam::layout::{COLORS, HIDDEN};
use bpam::transform::GridModel;
use bpam::{BilateralGrid, GridGeometry, GuidanceNet, Image, PipelineConfig, Real, TransformMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Floor and fraction of a coordinate clamped to `[0, dim - 1]`.
fn axis(c: f64, dim: usize) -> (usize, usize, f64) {
    let c = c.clamp(0.0, (dim - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(dim - 1);
    (lo, hi, c - lo as f64)
}

/// Trilinear lookup of slot `p` at pixel `(x, y)` with guidance `g`, by
/// explicit summation over the eight neighbours.
pub fn naive_lookup<T: Real>(grid: &BilateralGrid<T>, x: usize, y: usize, g: f64, p: usize) -> f64 {
    let geo = grid.geometry();
    let map = |pos: usize, img: usize, n: usize| {
        let s = n as f64 / img as f64;
        if geo.align_centers {
            (pos as f64 + 0.5) * s - 0.5
        } else {
            pos as f64 * s
        }
    };
    let (x0, x1, fx) = axis(map(x, geo.image_w, geo.grid_w), geo.grid_w);
    let (y0, y1, fy) = axis(map(y, geo.image_h, geo.grid_h), geo.grid_h);
    let (z0, z1, fz) = axis(g.clamp(0.0, 1.0) * (geo.depth - 1) as f64, geo.depth);
    let mut acc = 0.0;
    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                acc += wx * wy * wz * grid.cell(yi, xi, zi)[p].f64();
            }
        }
    }
    acc
}

/// Slices every slot of every pixel with the brute-force lookup.
pub fn naive_slice<T: Real>(grid: &BilateralGrid<T>, guidance: &Image<T>) -> Image<f64> {
    let (h, w, p) = (guidance.height(), guidance.width(), grid.params());
    Image::from_fn(h, w, p, |y, x, c| naive_lookup(grid, x, y, guidance.get(y, x, 0).f64(), c))
}

pub fn random_cells<T: Real>(geom: GridGeometry, params: usize, scale: f64, rng: &mut ChaCha8Rng) -> BilateralGrid<T> {
    let cells = (0..geom.cell_count() * params)
        .map(|_| T::of(rng.random_range(-scale..scale)))
        .collect();
    BilateralGrid::new(geom, params, cells).unwrap()
}

pub fn random_image<T: Real>(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image<T> {
    let data = (0..h * w * c).map(|_| T::of(rng.random_range(0.0..1.0))).collect();
    Image::new(h, w, c, data).unwrap()
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Guidance net on one pixel, written out with explicit loops.
pub fn naive_guidance<T: Real>(net: &GuidanceNet<T>, x: &[f64]) -> Vec<f64> {
    let (c, nh, k) = (net.in_channels(), net.hidden(), net.out_channels());
    let hid: Vec<f64> = (0..nh)
        .map(|j| {
            let a = net.b1[j].f64() + (0..c).map(|i| net.w1[j * c + i].f64() * x[i]).sum::<f64>();
            a.max(0.0)
        })
        .collect();
    (0..k)
        .map(|o| sigmoid(net.b2[o].f64() + (0..nh).map(|j| net.w2[o * nh + j].f64() * hid[j]).sum::<f64>()))
        .collect()
}

/// Guidance channel that steers each slot of a `kind` grid.
pub fn slot_channels(kind: DecompositionKind, decomposed: bool) -> Vec<usize> {
    let mut ch = vec![0; kind.params()];
    if decomposed {
        for (i, (_, slots)) in kind.layout().into_iter().enumerate() {
            for s in slots {
                ch[s] = i;
            }
        }
    }
    ch
}

/// Whole-pipeline oracle: one pixel at a time, every parameter looked up
/// by brute force from the full (undecomposed) grids.
pub fn naive_enhance<T: Real>(img: &Image<T>, model: &GridModel<T>, cfg: &PipelineConfig) -> Image<f64> {
    let (h, w) = (img.height(), img.width());
    let stage1 = match cfg.mode {
        TransformMode::Affine => DecompositionKind::Affine,
        TransformMode::Mlp => DecompositionKind::Stage1,
    };
    let ch1 = slot_channels(stage1, cfg.decomposed);
    let ch2 = slot_channels(DecompositionKind::Stage2, cfg.decomposed);
    let mut out = Image::zeros(h, w, COLORS);
    for y in 0..h {
        for x in 0..w {
            let px: Vec<f64> = img.pixel(y, x).iter().map(|v| v.f64()).collect();
            let g1 = naive_guidance(&model.gnet1, &px);
            let p1: Vec<f64> = (0..stage1.params())
                .map(|s| naive_lookup(&model.grid1, x, y, g1[ch1[s]], s))
                .collect();
            let o: Vec<f64> = match cfg.mode {
                TransformMode::Affine => (0..COLORS)
                    .map(|r| p1[9 + r] + (0..COLORS).map(|c| p1[r * 3 + c] * px[c]).sum::<f64>())
                    .collect(),
                TransformMode::Mlp => {
                    let z: Vec<f64> = (0..HIDDEN)
                        .map(|j| (p1[24 + j] + (0..COLORS).map(|c| p1[j * 3 + c] * px[c]).sum::<f64>()).max(0.0))
                        .collect();
                    let g2 = naive_guidance(model.gnet2.as_ref().unwrap(), &z);
                    let grid2 = model.grid2.as_ref().unwrap();
                    let p2: Vec<f64> = (0..27).map(|s| naive_lookup(grid2, x, y, g2[ch2[s]], s)).collect();
                    (0..COLORS)
                        .map(|o| p2[24 + o] + (0..HIDDEN).map(|j| p2[o * 8 + j] * z[j]).sum::<f64>())
                        .collect()
                }
            };
            for c in 0..COLORS {
                out.set(y, x, c, o[c].clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Random grids around identity plus random guidance nets.
pub fn random_model<T: Real>(cfg: &PipelineConfig, h: usize, w: usize, seed: u64) -> GridModel<T> {
    let mut r = rng(seed);
    let geom = cfg.geometry_for(h, w).unwrap();
    let mut model: GridModel<T> = bpam::producer::identity_model(cfg, geom, &mut r);
    for v in model.grid1.cells_mut() {
        *v += T::of(r.random_range(-0.3..0.3));
    }
    if let Some(g) = &mut model.grid2 {
        for v in g.cells_mut() {
            *v += T::of(r.random_range(-0.3..0.3));
        }
    }
    let (k1, k2) = cfg.guidance_channels();
    model.gnet1 = GuidanceNet::random(COLORS, 16, k1, 1.0, &mut r);
    if let Some(k2) = k2 {
        model.gnet2 = Some(GuidanceNet::random(HIDDEN, 16, k2, 1.0, &mut r));
    }
    model
}

/// All four ablation settings plus the default with center alignment off.
pub fn all_configs(ratio: usize, depth: usize) -> Vec<PipelineConfig> {
    let mut v: Vec<PipelineConfig> = (1..=4)
        .map(|s| PipelineConfig {
            grid_ratio: ratio,
            depth,
            ..PipelineConfig::ablation(s).unwrap()
        })
        .collect();
    v.push(PipelineConfig {
        align_centers: false,
        grid_ratio: ratio,
        depth,
        ..PipelineConfig::default()
    });
    v
}
