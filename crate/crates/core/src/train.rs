//! Single-image training with Adam and cosine annealing.
//!
//! Direct-grid mode treats grid cells and guidance nets as free parameters.
//! Producer mode trains the convolutional producer and the guidance nets,
//! regenerating the grids from a downsampled input every step.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::grid::BilateralGrid;
use crate::guidance::GuidanceNet;
use crate::imaging::{downsample, Image};
use crate::loss::{total_loss, LossWeights};
use crate::optim::{visit_prefixed, visit_prefixed_mut, AdamConfig, AdamState, ParamSet, Schedule};
use crate::producer::{identity_model, ProducerConfig, ProducerNet};
use crate::transform::{GridModel, Pipeline, PipelineConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    DirectGrids,
    Producer,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub pipeline: PipelineConfig,
    pub mode: TrainMode,
    pub iters: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            mode: TrainMode::DirectGrids,
            iters: 2000,
            lr_max: 3e-4,
            lr_min: 4e-6,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Loss terms at one step, measured before that step's update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub mse: f64,
    pub ssim: f64,
    pub total: f64,
}

pub const TRACE_HEADER: &str = "step,lr,mse,ssim,total";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GridModel<f32>,
    pub producer: Option<ProducerNet<f32>>,
    /// One row per step plus a final row after the last update.
    pub trace: Vec<TraceRow>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> TraceRow {
        *self.trace.last().expect("trace always has a final row")
    }
}

/// Producer plus guidance nets, the trainable set of producer mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ProducerModel<T> {
    pub producer: ProducerNet<T>,
    pub gnet1: GuidanceNet<T>,
    pub gnet2: Option<GuidanceNet<T>>,
}

impl<T: crate::real::Real> ParamSet<T> for ProducerModel<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &[T])) {
        visit_prefixed("producer", &self.producer, f);
        visit_prefixed("gnet1", &self.gnet1, f);
        if let Some(g) = &self.gnet2 {
            visit_prefixed("gnet2", g, f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        visit_prefixed_mut("producer", &mut self.producer, f);
        visit_prefixed_mut("gnet1", &mut self.gnet1, f);
        if let Some(g) = &mut self.gnet2 {
            visit_prefixed_mut("gnet2", g, f);
        }
    }
}

impl ProducerModel<f32> {
    fn grid_model(&self, lowres: &Image<f32>, pipeline: &PipelineConfig, h: usize, w: usize) -> Result<GridModel<f32>> {
        let geom = pipeline.geometry_for(h, w)?;
        let mut grids = self.producer.produce(lowres, &geom)?.into_iter();
        Ok(GridModel {
            grid1: grids.next().expect("one head at least"),
            grid2: grids.next(),
            gnet1: self.gnet1.clone(),
            gnet2: self.gnet2.clone(),
        })
    }
}

fn check_finite(step: usize, total: f64) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            reason: format!("loss is {total}"),
        })
    }
}

/// Trains on one input/target pair.
///
/// `init` seeds direct-grid mode; by default training starts from identity
/// grids and freshly initialized guidance nets.
pub fn train_toy(
    input: &Image<f32>,
    target: &Image<f32>,
    cfg: &TrainConfig,
    init: Option<GridModel<f32>>,
) -> Result<TrainOutcome> {
    if !input.same_shape(target) {
        return Err(Error::arg("input and target must have the same shape"));
    }
    let sched = Schedule::new(cfg.lr_max, cfg.lr_min, cfg.iters)?;
    let (h, w) = (input.height(), input.width());
    let geom = cfg.pipeline.geometry_for(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut trace = Vec::with_capacity(cfg.iters + 1);

    // Runs forward, loss and backward; returns the trace row and gradients.
    let evaluate = |model: GridModel<f32>, step: usize| -> Result<(TraceRow, Pipeline<f32>, Image<f32>)> {
        let mut pipe = Pipeline::new(cfg.pipeline.clone(), model)?;
        let out = pipe.forward(input)?;
        let terms = total_loss(&out, target, &cfg.loss)?;
        check_finite(step, terms.total)?;
        let row = TraceRow {
            step,
            lr: sched.lr(step),
            mse: terms.mse,
            ssim: terms.ssim,
            total: terms.total,
        };
        Ok((row, pipe, terms.grad))
    };

    match cfg.mode {
        TrainMode::DirectGrids => {
            let mut params = match init {
                Some(m) => m,
                None => identity_model(&cfg.pipeline, geom, &mut rng),
            };
            for step in 0..=cfg.iters {
                let (row, pipe, grad) = evaluate(params.clone(), step)?;
                trace.push(row);
                if step == cfg.iters {
                    break;
                }
                let grads = pipe.backward(&grad)?;
                adam.step(&mut params, &grads, row.lr).map_err(|e| at_step(e, step))?;
            }
            Ok(TrainOutcome {
                model: params,
                producer: None,
                trace,
            })
        }
        TrainMode::Producer => {
            let lowres = downsample(input, cfg.pipeline.downsample)?;
            let base = identity_model::<f32, _>(&cfg.pipeline, geom, &mut rng);
            let mut params = ProducerModel {
                producer: ProducerNet::init(ProducerConfig::for_pipeline(&cfg.pipeline)?, &mut rng)?,
                gnet1: base.gnet1,
                gnet2: base.gnet2,
            };
            for step in 0..=cfg.iters {
                let model = params.grid_model(&lowres, &cfg.pipeline, h, w)?;
                let (row, pipe, grad) = evaluate(model, step)?;
                trace.push(row);
                if step == cfg.iters {
                    break;
                }
                let g = pipe.backward(&grad)?;
                let mut up: Vec<&BilateralGrid<f32>> = vec![&g.grid1];
                up.extend(g.grid2.as_ref());
                let grads = ProducerModel {
                    producer: params.producer.backward(&lowres, &geom, &up)?,
                    gnet1: g.gnet1.clone(),
                    gnet2: g.gnet2.clone(),
                };
                adam.step(&mut params, &grads, row.lr).map_err(|e| at_step(e, step))?;
            }
            let model = params.grid_model(&lowres, &cfg.pipeline, h, w)?;
            Ok(TrainOutcome {
                model,
                producer: Some(params.producer),
                trace,
            })
        }
    }
}

/// Self-consistency experiment: a random ground-truth model generates the
/// target, and direct-grid training from identity tries to reproduce it.
#[derive(Clone, Debug)]
pub struct RecoverySetup {
    pub size: usize,
    /// Standard deviation of the ground-truth perturbation of identity cells.
    pub amplitude: f64,
    /// Scale of the ground-truth guidance-net weights.
    pub guidance_scale: f64,
    pub train: TrainConfig,
}

impl Default for RecoverySetup {
    fn default() -> Self {
        Self {
            size: 64,
            amplitude: 0.05,
            guidance_scale: 1.0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecoveryReport {
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub trace: Vec<TraceRow>,
}

impl RecoveryReport {
    pub fn loss_at(&self, step: usize) -> f64 {
        self.trace[step.min(self.trace.len() - 1)].total
    }
}

/// Ground-truth model: identity grids plus Gaussian noise, random guidance
/// nets.
pub fn ground_truth_model(setup: &RecoverySetup, rng: &mut ChaCha8Rng) -> Result<GridModel<f32>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let cfg = &setup.train.pipeline;
    let geom = cfg.geometry_for(setup.size, setup.size)?;
    let mut model = identity_model::<f32, _>(cfg, geom, rng);
    let mut noise = |g: &mut BilateralGrid<f32>| {
        for v in g.cells_mut() {
            *v += (setup.amplitude * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    };
    noise(&mut model.grid1);
    if let Some(g) = &mut model.grid2 {
        noise(g);
    }
    let (k1, k2) = cfg.guidance_channels();
    let hidden = model.gnet1.hidden();
    model.gnet1 = GuidanceNet::random(3, hidden, k1, setup.guidance_scale, rng);
    if model.gnet2.is_some() {
        model.gnet2 = Some(GuidanceNet::random(8, hidden, k2.unwrap_or(1), setup.guidance_scale, rng));
    }
    Ok(model)
}

pub fn recovery_experiment(setup: &RecoverySetup) -> Result<RecoveryReport> {
    let seed = setup.train.seed;
    let input = crate::imaging::synthetic_image(setup.size, setup.size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    let truth = ground_truth_model(setup, &mut rng)?;
    let target = Pipeline::new(setup.train.pipeline.clone(), truth)?.enhance(&input)?;
    let outcome = train_toy(&input, &target, &setup.train, None)?;
    let final_out = Pipeline::new(setup.train.pipeline.clone(), outcome.model)?.enhance(&input)?;
    Ok(RecoveryReport {
        initial_psnr: crate::metrics::psnr(&input, &target)?,
        final_psnr: crate::metrics::psnr(&final_out, &target)?,
        trace: outcome.trace,
    })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Training { reason, .. } => Error::Training { step, reason },
        other => other,
    }
}

/// Writes the loss trace as CSV with header [`TRACE_HEADER`].
pub fn write_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |f| {
        let mut f = std::io::BufWriter::new(f);
        writeln!(f, "{TRACE_HEADER}")?;
        for r in trace {
            writeln!(f, "{},{:e},{:e},{:e},{:e}", r.step, r.lr, r.mse, r.ssim, r.total)?;
        }
        f.flush()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |y, x, c| {
            (0.5 + 0.3 * ((x as f32 * 0.3 + c as f32).sin() * (y as f32 * 0.2).cos()) + rng.random_range(-0.05..0.05))
                .clamp(0.0, 1.0)
        })
    }

    #[test]
    fn identity_target_is_a_fixed_point() {
        let img = rand_image(24, 24, 1);
        let cfg = TrainConfig {
            iters: 20,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let geom = cfg.pipeline.geometry_for(24, 24).unwrap();
        let start: GridModel<f32> = identity_model(&cfg.pipeline, geom, &mut rng);
        let out = train_toy(&img, &img, &cfg, None).unwrap();
        assert!(out.trace[0].total < 1e-10);
        assert!(out.final_row().total < 1e-10);
        let mut max_change = 0.0f32;
        let mut a = Vec::new();
        start.for_each_param(&mut |_, p| a.extend_from_slice(p));
        let mut i = 0;
        out.model.for_each_param(&mut |_, p| {
            for v in p {
                max_change = max_change.max((v - a[i]).abs());
                i += 1;
            }
        });
        assert!(max_change < 1e-5, "{max_change}");
    }

    #[test]
    fn producer_mode_reduces_loss() {
        let input = rand_image(32, 32, 2);
        let target = Image::from_fn(32, 32, 3, |y, x, c| (0.8 * input.get(y, x, c) + 0.1).min(1.0));
        let cfg = TrainConfig {
            mode: TrainMode::Producer,
            iters: 60,
            lr_max: 1e-3,
            ..TrainConfig::default()
        };
        let out = train_toy(&input, &target, &cfg, None).unwrap();
        assert_eq!(out.trace.len(), 61);
        assert!(out.final_row().total < 0.5 * out.trace[0].total);
        assert!(out.producer.is_some());
    }

    #[test]
    fn deterministic_trace() {
        let input = rand_image(16, 16, 3);
        let target = rand_image(16, 16, 4);
        let cfg = TrainConfig {
            iters: 5,
            ..TrainConfig::default()
        };
        let a = train_toy(&input, &target, &cfg, None).unwrap();
        let b = train_toy(&input, &target, &cfg, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn trace_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = [TraceRow {
            step: 0,
            lr: 3e-4,
            mse: 0.5,
            ssim: 0.25,
            total: 0.625,
        }];
        write_trace_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,lr,mse,ssim,total\n0,"));
    }
}
