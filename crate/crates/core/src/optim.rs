//! Adam with bias correction and the cosine learning-rate schedule.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::BilateralGrid;
use crate::real::Real;

/// A collection of named flat parameter tensors.
///
/// Gradient containers reuse the parameter type, so parameters and gradients
/// visit their tensors in the same order with the same names.
pub trait ParamSet<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &[T]));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |n, _| names.push(n.to_owned()));
        names
    }
}

impl<T: Real> ParamSet<T> for BilateralGrid<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &[T])) {
        f("cells", self.cells());
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("cells", self.cells_mut());
    }
}

impl<T> ParamSet<T> for Vec<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &[T])) {
        f("values", self);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("values", self);
    }
}

/// Visits a nested parameter set with `prefix.` prepended to every name.
pub fn visit_prefixed<T>(prefix: &str, set: &dyn ParamSet<T>, f: &mut dyn FnMut(&str, &[T])) {
    set.for_each_param(&mut |n, p| f(&format!("{prefix}.{n}"), p));
}

pub fn visit_prefixed_mut<T>(prefix: &str, set: &mut dyn ParamSet<T>, f: &mut dyn FnMut(&str, &mut [T])) {
    set.for_each_param_mut(&mut |n, p| f(&format!("{prefix}.{n}"), p));
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step<T: Real, P: ParamSet<T> + ?Sized>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let mut by_name: HashMap<String, Vec<f64>> = HashMap::new();
        let mut bad = None;
        grads.for_each_param(&mut |name, g| {
            if bad.is_none() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    bad = Some(format!("non-finite gradient in {name}[{i}]"));
                }
            }
            by_name.insert(name.to_owned(), g.iter().map(|v| v.f64()).collect());
        });
        if let Some(reason) = bad {
            return Err(Error::Training {
                step: self.step as usize,
                reason,
            });
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        let mut err = None;
        params.for_each_param_mut(&mut |name, p| {
            let Some(g) = by_name.get(name) else {
                err.get_or_insert_with(|| Error::arg(format!("no gradient for parameter {name}")));
                return;
            };
            if g.len() != p.len() {
                err.get_or_insert_with(|| {
                    Error::arg(format!("gradient for {name} has {} values, parameter has {}", g.len(), p.len()))
                });
                return;
            }
            let (m, v) = moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = T::of(p[i].f64() - lr * mh / (vh.sqrt() + eps));
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Cosine annealing from `lr_max` to `lr_min` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize) -> Result<Self> {
        if !(lr_min > 0.0 && lr_max >= lr_min && lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates need lr_max >= lr_min > 0, got {lr_max} and {lr_min}"
            )));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_steps,
        })
    }

    /// Learning rate at step `t`; steps past the end stay at `lr_min`.
    pub fn lr(&self, t: usize) -> f64 {
        if t > self.total_steps {
            return self.lr_min;
        }
        if self.total_steps == 0 {
            return self.lr_max;
        }
        let phase = PI * t as f64 / self.total_steps as f64;
        self.lr_min + (self.lr_max - self.lr_min) * (1.0 + phase.cos()) / 2.0
    }
}

pub fn cosine_lr(sched: &Schedule, t: usize) -> f64 {
    sched.lr(t)
}
