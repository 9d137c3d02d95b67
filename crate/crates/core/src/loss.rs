//! Training losses: MSE, SSIM and their weighted sum, each with its gradient
//! with respect to the first image.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::par;
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_ssim: f64,
    /// Weight of an external perceptual term; none is built in.
    pub w_per: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_mse: 1.0,
            w_ssim: 0.5,
            w_per: 0.0,
        }
    }
}

/// A perceptual loss supplied by the caller.
pub trait PerceptualLoss {
    /// Loss value and its gradient with respect to `out`.
    fn loss(&self, out: &Image<f64>, target: &Image<f64>) -> Result<(f64, Image<f64>)>;
}

/// Individual terms, their weighted sum and `dtotal/dout`.
#[derive(Clone, Debug)]
pub struct LossTerms<T> {
    pub mse: f64,
    /// `1 − SSIM`.
    pub ssim: f64,
    pub perceptual: f64,
    pub total: f64,
    pub grad: Image<T>,
}

fn check_pair<T: Real>(out: &Image<T>, target: &Image<T>) -> Result<()> {
    if !out.same_shape(target) {
        return Err(Error::arg(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            out.height(),
            out.width(),
            out.channels(),
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    Ok(())
}

/// Mean squared error and its gradient `2(out − target)/N`.
pub fn mse_loss<T: Real>(out: &Image<T>, target: &Image<T>) -> Result<(f64, Image<T>)> {
    check_pair(out, target)?;
    let n = out.data().len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(out.data().len());
    for (&a, &b) in out.data().iter().zip(target.data()) {
        let d = a.f64() - b.f64();
        sum += d * d;
        grad.push(T::of(2.0 * d / n));
    }
    Ok((sum / n, Image::new(out.height(), out.width(), out.channels(), grad)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// One channel as a dense f64 plane.
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn of<T: Real>(img: &Image<T>, c: usize) -> Self {
        let ch = img.channels();
        Self {
            h: img.height(),
            w: img.width(),
            v: img.data().iter().skip(c).step_by(ch).map(|x| x.f64()).collect(),
        }
    }

    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable correlation with the window, valid positions only.
    fn filter_valid(&self, g: &[f64; SSIM_WINDOW]) -> Plane {
        let k = SSIM_WINDOW;
        let (oh, ow) = (self.h + 1 - k, self.w + 1 - k);
        let mut tmp = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = (0..k).map(|i| g[i] * row[x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    /// Adjoint of [`Self::filter_valid`]: scatters a valid map back to `h`×`w`.
    fn filter_adjoint(&self, g: &[f64; SSIM_WINDOW], h: usize, w: usize) -> Plane {
        let k = SSIM_WINDOW;
        let mut tmp = vec![0.0; h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let v = self.v[y * self.w + x];
                for i in 0..k {
                    tmp[(y + i) * self.w + x] += g[i] * v;
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..self.w {
                let v = tmp[y * self.w + x];
                for i in 0..k {
                    out[y * w + x + i] += g[i] * v;
                }
            }
        }
        Plane { h, w, v: out }
    }
}

/// Mean SSIM and, optionally, `dSSIM/da` as per-channel planes.
fn ssim_core<T: Real>(a: &Image<T>, b: &Image<T>, want_grad: bool) -> Result<(f64, Vec<Plane>)> {
    check_pair(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let g = gaussian_window();
    let channels = a.channels();
    let results = par::map_ranges(channels, channels, |range| {
        let mut out = Vec::new();
        for c in range {
            let x = Plane::of(a, c);
            let y = Plane::of(b, c);
            let mx = x.filter_valid(&g);
            let my = y.filter_valid(&g);
            let mxx = x.map2(&x, |p, q| p * q).filter_valid(&g);
            let myy = y.map2(&y, |p, q| p * q).filter_valid(&g);
            let mxy = x.map2(&y, |p, q| p * q).filter_valid(&g);
            let n = mx.v.len();
            let mut sum = 0.0;
            let (mut d_mu, mut d_xx, mut d_xy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (ux, uy) = (mx.v[i], my.v[i]);
                let sxx = mxx.v[i] - ux * ux;
                let syy = myy.v[i] - uy * uy;
                let sxy = mxy.v[i] - ux * uy;
                let a1 = 2.0 * ux * uy + SSIM_C1;
                let a2 = 2.0 * sxy + SSIM_C2;
                let b1 = ux * ux + uy * uy + SSIM_C1;
                let b2 = sxx + syy + SSIM_C2;
                let s = a1 * a2 / (b1 * b2);
                sum += s;
                if want_grad {
                    d_mu[i] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                    d_xx[i] = -s / b2;
                    d_xy[i] = 2.0 * s / a2;
                }
            }
            let grad = want_grad.then(|| {
                let (h, w) = (x.h, x.w);
                let wrap = |v| Plane { h: mx.h, w: mx.w, v };
                let gm = wrap(d_mu).filter_adjoint(&g, h, w);
                let gxx = wrap(d_xx).filter_adjoint(&g, h, w);
                let gxy = wrap(d_xy).filter_adjoint(&g, h, w);
                Plane {
                    h,
                    w,
                    v: (0..h * w)
                        .map(|q| (gm.v[q] + 2.0 * x.v[q] * gxx.v[q] + y.v[q] * gxy.v[q]) / n as f64)
                        .collect(),
                }
            });
            out.push((sum / n as f64, grad));
        }
        out
    });
    let mut mean = 0.0;
    let mut grads = Vec::new();
    for (s, g) in results.into_iter().flatten() {
        mean += s;
        grads.extend(g);
    }
    let k = channels as f64;
    for p in &mut grads {
        p.v.iter_mut().for_each(|v| *v /= k);
    }
    Ok((mean / k, grads))
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5), averaged over
/// channels.
pub fn ssim_index<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    ssim_core(a, b, false).map(|(s, _)| s)
}

/// `1 − SSIM` and its gradient with respect to `out`.
pub fn ssim_loss<T: Real>(out: &Image<T>, target: &Image<T>) -> Result<(f64, Image<T>)> {
    let (s, planes) = ssim_core(out, target, true)?;
    let c = out.channels();
    let mut grad = vec![T::zero(); out.data().len()];
    for (ch, p) in planes.iter().enumerate() {
        for (i, &v) in p.v.iter().enumerate() {
            grad[i * c + ch] = T::of(-v);
        }
    }
    Ok((1.0 - s, Image::new(out.height(), out.width(), c, grad)?))
}

/// `w_mse·MSE + w_ssim·(1 − SSIM)`; a positive `w_per` needs
/// [`total_loss_with`].
pub fn total_loss<T: Real>(out: &Image<T>, target: &Image<T>, w: &LossWeights) -> Result<LossTerms<T>> {
    total_loss_with(out, target, w, None)
}

pub fn total_loss_with<T: Real>(
    out: &Image<T>,
    target: &Image<T>,
    w: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<LossTerms<T>> {
    if w.w_mse < 0.0 || w.w_ssim < 0.0 || w.w_per < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    check_pair(out, target)?;
    let mut grad = vec![0.0f64; out.data().len()];
    let mut add = |scale: f64, g: &[f64]| grad.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);

    let (mse, g) = mse_loss(out, target)?;
    add(w.w_mse, &g.data().iter().map(|v| v.f64()).collect::<Vec<_>>());

    let mut ssim = 0.0;
    if w.w_ssim > 0.0 {
        let (l, g) = ssim_loss(out, target)?;
        ssim = l;
        add(w.w_ssim, &g.data().iter().map(|v| v.f64()).collect::<Vec<_>>());
    }

    let mut per = 0.0;
    if w.w_per > 0.0 {
        let hook = perceptual
            .ok_or_else(|| Error::Config("perceptual weight is positive but no perceptual loss is registered".into()))?;
        let (l, g) = hook.loss(&out.cast(), &target.cast())?;
        if !g.same_shape(out) {
            return Err(Error::arg("perceptual gradient has the wrong shape"));
        }
        per = l;
        add(w.w_per, g.data());
    }

    Ok(LossTerms {
        mse,
        ssim,
        perceptual: per,
        total: w.w_mse * mse + w.w_ssim * ssim + w.w_per * per,
        grad: Image::new(out.height(), out.width(), out.channels(), grad.into_iter().map(T::of).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    /// Direct-formula SSIM: explicit 2D windows, two-pass variances.
    fn ssim_oracle(a: &Image<f64>, b: &Image<f64>) -> f64 {
        let k = 11;
        let mut w2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                w2[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += w2[i][j];
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..a.channels() {
            for y in 0..=a.height() - k {
                for x in 0..=a.width() - k {
                    let (mut ux, mut uy) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = w2[i][j] / s;
                            ux += wt * a.get(y + i, x + j, c);
                            uy += wt * b.get(y + i, x + j, c);
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = w2[i][j] / s;
                            let dx = a.get(y + i, x + j, c) - ux;
                            let dy = b.get(y + i, x + j, c) - uy;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cxy += wt * dx * dy;
                        }
                    }
                    total += (2.0 * ux * uy + 1e-4) * (2.0 * cxy + 9e-4)
                        / ((ux * ux + uy * uy + 1e-4) * (vx + vy + 9e-4));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn mse_examples() {
        let a = rand_image(5, 4, 3, 1);
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let b = Image::from_fn(5, 4, 3, |y, x, c| a.get(y, x, c) + 0.1);
        assert!((mse_loss(&b, &a).unwrap().0 - 0.01).abs() < 1e-12);
        let c = rand_image(5, 4, 3, 2);
        let oracle: f64 = a.data().iter().zip(c.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 60.0;
        assert!((mse_loss(&a, &c).unwrap().0 - oracle).abs() < 1e-12);
        assert!(mse_loss(&a, &rand_image(4, 5, 3, 0)).is_err());
    }

    #[test]
    fn ssim_matches_oracle() {
        let a = rand_image(17, 14, 3, 3);
        let b = Image::from_fn(17, 14, 3, |y, x, c| 0.7 * a.get(y, x, c) + 0.3 * ((y + x) % 5) as f64 / 5.0);
        let got = ssim_index(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-10);
        let r = rand_image(17, 14, 3, 4);
        assert!((ssim_index(&a, &r).unwrap() - ssim_oracle(&a, &r)).abs() < 1e-10);
    }

    #[test]
    fn ssim_identical_and_too_small() {
        let a = rand_image(12, 12, 3, 5);
        let (l, g) = ssim_loss(&a, &a).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        let small = rand_image(10, 20, 3, 6);
        assert!(ssim_index(&small, &small).is_err());
    }

    #[test]
    fn ssim_gradient_finite_differences() {
        let a = rand_image(13, 12, 2, 7);
        let b = rand_image(13, 12, 2, 8);
        let (_, g) = ssim_loss(&a, &b).unwrap();
        let h = 1e-6;
        for idx in (0..a.data().len()).step_by(7) {
            let mut p = a.clone();
            p.data_mut()[idx] += h;
            let mut m = a.clone();
            m.data_mut()[idx] -= h;
            let num = (ssim_loss(&p, &b).unwrap().0 - ssim_loss(&m, &b).unwrap().0) / (2.0 * h);
            assert!((g.data()[idx] - num).abs() < 1e-3 * num.abs().max(1e-3), "{idx}: {} vs {num}", g.data()[idx]);
        }
    }

    #[test]
    fn total_loss_weights() {
        let a = rand_image(12, 12, 3, 9);
        let b = rand_image(12, 12, 3, 10);
        let t = total_loss(&a, &b, &LossWeights::default()).unwrap();
        assert!((t.total - (t.mse + 0.5 * t.ssim)).abs() < 1e-12);
        assert_eq!(total_loss(&a, &a, &LossWeights::default()).unwrap().total, 0.0);
        let per = LossWeights {
            w_per: 0.005,
            ..LossWeights::default()
        };
        assert!(matches!(total_loss(&a, &b, &per), Err(Error::Config(_))));

        let h = 1e-6;
        for idx in [0, 50, 211, 400] {
            let mut p = a.clone();
            p.data_mut()[idx] += h;
            let mut m = a.clone();
            m.data_mut()[idx] -= h;
            let w = LossWeights::default();
            let num = (total_loss(&p, &b, &w).unwrap().total - total_loss(&m, &b, &w).unwrap().total) / (2.0 * h);
            assert!((t.grad.data()[idx] - num).abs() < 1e-3 * num.abs().max(1e-3));
        }
    }

    struct ConstHook;
    impl PerceptualLoss for ConstHook {
        fn loss(&self, out: &Image<f64>, _: &Image<f64>) -> Result<(f64, Image<f64>)> {
            Ok((2.0, Image::filled(out.height(), out.width(), out.channels(), 1.0)))
        }
    }

    #[test]
    fn perceptual_hook_is_weighted() {
        let a = rand_image(12, 12, 3, 11);
        let w = LossWeights {
            w_mse: 0.0,
            w_ssim: 0.0,
            w_per: 0.005,
        };
        let t = total_loss_with(&a, &a, &w, Some(&ConstHook)).unwrap();
        assert!((t.total - 0.01).abs() < 1e-15);
        assert!(t.grad.data().iter().all(|&g| (g - 0.005).abs() < 1e-15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn total_loss_non_negative(seed in any::<u64>()) {
            let a = rand_image(11, 13, 3, seed);
            let b = rand_image(11, 13, 3, seed ^ 0x5a5a);
            let t = total_loss(&a, &b, &LossWeights::default()).unwrap();
            prop_assert!(t.total >= 0.0);
        }
    }
}
