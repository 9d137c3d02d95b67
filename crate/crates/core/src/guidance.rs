//! Pointwise guidance networks: `C → hidden → K`, ReLU then sigmoid.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::optim::ParamSet;
use crate::par;
use crate::real::Real;

pub const DEFAULT_HIDDEN: usize = 16;

/// Two-layer per-pixel network emitting guidance values in `(0, 1)`.
///
/// Weights are row-major: `w1` is `hidden × in`, `w2` is `out × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceNet<T> {
    in_channels: usize,
    hidden: usize,
    out_channels: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

#[inline(always)]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp_fast())
}

/// Pixels per block in [`GuidanceNet::forward_row`].
const PIXEL_BLOCK: usize = 32;

/// Per-thread buffers for [`GuidanceNet::forward_row`].
#[derive(Clone, Debug)]
pub(crate) struct GuidanceScratch<T> {
    xs: Vec<[T; PIXEL_BLOCK]>,
    hid: Vec<[T; PIXEL_BLOCK]>,
}

impl<T: Real> GuidanceNet<T> {
    pub fn zeros(in_channels: usize, hidden: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            hidden,
            out_channels,
            w1: vec![T::zero(); hidden * in_channels],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); out_channels * hidden],
            b2: vec![T::zero(); out_channels],
        }
    }

    /// Default initialization: first layer has orthonormal columns (or rows,
    /// whichever is fewer) scaled by 0.1, second layer is zero, so every
    /// guidance value starts at 0.5.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, hidden: usize, out_channels: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(in_channels, hidden, out_channels);
        net.w1 = orthonormal(hidden, in_channels, rng)
            .into_iter()
            .map(|v| T::of(0.1 * v))
            .collect();
        net
    }

    /// Every parameter drawn from `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(in_channels, hidden, out_channels);
        net.for_each_param_mut(&mut |_, p| {
            for v in p {
                *v = T::of(scale * rng.sample::<f64, _>(StandardNormal));
            }
        });
        net
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn cast<U: Real>(&self) -> GuidanceNet<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::of(x.f64())).collect();
        GuidanceNet {
            in_channels: self.in_channels,
            hidden: self.hidden,
            out_channels: self.out_channels,
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
        }
    }

    /// Evaluates one pixel; `hidden` receives the post-ReLU activations.
    #[cfg(test)]
    pub(crate) fn eval_pixel(&self, x: &[T], hidden: &mut [T], out: &mut [T]) {
        let n_in = self.in_channels;
        for (j, h) in hidden.iter_mut().enumerate() {
            let w = &self.w1[j * n_in..(j + 1) * n_in];
            let mut a = self.b1[j];
            for i in 0..n_in {
                a += w[i] * x[i];
            }
            *h = a.max(T::zero());
        }
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            let mut a = self.b2[k];
            for j in 0..self.hidden {
                a += w[j] * hidden[j];
            }
            *o = sigmoid(a);
        }
    }

    pub(crate) fn scratch(&self) -> GuidanceScratch<T> {
        GuidanceScratch {
            xs: vec![[T::zero(); PIXEL_BLOCK]; self.in_channels],
            hid: vec![[T::zero(); PIXEL_BLOCK]; self.hidden],
        }
    }

    /// Evaluates a row of pixels in blocks, channel-major inside a block.
    /// Bit-identical to [`Self::eval_pixel`] on every pixel.
    pub(crate) fn forward_row(&self, src: &[T], out: &mut [T], s: &mut GuidanceScratch<T>) {
        let (c, nh, k) = (self.in_channels, self.hidden, self.out_channels);
        let w = if c == 0 { out.len() / k.max(1) } else { src.len() / c };
        let mut x0 = 0;
        while x0 < w {
            let n = (w - x0).min(PIXEL_BLOCK);
            let px = &src[x0 * c..(x0 + n) * c];
            for (i, xi) in s.xs.iter_mut().enumerate() {
                for p in 0..n {
                    xi[p] = px[p * c + i];
                }
            }
            for (j, h) in s.hid.iter_mut().enumerate() {
                *h = [self.b1[j]; PIXEL_BLOCK];
                for (i, xi) in s.xs.iter().enumerate() {
                    let wji = self.w1[j * c + i];
                    for p in 0..PIXEL_BLOCK {
                        h[p] += wji * xi[p];
                    }
                }
                for v in h.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
            let block = &mut out[x0 * k..(x0 + n) * k];
            for o in 0..k {
                let mut acc = [self.b2[o]; PIXEL_BLOCK];
                for (j, h) in s.hid.iter().enumerate() {
                    let woj = self.w2[o * nh + j];
                    for p in 0..PIXEL_BLOCK {
                        acc[p] += woj * h[p];
                    }
                }
                for v in acc.iter_mut() {
                    *v = sigmoid(*v);
                }
                for p in 0..n {
                    block[p * k + o] = acc[p];
                }
            }
            x0 += n;
        }
    }

    fn check_input(&self, input: &Image<T>) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::arg(format!(
                "guidance net expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        Ok(())
    }

    /// Guidance map `H × W × out_channels`.
    pub fn forward(&self, input: &Image<T>) -> Result<Image<T>> {
        self.check_input(input)?;
        let (w, k) = (input.width(), self.out_channels);
        let mut out = Image::zeros(input.height(), w, k);
        par::for_each_row_init(
            out.data_mut(),
            w * k,
            || self.scratch(),
            |s, y, row| self.forward_row(input.row(y), row, s),
        );
        Ok(out)
    }

    /// Parameter gradients (as a net of the same shape) and the gradient
    /// with respect to the input map.
    pub fn backward(&self, input: &Image<T>, upstream: &Image<T>) -> Result<(GuidanceNet<T>, Image<T>)> {
        self.check_input(input)?;
        if upstream.height() != input.height()
            || upstream.width() != input.width()
            || upstream.channels() != self.out_channels
        {
            return Err(Error::arg(format!(
                "guidance upstream is {}x{}x{}, expected {}x{}x{}",
                upstream.height(),
                upstream.width(),
                upstream.channels(),
                input.height(),
                input.width(),
                self.out_channels
            )));
        }
        let (h, w) = (input.height(), input.width());
        let (n_in, n_hid, n_out) = (self.in_channels, self.hidden, self.out_channels);
        let sizes = [self.w1.len(), self.b1.len(), self.w2.len(), self.b2.len()];

        let partials = par::map_ranges(h, par::MAX_REDUCE_CHUNKS, |rows| {
            let mut acc: [Vec<f64>; 4] = sizes.map(|n| vec![0.0; n]);
            let mut gin = vec![T::zero(); rows.len() * w * n_in];
            let mut pre = vec![T::zero(); n_hid];
            let mut hid = vec![T::zero(); n_hid];
            let mut dpre = vec![T::zero(); n_hid];
            let mut da = vec![T::zero(); n_out];
            for y in rows.clone() {
                let src = input.row(y);
                let up = upstream.row(y);
                for x in 0..w {
                    let xi = &src[x * n_in..(x + 1) * n_in];
                    for j in 0..n_hid {
                        let mut a = self.b1[j];
                        for i in 0..n_in {
                            a += self.w1[j * n_in + i] * xi[i];
                        }
                        pre[j] = a;
                        hid[j] = a.max(T::zero());
                    }
                    for k in 0..n_out {
                        let mut a = self.b2[k];
                        for j in 0..n_hid {
                            a += self.w2[k * n_hid + j] * hid[j];
                        }
                        let g = sigmoid(a);
                        da[k] = up[x * n_out + k] * g * (T::one() - g);
                    }
                    dpre.iter_mut().for_each(|v| *v = T::zero());
                    for k in 0..n_out {
                        let d = da[k];
                        acc[3][k] += d.f64();
                        for j in 0..n_hid {
                            acc[2][k * n_hid + j] += (d * hid[j]).f64();
                            dpre[j] += self.w2[k * n_hid + j] * d;
                        }
                    }
                    let gi = &mut gin[((y - rows.start) * w + x) * n_in..][..n_in];
                    for j in 0..n_hid {
                        if pre[j] <= T::zero() {
                            continue;
                        }
                        let d = dpre[j];
                        acc[1][j] += d.f64();
                        for i in 0..n_in {
                            acc[0][j * n_in + i] += (d * xi[i]).f64();
                            gi[i] += self.w1[j * n_in + i] * d;
                        }
                    }
                }
            }
            (acc, gin)
        });

        let mut total: [Vec<f64>; 4] = sizes.map(|n| vec![0.0; n]);
        let mut gin = Vec::with_capacity(h * w * n_in);
        for (acc, rows) in partials {
            for (t, a) in total.iter_mut().zip(acc) {
                t.iter_mut().zip(a).for_each(|(t, a)| *t += a);
            }
            gin.extend(rows);
        }
        let [w1, b1, w2, b2] = total.map(|v| v.into_iter().map(T::of).collect::<Vec<T>>());
        let grads = GuidanceNet {
            in_channels: n_in,
            hidden: n_hid,
            out_channels: n_out,
            w1,
            b1,
            w2,
            b2,
        };
        Ok((grads, Image::new(h, w, n_in, gin)?))
    }

    /// Stores the parameters as `{prefix}.w1`, `.b1`, `.w2`, `.b2`.
    pub fn write_tensors(&self, file: &mut TensorFile, prefix: &str) {
        file.insert(format!("{prefix}.w1"), &[self.hidden, self.in_channels], &self.w1);
        file.insert(format!("{prefix}.b1"), &[self.hidden], &self.b1);
        file.insert(format!("{prefix}.w2"), &[self.out_channels, self.hidden], &self.w2);
        file.insert(format!("{prefix}.b2"), &[self.out_channels], &self.b2);
    }

    /// Reads a net written by [`Self::write_tensors`]; the shape comes from
    /// the stored `w1` and `w2`.
    pub fn read_tensors(file: &TensorFile, prefix: &str) -> Result<Self> {
        let w1 = file
            .get(&format!("{prefix}.w1"))
            .ok_or_else(|| Error::Container(format!("missing tensor {prefix}.w1")))?;
        let w2 = file
            .get(&format!("{prefix}.w2"))
            .ok_or_else(|| Error::Container(format!("missing tensor {prefix}.w2")))?;
        if w1.dims.len() != 2 || w2.dims.len() != 2 || w1.dims[0] != w2.dims[1] {
            return Err(Error::Container(format!("{prefix}: inconsistent layer shapes")));
        }
        let (hidden, n_in, n_out) = (w1.dims[0], w1.dims[1], w2.dims[0]);
        Ok(Self {
            in_channels: n_in,
            hidden,
            out_channels: n_out,
            w1: file.require(&format!("{prefix}.w1"), &[hidden, n_in])?,
            b1: file.require(&format!("{prefix}.b1"), &[hidden])?,
            w2: file.require(&format!("{prefix}.w2"), &[n_out, hidden])?,
            b2: file.require(&format!("{prefix}.b2"), &[n_out])?,
        })
    }
}

impl<T: Real> ParamSet<T> for GuidanceNet<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &[T])) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

/// `rows × cols` row-major matrix whose shorter side is orthonormal.
fn orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    // Gram-Schmidt over the vectors along the shorter side
    let (n_vec, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while vecs.len() < n_vec {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            vecs.push(v);
        }
    }
    let mut m = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            m[r * cols + c] = if rows >= cols { vecs[c][r] } else { vecs[r][c] };
        }
    }
    m
}
