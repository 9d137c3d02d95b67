//! Grid sources: identity grids and a small convolutional grid producer.
//!
//! The producer runs a stack of 3×3 convolutions (zero padding, ReLU) on a
//! downsampled image, zero-pads the features to a multiple of 4, applies a
//! factor-4 pixel unshuffle and maps the result through one 1×1 head per grid.
//! Head `k` emits `depth·P_k` channels that are unrolled into a grid.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::grid::{roll_grid, unroll_grid, BilateralGrid, GridGeometry};
use crate::guidance::{GuidanceNet, DEFAULT_HIDDEN};
use crate::imaging::{pixel_shuffle, pixel_unshuffle, Image};
use crate::layout::{self, COLORS, HIDDEN};
use crate::optim::ParamSet;
use crate::par;
use crate::real::Real;
use crate::transform::{GridModel, PipelineConfig, TransformMode};

pub const UNSHUFFLE: usize = 4;
pub const DEFAULT_WIDTH: usize = 16;

/// Identity-encoding MLP grids: `W1 = [I₃; 0]`, `W2 = [I₃ | 0]`, zero biases.
pub fn init_identity_grids<T: Real>(geom: GridGeometry) -> (BilateralGrid<T>, BilateralGrid<T>) {
    (
        BilateralGrid::uniform(geom, &layout::identity_stage1::<T>()),
        BilateralGrid::uniform(geom, &layout::identity_stage2::<T>()),
    )
}

pub fn identity_affine_grid<T: Real>(geom: GridGeometry) -> BilateralGrid<T> {
    BilateralGrid::uniform(geom, &layout::identity_affine::<T>())
}

/// Identity grids plus freshly initialized guidance nets for `cfg`.
pub fn identity_model<T: Real, R: Rng + ?Sized>(cfg: &PipelineConfig, geom: GridGeometry, rng: &mut R) -> GridModel<T> {
    let (k1, k2) = cfg.guidance_channels();
    match cfg.mode {
        TransformMode::Affine => GridModel {
            grid1: identity_affine_grid(geom),
            grid2: None,
            gnet1: GuidanceNet::init(COLORS, DEFAULT_HIDDEN, k1, rng),
            gnet2: None,
        },
        TransformMode::Mlp => {
            let (g1, g2) = init_identity_grids(geom);
            GridModel {
                grid1: g1,
                grid2: Some(g2),
                gnet1: GuidanceNet::init(COLORS, DEFAULT_HIDDEN, k1, rng),
                gnet2: Some(GuidanceNet::init(HIDDEN, DEFAULT_HIDDEN, k2.unwrap_or(1), rng)),
            }
        }
    }
}

/// Shape of a [`ProducerNet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProducerConfig {
    /// One entry per 3×3 conv layer, each 1 or 2.
    pub strides: Vec<usize>,
    pub width: usize,
    pub depth: usize,
    /// Parameters per cell of each produced grid.
    pub head_params: Vec<usize>,
}

impl ProducerConfig {
    /// Two conv layers whose stride product makes
    /// `downsample · strides · 4 = grid_ratio`.
    pub fn for_pipeline(cfg: &PipelineConfig) -> Result<Self> {
        let base = cfg.downsample * UNSHUFFLE;
        if cfg.downsample == 0 || !cfg.grid_ratio.is_multiple_of(base) {
            return Err(Error::Config(format!(
                "grid ratio {} is not a multiple of downsample {} x unshuffle {UNSHUFFLE}",
                cfg.grid_ratio, cfg.downsample
            )));
        }
        let strides = match cfg.grid_ratio / base {
            1 => vec![1, 1],
            2 => vec![1, 2],
            4 => vec![2, 2],
            s => {
                return Err(Error::Config(format!(
                    "producer conv strides must multiply to 1, 2 or 4, need {s}"
                )))
            }
        };
        let head_params = match cfg.mode {
            TransformMode::Affine => vec![layout::AFFINE_PARAMS],
            TransformMode::Mlp => vec![layout::STAGE1_PARAMS, layout::STAGE2_PARAMS],
        };
        Ok(Self {
            strides,
            width: DEFAULT_WIDTH,
            depth: cfg.depth,
            head_params,
        })
    }

    /// Total spatial reduction from producer input to grid.
    pub fn reduction(&self) -> usize {
        self.strides.iter().product::<usize>() * UNSHUFFLE
    }

    /// Grid dims produced from a `h`×`w` input.
    pub fn grid_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let r = self.reduction();
        (h.div_ceil(r), w.div_ceil(r))
    }

    fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::Config(format!("invalid conv strides {:?}", self.strides)));
        }
        if self.width == 0 || self.depth == 0 || self.head_params.is_empty() || self.head_params.contains(&0) {
            return Err(Error::Config("producer width, depth and head sizes must be positive".into()));
        }
        Ok(())
    }
}

/// 3×3 convolution, zero padding 1, weights `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3x3<T> {
    fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![T::zero(); out_channels * in_channels * 9],
            bias: vec![T::zero(); out_channels],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// `relu(conv(input))`.
    fn forward(&self, input: &Image<T>) -> Image<T> {
        let mut out = self.linear(input);
        for v in out.data_mut() {
            *v = v.max(T::zero());
        }
        out
    }

    fn linear(&self, input: &Image<T>) -> Image<T> {
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = self.out_dims(h, w);
        let (ci, co, s) = (self.in_channels, self.out_channels, self.stride);
        let mut out = Image::zeros(oh, ow, co);
        par::for_each_row(out.data_mut(), ow * co, |y, row| {
            for x in 0..ow {
                let o_px = &mut row[x * co..(x + 1) * co];
                o_px.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let Some(yy) = (y * s + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(xx) = (x * s + kx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        let src = input.pixel(yy, xx);
                        for (o, acc) in o_px.iter_mut().enumerate() {
                            for (i, &v) in src.iter().enumerate().take(ci) {
                                *acc += self.w(o, i, ky, kx) * v;
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Gradients given the layer input, its output and `dL/doutput`.
    fn backward(&self, input: &Image<T>, output: &Image<T>, upstream: &Image<T>, need_input: bool) -> (Self, Option<Image<T>>) {
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = (output.height(), output.width());
        let (ci, co, s) = (self.in_channels, self.out_channels, self.stride);

        let mut dpre = upstream.clone();
        for (d, &o) in dpre.data_mut().iter_mut().zip(output.data()) {
            if o <= T::zero() {
                *d = T::zero();
            }
        }

        let partial = par::map_ranges(oh, par::MAX_REDUCE_CHUNKS, |rows| {
            let mut dw = vec![0.0f64; self.weight.len()];
            let mut db = vec![0.0f64; co];
            for y in rows {
                for x in 0..ow {
                    let d = dpre.pixel(y, x);
                    for o in 0..co {
                        db[o] += d[o].f64();
                    }
                    for ky in 0..3 {
                        let Some(yy) = (y * s + ky).checked_sub(1).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(xx) = (x * s + kx).checked_sub(1).filter(|&v| v < w) else {
                                continue;
                            };
                            let src = input.pixel(yy, xx);
                            for o in 0..co {
                                let dv = d[o].f64();
                                for i in 0..ci {
                                    dw[((o * ci + i) * 3 + ky) * 3 + kx] += dv * src[i].f64();
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        });
        let mut dw = vec![0.0f64; self.weight.len()];
        let mut db = vec![0.0f64; co];
        for (pw, pb) in partial {
            dw.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
        }
        let grads = Self {
            in_channels: ci,
            out_channels: co,
            stride: s,
            weight: dw.into_iter().map(T::of).collect(),
            bias: db.into_iter().map(T::of).collect(),
        };

        let din = need_input.then(|| {
            let mut din = Image::zeros(h, w, ci);
            par::for_each_row(din.data_mut(), w * ci, |yy, row| {
                for ky in 0..3 {
                    let t = yy + 1;
                    if t < ky || (t - ky) % s != 0 || (t - ky) / s >= oh {
                        continue;
                    }
                    let y = (t - ky) / s;
                    for xx in 0..w {
                        let acc = &mut row[xx * ci..(xx + 1) * ci];
                        for kx in 0..3 {
                            let u = xx + 1;
                            if u < kx || (u - kx) % s != 0 || (u - kx) / s >= ow {
                                continue;
                            }
                            let d = dpre.pixel(y, (u - kx) / s);
                            for o in 0..co {
                                for (i, a) in acc.iter_mut().enumerate() {
                                    *a += self.w(o, i, ky, kx) * d[o];
                                }
                            }
                        }
                    }
                }
            });
            din
        });
        (grads, din)
    }
}

/// Pointwise layer, weights `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Head<T> {
    fn forward(&self, input: &Image<T>) -> Image<T> {
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut out = Image::zeros(input.height(), input.width(), co);
        par::for_each_row(out.data_mut(), input.width() * co, |y, row| {
            let src = input.row(y);
            for (px, o_px) in src.chunks_exact(ci).zip(row.chunks_exact_mut(co)) {
                for (o, acc) in o_px.iter_mut().enumerate() {
                    let wrow = &self.weight[o * ci..(o + 1) * ci];
                    *acc = self.bias[o] + wrow.iter().zip(px).fold(T::zero(), |a, (&w, &v)| a + w * v);
                }
            }
        });
        out
    }

    /// Returns parameter gradients and adds `dL/dinput` into `din`.
    fn backward(&self, input: &Image<T>, upstream: &Image<T>, din: &mut Image<T>) -> Self {
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut dw = vec![0.0f64; co * ci];
        let mut db = vec![0.0f64; co];
        for (px, d) in input.data().chunks_exact(ci).zip(upstream.data().chunks_exact(co)) {
            for o in 0..co {
                let dv = d[o].f64();
                db[o] += dv;
                for i in 0..ci {
                    dw[o * ci + i] += dv * px[i].f64();
                }
            }
        }
        for (g, d) in din.data_mut().chunks_exact_mut(ci).zip(upstream.data().chunks_exact(co)) {
            for o in 0..co {
                let wrow = &self.weight[o * ci..(o + 1) * ci];
                for (a, &w) in g.iter_mut().zip(wrow) {
                    *a += w * d[o];
                }
            }
        }
        Self {
            in_channels: ci,
            out_channels: co,
            weight: dw.into_iter().map(T::of).collect(),
            bias: db.into_iter().map(T::of).collect(),
        }
    }
}

/// Convolutional grid producer; gradients are returned in the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ProducerNet<T> {
    config: ProducerConfig,
    pub convs: Vec<Conv3x3<T>>,
    pub heads: Vec<Head<T>>,
}

struct Activations<T> {
    /// Input followed by every conv output.
    convs: Vec<Image<T>>,
    /// Padded and unshuffled features fed to the heads.
    unshuffled: Image<T>,
}

impl<T: Real> ProducerNet<T> {
    pub fn zeros(config: ProducerConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut ch = COLORS;
        for &s in &config.strides {
            convs.push(Conv3x3::zeros(ch, config.width, s));
            ch = config.width;
        }
        let feat = config.width * UNSHUFFLE * UNSHUFFLE;
        let heads = config
            .head_params
            .iter()
            .map(|&p| Head {
                in_channels: feat,
                out_channels: config.depth * p,
                weight: vec![T::zero(); config.depth * p * feat],
                bias: vec![T::zero(); config.depth * p],
            })
            .collect();
        Ok(Self { config, convs, heads })
    }

    /// He-normal conv weights, zero head weights and head biases holding the
    /// identity encoding, so the produced grids start as identity grids.
    pub fn init<R: Rng + ?Sized>(config: ProducerConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for conv in &mut net.convs {
            let std = (2.0 / (9 * conv.in_channels) as f64).sqrt();
            for v in &mut conv.weight {
                *v = T::of(std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let depth = net.config.depth;
        for head in &mut net.heads {
            let p = head.out_channels / depth;
            let cell: Vec<T> = match p {
                layout::STAGE1_PARAMS => layout::identity_stage1(),
                layout::STAGE2_PARAMS => layout::identity_stage2(),
                layout::AFFINE_PARAMS => layout::identity_affine(),
                _ => vec![T::zero(); p],
            };
            for (pi, &v) in cell.iter().enumerate() {
                for z in 0..depth {
                    head.bias[depth * pi + z] = v;
                }
            }
        }
        Ok(net)
    }

    /// Every parameter drawn from `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(config: ProducerConfig, scale: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        net.for_each_param_mut(&mut |_, p| {
            for v in p {
                *v = T::of(scale * rng.sample::<f64, _>(StandardNormal));
            }
        });
        Ok(net)
    }

    pub fn config(&self) -> &ProducerConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> ProducerNet<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        ProducerNet {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| Conv3x3 {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    stride: c.stride,
                    weight: cv(&c.weight),
                    bias: cv(&c.bias),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    in_channels: h.in_channels,
                    out_channels: h.out_channels,
                    weight: cv(&h.weight),
                    bias: cv(&h.bias),
                })
                .collect(),
        }
    }

    fn check(&self, lowres: &Image<T>, geom: &GridGeometry) -> Result<()> {
        if lowres.channels() != COLORS {
            return Err(Error::arg(format!("producer input needs 3 channels, got {}", lowres.channels())));
        }
        if geom.depth != self.config.depth {
            return Err(Error::arg(format!(
                "producer depth {} does not match grid depth {}",
                self.config.depth, geom.depth
            )));
        }
        let got = self.config.grid_dims(lowres.height(), lowres.width());
        if got != (geom.grid_h, geom.grid_w) {
            return Err(Error::arg(format!(
                "producer input {}x{} yields {}x{} grids (reduction {}), geometry expects {}x{}",
                lowres.height(),
                lowres.width(),
                got.0,
                got.1,
                self.config.reduction(),
                geom.grid_h,
                geom.grid_w
            )));
        }
        Ok(())
    }

    fn activations(&self, lowres: &Image<T>) -> Result<Activations<T>> {
        let mut convs = vec![lowres.clone()];
        for conv in &self.convs {
            let next = conv.forward(convs.last().expect("non-empty"));
            convs.push(next);
        }
        let feat = convs.last().expect("non-empty");
        let padded = pad_to_multiple(feat, UNSHUFFLE);
        let unshuffled = pixel_unshuffle(&padded, UNSHUFFLE)?;
        Ok(Activations { convs, unshuffled })
    }

    /// Pre-ReLU output of every conv layer.
    pub fn conv_preactivations(&self, lowres: &Image<T>) -> Vec<Image<T>> {
        let mut input = lowres.clone();
        let mut pre = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let p = conv.linear(&input);
            input = conv.forward(&input);
            pre.push(p);
        }
        pre
    }

    /// Grids in head order (stage 1 then stage 2, or the single affine grid).
    pub fn produce(&self, lowres: &Image<T>, geom: &GridGeometry) -> Result<Vec<BilateralGrid<T>>> {
        self.check(lowres, geom)?;
        let act = self.activations(lowres)?;
        self.heads
            .iter()
            .zip(&self.config.head_params)
            .map(|(head, &p)| unroll_grid(&head.forward(&act.unshuffled), geom.depth, p, *geom))
            .collect()
    }

    /// Parameter gradients given `dL/dgrid` for every produced grid.
    pub fn backward(&self, lowres: &Image<T>, geom: &GridGeometry, upstream: &[&BilateralGrid<T>]) -> Result<Self> {
        self.check(lowres, geom)?;
        if upstream.len() != self.heads.len() {
            return Err(Error::arg(format!(
                "producer has {} heads, got {} grid gradients",
                self.heads.len(),
                upstream.len()
            )));
        }
        let act = self.activations(lowres)?;
        let mut dun = Image::zeros(act.unshuffled.height(), act.unshuffled.width(), act.unshuffled.channels());
        let mut heads = Vec::with_capacity(self.heads.len());
        for ((head, g), &p) in self.heads.iter().zip(upstream).zip(&self.config.head_params) {
            let gg = g.geometry();
            if g.params() != p || (gg.grid_h, gg.grid_w, gg.depth) != (geom.grid_h, geom.grid_w, geom.depth) {
                return Err(Error::arg("grid gradient shape does not match the producer head"));
            }
            heads.push(head.backward(&act.unshuffled, &roll_grid(g), &mut dun));
        }
        let feat = act.convs.last().expect("non-empty");
        let mut dfeat = crop(&pixel_shuffle(&dun, UNSHUFFLE)?, feat.height(), feat.width());

        let mut convs = vec![None; self.convs.len()];
        for (l, conv) in self.convs.iter().enumerate().rev() {
            let (g, din) = conv.backward(&act.convs[l], &act.convs[l + 1], &dfeat, l > 0);
            convs[l] = Some(g);
            if let Some(d) = din {
                dfeat = d;
            }
        }
        Ok(Self {
            config: self.config.clone(),
            convs: convs.into_iter().map(|c| c.expect("every layer visited")).collect(),
            heads,
        })
    }

    /// Stores parameters as `{prefix}.convN.weight/bias` and
    /// `{prefix}.headN.weight/bias`, numbered from 1.
    pub fn write_tensors(&self, file: &mut TensorFile, prefix: &str) {
        for (n, c) in self.convs.iter().enumerate() {
            file.insert(
                format!("{prefix}.conv{}.weight", n + 1),
                &[c.out_channels, c.in_channels, 3, 3],
                &c.weight,
            );
            file.insert(format!("{prefix}.conv{}.bias", n + 1), &[c.out_channels], &c.bias);
        }
        for (n, h) in self.heads.iter().enumerate() {
            file.insert(format!("{prefix}.head{}.weight", n + 1), &[h.out_channels, h.in_channels], &h.weight);
            file.insert(format!("{prefix}.head{}.bias", n + 1), &[h.out_channels], &h.bias);
        }
    }

    /// Reads a producer of the given shape.
    pub fn read_tensors(file: &TensorFile, prefix: &str, config: ProducerConfig) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for (n, c) in net.convs.iter_mut().enumerate() {
            c.weight = file.require(
                &format!("{prefix}.conv{}.weight", n + 1),
                &[c.out_channels, c.in_channels, 3, 3],
            )?;
            c.bias = file.require(&format!("{prefix}.conv{}.bias", n + 1), &[c.out_channels])?;
        }
        for (n, h) in net.heads.iter_mut().enumerate() {
            h.weight = file.require(&format!("{prefix}.head{}.weight", n + 1), &[h.out_channels, h.in_channels])?;
            h.bias = file.require(&format!("{prefix}.head{}.bias", n + 1), &[h.out_channels])?;
        }
        Ok(net)
    }
}

impl<T: Real> ParamSet<T> for ProducerNet<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &[T])) {
        for (n, c) in self.convs.iter().enumerate() {
            f(&format!("conv{}.weight", n + 1), &c.weight);
            f(&format!("conv{}.bias", n + 1), &c.bias);
        }
        for (n, h) in self.heads.iter().enumerate() {
            f(&format!("head{}.weight", n + 1), &h.weight);
            f(&format!("head{}.bias", n + 1), &h.bias);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (n, c) in self.convs.iter_mut().enumerate() {
            f(&format!("conv{}.weight", n + 1), &mut c.weight);
            f(&format!("conv{}.bias", n + 1), &mut c.bias);
        }
        for (n, h) in self.heads.iter_mut().enumerate() {
            f(&format!("head{}.weight", n + 1), &mut h.weight);
            f(&format!("head{}.bias", n + 1), &mut h.bias);
        }
    }
}

/// Free function form of [`ProducerNet::produce`].
pub fn produce_grids<T: Real>(net: &ProducerNet<T>, lowres: &Image<T>, geom: &GridGeometry) -> Result<Vec<BilateralGrid<T>>> {
    net.produce(lowres, geom)
}

pub fn producer_backward<T: Real>(
    net: &ProducerNet<T>,
    lowres: &Image<T>,
    geom: &GridGeometry,
    upstream: &[&BilateralGrid<T>],
) -> Result<ProducerNet<T>> {
    net.backward(lowres, geom, upstream)
}

fn pad_to_multiple<T: Real>(img: &Image<T>, f: usize) -> Image<T> {
    let (h, w) = (img.height().div_ceil(f) * f, img.width().div_ceil(f) * f);
    if (h, w) == (img.height(), img.width()) {
        return img.clone();
    }
    let c = img.channels();
    let mut out = Image::zeros(h, w, c);
    for y in 0..img.height() {
        out.data_mut()[y * w * c..y * w * c + img.row_len()].copy_from_slice(img.row(y));
    }
    out
}

fn crop<T: Real>(img: &Image<T>, h: usize, w: usize) -> Image<T> {
    if (h, w) == (img.height(), img.width()) {
        return img.clone();
    }
    let c = img.channels();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        data.extend_from_slice(&img.row(y)[..w * c]);
    }
    Image::new(h, w, c, data).expect("crop of a valid image")
}
