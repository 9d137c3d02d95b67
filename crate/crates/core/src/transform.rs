//! Per-pixel color transforms and the two-stage enhancement pipeline.
//!
//! MLP mode, per pixel:
//!
//! 1. guidance set 1 from the input color
//! 2. slice grid 1 → `W1, b1`; `z = relu(W1·I + b1)`
//! 3. guidance set 2 from `z`
//! 4. slice grid 2 → `W2, b2`; `O = W2·z + b2`, clamped to `[0, 1]`
//!
//! Affine mode slices a single 12-parameter grid and applies `O = α·I + β`.
//! With `decomposed` on, each grid is split into subgrids and every subgrid
//! reads its own guidance channel.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use crate::container::TensorFile;

use crate::error::{Error, Result};
use crate::grid::{
    decompose, load_grids, save_grids, slice_band, slice_band_backward, BilateralGrid, DecompositionKind, GridGeometry,
    RowSlicer, SliceScratch, SliceSource, SubgridSet,
};
use crate::guidance::{GuidanceNet, GuidanceScratch};
use crate::imaging::Image;
use crate::layout::{self, COLORS, HIDDEN};
use crate::optim::{visit_prefixed, visit_prefixed_mut, ParamSet};
use crate::par;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    Affine,
    Mlp,
}

/// Pipeline switches; the four mode/decomposition combinations are the
/// ablation settings 1–4.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineConfig {
    pub mode: TransformMode,
    pub decomposed: bool,
    /// Image-to-grid spatial ratio (4, 8 or 32 in the reference setups).
    pub grid_ratio: usize,
    pub depth: usize,
    /// Downsampling applied before the grid producer.
    pub downsample: usize,
    pub align_centers: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: TransformMode::Mlp,
            decomposed: true,
            grid_ratio: 8,
            depth: 8,
            downsample: 2,
            align_centers: true,
        }
    }
}

impl PipelineConfig {
    /// Ablation setting 1 (affine), 2 (MLP), 3 (affine + decomposition) or
    /// 4 (MLP + decomposition).
    pub fn ablation(setting: u8) -> Result<Self> {
        let (mode, decomposed) = match setting {
            1 => (TransformMode::Affine, false),
            2 => (TransformMode::Mlp, false),
            3 => (TransformMode::Affine, true),
            4 => (TransformMode::Mlp, true),
            s => return Err(Error::arg(format!("ablation setting must be 1-4, got {s}"))),
        };
        Ok(Self {
            mode,
            decomposed,
            ..Self::default()
        })
    }

    /// Producer-input downsampling paired with a grid ratio: 1 for 1/4,
    /// 2 for 1/8 and 8 for 1/32, so the producer sees a quarter-ratio input.
    pub fn default_downsample(grid_ratio: usize) -> usize {
        match grid_ratio {
            8 => 2,
            32 => 8,
            r => (r / 4).max(1),
        }
    }

    pub fn stage1_kind(&self) -> DecompositionKind {
        match self.mode {
            TransformMode::Affine => DecompositionKind::Affine,
            TransformMode::Mlp => DecompositionKind::Stage1,
        }
    }

    /// Guidance channels of stage 1 and (MLP only) stage 2.
    pub fn guidance_channels(&self) -> (usize, Option<usize>) {
        let k1 = if self.decomposed {
            self.stage1_kind().subgrid_count()
        } else {
            1
        };
        match self.mode {
            TransformMode::Affine => (k1, None),
            TransformMode::Mlp => (
                k1,
                Some(if self.decomposed {
                    DecompositionKind::Stage2.subgrid_count()
                } else {
                    1
                }),
            ),
        }
    }

    pub fn geometry_for(&self, image_h: usize, image_w: usize) -> Result<GridGeometry> {
        GridGeometry::for_image(image_h, image_w, self.grid_ratio, self.depth, self.align_centers)
    }
}

/// `α` (3×3) and `β` of the affine baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub alpha: [[T; COLORS]; COLORS],
    pub beta: [T; COLORS],
}

impl<T: Real> AffineParams<T> {
    pub fn from_slots(p: &[T]) -> Self {
        let mut alpha = [[T::zero(); COLORS]; COLORS];
        let mut beta = [T::zero(); COLORS];
        for r in 0..COLORS {
            for c in 0..COLORS {
                alpha[r][c] = p[layout::alpha(r, c)];
            }
            beta[r] = p[layout::beta(r)];
        }
        Self { alpha, beta }
    }
}

/// Per-pixel 3-8-3 MLP weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMlpParams<T> {
    pub w1: [[T; COLORS]; HIDDEN],
    pub b1: [T; HIDDEN],
    pub w2: [[T; HIDDEN]; COLORS],
    pub b2: [T; COLORS],
}

impl<T: Real> PixelMlpParams<T> {
    /// Reads a stage-1 and a stage-2 slot vector.
    pub fn from_slots(stage1: &[T], stage2: &[T]) -> Self {
        let mut w1 = [[T::zero(); COLORS]; HIDDEN];
        let mut b1 = [T::zero(); HIDDEN];
        let mut w2 = [[T::zero(); HIDDEN]; COLORS];
        let mut b2 = [T::zero(); COLORS];
        for h in 0..HIDDEN {
            for c in 0..COLORS {
                w1[h][c] = stage1[layout::w1(h, c)];
            }
            b1[h] = stage1[layout::b1(h)];
        }
        for o in 0..COLORS {
            for h in 0..HIDDEN {
                w2[o][h] = stage2[layout::w2(o, h)];
            }
            b2[o] = stage2[layout::b2(o)];
        }
        Self { w1, b1, w2, b2 }
    }

    pub fn apply(&self, pixel: &[T; COLORS]) -> [T; COLORS] {
        mlp_stage2(&self.w2, &self.b2, &mlp_stage1(&self.w1, &self.b1, pixel))
    }
}

pub fn apply_affine<T: Real>(p: &AffineParams<T>, pixel: &[T; COLORS]) -> [T; COLORS] {
    let mut out = p.beta;
    for r in 0..COLORS {
        for c in 0..COLORS {
            out[r] += p.alpha[r][c] * pixel[c];
        }
    }
    out
}

/// `z = max(0, W1·I + b1)`.
pub fn mlp_stage1<T: Real>(w1: &[[T; COLORS]; HIDDEN], b1: &[T; HIDDEN], pixel: &[T; COLORS]) -> [T; HIDDEN] {
    let mut z = *b1;
    for h in 0..HIDDEN {
        for c in 0..COLORS {
            z[h] += w1[h][c] * pixel[c];
        }
        z[h] = z[h].max(T::zero());
    }
    z
}

/// `O = W2·z + b2`, no activation.
pub fn mlp_stage2<T: Real>(w2: &[[T; HIDDEN]; COLORS], b2: &[T; COLORS], hidden: &[T; HIDDEN]) -> [T; COLORS] {
    let mut out = *b2;
    for o in 0..COLORS {
        for h in 0..HIDDEN {
            out[o] += w2[o][h] * hidden[h];
        }
    }
    out
}

// Slot-layout kernels used by the pipeline.

#[inline(always)]
fn stage1_slots<T: Real>(p: &[T], px: &[T], z: &mut [T]) {
    for h in 0..HIDDEN {
        let w = &p[layout::w1(h, 0)..layout::w1(h, 0) + COLORS];
        let a = p[layout::b1(h)] + w[0] * px[0] + w[1] * px[1] + w[2] * px[2];
        z[h] = a.max(T::zero());
    }
}

#[inline(always)]
fn stage2_slots<T: Real>(p: &[T], z: &[T], out: &mut [T]) {
    for o in 0..COLORS {
        let w = &p[layout::w2(o, 0)..layout::w2(o, 0) + HIDDEN];
        let mut a = p[layout::b2(o)];
        for h in 0..HIDDEN {
            a += w[h] * z[h];
        }
        out[o] = a;
    }
}

#[inline(always)]
fn affine_slots<T: Real>(p: &[T], px: &[T], out: &mut [T]) {
    for r in 0..COLORS {
        let w = &p[layout::alpha(r, 0)..layout::alpha(r, 0) + COLORS];
        out[r] = p[layout::beta(r)] + w[0] * px[0] + w[1] * px[1] + w[2] * px[2];
    }
}

fn affine_row<T: Real>(p: &[T], src: &[T], out: &mut [T]) {
    for (x, o) in out.chunks_exact_mut(COLORS).enumerate() {
        affine_slots(&p[x * layout::AFFINE_PARAMS..], &src[x * COLORS..], o);
        for v in o.iter_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
    }
}

fn mlp1_row<T: Real>(p: &[T], src: &[T], z: &mut [T]) {
    for (x, zp) in z.chunks_exact_mut(HIDDEN).enumerate() {
        stage1_slots(&p[x * layout::STAGE1_PARAMS..], &src[x * COLORS..], zp);
    }
}

fn mlp2_row<T: Real>(p: &[T], z: &[T], out: &mut [T]) {
    for (x, o) in out.chunks_exact_mut(COLORS).enumerate() {
        stage2_slots(&p[x * layout::STAGE2_PARAMS..], &z[x * HIDDEN..], o);
        for v in o.iter_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
    }
}

/// Grids and guidance nets of one model; also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct GridModel<T> {
    pub grid1: BilateralGrid<T>,
    pub grid2: Option<BilateralGrid<T>>,
    pub gnet1: GuidanceNet<T>,
    pub gnet2: Option<GuidanceNet<T>>,
}

impl<T: Real> GridModel<T> {
    pub fn cast<U: Real>(&self) -> GridModel<U> {
        GridModel {
            grid1: self.grid1.cast(),
            grid2: self.grid2.as_ref().map(|g| g.cast()),
            gnet1: self.gnet1.cast(),
            gnet2: self.gnet2.as_ref().map(|g| g.cast()),
        }
    }
}

impl GridModel<f32> {
    /// Writes the grids to a BPG1 file and the guidance nets (plus any extra
    /// tensors) to a BPT1 file.
    pub fn save(&self, grids: impl AsRef<Path>, weights: impl AsRef<Path>, extra: Option<&TensorFile>) -> Result<()> {
        let mut list = vec![&self.grid1];
        list.extend(self.grid2.as_ref());
        save_grids(grids, &list)?;
        let mut file = extra.cloned().unwrap_or_default();
        self.gnet1.write_tensors(&mut file, "gnet1");
        if let Some(g) = &self.gnet2 {
            g.write_tensors(&mut file, "gnet2");
        }
        file.save(weights)
    }

    /// Reads a model written by [`Self::save`]: one grid means affine mode,
    /// two grids mean MLP mode.
    pub fn load(grids: impl AsRef<Path>, weights: impl AsRef<Path>) -> Result<Self> {
        let path = grids.as_ref();
        let mut list = load_grids(path)?.into_iter();
        let grid1 = list.next().ok_or_else(|| Error::Container(format!("{} holds no grids", path.display())))?;
        let grid2 = list.next();
        if list.next().is_some() {
            return Err(Error::Container(format!("{} holds more than two grids", path.display())));
        }
        let file = TensorFile::load(weights)?;
        let gnet1 = GuidanceNet::read_tensors(&file, "gnet1")?;
        let gnet2 = match grid2 {
            Some(_) => Some(GuidanceNet::read_tensors(&file, "gnet2")?),
            None => None,
        };
        Ok(Self {
            grid1,
            grid2,
            gnet1,
            gnet2,
        })
    }
}

impl<T: Real> ParamSet<T> for GridModel<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &[T])) {
        visit_prefixed("grid1", &self.grid1, f);
        if let Some(g) = &self.grid2 {
            visit_prefixed("grid2", g, f);
        }
        visit_prefixed("gnet1", &self.gnet1, f);
        if let Some(g) = &self.gnet2 {
            visit_prefixed("gnet2", g, f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        visit_prefixed_mut("grid1", &mut self.grid1, f);
        if let Some(g) = &mut self.grid2 {
            visit_prefixed_mut("grid2", g, f);
        }
        visit_prefixed_mut("gnet1", &mut self.gnet1, f);
        if let Some(g) = &mut self.gnet2 {
            visit_prefixed_mut("gnet2", g, f);
        }
    }
}

/// A grid in the form it is sliced.
#[derive(Clone, Debug)]
pub enum GridStage<T> {
    Monolithic(BilateralGrid<T>),
    Decomposed(SubgridSet<T>),
}

impl<T: Real> GridStage<T> {
    fn new(grid: BilateralGrid<T>, kind: DecompositionKind, decomposed: bool) -> Result<Self> {
        if grid.params() != kind.params() {
            return Err(Error::arg(format!(
                "{kind:?} grid needs {} params per cell, got {}",
                kind.params(),
                grid.params()
            )));
        }
        Ok(if decomposed {
            GridStage::Decomposed(decompose(&grid, kind)?)
        } else {
            GridStage::Monolithic(grid)
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        match self {
            GridStage::Monolithic(g) => g.geometry(),
            GridStage::Decomposed(s) => s.geometry(),
        }
    }

    fn params(&self) -> usize {
        match self {
            GridStage::Monolithic(g) => g.params(),
            GridStage::Decomposed(s) => s.kind().params(),
        }
    }

    fn sources(&self) -> Vec<SliceSource<'_, T>> {
        match self {
            GridStage::Monolithic(g) => vec![g.as_source(0)],
            GridStage::Decomposed(s) => s.sources(),
        }
    }

    /// The grid in full-cell layout.
    pub fn grid(&self) -> BilateralGrid<T> {
        match self {
            GridStage::Monolithic(g) => g.clone(),
            GridStage::Decomposed(s) => s.recompose(),
        }
    }

    /// Folds per-source gradients back into a full-layout grid.
    fn full_gradient(&self, grads: Vec<Vec<f64>>) -> Result<BilateralGrid<T>> {
        let geom = *self.geometry();
        let p = self.params();
        match self {
            GridStage::Monolithic(_) => {
                let cells = grads.into_iter().next().unwrap_or_default();
                BilateralGrid::new(geom, p, cells.into_iter().map(T::of).collect())
            }
            GridStage::Decomposed(set) => {
                let mut cells = vec![T::zero(); geom.cell_count() * p];
                for (i, g) in grads.iter().enumerate() {
                    let slots = set.slots(i);
                    let q = slots.len();
                    for (dst, src) in cells.chunks_exact_mut(p).zip(g.chunks_exact(q)) {
                        for (&s, &v) in slots.iter().zip(src) {
                            dst[s] = T::of(v);
                        }
                    }
                }
                BilateralGrid::new(geom, p, cells)
            }
        }
    }
}

/// Wall-clock time per pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub guidance: Duration,
    pub slice1: Duration,
    pub mlp1: Duration,
    pub slice2: Duration,
    pub mlp2: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.guidance + self.slice1 + self.mlp1 + self.slice2 + self.mlp2
    }

    pub fn as_millis(&self) -> [(&'static str, f64); 5] {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        [
            ("guidance", ms(self.guidance)),
            ("slice1", ms(self.slice1)),
            ("mlp1", ms(self.mlp1)),
            ("slice2", ms(self.slice2)),
            ("mlp2", ms(self.mlp2)),
        ]
    }
}

/// Intermediate maps of one band (or the whole image).
#[derive(Clone, Debug)]
struct Band<T> {
    g1: Image<T>,
    /// Post-ReLU hidden activations (MLP mode).
    z: Option<Image<T>>,
    g2: Option<Image<T>>,
    p2: Option<Image<T>>,
    out: Image<T>,
}

/// One row of every intermediate map, reused across rows by a worker.
struct RowScratch<T> {
    g1: Vec<T>,
    p1: Vec<T>,
    z: Vec<T>,
    g2: Vec<T>,
    p2: Vec<T>,
    ss1: SliceScratch<T>,
    ss2: Option<SliceScratch<T>>,
    gs1: GuidanceScratch<T>,
    gs2: Option<GuidanceScratch<T>>,
}

impl<T: Real> RowScratch<T> {
    fn new(pipe: &Pipeline<T>, w: usize, s1: &RowSlicer<'_, T>, s2: Option<&RowSlicer<'_, T>>) -> Self {
        let zeros = |n: usize| vec![T::zero(); n];
        let g2 = pipe.gnet2.as_ref();
        Self {
            g1: zeros(w * pipe.gnet1.out_channels()),
            p1: zeros(w * s1.out_params()),
            z: zeros(if g2.is_some() { w * HIDDEN } else { 0 }),
            g2: zeros(w * g2.map_or(0, |n| n.out_channels())),
            p2: zeros(w * s2.map_or(0, |s| s.out_params())),
            ss1: s1.scratch(),
            ss2: s2.map(|s| s.scratch()),
            gs1: pipe.gnet1.scratch(),
            gs2: g2.map(|n| n.scratch()),
        }
    }
}

#[derive(Clone, Debug)]
struct ForwardCache<T> {
    input: Image<T>,
    band: Band<T>,
}

/// An assembled model ready to enhance images.
///
/// [`Pipeline::enhance`] is stateless. [`Pipeline::forward`] additionally
/// caches every intermediate map for [`Pipeline::backward`], so one instance
/// must not run training steps from two threads at once.
#[derive(Clone, Debug)]
pub struct Pipeline<T> {
    cfg: PipelineConfig,
    stage1: GridStage<T>,
    stage2: Option<GridStage<T>>,
    gnet1: GuidanceNet<T>,
    gnet2: Option<GuidanceNet<T>>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Real> Pipeline<T> {
    pub fn new(cfg: PipelineConfig, model: GridModel<T>) -> Result<Self> {
        let (k1, k2) = cfg.guidance_channels();
        let GridModel {
            grid1,
            grid2,
            gnet1,
            gnet2,
        } = model;
        check_gnet(&gnet1, "gnet1", COLORS, k1)?;
        let stage1 = GridStage::new(grid1, cfg.stage1_kind(), cfg.decomposed)?;
        let (stage2, gnet2) = match (cfg.mode, grid2, gnet2) {
            (TransformMode::Mlp, Some(g2), Some(n2)) => {
                check_gnet(&n2, "gnet2", HIDDEN, k2.unwrap_or(1))?;
                let s2 = GridStage::new(g2, DecompositionKind::Stage2, cfg.decomposed)?;
                let (a, b) = (stage1.geometry(), s2.geometry());
                if (a.image_h, a.image_w) != (b.image_h, b.image_w) {
                    return Err(Error::arg("stage-1 and stage-2 grids target different image sizes"));
                }
                (Some(s2), Some(n2))
            }
            (TransformMode::Mlp, _, _) => {
                return Err(Error::arg("MLP mode needs a stage-2 grid and guidance net"))
            }
            (TransformMode::Affine, None, None) => (None, None),
            (TransformMode::Affine, _, _) => {
                return Err(Error::arg("affine mode takes a single grid and guidance net"))
            }
        };
        Ok(Self {
            cfg,
            stage1,
            stage2,
            gnet1,
            gnet2,
            cache: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.stage1.geometry()
    }

    /// Copies the parameters back out in full-grid layout.
    pub fn model(&self) -> GridModel<T> {
        GridModel {
            grid1: self.stage1.grid(),
            grid2: self.stage2.as_ref().map(|s| s.grid()),
            gnet1: self.gnet1.clone(),
            gnet2: self.gnet2.clone(),
        }
    }

    fn check_input(&self, img: &Image<T>) -> Result<()> {
        let g = self.geometry();
        if img.channels() != COLORS || img.height() != g.image_h || img.width() != g.image_w {
            return Err(Error::arg(format!(
                "image is {}x{}x{}, grids expect {}x{}x{COLORS}",
                img.height(),
                img.width(),
                img.channels(),
                g.image_h,
                g.image_w
            )));
        }
        Ok(())
    }

    fn run_band(&self, input: &Image<T>, y0: usize, t: &mut StageTimings) -> Result<Band<T>> {
        let (h, w) = (input.height(), input.width());

        let start = Instant::now();
        let g1 = self.gnet1.forward(input)?;
        t.guidance += start.elapsed();

        let start = Instant::now();
        let p1 = slice_band(
            self.stage1.geometry(),
            &self.stage1.sources(),
            &g1,
            y0,
            self.stage1.params(),
        )?;
        t.slice1 += start.elapsed();

        let p1_len = w * p1.channels();
        let start = Instant::now();
        if self.cfg.mode == TransformMode::Affine {
            let mut out = Image::zeros(h, w, COLORS);
            par::for_each_row(out.data_mut(), w * COLORS, |y, row| {
                affine_row(&p1.data()[y * p1_len..(y + 1) * p1_len], input.row(y), row)
            });
            t.mlp1 += start.elapsed();
            return Ok(Band {
                g1,
                z: None,
                g2: None,
                p2: None,
                out,
            });
        }

        let mut z = Image::zeros(h, w, HIDDEN);
        par::for_each_row(z.data_mut(), w * HIDDEN, |y, row| {
            mlp1_row(&p1.data()[y * p1_len..(y + 1) * p1_len], input.row(y), row)
        });
        t.mlp1 += start.elapsed();

        let (stage2, gnet2) = match (&self.stage2, &self.gnet2) {
            (Some(s), Some(n)) => (s, n),
            _ => return Err(Error::State("MLP pipeline without stage 2".into())),
        };

        let start = Instant::now();
        let g2 = gnet2.forward(&z)?;
        t.guidance += start.elapsed();

        let start = Instant::now();
        let p2 = slice_band(stage2.geometry(), &stage2.sources(), &g2, y0, stage2.params())?;
        t.slice2 += start.elapsed();

        let start = Instant::now();
        let p2_len = w * p2.channels();
        let mut out = Image::zeros(h, w, COLORS);
        par::for_each_row(out.data_mut(), w * COLORS, |y, row| {
            mlp2_row(&p2.data()[y * p2_len..(y + 1) * p2_len], z.row(y), row)
        });
        t.mlp2 += start.elapsed();

        Ok(Band {
            g1,
            z: Some(z),
            g2: Some(g2),
            p2: Some(p2),
            out,
        })
    }

    /// Enhances `img`. Every row runs all stages back to back on
    /// per-worker scratch buffers; the result is bit-identical to
    /// [`Self::forward`].
    pub fn enhance(&self, img: &Image<T>) -> Result<Image<T>> {
        self.enhance_timed(img).map(|(out, _)| out)
    }

    /// [`Self::enhance`] plus per-stage timings.
    ///
    /// Stage times are measured per row on each worker and scaled so that
    /// they sum to the wall-clock time of the call.
    pub fn enhance_timed(&self, img: &Image<T>) -> Result<(Image<T>, StageTimings)> {
        self.check_input(img)?;
        let wall = Instant::now();
        let (k1, k2) = self.cfg.guidance_channels();
        let src1 = self.stage1.sources();
        let slicer1 = RowSlicer::new(self.stage1.geometry(), &src1, k1, self.stage1.params())?;
        let src2 = self.stage2.as_ref().map(|s| s.sources()).unwrap_or_default();
        let slicer2 = match &self.stage2 {
            Some(s2) => Some(RowSlicer::new(s2.geometry(), &src2, k2.unwrap_or(1), s2.params())?),
            None => None,
        };
        let w = img.width();
        let nanos: [AtomicU64; 5] = Default::default();
        let mut out = Image::zeros(img.height(), w, COLORS);
        par::for_each_row_init(
            out.data_mut(),
            w * COLORS,
            || RowScratch::new(self, w, &slicer1, slicer2.as_ref()),
            |s, y, row| {
                let t = self.run_row(y, img.row(y), row, &slicer1, slicer2.as_ref(), s);
                for (acc, v) in nanos.iter().zip(t) {
                    acc.fetch_add(v, Ordering::Relaxed);
                }
            },
        );
        let wall = wall.elapsed();
        let cpu: Vec<f64> = nanos.iter().map(|n| n.load(Ordering::Relaxed) as f64).collect();
        let sum: f64 = cpu.iter().sum();
        let share = |i: usize| {
            if sum > 0.0 {
                wall.mul_f64(cpu[i] / sum)
            } else {
                Duration::ZERO
            }
        };
        let timings = StageTimings {
            guidance: share(0),
            slice1: share(1),
            mlp1: share(2),
            slice2: share(3),
            mlp2: share(4),
        };
        Ok((out, timings))
    }

    /// All stages for image row `y`. Returns nanoseconds per stage in
    /// [`StageTimings`] field order.
    fn run_row(
        &self,
        y: usize,
        src: &[T],
        out: &mut [T],
        slicer1: &RowSlicer<'_, T>,
        slicer2: Option<&RowSlicer<'_, T>>,
        s: &mut RowScratch<T>,
    ) -> [u64; 5] {
        let mut t = [0u64; 5];
        let mut lap = Instant::now();
        let mut tick = |slot: usize, lap: &mut Instant| {
            let now = Instant::now();
            t[slot] += (now - *lap).as_nanos() as u64;
            *lap = now;
        };
        self.gnet1.forward_row(src, &mut s.g1, &mut s.gs1);
        tick(0, &mut lap);
        slicer1.row(y, &s.g1, &mut s.p1, &mut s.ss1);
        tick(1, &mut lap);
        match (slicer2, &self.gnet2, s.gs2.as_mut(), s.ss2.as_mut()) {
            (Some(slicer2), Some(gnet2), Some(gs2), Some(ss2)) => {
                mlp1_row(&s.p1, src, &mut s.z);
                tick(2, &mut lap);
                gnet2.forward_row(&s.z, &mut s.g2, gs2);
                tick(0, &mut lap);
                slicer2.row(y, &s.g2, &mut s.p2, ss2);
                tick(3, &mut lap);
                mlp2_row(&s.p2, &s.z, out);
                tick(4, &mut lap);
            }
            _ => {
                affine_row(&s.p1, src, out);
                tick(2, &mut lap);
            }
        }
        t
    }

    /// Forward pass that keeps every intermediate map for [`Self::backward`].
    pub fn forward(&mut self, img: &Image<T>) -> Result<Image<T>> {
        self.check_input(img)?;
        let band = self.run_band(img, 0, &mut StageTimings::default())?;
        let out = band.out.clone();
        self.cache = Some(ForwardCache {
            input: img.clone(),
            band,
        });
        Ok(out)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Gradients of a loss with respect to every grid cell and guidance-net
    /// parameter, given `upstream = dLoss/dOutput` for the last [`Self::forward`].
    ///
    /// The output clamp passes gradients straight through.
    pub fn backward(&self, upstream: &Image<T>) -> Result<GridModel<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let input = &cache.input;
        let band = &cache.band;
        if !upstream.same_shape(&band.out) {
            return Err(Error::arg("upstream gradient does not match the cached output"));
        }
        let (h, w) = (input.height(), input.width());

        let dp1 = match self.cfg.mode {
            TransformMode::Affine => {
                let mut dp = Image::zeros(h, w, layout::AFFINE_PARAMS);
                par::for_each_row(dp.data_mut(), w * layout::AFFINE_PARAMS, |y, row| {
                    let (src, up) = (input.row(y), upstream.row(y));
                    for x in 0..w {
                        let d = &mut row[x * layout::AFFINE_PARAMS..(x + 1) * layout::AFFINE_PARAMS];
                        for r in 0..COLORS {
                            let u = up[x * COLORS + r];
                            for c in 0..COLORS {
                                d[layout::alpha(r, c)] = u * src[x * COLORS + c];
                            }
                            d[layout::beta(r)] = u;
                        }
                    }
                });
                dp
            }
            TransformMode::Mlp => {
                let (Some(stage2), Some(gnet2), Some(z), Some(g2), Some(p2)) =
                    (&self.stage2, &self.gnet2, &band.z, &band.g2, &band.p2)
                else {
                    return Err(Error::State("incomplete MLP cache".into()));
                };
                let mut dp2: Image<T> = Image::zeros(h, w, layout::STAGE2_PARAMS);
                let mut dz: Image<T> = Image::zeros(h, w, HIDDEN);
                par::for_each_row2(
                    dp2.data_mut(),
                    w * layout::STAGE2_PARAMS,
                    dz.data_mut(),
                    w * HIDDEN,
                    |y, drow, dzrow| {
                        let (zr, up, pr) = (z.row(y), upstream.row(y), p2.row(y));
                        for x in 0..w {
                            let zp = &zr[x * HIDDEN..(x + 1) * HIDDEN];
                            let pp = &pr[x * layout::STAGE2_PARAMS..(x + 1) * layout::STAGE2_PARAMS];
                            let d = &mut drow[x * layout::STAGE2_PARAMS..(x + 1) * layout::STAGE2_PARAMS];
                            let dzp = &mut dzrow[x * HIDDEN..(x + 1) * HIDDEN];
                            for o in 0..COLORS {
                                let u = up[x * COLORS + o];
                                for hh in 0..HIDDEN {
                                    d[layout::w2(o, hh)] = u * zp[hh];
                                    dzp[hh] += pp[layout::w2(o, hh)] * u;
                                }
                                d[layout::b2(o)] = u;
                            }
                        }
                    },
                );
                let (grads2, gg2) = slice_band_backward(stage2.geometry(), &stage2.sources(), g2, 0, &dp2)?;
                let grid2_grad = stage2.full_gradient(grads2)?;
                let (gnet2_grad, dz_guid) = gnet2.backward(z, &gg2)?;

                let mut dp1 = Image::zeros(h, w, layout::STAGE1_PARAMS);
                par::for_each_row(dp1.data_mut(), w * layout::STAGE1_PARAMS, |y, row| {
                    let (src, zr, dza, dzb) = (input.row(y), z.row(y), dz.row(y), dz_guid.row(y));
                    for x in 0..w {
                        let d = &mut row[x * layout::STAGE1_PARAMS..(x + 1) * layout::STAGE1_PARAMS];
                        for hh in 0..HIDDEN {
                            let i = x * HIDDEN + hh;
                            // relu'(0) = 0
                            let dpre = if zr[i] > T::zero() { dza[i] + dzb[i] } else { T::zero() };
                            for c in 0..COLORS {
                                d[layout::w1(hh, c)] = dpre * src[x * COLORS + c];
                            }
                            d[layout::b1(hh)] = dpre;
                        }
                    }
                });
                return self.finish_backward(input, band, &dp1, Some(grid2_grad), Some(gnet2_grad));
            }
        };
        self.finish_backward(input, band, &dp1, None, None)
    }

    fn finish_backward(
        &self,
        input: &Image<T>,
        band: &Band<T>,
        dp1: &Image<T>,
        grid2: Option<BilateralGrid<T>>,
        gnet2: Option<GuidanceNet<T>>,
    ) -> Result<GridModel<T>> {
        let (grads1, gg1) = slice_band_backward(self.stage1.geometry(), &self.stage1.sources(), &band.g1, 0, dp1)?;
        let grid1 = self.stage1.full_gradient(grads1)?;
        let (gnet1, _) = self.gnet1.backward(input, &gg1)?;
        Ok(GridModel {
            grid1,
            grid2,
            gnet1,
            gnet2,
        })
    }
}

fn check_gnet<T: Real>(net: &GuidanceNet<T>, name: &str, inputs: usize, outputs: usize) -> Result<()> {
    if net.in_channels() != inputs || net.out_channels() != outputs {
        return Err(Error::arg(format!(
            "{name} maps {} -> {} channels, this configuration needs {inputs} -> {outputs}",
            net.in_channels(),
            net.out_channels()
        )));
    }
    Ok(())
}

/// Convenience wrapper: builds a pipeline and enhances one image.
pub fn enhance<T: Real>(img: &Image<T>, model: &GridModel<T>, cfg: &PipelineConfig) -> Result<Image<T>> {
    Pipeline::new(cfg.clone(), model.clone())?.enhance(img)
}
