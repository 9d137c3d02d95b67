//! Bilateral grids: geometry, coordinate lifting, trilinear slicing and its
//! adjoint, channel unrolling, subgrid decomposition and the `BPG1` file.

mod decompose;
mod file;
mod slice;

pub use decompose::{decompose, DecompositionKind, SubgridRole, SubgridSet};
pub use file::{grids_from_bytes, grids_to_bytes, load_grids, save_grids, GRID_MAGIC};
pub use slice::{
    slice, slice_backward, slice_decomposed, slice_decomposed_backward, SliceSource,
};
pub(crate) use slice::{slice_band, slice_band_backward, RowSlicer, SliceScratch};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::real::Real;

/// Spatial and intensity mapping between an image and its grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub depth: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Pixel-center alignment; off reproduces the literal `x / s_x` mapping.
    pub align_centers: bool,
    /// Nominal code range `L`; only used to report the intensity stride.
    pub intensity_range: f64,
}

impl GridGeometry {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        depth: usize,
        image_h: usize,
        image_w: usize,
        align_centers: bool,
    ) -> Result<Self> {
        let g = Self {
            grid_h,
            grid_w,
            depth,
            image_h,
            image_w,
            align_centers,
            intensity_range: 255.0,
        };
        g.validate()?;
        Ok(g)
    }

    /// Geometry whose grid is `1/ratio` of the image in each spatial dimension
    /// (rounded up).
    pub fn for_image(
        image_h: usize,
        image_w: usize,
        ratio: usize,
        depth: usize,
        align_centers: bool,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::arg("grid ratio must be at least 1"));
        }
        Self::new(
            image_h.div_ceil(ratio),
            image_w.div_ceil(ratio),
            depth,
            image_h,
            image_w,
            align_centers,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.depth == 0 {
            return Err(Error::arg(format!(
                "grid dims must be positive, got {}x{}x{}",
                self.grid_h, self.grid_w, self.depth
            )));
        }
        if self.image_h < self.grid_h || self.image_w < self.grid_w {
            return Err(Error::arg(format!(
                "image {}x{} is smaller than grid {}x{}",
                self.image_h, self.image_w, self.grid_h, self.grid_w
            )));
        }
        if !(self.intensity_range > 0.0) {
            return Err(Error::arg("intensity range must be positive"));
        }
        Ok(())
    }

    pub fn stride_x(&self) -> f64 {
        self.image_w as f64 / self.grid_w as f64
    }

    pub fn stride_y(&self) -> f64 {
        self.image_h as f64 / self.grid_h as f64
    }

    pub fn stride_r(&self) -> f64 {
        self.intensity_range / self.depth as f64
    }

    pub fn cell_count(&self) -> usize {
        self.grid_h * self.grid_w * self.depth
    }

    /// Same grid, retargeted to another image size.
    pub fn with_image(&self, image_h: usize, image_w: usize) -> Result<Self> {
        let mut g = *self;
        g.image_h = image_h;
        g.image_w = image_w;
        g.validate()?;
        Ok(g)
    }

    fn axis(&self, pos: f64, image_n: usize, grid_n: usize) -> f64 {
        let scale = grid_n as f64 / image_n as f64;
        if self.align_centers {
            (pos + 0.5) * scale - 0.5
        } else {
            pos * scale
        }
    }

    /// Lifts pixel `(x, y)` with guidance `g` to continuous grid coordinates.
    pub fn lift(&self, x: f64, y: f64, g: f64) -> Lifted {
        let clamped = !(0.0..=1.0).contains(&g);
        let g = g.clamp(0.0, 1.0);
        Lifted {
            u: self.axis(x, self.image_w, self.grid_w),
            v: self.axis(y, self.image_h, self.grid_h),
            r: g * (self.depth - 1) as f64,
            clamped,
        }
    }

    pub(crate) fn column_axes(&self) -> Vec<AxisSplit> {
        (0..self.image_w)
            .map(|x| AxisSplit::new(self.axis(x as f64, self.image_w, self.grid_w), self.grid_w))
            .collect()
    }

    pub(crate) fn row_axis(&self, y: usize) -> AxisSplit {
        AxisSplit::new(self.axis(y as f64, self.image_h, self.grid_h), self.grid_h)
    }
}

/// Continuous grid coordinates of one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lifted {
    pub u: f64,
    pub v: f64,
    pub r: f64,
    /// The guidance value was outside `[0, 1]` and has been clamped.
    pub clamped: bool,
}

/// Splits a continuous coordinate into a cell index and a fraction.
///
/// Coordinates below zero snap to `(0, 0)`. The index is clamped to
/// `dim - 1`; the upper neighbour is clamped separately by the slicer.
pub fn split_frac(c: f64, dim: usize) -> (usize, f64) {
    debug_assert!(dim >= 1);
    if !(c > 0.0) {
        return (0, 0.0);
    }
    let fl = c.floor();
    let i0 = (fl as usize).min(dim - 1);
    (i0, (c - fl).clamp(0.0, 1.0))
}

/// Interpolation weights of the eight neighbours, indexed `a<<2 | b<<1 | c`
/// for offsets `a` along u, `b` along v and `c` along r.
pub fn trilinear_weights<T: Real>(du: T, dv: T, dr: T) -> [T; 8] {
    let one = T::one();
    let u = [one - du, du];
    let v = [one - dv, dv];
    let r = [one - dr, dr];
    let mut w = [T::zero(); 8];
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                w[a << 2 | b << 1 | c] = u[a] * v[b] * r[c];
            }
        }
    }
    w
}

/// Lower/upper neighbour along one spatial axis and the interpolation fraction.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

impl AxisSplit {
    fn new(c: f64, dim: usize) -> Self {
        let (lo, frac) = split_frac(c, dim);
        Self {
            lo,
            hi: (lo + 1).min(dim - 1),
            frac,
        }
    }
}

/// A `grid_h × grid_w × depth` array of `params`-sized cells, stored `[y][x][z][p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilateralGrid<T> {
    geometry: GridGeometry,
    params: usize,
    cells: Vec<T>,
}

impl<T: Real> BilateralGrid<T> {
    pub fn new(geometry: GridGeometry, params: usize, cells: Vec<T>) -> Result<Self> {
        geometry.validate()?;
        if params == 0 {
            return Err(Error::arg("grid needs at least one parameter per cell"));
        }
        let expected = geometry.cell_count() * params;
        if cells.len() != expected {
            return Err(Error::arg(format!(
                "grid has {} values, expected {expected}",
                cells.len()
            )));
        }
        if let Some(i) = cells.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite grid value at index {i}")));
        }
        Ok(Self {
            geometry,
            params,
            cells,
        })
    }

    pub fn zeros(geometry: GridGeometry, params: usize) -> Self {
        Self {
            geometry,
            params,
            cells: vec![T::zero(); geometry.cell_count() * params],
        }
    }

    /// Every cell holds a copy of `cell`.
    pub fn uniform(geometry: GridGeometry, cell: &[T]) -> Self {
        Self {
            geometry,
            params: cell.len(),
            cells: cell.repeat(geometry.cell_count()),
        }
    }

    #[inline]
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    #[inline]
    pub fn params(&self) -> usize {
        self.params
    }

    #[inline]
    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    #[inline]
    pub fn cells_mut(&mut self) -> &mut [T] {
        &mut self.cells
    }

    pub fn into_cells(self) -> Vec<T> {
        self.cells
    }

    #[inline]
    pub fn cell_offset(&self, y: usize, x: usize, z: usize) -> usize {
        ((y * self.geometry.grid_w + x) * self.geometry.depth + z) * self.params
    }

    pub fn cell(&self, y: usize, x: usize, z: usize) -> &[T] {
        let o = self.cell_offset(y, x, z);
        &self.cells[o..o + self.params]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize, z: usize) -> &mut [T] {
        let o = self.cell_offset(y, x, z);
        &mut self.cells[o..o + self.params]
    }

    /// Retargets the grid to another image size without touching the cells.
    pub fn with_geometry(mut self, geometry: GridGeometry) -> Result<Self> {
        let g = &self.geometry;
        if (geometry.grid_h, geometry.grid_w, geometry.depth) != (g.grid_h, g.grid_w, g.depth) {
            return Err(Error::arg("with_geometry cannot change the grid dimensions"));
        }
        geometry.validate()?;
        self.geometry = geometry;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> BilateralGrid<U> {
        BilateralGrid {
            geometry: self.geometry,
            params: self.params,
            cells: self.cells.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    /// Single-source view for the slicing kernels.
    pub fn as_source(&self, channel: usize) -> SliceSource<'_, T> {
        SliceSource {
            cells: &self.cells,
            params: self.params,
            dst: (0..self.params).collect(),
            channel,
        }
    }
}

/// Builds a grid from a feature map whose channels hold the depth axis
/// unrolled: `cells[y][x][z][p] = feat[y][x][depth·p + z]`.
pub fn unroll_grid<T: Real>(
    feat: &Image<T>,
    depth: usize,
    params: usize,
    geometry: GridGeometry,
) -> Result<BilateralGrid<T>> {
    if depth != geometry.depth {
        return Err(Error::arg(format!(
            "unroll depth {depth} does not match geometry depth {}",
            geometry.depth
        )));
    }
    if feat.channels() != depth * params {
        return Err(Error::arg(format!(
            "unroll expects {depth}x{params} = {} channels, got {}",
            depth * params,
            feat.channels()
        )));
    }
    if (feat.height(), feat.width()) != (geometry.grid_h, geometry.grid_w) {
        return Err(Error::arg(format!(
            "unroll: feature map is {}x{}, grid is {}x{}",
            feat.height(),
            feat.width(),
            geometry.grid_h,
            geometry.grid_w
        )));
    }
    let mut grid = BilateralGrid::zeros(geometry, params);
    for y in 0..geometry.grid_h {
        for x in 0..geometry.grid_w {
            let px = feat.pixel(y, x);
            for z in 0..depth {
                let cell = grid.cell_mut(y, x, z);
                for (p, v) in cell.iter_mut().enumerate() {
                    *v = px[depth * p + z];
                }
            }
        }
    }
    Ok(grid)
}

/// Inverse of [`unroll_grid`]: flattens the depth axis back into channels.
pub fn roll_grid<T: Real>(grid: &BilateralGrid<T>) -> Image<T> {
    let g = grid.geometry();
    let (d, p) = (g.depth, grid.params());
    let mut out = Image::zeros(g.grid_h, g.grid_w, d * p);
    for y in 0..g.grid_h {
        for x in 0..g.grid_w {
            for z in 0..d {
                for (pi, &v) in grid.cell(y, x, z).iter().enumerate() {
                    out.set(y, x, d * pi + z, v);
                }
            }
        }
    }
    out
}
