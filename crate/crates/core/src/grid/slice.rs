use super::{AxisSplit, BilateralGrid, GridGeometry, SubgridSet};
use crate::error::{Error, Result};
use crate::imaging::{Image, SlicedParams};
use crate::par;
use crate::real::Real;

/// One grid (or subgrid) read by the slicing kernels.
///
/// `dst[m]` is the output slot that receives cell parameter `m`, and
/// `channel` selects the guidance channel that steers the depth lookup.
#[derive(Clone, Debug)]
pub struct SliceSource<'a, T> {
    pub cells: &'a [T],
    pub params: usize,
    pub dst: Vec<usize>,
    pub channel: usize,
}

struct Depth<T> {
    k0: usize,
    k1: usize,
    frac: T,
    /// d r / d g, zero where the lookup is clamped.
    slope: T,
}

#[inline(always)]
fn depth_split<T: Real>(g: T, depth: usize) -> Depth<T> {
    let top = depth - 1;
    let inside = g >= T::zero() && g <= T::one();
    let r = g.max(T::zero()).min(T::one()) * T::of(top as f64);
    // r >= 0, so truncation is the floor
    let k0 = r.index().min(top);
    let k1 = (k0 + 1).min(top);
    let frac = (r - T::of(k0 as f64)).max(T::zero()).min(T::one());
    let slope = if inside && k1 != k0 {
        T::of(top as f64)
    } else {
        T::zero()
    };
    Depth {
        k0,
        k1,
        frac,
        slope,
    }
}

/// Offsets (in cells, before the depth index) of the four spatial corners,
/// indexed `a<<1 | b` with `a` along x and `b` along y, plus their weights.
#[inline(always)]
fn spatial_corners<T: Real>(
    geom: &GridGeometry,
    col: &AxisSplit,
    du: T,
    row: &AxisSplit,
    dv: T,
) -> ([usize; 4], [T; 4]) {
    let one = T::one();
    let xs = [col.lo, col.hi];
    let ys = [row.lo, row.hi];
    let wx = [one - du, du];
    let wy = [one - dv, dv];
    let mut base = [0usize; 4];
    let mut w = [T::zero(); 4];
    for a in 0..2 {
        for b in 0..2 {
            base[a << 1 | b] = (ys[b] * geom.grid_w + xs[a]) * geom.depth;
            w[a << 1 | b] = wx[a] * wy[b];
        }
    }
    (base, w)
}

fn check_sources<T>(geom: &GridGeometry, sources: &[SliceSource<'_, T>], k: usize, out_params: usize) -> Result<()> {
    for (i, s) in sources.iter().enumerate() {
        if s.cells.len() != geom.cell_count() * s.params || s.dst.len() != s.params {
            return Err(Error::arg(format!("slice source {i} has inconsistent shape")));
        }
        if s.channel >= k {
            return Err(Error::arg(format!(
                "slice source {i} reads guidance channel {} of {k}",
                s.channel
            )));
        }
        if s.dst.iter().any(|&d| d >= out_params) {
            return Err(Error::arg(format!("slice source {i} writes past slot {out_params}")));
        }
    }
    Ok(())
}

/// Spatial corner offsets and weights of every column in one row.
pub(crate) struct SliceScratch<T> {
    corners: Vec<([usize; 4], [T; 4])>,
}

/// Slices one source along a row. `P` is the source's parameter count.
#[inline(always)]
fn source_row<T: Real, const P: usize>(
    src: &SliceSource<'_, T>,
    corners: &[([usize; 4], [T; 4])],
    depth: usize,
    grow: &[T],
    k: usize,
    out_row: &mut [T],
    op: usize,
) {
    let dst: [usize; P] = std::array::from_fn(|m| src.dst[m]);
    for (x, (base, ws)) in corners.iter().enumerate() {
        let dep = depth_split(grow[x * k + src.channel], depth);
        let wr = [T::one() - dep.frac, dep.frac];
        let kz = [dep.k0 * P, dep.k1 * P];
        let mut w = [T::zero(); 8];
        let mut offs = [0usize; 8];
        for ab in 0..4 {
            let b = base[ab] * P;
            for i in 0..2 {
                offs[ab << 1 | i] = b + kz[i];
                w[ab << 1 | i] = ws[ab] * wr[i];
            }
        }
        let c: [&[T; P]; 8] = offs.map(|o| <&[T; P]>::try_from(&src.cells[o..o + P]).expect("cell in range"));
        let out_px = &mut out_row[x * op..(x + 1) * op];
        for m in 0..P {
            out_px[dst[m]] = w[0] * c[0][m]
                + w[1] * c[1][m]
                + w[2] * c[2][m]
                + w[3] * c[3][m]
                + w[4] * c[4][m]
                + w[5] * c[5][m]
                + w[6] * c[6][m]
                + w[7] * c[7][m];
        }
    }
}

fn source_row_dyn<T: Real>(
    src: &SliceSource<'_, T>,
    corners: &[([usize; 4], [T; 4])],
    depth: usize,
    grow: &[T],
    k: usize,
    out_row: &mut [T],
    op: usize,
) {
    let p = src.params;
    for (x, (base, ws)) in corners.iter().enumerate() {
        let dep = depth_split(grow[x * k + src.channel], depth);
        let wr = [T::one() - dep.frac, dep.frac];
        let kz = [dep.k0, dep.k1];
        let mut w = [T::zero(); 8];
        let mut c = [&src.cells[..0]; 8];
        for ab in 0..4 {
            for i in 0..2 {
                let o = (base[ab] + kz[i]) * p;
                w[ab << 1 | i] = ws[ab] * wr[i];
                c[ab << 1 | i] = &src.cells[o..o + p];
            }
        }
        let out_px = &mut out_row[x * op..(x + 1) * op];
        for (m, &slot) in src.dst.iter().enumerate() {
            out_px[slot] = w[0] * c[0][m]
                + w[1] * c[1][m]
                + w[2] * c[2][m]
                + w[3] * c[3][m]
                + w[4] * c[4][m]
                + w[5] * c[5][m]
                + w[6] * c[6][m]
                + w[7] * c[7][m];
        }
    }
}

/// Row-at-a-time slicer with the per-column lookups precomputed.
pub(crate) struct RowSlicer<'a, T> {
    geom: &'a GridGeometry,
    sources: &'a [SliceSource<'a, T>],
    cols: Vec<AxisSplit>,
    col_frac: Vec<T>,
    channels: usize,
    out_params: usize,
}

impl<'a, T: Real> RowSlicer<'a, T> {
    pub(crate) fn new(
        geom: &'a GridGeometry,
        sources: &'a [SliceSource<'a, T>],
        channels: usize,
        out_params: usize,
    ) -> Result<Self> {
        check_sources(geom, sources, channels, out_params)?;
        let cols = geom.column_axes();
        Ok(Self {
            geom,
            sources,
            col_frac: cols.iter().map(|c| T::of(c.frac)).collect(),
            cols,
            channels,
            out_params,
        })
    }

    pub(crate) fn out_params(&self) -> usize {
        self.out_params
    }

    pub(crate) fn scratch(&self) -> SliceScratch<T> {
        SliceScratch {
            corners: Vec::with_capacity(self.cols.len()),
        }
    }

    /// Slices image row `y`. `grow` is that row of the guidance map and
    /// `out_row` receives `width × out_params` values.
    pub(crate) fn row(&self, y: usize, grow: &[T], out_row: &mut [T], s: &mut SliceScratch<T>) {
        let geom = self.geom;
        let row = geom.row_axis(y);
        let dv = T::of(row.frac);
        s.corners.clear();
        s.corners.extend(
            self.cols
                .iter()
                .zip(&self.col_frac)
                .map(|(col, &du)| spatial_corners(geom, col, du, &row, dv)),
        );
        let (k, op, d) = (self.channels, self.out_params, geom.depth);
        let corners = &s.corners[..];
        for src in self.sources {
            match src.params {
                3 => source_row::<T, 3>(src, corners, d, grow, k, out_row, op),
                4 => source_row::<T, 4>(src, corners, d, grow, k, out_row, op),
                8 => source_row::<T, 8>(src, corners, d, grow, k, out_row, op),
                12 => source_row::<T, 12>(src, corners, d, grow, k, out_row, op),
                27 => source_row::<T, 27>(src, corners, d, grow, k, out_row, op),
                32 => source_row::<T, 32>(src, corners, d, grow, k, out_row, op),
                _ => source_row_dyn(src, corners, d, grow, k, out_row, op),
            }
        }
    }
}

/// Slices rows `y0 .. y0 + guidance.height()` of the image.
///
/// `guidance` holds only those rows. Returns a band of `out_params` channels.
pub(crate) fn slice_band<T: Real>(
    geom: &GridGeometry,
    sources: &[SliceSource<'_, T>],
    guidance: &Image<T>,
    y0: usize,
    out_params: usize,
) -> Result<SlicedParams<T>> {
    if guidance.width() != geom.image_w || y0 + guidance.height() > geom.image_h {
        return Err(Error::arg(format!(
            "guidance rows {}..{} x {} do not fit image {}x{}",
            y0,
            y0 + guidance.height(),
            guidance.width(),
            geom.image_h,
            geom.image_w
        )));
    }
    let slicer = RowSlicer::new(geom, sources, guidance.channels(), out_params)?;
    let mut out = Image::zeros(guidance.height(), geom.image_w, out_params);
    par::for_each_row_init(
        out.data_mut(),
        geom.image_w * out_params,
        || slicer.scratch(),
        |s, by, out_row| slicer.row(y0 + by, guidance.row(by), out_row, s),
    );
    Ok(out)
}

/// Adjoint of [`slice_band`].
///
/// Returns one `f64` gradient buffer per source (same layout as its cells)
/// and the gradient with respect to the guidance band.
pub(crate) fn slice_band_backward<T: Real>(
    geom: &GridGeometry,
    sources: &[SliceSource<'_, T>],
    guidance: &Image<T>,
    y0: usize,
    upstream: &Image<T>,
) -> Result<(Vec<Vec<f64>>, Image<T>)> {
    let k = guidance.channels();
    let out_params = upstream.channels();
    if upstream.height() != guidance.height() || upstream.width() != guidance.width() {
        return Err(Error::arg(format!(
            "upstream is {}x{}, guidance is {}x{}",
            upstream.height(),
            upstream.width(),
            guidance.height(),
            guidance.width()
        )));
    }
    if guidance.width() != geom.image_w || y0 + guidance.height() > geom.image_h {
        return Err(Error::arg("guidance band does not fit the grid geometry"));
    }
    check_sources(geom, sources, k, out_params)?;

    let cols = geom.column_axes();
    let d = geom.depth;
    let h = guidance.height();
    let w_img = geom.image_w;
    let total_cells: usize = sources.iter().map(|s| s.cells.len()).sum::<usize>().max(1);
    // keep the per-chunk accumulators within ~256 MiB
    let chunks = ((256usize << 20) / (8 * total_cells)).clamp(1, par::MAX_REDUCE_CHUNKS);

    let partials = par::map_ranges(h, chunks, |rows| {
        let mut grads: Vec<Vec<f64>> = sources.iter().map(|s| vec![0.0; s.cells.len()]).collect();
        let mut gg = vec![T::zero(); rows.len() * w_img * k];
        for by in rows.clone() {
            let row = geom.row_axis(y0 + by);
            let dv = row.frac;
            let grow = guidance.row(by);
            let urow = upstream.row(by);
            for (x, col) in cols.iter().enumerate() {
                let (base, ws) = spatial_corners::<f64>(geom, col, col.frac, &row, dv);
                let up = &urow[x * out_params..(x + 1) * out_params];
                let gpx = (by - rows.start) * w_img * k + x * k;
                for (s, src) in sources.iter().enumerate() {
                    let p = src.params;
                    let dep = depth_split(grow[x * k + src.channel], d);
                    let fr = dep.frac.f64();
                    let wr = [1.0 - fr, fr];
                    let kz = [dep.k0, dep.k1];
                    let g = &mut grads[s];
                    for ab in 0..4 {
                        for c in 0..2 {
                            let w = ws[ab] * wr[c];
                            if w == 0.0 {
                                continue;
                            }
                            let o = (base[ab] + kz[c]) * p;
                            for (m, &slot) in src.dst.iter().enumerate() {
                                g[o + m] += w * up[slot].f64();
                            }
                        }
                    }
                    if dep.slope != T::zero() {
                        let mut dr = 0.0f64;
                        for ab in 0..4 {
                            let lo = (base[ab] + dep.k0) * p;
                            let hi = (base[ab] + dep.k1) * p;
                            let mut s_ab = 0.0f64;
                            for (m, &slot) in src.dst.iter().enumerate() {
                                s_ab += up[slot].f64() * (src.cells[hi + m] - src.cells[lo + m]).f64();
                            }
                            dr += ws[ab] * s_ab;
                        }
                        gg[gpx + src.channel] += T::of(dr * dep.slope.f64());
                    }
                }
            }
        }
        (grads, gg)
    });

    let mut grads: Vec<Vec<f64>> = sources.iter().map(|s| vec![0.0; s.cells.len()]).collect();
    let mut gg = Vec::with_capacity(h * w_img * k);
    for (part, rows) in partials {
        for (acc, p) in grads.iter_mut().zip(part) {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        gg.extend(rows);
    }
    Ok((grads, Image::new(h, w_img, k, gg)?))
}

fn check_full_guidance<T: Real>(geom: &GridGeometry, guidance: &Image<T>, k: usize) -> Result<()> {
    if guidance.height() != geom.image_h || guidance.width() != geom.image_w || guidance.channels() != k {
        return Err(Error::arg(format!(
            "guidance is {}x{}x{}, expected {}x{}x{k}",
            guidance.height(),
            guidance.width(),
            guidance.channels(),
            geom.image_h,
            geom.image_w
        )));
    }
    Ok(())
}

/// Trilinear slicing of a grid with a single-channel guidance map.
pub fn slice<T: Real>(grid: &BilateralGrid<T>, guidance: &Image<T>) -> Result<SlicedParams<T>> {
    check_full_guidance(grid.geometry(), guidance, 1)?;
    slice_band(grid.geometry(), &[grid.as_source(0)], guidance, 0, grid.params())
}

/// Gradients of [`slice`] with respect to the grid cells and the guidance.
pub fn slice_backward<T: Real>(
    grid: &BilateralGrid<T>,
    guidance: &Image<T>,
    upstream: &SlicedParams<T>,
) -> Result<(BilateralGrid<T>, Image<T>)> {
    check_full_guidance(grid.geometry(), guidance, 1)?;
    if upstream.channels() != grid.params() {
        return Err(Error::arg(format!(
            "upstream has {} channels, grid has {} params",
            upstream.channels(),
            grid.params()
        )));
    }
    let (mut g, gg) = slice_band_backward(grid.geometry(), &[grid.as_source(0)], guidance, 0, upstream)?;
    let cells = g.pop().unwrap_or_default().into_iter().map(T::of).collect();
    Ok((BilateralGrid::new(*grid.geometry(), grid.params(), cells)?, gg))
}

/// Slices every subgrid with its own guidance channel and assembles the full
/// parameter layout.
pub fn slice_decomposed<T: Real>(set: &SubgridSet<T>, guidance: &Image<T>) -> Result<SlicedParams<T>> {
    check_full_guidance(set.geometry(), guidance, set.len())?;
    slice_band(set.geometry(), &set.sources(), guidance, 0, set.kind().params())
}

/// Gradients of [`slice_decomposed`]: one gradient grid per subgrid (returned
/// as a set with the same roles) and the multi-channel guidance gradient.
pub fn slice_decomposed_backward<T: Real>(
    set: &SubgridSet<T>,
    guidance: &Image<T>,
    upstream: &SlicedParams<T>,
) -> Result<(SubgridSet<T>, Image<T>)> {
    check_full_guidance(set.geometry(), guidance, set.len())?;
    if upstream.channels() != set.kind().params() {
        return Err(Error::arg("upstream channel count does not match the decomposition"));
    }
    let (grads, gg) = slice_band_backward(set.geometry(), &set.sources(), guidance, 0, upstream)?;
    Ok((set.with_cells(grads)?, gg))
}
