use super::{BilateralGrid, GridGeometry, SliceSource};
use crate::error::{Error, Result};
use crate::layout::{self, COLORS, HIDDEN};
use crate::real::Real;

/// Which parameter layout a grid holds, and therefore how it splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecompositionKind {
    /// 32 slots: three per-input-channel weight subgrids and a bias subgrid.
    Stage1,
    /// 27 slots: eight per-hidden-unit weight subgrids and a bias subgrid.
    Stage2,
    /// 12 slots: three subgrids, each one row of `α` plus its `β` entry.
    Affine,
}

/// What a subgrid stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubgridRole {
    /// `W1[·][c]` for input channel `c`.
    InputWeights(usize),
    /// `W2[·][h]` for hidden unit `h`.
    HiddenWeights(usize),
    /// Row `r` of the affine matrix and bias.
    AffineRow(usize),
    Bias,
}

impl DecompositionKind {
    pub fn params(self) -> usize {
        match self {
            DecompositionKind::Stage1 => layout::STAGE1_PARAMS,
            DecompositionKind::Stage2 => layout::STAGE2_PARAMS,
            DecompositionKind::Affine => layout::AFFINE_PARAMS,
        }
    }

    pub fn subgrid_count(self) -> usize {
        match self {
            DecompositionKind::Stage1 => COLORS + 1,
            DecompositionKind::Stage2 => HIDDEN + 1,
            DecompositionKind::Affine => COLORS,
        }
    }

    /// Roles in subgrid order, each with the full-cell slots it gathers.
    pub fn layout(self) -> Vec<(SubgridRole, Vec<usize>)> {
        match self {
            DecompositionKind::Stage1 => (0..COLORS)
                .map(|c| {
                    (
                        SubgridRole::InputWeights(c),
                        (0..HIDDEN).map(|h| layout::w1(h, c)).collect(),
                    )
                })
                .chain(std::iter::once((
                    SubgridRole::Bias,
                    (0..HIDDEN).map(layout::b1).collect(),
                )))
                .collect(),
            DecompositionKind::Stage2 => (0..HIDDEN)
                .map(|h| {
                    (
                        SubgridRole::HiddenWeights(h),
                        (0..COLORS).map(|o| layout::w2(o, h)).collect(),
                    )
                })
                .chain(std::iter::once((
                    SubgridRole::Bias,
                    (0..COLORS).map(layout::b2).collect(),
                )))
                .collect(),
            DecompositionKind::Affine => (0..COLORS)
                .map(|r| {
                    let mut slots: Vec<usize> = (0..COLORS).map(|c| layout::alpha(r, c)).collect();
                    slots.push(layout::beta(r));
                    (SubgridRole::AffineRow(r), slots)
                })
                .collect(),
        }
    }
}

/// A grid split into per-category subgrids sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgridSet<T> {
    kind: DecompositionKind,
    roles: Vec<SubgridRole>,
    slots: Vec<Vec<usize>>,
    subgrids: Vec<BilateralGrid<T>>,
}

/// Splits `grid` into the subgrids of `kind`.
pub fn decompose<T: Real>(grid: &BilateralGrid<T>, kind: DecompositionKind) -> Result<SubgridSet<T>> {
    if grid.params() != kind.params() {
        return Err(Error::arg(format!(
            "{kind:?} decomposition needs {} params per cell, grid has {}",
            kind.params(),
            grid.params()
        )));
    }
    let layout = kind.layout();
    let cells = grid.geometry().cell_count();
    let src = grid.cells();
    let p = grid.params();
    let subgrids = layout
        .iter()
        .map(|(_, slots)| {
            let mut data = Vec::with_capacity(cells * slots.len());
            for cell in src.chunks_exact(p) {
                data.extend(slots.iter().map(|&s| cell[s]));
            }
            BilateralGrid::new(*grid.geometry(), slots.len(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let (roles, slots) = layout.into_iter().unzip();
    Ok(SubgridSet {
        kind,
        roles,
        slots,
        subgrids,
    })
}

impl<T: Real> SubgridSet<T> {
    /// Assembles a set from subgrids given in role order.
    pub fn new(kind: DecompositionKind, subgrids: Vec<BilateralGrid<T>>) -> Result<Self> {
        let layout = kind.layout();
        if subgrids.len() != layout.len() {
            return Err(Error::arg(format!(
                "{kind:?} needs {} subgrids, got {}",
                layout.len(),
                subgrids.len()
            )));
        }
        let geom = *subgrids[0].geometry();
        for (i, (g, (_, slots))) in subgrids.iter().zip(&layout).enumerate() {
            if *g.geometry() != geom {
                return Err(Error::arg(format!("subgrid {i} geometry differs from subgrid 0")));
            }
            if g.params() != slots.len() {
                return Err(Error::arg(format!(
                    "subgrid {i} has {} params, expected {}",
                    g.params(),
                    slots.len()
                )));
            }
        }
        let (roles, slots) = layout.into_iter().unzip();
        Ok(Self {
            kind,
            roles,
            slots,
            subgrids,
        })
    }

    pub fn kind(&self) -> DecompositionKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.subgrids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subgrids.is_empty()
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.subgrids[0].geometry()
    }

    pub fn roles(&self) -> &[SubgridRole] {
        &self.roles
    }

    pub fn subgrids(&self) -> &[BilateralGrid<T>] {
        &self.subgrids
    }

    pub fn subgrids_mut(&mut self) -> &mut [BilateralGrid<T>] {
        &mut self.subgrids
    }

    /// Full-cell slots gathered by subgrid `i`.
    pub fn slots(&self, i: usize) -> &[usize] {
        &self.slots[i]
    }

    /// Inverse of [`decompose`].
    pub fn recompose(&self) -> BilateralGrid<T> {
        let geom = *self.geometry();
        let p = self.kind.params();
        let mut out = BilateralGrid::zeros(geom, p);
        for (sub, slots) in self.subgrids.iter().zip(&self.slots) {
            let q = sub.params();
            for (dst, src) in out
                .cells_mut()
                .chunks_exact_mut(p)
                .zip(sub.cells().chunks_exact(q))
            {
                for (&s, &v) in slots.iter().zip(src) {
                    dst[s] = v;
                }
            }
        }
        out
    }

    /// Slicing views: subgrid `i` is steered by guidance channel `i`.
    pub fn sources(&self) -> Vec<SliceSource<'_, T>> {
        self.subgrids
            .iter()
            .zip(&self.slots)
            .enumerate()
            .map(|(i, (g, slots))| SliceSource {
                cells: g.cells(),
                params: g.params(),
                dst: slots.clone(),
                channel: i,
            })
            .collect()
    }

    /// Same roles and geometry, new cell contents.
    pub(crate) fn with_cells(&self, cells: Vec<Vec<f64>>) -> Result<Self> {
        let subgrids = self
            .subgrids
            .iter()
            .zip(cells)
            .map(|(g, c)| BilateralGrid::new(*g.geometry(), g.params(), c.into_iter().map(T::of).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: self.kind,
            roles: self.roles.clone(),
            slots: self.slots.clone(),
            subgrids,
        })
    }
}
