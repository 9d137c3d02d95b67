//! `BPG1` grid container.
//!
//! ```text
//! "BPG1" version=1 grid_count                       (u32 LE)
//! per grid: grid_h grid_w depth P align image_h image_w  (u32 LE)
//!           grid_h·grid_w·depth·P f32 LE values in [y][x][z][p] order
//! ```

use std::io::Write;
use std::path::Path;

use super::{BilateralGrid, GridGeometry};
use crate::container::{put_u32, write_atomic, ByteReader, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::real::Real;

pub const GRID_MAGIC: &[u8; 4] = b"BPG1";

pub fn grids_to_bytes<T: Real>(grids: &[&BilateralGrid<T>]) -> Vec<u8> {
    let total: usize = grids.iter().map(|g| g.cells().len() * 4 + 28).sum();
    let mut out = Vec::with_capacity(12 + total);
    out.extend_from_slice(GRID_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, grids.len() as u32);
    for g in grids {
        let geo = g.geometry();
        for v in [
            geo.grid_h,
            geo.grid_w,
            geo.depth,
            g.params(),
            usize::from(geo.align_centers),
            geo.image_h,
            geo.image_w,
        ] {
            put_u32(&mut out, v as u32);
        }
        for &v in g.cells() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn grids_from_bytes(bytes: &[u8]) -> Result<Vec<BilateralGrid<f32>>> {
    let mut r = ByteReader::new(bytes);
    r.magic(GRID_MAGIC)?;
    r.version()?;
    let count = r.u32()? as usize;
    let mut grids = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let mut h = [0usize; 7];
        for v in &mut h {
            *v = r.u32()? as usize;
        }
        let [grid_h, grid_w, depth, params, align, image_h, image_w] = h;
        if align > 1 {
            return Err(Error::Container(format!("grid {i}: align flag {align} is not 0/1")));
        }
        let geom = GridGeometry::new(grid_h, grid_w, depth, image_h, image_w, align == 1)
            .map_err(|e| Error::Container(format!("grid {i}: {e}")))?;
        let n = geom
            .cell_count()
            .checked_mul(params)
            .ok_or_else(|| Error::Container(format!("grid {i} is too large")))?;
        let cells = r.f32s(n)?;
        grids.push(
            BilateralGrid::new(geom, params, cells)
                .map_err(|e| Error::Container(format!("grid {i}: {e}")))?,
        );
    }
    r.finish()?;
    Ok(grids)
}

pub fn save_grids<T: Real>(path: impl AsRef<Path>, grids: &[&BilateralGrid<T>]) -> Result<()> {
    let bytes = grids_to_bytes(grids);
    write_atomic(path.as_ref(), |f| f.write_all(&bytes))
}

pub fn load_grids(path: impl AsRef<Path>) -> Result<Vec<BilateralGrid<f32>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    grids_from_bytes(&bytes)
}
