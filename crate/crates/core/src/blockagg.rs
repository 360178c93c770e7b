//! Aggregation of gridded field values to areal blocks.
//!
//! Method 1 weights every grid cell by the fraction of the block's area it
//! covers, with overlaps computed by exact polygon clipping. Method 2 averages
//! the cells whose centroids fall inside the block. Both reduce to a sparse
//! block × cell weight table applied to the grid values.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BlockGeometry, Point2D};

/// Regular rectangular grid; cell `ix + iy·nx` spans
/// `[x0 + ix·w, x0 + (ix+1)·w) × [y0 + iy·h, y0 + (iy+1)·h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Point2D,
    pub cell_width: f64,
    pub cell_height: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(origin: Point2D, cell_width: f64, cell_height: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(cell_width > 0.0 && cell_height > 0.0) || !origin.is_finite() || nx == 0 || ny == 0 {
            return Err(Error::InvalidInput(format!(
                "grid needs positive cell sizes and counts (got {cell_width}×{cell_height}, {nx}×{ny})"
            )));
        }
        Ok(Self {
            origin,
            cell_width,
            cell_height,
            nx,
            ny,
        })
    }

    /// `nx × ny` cells tiling the rectangle `[xmin, xmax] × [ymin, ymax]`.
    pub fn covering(xmin: f64, ymin: f64, xmax: f64, ymax: f64, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidInput("grid needs at least one cell per axis".into()));
        }
        Self::new(
            Point2D::new(xmin, ymin),
            (xmax - xmin) / nx as f64,
            (ymax - ymin) / ny as f64,
            nx,
            ny,
        )
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_width * self.cell_height
    }

    /// `(xmin, ymin, xmax, ymax)` of the whole grid.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.x,
            self.origin.y,
            self.origin.x + self.nx as f64 * self.cell_width,
            self.origin.y + self.ny as f64 * self.cell_height,
        )
    }

    pub fn cell_bounds(&self, index: usize) -> (f64, f64, f64, f64) {
        let (ix, iy) = (index % self.nx, index / self.nx);
        let x0 = self.origin.x + ix as f64 * self.cell_width;
        let y0 = self.origin.y + iy as f64 * self.cell_height;
        (x0, y0, x0 + self.cell_width, y0 + self.cell_height)
    }

    pub fn centroid(&self, index: usize) -> Point2D {
        let (ix, iy) = (index % self.nx, index / self.nx);
        Point2D::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell_width,
            self.origin.y + (iy as f64 + 0.5) * self.cell_height,
        )
    }

    pub fn centroids(&self) -> Vec<Point2D> {
        (0..self.n_cells()).map(|k| self.centroid(k)).collect()
    }

    /// Half-open index range of cells along one axis meeting `[lo, hi]`.
    fn span(lo: f64, hi: f64, start: f64, step: f64, count: usize) -> (usize, usize) {
        let first = ((lo - start) / step).floor().max(0.0) as usize;
        let last = (((hi - start) / step).ceil().max(0.0) as usize).min(count);
        (first.min(count), last)
    }

    /// Indices along one axis whose cell centroids lie in `[lo, hi]`.
    fn centroid_span(lo: f64, hi: f64, start: f64, step: f64, count: usize) -> std::ops::Range<usize> {
        let first = ((lo - start) / step - 0.5).ceil().max(0.0) as usize;
        let last = ((hi - start) / step - 0.5).floor();
        if last < 0.0 {
            return 0..0;
        }
        first.min(count)..(last as usize + 1).min(count)
    }
}

/// Sparse block × cell weights; row `b` holds `(cell, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTable {
    pub block_ids: Vec<String>,
    pub entries: Vec<Vec<(usize, f64)>>,
    pub n_cells: usize,
}

impl OverlapTable {
    pub fn n_blocks(&self) -> usize {
        self.entries.len()
    }

    /// Block values `Σ_j h_bj · values_j`.
    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.n_cells {
            return Err(Error::InvalidInput(format!(
                "expected {} grid values, got {}",
                self.n_cells,
                values.len()
            )));
        }
        Ok(self
            .entries
            .iter()
            .map(|row| row.iter().map(|&(j, h)| h * values[j]).sum())
            .collect())
    }

    /// Applies the table to every column of a `cells × T` matrix.
    pub fn apply_columns(&self, surface: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if surface.nrows() != self.n_cells {
            return Err(Error::InvalidInput(format!(
                "expected {} grid rows, got {}",
                self.n_cells,
                surface.nrows()
            )));
        }
        let mut out = DMatrix::zeros(self.n_blocks(), surface.ncols());
        for t in 0..surface.ncols() {
            let col = surface.column(t);
            for (b, row) in self.entries.iter().enumerate() {
                out[(b, t)] = row.iter().map(|&(j, h)| h * col[j]).sum();
            }
        }
        Ok(out)
    }

    /// CSV with header `block_id,cell_index,h`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "block_id,cell_index,h")?;
        for (id, row) in self.block_ids.iter().zip(&self.entries) {
            for &(j, h) in row {
                writeln!(w, "{id},{j},{h:.17e}")?;
            }
        }
        Ok(())
    }
}

/// Area fractions below this are clipping round-off on touching edges.
const SLIVER: f64 = 1e-13;

/// Exact area-overlap table: `h_bj = |B_b ∩ G_j| / |B_b|`.
pub fn compute_overlaps(blocks: &[BlockGeometry], grid: &GridSpec) -> Result<OverlapTable> {
    let (gx0, gy0, gx1, gy1) = grid.bounds();
    let tol = 1e-9 * (gx1 - gx0).abs().max((gy1 - gy0).abs());
    let outside: Vec<String> = blocks
        .iter()
        .filter(|b| {
            let (x0, y0, x1, y1) = b.bbox();
            x0 < gx0 - tol || y0 < gy0 - tol || x1 > gx1 + tol || y1 > gy1 + tol
        })
        .map(|b| b.id.clone())
        .collect();
    if !outside.is_empty() {
        return Err(Error::BlocksOutsideGrid(outside));
    }
    let entries = blocks
        .iter()
        .map(|block| {
            let (x0, y0, x1, y1) = block.bbox();
            let (ix0, ix1) = GridSpec::span(x0, x1, gx0, grid.cell_width, grid.nx);
            let (iy0, iy1) = GridSpec::span(y0, y1, gy0, grid.cell_height, grid.ny);
            let mut row = Vec::new();
            for iy in iy0..iy1 {
                for ix in ix0..ix1 {
                    let cell = ix + iy * grid.nx;
                    let (cx0, cy0, cx1, cy1) = grid.cell_bounds(cell);
                    let h = block.clipped_area(cx0, cy0, cx1, cy1) / block.area();
                    if h > SLIVER {
                        row.push((cell, h.min(1.0)));
                    }
                }
            }
            row
        })
        .collect();
    Ok(OverlapTable {
        block_ids: blocks.iter().map(|b| b.id.clone()).collect(),
        entries,
        n_cells: grid.n_cells(),
    })
}

/// Equal weights over the cells whose centroids lie inside each block.
///
/// Blocks without an interior centroid are reported together.
pub fn centroid_table(blocks: &[BlockGeometry], grid: &GridSpec) -> Result<OverlapTable> {
    let (gx0, gy0, _, _) = grid.bounds();
    let mut empty = Vec::new();
    let entries: Vec<Vec<(usize, f64)>> = blocks
        .iter()
        .map(|block| {
            let (x0, y0, x1, y1) = block.bbox();
            let xs = GridSpec::centroid_span(x0, x1, gx0, grid.cell_width, grid.nx);
            let ys = GridSpec::centroid_span(y0, y1, gy0, grid.cell_height, grid.ny);
            let members: Vec<usize> = ys
                .flat_map(|iy| xs.clone().map(move |ix| ix + iy * grid.nx))
                .filter(|&cell| block.contains(grid.centroid(cell)))
                .collect();
            if members.is_empty() {
                empty.push(block.id.clone());
            }
            let w = 1.0 / members.len().max(1) as f64;
            members.into_iter().map(|cell| (cell, w)).collect()
        })
        .collect();
    if !empty.is_empty() {
        return Err(Error::EmptyBlocks(empty));
    }
    Ok(OverlapTable {
        block_ids: blocks.iter().map(|b| b.id.clone()).collect(),
        entries,
        n_cells: grid.n_cells(),
    })
}

/// Area-weighted block means.
pub fn method1(values: &[f64], table: &OverlapTable) -> Result<Vec<f64>> {
    table.apply(values)
}

/// Simple means over interior centroids.
pub fn method2(values: &[f64], blocks: &[BlockGeometry], grid: &GridSpec) -> Result<Vec<f64>> {
    centroid_table(blocks, grid)?.apply(values)
}

/// Which block aggregation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    AreaWeighted,
    CentroidMean,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 2] = [AggregationMethod::AreaWeighted, AggregationMethod::CentroidMean];

    /// `1` for area weighting, `2` for centroid means.
    pub fn number(self) -> u8 {
        match self {
            AggregationMethod::AreaWeighted => 1,
            AggregationMethod::CentroidMean => 2,
        }
    }

    pub fn table(self, blocks: &[BlockGeometry], grid: &GridSpec) -> Result<OverlapTable> {
        match self {
            AggregationMethod::AreaWeighted => compute_overlaps(blocks, grid),
            AggregationMethod::CentroidMean => centroid_table(blocks, grid),
        }
    }
}
