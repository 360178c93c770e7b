//! The bundled study region: 98 irregular blocks tiling the unit square.
//!
//! Blocks are cells of a warped, jittered 10 × 10 vertex lattice. Cells shrink
//! towards the centre like an urban core, and two pairs of corner cells are
//! merged into larger peripheral blocks. The lattice keeps every block simple
//! and makes the blocks a partition of the square.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{blocks_from_geojson, BlockGeometry, Point2D, Polygon};

pub const N_BLOCKS: usize = 98;

/// Seed that produced the bundled layout.
pub const LAYOUT_SEED: u64 = 98;

const SIDE: usize = 10;
/// Relative size contrast between edge and centre cells.
const WARP: f64 = 0.25;
/// Jitter as a fraction of the smallest lattice spacing; below one half keeps
/// every quadrilateral simple.
const JITTER: f64 = 0.3;
/// Cells `(ix, iy)` merged with their right neighbour.
const MERGED: [(usize, usize); 2] = [(0, 0), (8, 9)];

const BUNDLED: &str = include_str!("../../data/blocks98.geojson");

fn warp(u: f64) -> f64 {
    u + WARP * (2.0 * std::f64::consts::PI * u).sin() / (2.0 * std::f64::consts::PI)
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Regenerates the layout on the unit square from `seed`.
pub fn generate_blocks(seed: u64) -> Result<Vec<BlockGeometry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ticks: Vec<f64> = (0..=SIDE).map(|i| warp(i as f64 / SIDE as f64)).collect();
    let min_gap = ticks.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let amplitude = JITTER * min_gap / 2.0;
    let mut vertex = vec![Point2D::new(0.0, 0.0); (SIDE + 1) * (SIDE + 1)];
    for iy in 0..=SIDE {
        for ix in 0..=SIDE {
            let mut jitter = || amplitude * (2.0 * rng.random::<f64>() - 1.0);
            // Boundary vertices slide along their edge; corners stay fixed.
            let dx = if ix == 0 || ix == SIDE { 0.0 } else { jitter() };
            let dy = if iy == 0 || iy == SIDE { 0.0 } else { jitter() };
            vertex[iy * (SIDE + 1) + ix] = Point2D::new(round6(ticks[ix] + dx), round6(ticks[iy] + dy));
        }
    }
    let v = |ix: usize, iy: usize| vertex[iy * (SIDE + 1) + ix];

    let mut blocks = Vec::with_capacity(N_BLOCKS);
    for iy in 0..SIDE {
        for ix in 0..SIDE {
            if MERGED.iter().any(|&(mx, my)| my == iy && mx + 1 == ix) {
                continue;
            }
            let outer = if MERGED.contains(&(ix, iy)) {
                vec![
                    v(ix, iy),
                    v(ix + 1, iy),
                    v(ix + 2, iy),
                    v(ix + 2, iy + 1),
                    v(ix + 1, iy + 1),
                    v(ix, iy + 1),
                ]
            } else {
                vec![v(ix, iy), v(ix + 1, iy), v(ix + 1, iy + 1), v(ix, iy + 1)]
            };
            let id = (blocks.len() + 1).to_string();
            blocks.push(BlockGeometry::new(id, vec![Polygon { outer, holes: vec![] }])?);
        }
    }
    debug_assert_eq!(blocks.len(), N_BLOCKS);
    Ok(blocks)
}

/// Multiplies every coordinate by `factor`.
pub fn scale_blocks(blocks: &[BlockGeometry], factor: f64) -> Result<Vec<BlockGeometry>> {
    let scale = |ring: &Vec<Point2D>| ring.iter().map(|p| Point2D::new(p.x * factor, p.y * factor)).collect();
    blocks
        .iter()
        .map(|b| {
            let polygons = b
                .polygons
                .iter()
                .map(|p| Polygon {
                    outer: scale(&p.outer),
                    holes: p.holes.iter().map(scale).collect(),
                })
                .collect();
            BlockGeometry::new(b.id.clone(), polygons)
        })
        .collect()
}

/// The bundled unit-square layout.
pub fn bundled_blocks() -> Result<Vec<BlockGeometry>> {
    blocks_from_geojson(BUNDLED)
}

/// The bundled layout rescaled to `[0, width]²`.
pub fn default_blocks(width: f64) -> Result<Vec<BlockGeometry>> {
    scale_blocks(&bundled_blocks()?, width)
}
