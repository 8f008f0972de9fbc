use serde::{Deserialize, Serialize};

use super::{Grid, Offset, StencilSpec};
use crate::error::{Error, Result};
use crate::sim::{Category, Real};

/// Tile shape and work split of one thread block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingSpec {
    /// Cells per tile along x, y, z (z is 1 for 2D).
    pub tile: [usize; 3],
    pub items_per_thread: usize,
}

impl TilingSpec {
    pub fn new(tile: &[usize], items_per_thread: usize) -> Result<Self> {
        if !(2..=3).contains(&tile.len()) || tile.contains(&0) || items_per_thread == 0 {
            return Err(Error::InvalidArgument(format!(
                "tile {tile:?} with {items_per_thread} items per thread is not a valid tiling"
            )));
        }
        let t = TilingSpec {
            tile: [tile[0], tile[1], tile.get(2).copied().unwrap_or(1)],
            items_per_thread,
        };
        if !t.cells().is_multiple_of(items_per_thread) {
            return Err(Error::InvalidArgument(format!(
                "{} tile cells do not split into {items_per_thread} items per thread",
                t.cells()
            )));
        }
        Ok(t)
    }

    /// 256 threads with 8 items each: 256x8 tiles in 2D, 32x8x8 in 3D.
    pub fn default_for(dims: usize) -> Self {
        if dims == 3 {
            TilingSpec::new(&[32, 8, 8], 8).expect("valid default")
        } else {
            TilingSpec::new(&[256, 8], 8).expect("valid default")
        }
    }

    pub fn cells(&self) -> usize {
        self.tile.iter().product()
    }

    pub fn threads_per_tb(&self) -> usize {
        self.cells() / self.items_per_thread
    }
}

/// Halo cells of one tile on one side, in local tile coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HaloGroup {
    /// Side of the tile, one sign per axis.
    pub dir: Offset,
    pub cells: Vec<Offset>,
    /// True for groups lying only left/right of the tile; these are stored
    /// column by column so that every vertical edge is one contiguous run.
    pub transposed: bool,
}

/// A run of cells along x inside one tile row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub y: usize,
    pub z: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Run {
    pub fn len(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn is_empty(&self) -> bool {
        self.x1 == self.x0
    }
}

/// How a domain is cut into tiles and which cells each tile exchanges.
#[derive(Clone, Debug, PartialEq)]
pub struct TileLayout {
    pub dims: usize,
    pub rad: usize,
    /// Width of the fixed frame per axis (0 on the z axis of 2D grids).
    pub frame: [usize; 3],
    pub grid_ext: [usize; 3],
    pub interior: [usize; 3],
    pub tile: [usize; 3],
    pub tiles: [usize; 3],
    pub tb_count: usize,
    pub groups: Vec<HaloGroup>,
    /// `opposite[g]` is the group on the other side of `groups[g]`.
    pub opposite: Vec<usize>,
    /// Start of the block exported towards `groups[g].dir` inside a tile's
    /// edge record.
    pub export_offset: Vec<usize>,
    pub halo_cells: usize,
    /// Per local tile cell: interior or TB boundary (exported to a neighbour).
    pub category: Vec<Category>,
    pub interior_units: Vec<Run>,
    pub boundary_units: Vec<Run>,
}

fn sign(v: i64, len: usize) -> i32 {
    if v < 0 {
        -1
    } else if v >= len as i64 {
        1
    } else {
        0
    }
}

impl TileLayout {
    pub fn new(spec: &StencilSpec, grid_ext: &[usize], tiling: &TilingSpec) -> Result<Self> {
        if grid_ext.len() != spec.dims {
            return Err(Error::InvalidDomain(format!(
                "{}D stencil on a {}D grid",
                spec.dims,
                grid_ext.len()
            )));
        }
        let dims = spec.dims;
        let rad = spec.rad;
        let mut frame = [rad, rad, rad];
        let mut ext = [1; 3];
        ext[..dims].copy_from_slice(grid_ext);
        if dims == 2 {
            frame[2] = 0;
            if tiling.tile[2] != 1 {
                return Err(Error::InvalidArgument("2D tiling must have a z tile of 1".into()));
            }
        }
        let mut interior = [1; 3];
        let mut tiles = [1; 3];
        for a in 0..3 {
            if ext[a] < 2 * frame[a] + 1 {
                return Err(Error::InvalidDomain(format!(
                    "extent {} on axis {a} leaves no interior for {}",
                    ext[a], spec.name
                )));
            }
            interior[a] = ext[a] - 2 * frame[a];
            let t = tiling.tile[a];
            if interior[a] % t != 0 {
                return Err(Error::InvalidDomain(format!(
                    "tile {t} does not divide the interior extent {} on axis {a}",
                    interior[a]
                )));
            }
            if a < dims && t < rad {
                return Err(Error::InvalidDomain(format!(
                    "tile {t} on axis {a} is narrower than radius {rad}"
                )));
            }
            tiles[a] = interior[a] / t;
        }
        let t = tiling.tile;

        let mut halo: Vec<Offset> = Vec::new();
        for z in 0..t[2] {
            for y in 0..t[1] {
                for x in 0..t[0] {
                    for o in &spec.offsets {
                        let c = [x as i32 + o[0], y as i32 + o[1], z as i32 + o[2]];
                        let inside = (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < t[a]);
                        if !inside {
                            halo.push(c);
                        }
                    }
                }
            }
        }
        halo.sort_unstable();
        halo.dedup();

        let dir_of = |c: &Offset| -> Offset { [0, 1, 2].map(|a| sign(c[a] as i64, t[a])) };
        let mut dirs: Vec<Offset> = halo.iter().map(dir_of).collect();
        dirs.sort_unstable_by_key(|d| [d[2], d[1], d[0]]);
        dirs.dedup();
        let mut groups: Vec<HaloGroup> = dirs
            .iter()
            .map(|&dir| {
                let transposed = dir[0] != 0 && dir[1] == 0 && dir[2] == 0;
                let mut cells: Vec<Offset> = halo.iter().copied().filter(|c| dir_of(c) == dir).collect();
                if transposed {
                    cells.sort_unstable_by_key(|c| [c[0], c[2], c[1]]);
                } else {
                    cells.sort_unstable_by_key(|c| [c[2], c[1], c[0]]);
                }
                HaloGroup { dir, cells, transposed }
            })
            .collect();
        groups.shrink_to_fit();

        let opposite = groups
            .iter()
            .map(|g| {
                let neg = [-g.dir[0], -g.dir[1], -g.dir[2]];
                groups.iter().position(|h| h.dir == neg).ok_or_else(|| {
                    Error::InvalidArgument(format!("{} is not symmetric: no halo opposite {:?}", spec.name, g.dir))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut export_offset = Vec::with_capacity(groups.len());
        let mut off = 0;
        for g in 0..groups.len() {
            export_offset.push(off);
            off += groups[opposite[g]].cells.len();
        }
        let halo_cells = halo.len();
        debug_assert_eq!(off, halo_cells);

        let local = |x: usize, y: usize, z: usize| (z * t[1] + y) * t[0] + x;
        let mut category = vec![Category::Interior; t.iter().product()];
        for (g, group) in groups.iter().enumerate() {
            for c in &groups[opposite[g]].cells {
                let p = [0, 1, 2].map(|a| (c[a] + group.dir[a] * t[a] as i32) as usize);
                category[local(p[0], p[1], p[2])] = Category::TbBoundary;
            }
        }

        let mut interior_units = Vec::new();
        let mut boundary_units = Vec::new();
        for z in 0..t[2] {
            for y in 0..t[1] {
                let mut x0 = 0;
                while x0 < t[0] {
                    let cat = category[local(x0, y, z)];
                    let mut x1 = x0 + 1;
                    while x1 < t[0] && category[local(x1, y, z)] == cat {
                        x1 += 1;
                    }
                    let run = Run { y, z, x0, x1 };
                    if cat == Category::Interior {
                        interior_units.push(run);
                    } else {
                        boundary_units.push(run);
                    }
                    x0 = x1;
                }
            }
        }

        Ok(TileLayout {
            dims,
            rad,
            frame,
            grid_ext: ext,
            interior,
            tile: t,
            tiles,
            tb_count: tiles.iter().product(),
            groups,
            opposite,
            export_offset,
            halo_cells,
            category,
            interior_units,
            boundary_units,
        })
    }

    pub fn tile_cells(&self) -> usize {
        self.tile.iter().product()
    }

    pub fn interior_cells(&self) -> u64 {
        self.interior.iter().product::<usize>() as u64
    }

    pub fn tile_coords(&self, tb: usize) -> [usize; 3] {
        [
            tb % self.tiles[0],
            (tb / self.tiles[0]) % self.tiles[1],
            tb / (self.tiles[0] * self.tiles[1]),
        ]
    }

    /// Neighbouring tile in direction `dir`, if it exists.
    pub fn neighbour(&self, tb: usize, dir: Offset) -> Option<usize> {
        let c = self.tile_coords(tb);
        let mut n = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + dir[a] as i64;
            if v < 0 || v >= self.tiles[a] as i64 {
                return None;
            }
            n[a] = v as usize;
        }
        Some((n[2] * self.tiles[1] + n[1]) * self.tiles[0] + n[0])
    }

    /// Grid coordinate of a tile's local cell (which may lie in the halo).
    pub fn global(&self, tb: usize, local: Offset) -> [usize; 3] {
        let c = self.tile_coords(tb);
        [0, 1, 2].map(|a| (self.frame[a] as i64 + (c[a] * self.tile[a]) as i64 + local[a] as i64) as usize)
    }

    pub fn grid_index(&self, p: [usize; 3]) -> usize {
        (p[2] * self.grid_ext[1] + p[1]) * self.grid_ext[0] + p[0]
    }

    pub fn local_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.tile[1] + y) * self.tile[0] + x
    }

    /// Cells of `groups[g]` seen from the tile on the other side, i.e. the
    /// block a tile exports towards `groups[g].dir`, in local coordinates.
    pub fn export_cells(&self, g: usize) -> impl Iterator<Item = Offset> + '_ {
        let dir = self.groups[g].dir;
        let t = self.tile;
        self.groups[self.opposite[g]]
            .cells
            .iter()
            .map(move |c| [0, 1, 2].map(|a| c[a] + dir[a] * t[a] as i32))
    }
}

/// Boundary strips of every tile packed into contiguous per-direction blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBuffers<T> {
    pub halo_cells: usize,
    pub data: Vec<T>,
}

impl<T: Real> EdgeBuffers<T> {
    /// Block a tile exports towards `groups[g].dir`.
    pub fn edge<'a>(&'a self, layout: &TileLayout, tb: usize, g: usize) -> &'a [T] {
        let start = tb * self.halo_cells + layout.export_offset[g];
        let len = layout.groups[layout.opposite[g]].cells.len();
        &self.data[start..start + len]
    }
}

/// Copies each tile's exported cells into its edge blocks; vertical edges
/// end up column-contiguous.
pub fn pack_halo_edges<T: Real>(grid: &Grid<T>, layout: &TileLayout) -> Result<EdgeBuffers<T>> {
    check_grid(grid, layout)?;
    let mut data = Vec::with_capacity(layout.tb_count * layout.halo_cells);
    for tb in 0..layout.tb_count {
        for g in 0..layout.groups.len() {
            for c in layout.export_cells(g) {
                data.push(grid.data()[layout.grid_index(layout.global(tb, c))]);
            }
        }
    }
    Ok(EdgeBuffers {
        halo_cells: layout.halo_cells,
        data,
    })
}

/// Inverse of [`pack_halo_edges`]: writes every edge block back into `grid`.
pub fn unpack_halo_edges<T: Real>(edges: &EdgeBuffers<T>, layout: &TileLayout, grid: &mut Grid<T>) -> Result<()> {
    check_grid(grid, layout)?;
    if edges.data.len() != layout.tb_count * layout.halo_cells {
        return Err(Error::InvalidArgument("edge buffers do not match the tiling".into()));
    }
    let mut k = 0;
    for tb in 0..layout.tb_count {
        for g in 0..layout.groups.len() {
            for c in layout.export_cells(g) {
                let p = layout.global(tb, c);
                grid.set(p[0], p[1], p[2], edges.data[k]);
                k += 1;
            }
        }
    }
    Ok(())
}

fn check_grid<T: Real>(grid: &Grid<T>, layout: &TileLayout) -> Result<()> {
    if grid.ext3() != layout.grid_ext {
        return Err(Error::InvalidDomain(format!(
            "grid {:?} does not match the layout's {:?}",
            grid.extents(),
            &layout.grid_ext[..layout.dims]
        )));
    }
    Ok(())
}
