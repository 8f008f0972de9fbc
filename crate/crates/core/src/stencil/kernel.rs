use serde::{Deserialize, Serialize};

use super::grid::{apply, weights};
use super::{Grid, StencilSpec, TileLayout, TilingSpec};
use crate::device::DeviceSpec;
use crate::error::{Error, Result};
use crate::model::CacheSplit;
use crate::planner::{self, CachePlan, KernelUsage, Residency, StencilFootprint};
use crate::sim::{
    self, ArrayDecl, Category, Execution, Kernel, PhaseCtx, Real, ResidencyMap, RunOptions, TbPort, VirtualGrid,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Time loop on the host: one launch per step, halos read from the input grid.
    Baseline,
    /// One persistent launch; tiles exchange boundary strips through edge buffers.
    Perks,
}

/// Output of [`run_stencil`].
pub struct StencilRun<T> {
    pub grid: Grid<T>,
    pub report: sim::TrafficReport,
    pub layout: TileLayout,
    pub split: CacheSplit,
    pub steps: usize,
}

const GRIDS: [&str; 2] = ["grid0", "grid1"];
const EDGES: [&str; 2] = ["edge0", "edge1"];

struct StencilKernel<'a, T> {
    spec: &'a StencilSpec,
    layout: &'a TileLayout,
    input: &'a Grid<T>,
    weights: Vec<T>,
    exchange: bool,
    /// Tile plus halo, indexed with `pad` coordinates.
    buf: Vec<T>,
    pad: [usize; 3],
    out: Vec<T>,
}

impl<'a, T: Real> StencilKernel<'a, T> {
    fn new(spec: &'a StencilSpec, layout: &'a TileLayout, input: &'a Grid<T>, exchange: bool) -> Self {
        let pad = [0, 1, 2].map(|a| layout.tile[a] + 2 * layout.frame[a]);
        StencilKernel {
            spec,
            layout,
            input,
            weights: weights(spec),
            exchange,
            buf: vec![T::zero(); pad.iter().product()],
            pad,
            out: vec![T::zero(); layout.tile_cells()],
        }
    }

    fn buf_index(&self, c: [i32; 3]) -> usize {
        let f = self.layout.frame;
        let p = [0, 1, 2].map(|a| (c[a] + f[a] as i32) as usize);
        (p[2] * self.pad[1] + p[1]) * self.pad[0] + p[0]
    }
}

impl<T: Real> Kernel<T> for StencilKernel<'_, T> {
    fn arrays(&self) -> Vec<ArrayDecl<T>> {
        let mut a = vec![
            ArrayDecl::values(GRIDS[0], T::BYTES, self.input.data().to_vec()),
            ArrayDecl::values(GRIDS[1], T::BYTES, self.input.data().to_vec()),
        ];
        if self.exchange {
            let n = self.layout.tb_count * self.layout.halo_cells;
            a.push(ArrayDecl::values(EDGES[0], T::BYTES, vec![T::zero(); n]));
            a.push(ArrayDecl::values(EDGES[1], T::BYTES, vec![T::zero(); n]));
        }
        a
    }

    fn execute(&mut self, ctx: &PhaseCtx, port: &mut TbPort<'_, T>) -> Result<()> {
        let step = ctx.step.expect("stencils have no setup phase");
        let l = self.layout;
        let tb = port.tb();
        let src = port.array(GRIDS[step % 2])?;
        let dst = port.array(GRIDS[(step + 1) % 2])?;
        let t = l.tile;

        for z in 0..t[2] {
            for y in 0..t[1] {
                for x in 0..t[0] {
                    let c = [x as i32, y as i32, z as i32];
                    let gi = l.grid_index(l.global(tb, c));
                    let v = port.load(src, gi, l.category[l.local_index(x, y, z)])?;
                    let bi = self.buf_index(c);
                    self.buf[bi] = v;
                }
            }
        }

        let edges_in = if self.exchange && step > 0 {
            Some(port.array(EDGES[(step - 1) % 2])?)
        } else {
            None
        };
        for (g, group) in l.groups.iter().enumerate() {
            let from = edges_in.zip(l.neighbour(tb, group.dir));
            for (j, &c) in group.cells.iter().enumerate() {
                let v = match from {
                    Some((e, n)) => {
                        let idx = n * l.halo_cells + l.export_offset[l.opposite[g]] + j;
                        port.load(e, idx, Category::Halo)?
                    }
                    None => port.load(src, l.grid_index(l.global(tb, c)), Category::Halo)?,
                };
                let bi = self.buf_index(c);
                self.buf[bi] = v;
            }
        }

        for z in 0..t[2] {
            for y in 0..t[1] {
                for x in 0..t[0] {
                    let base = [x as i32, y as i32, z as i32];
                    let v = apply(&self.weights, |k| {
                        let o = self.spec.offsets[k];
                        self.buf[self.buf_index([base[0] + o[0], base[1] + o[1], base[2] + o[2]])]
                    });
                    self.out[l.local_index(x, y, z)] = v;
                }
            }
        }

        for z in 0..t[2] {
            for y in 0..t[1] {
                for x in 0..t[0] {
                    let li = l.local_index(x, y, z);
                    let gi = l.grid_index(l.global(tb, [x as i32, y as i32, z as i32]));
                    port.store(dst, gi, self.out[li], l.category[li])?;
                }
            }
        }

        if self.exchange {
            let e = port.array(EDGES[step % 2])?;
            let mut idx = tb * l.halo_cells;
            for g in 0..l.groups.len() {
                for c in l.export_cells(g) {
                    let li = l.local_index(c[0] as usize, c[1] as usize, c[2] as usize);
                    port.store(e, idx, self.out[li], Category::Halo)?;
                    idx += 1;
                }
            }
        }
        Ok(())
    }
}

/// Residency of both grid buffers according to `plan`.
fn residency_map(layout: &TileLayout, plan: &CachePlan) -> Result<ResidencyMap> {
    if plan.tb_count != layout.tb_count as u64 {
        return Err(Error::InvalidPlan(format!(
            "plan is for {} TBs but the tiling has {}",
            plan.tb_count, layout.tb_count
        )));
    }
    let mut map = ResidencyMap::new();
    for (region, units) in [
        (planner::INTERIOR, &layout.interior_units),
        (planner::TB_BOUNDARY, &layout.boundary_units),
    ] {
        let planned: usize = plan
            .allocations
            .iter()
            .filter(|a| a.region == region)
            .map(|a| a.units)
            .sum();
        if planned != 0 && planned != units.len() {
            return Err(Error::InvalidPlan(format!(
                "plan lists {planned} `{region}` units but the tile has {}",
                units.len()
            )));
        }
        for res in [Residency::Register, Residency::Shared] {
            for u in plan.units(region, res) {
                let run = units
                    .get(u)
                    .ok_or_else(|| Error::InvalidPlan(format!("`{region}` unit {u} does not exist")))?;
                for tb in 0..layout.tb_count {
                    let start = layout.grid_index(layout.global(tb, [run.x0 as i32, run.y as i32, run.z as i32]));
                    for name in GRIDS {
                        map.assign(name, start, start + run.len(), res, tb);
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Cells cached in shared memory and registers over the whole domain.
pub fn cache_split(layout: &TileLayout, plan: &CachePlan) -> CacheSplit {
    let cells = |res| -> u64 {
        [
            (planner::INTERIOR, &layout.interior_units),
            (planner::TB_BOUNDARY, &layout.boundary_units),
        ]
        .iter()
        .map(|(region, units)| {
            plan.units(region, res)
                .filter_map(|u| units.get(u))
                .map(|r| r.len() as u64)
                .sum::<u64>()
        })
        .sum::<u64>()
            * layout.tb_count as u64
    };
    CacheSplit::new(cells(Residency::Shared), cells(Residency::Register))
}

pub fn footprint(layout: &TileLayout, elem_bytes: u64) -> StencilFootprint {
    StencilFootprint {
        tb_count: layout.tb_count as u64,
        elem_bytes,
        interior_units: layout.interior_units.iter().map(|r| r.len() as u64).collect(),
        boundary_units: layout.boundary_units.iter().map(|r| r.len() as u64).collect(),
        halo_cells: layout.halo_cells as u64,
    }
}

/// On-chip use of the uncached kernel: 32 registers per thread and a
/// shared-memory tile with its halo.
pub fn default_usage(layout: &TileLayout, tiling: &TilingSpec, elem_bytes: u64) -> KernelUsage {
    let padded: usize = (0..3).map(|a| layout.tile[a] + 2 * layout.frame[a]).product();
    KernelUsage::new(tiling.threads_per_tb() as u64 * 32 * 4, padded as u64 * elem_bytes)
}

pub fn plan_for(
    layout: &TileLayout,
    elem_bytes: u64,
    device: &DeviceSpec,
    tb_per_smx: u32,
    usage: KernelUsage,
) -> Result<CachePlan> {
    planner::plan_stencil(&footprint(layout, elem_bytes), device, tb_per_smx, usage)
}

/// Runs `steps` sweeps of `spec` over `input` on the virtual GPU.
///
/// Baseline mode ignores `plan`. Perks mode without a plan caches nothing
/// but still runs persistently with edge exchange.
pub fn run_stencil<T: Real>(
    spec: &StencilSpec,
    input: &Grid<T>,
    tiling: &TilingSpec,
    steps: usize,
    mode: ExecMode,
    plan: Option<&CachePlan>,
    opts: &RunOptions,
) -> Result<StencilRun<T>> {
    input.interior(spec)?;
    let layout = TileLayout::new(spec, input.extents(), tiling)?;
    let threads = tiling.threads_per_tb();
    let exec: Execution<T>;
    let mut split = CacheSplit::default();
    match mode {
        ExecMode::Baseline => {
            let grid = VirtualGrid::new(layout.tb_count, threads, layout.tb_count, 1)?;
            let mut k = StencilKernel::new(spec, &layout, input, false);
            exec = sim::run_baseline(&grid, steps, &mut k, opts)?;
        }
        ExecMode::Perks => {
            let (grid, map) = match plan {
                Some(p) => {
                    let grid = VirtualGrid::new(layout.tb_count, threads, p.tb_per_smx as usize, p.smx_count as usize)?;
                    split = cache_split(&layout, p);
                    (grid, residency_map(&layout, p)?)
                }
                None => (
                    VirtualGrid::new(layout.tb_count, threads, layout.tb_count, 1)?,
                    ResidencyMap::new(),
                ),
            };
            let mut k = StencilKernel::new(spec, &layout, input, true);
            exec = sim::run_persistent(&grid, steps, &map, &mut k, opts)?;
        }
    }
    let data = exec.global(GRIDS[steps % 2])?.to_vec();
    Ok(StencilRun {
        grid: Grid::from_vec(input.extents(), data)?,
        report: exec.report,
        layout,
        split,
        steps,
    })
}
