//! Conjugate gradient as a persistent kernel on the virtual GPU.
//!
//! One CG iteration is five grid-synchronised phases:
//!
//! 0. merge-path SpMV `q = A p`, each TB on its own chunk of the path
//! 1. TB 0 finishes the rows that straddle chunk boundaries
//! 2. per-TB partial sums of `<p, q>`
//! 3. `alpha`, then `x += alpha p`, `r -= alpha q` and partials of `<r, r>`
//! 4. `beta`, convergence check and `p = r + beta p`
//!
//! Vectors are split into contiguous row blocks, one per TB. `p` is the only
//! vector other blocks read (through the SpMV gather), so its block owner
//! always publishes it to global memory.

use serde::Serialize;

use super::csr::CsrMatrix;
use super::merge::{
    combine, fixup, merge_partition, path_len, search, split_diagonal, walk_chunk, ChunkCarry, Level, MergePartition,
    PathCoord, SpmvSource,
};
use crate::device::DeviceSpec;
use crate::error::{Error, Result};
use crate::planner::{self, CachePlan, CgFootprint, CgPolicy, KernelUsage, Residency};
use crate::sim::{
    self, ArrayDecl, Category, Control, Execution, Kernel, PhaseCtx, ResidencyMap, RunOptions, TbOrder, TbPort,
    TrafficReport, VirtualGrid,
};

pub const VECTORS: [&str; 3] = ["r", "x", "p"];
const INDEX_BYTES: u64 = 4;
/// Start and end coordinates of a TB chunk.
const TMP_TB_ENTRIES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CgOptions {
    /// Stop once `<r, r> <= tol^2`.
    pub tol: f64,
    pub max_iters: usize,
    pub policy: CgPolicy,
    pub tb_size: usize,
    pub items_per_thread: usize,
    /// Defaults to one TB per `tb_size * items_per_thread` path steps, capped by the grid capacity.
    pub tb_count: Option<usize>,
    pub tb_per_smx: u32,
    /// Relaunch per phase with nothing cached, instead of one persistent launch.
    pub baseline: bool,
    /// Keep a copy of `x` and `r` after every iteration.
    pub record_iterates: bool,
    pub order: TbOrder,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: 1e-10,
            max_iters: 1000,
            policy: CgPolicy::Imp,
            tb_size: 128,
            items_per_thread: 8,
            tb_count: None,
            tb_per_smx: 1,
            baseline: false,
            record_iterates: false,
            order: TbOrder::Forward,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CgState {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub iteration: usize,
    /// `<r, r>` before the first iteration and after each one.
    pub residual_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub state: CgState,
    pub report: TrafficReport,
    pub converged: bool,
    pub tb_count: usize,
    pub plan: CachePlan,
    /// `(x, r)` after each iteration when requested.
    pub iterates: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Row blocks and merge-path chunks of a CG launch.
#[derive(Clone, Debug)]
pub struct CgLayout {
    pub n: usize,
    pub tb_count: usize,
    pub tb_size: usize,
    pub row_starts: Vec<usize>,
    pub partition: MergePartition,
    /// Slots per TB in the carry buffer: the open sum plus every leading product.
    pub carry_slots: usize,
}

impl CgLayout {
    pub fn new(mat: &CsrMatrix, tb_count: usize, tb_size: usize) -> Result<Self> {
        if tb_count == 0 || tb_size == 0 {
            return Err(Error::InvalidArgument(
                "CG needs at least one TB of at least one thread".into(),
            ));
        }
        let n = mat.n_rows();
        let partition = merge_partition(mat, tb_count, Level::Tb)?;
        let mut bounds = partition.bounds.clone();
        // the empty matrix collapses to a single chunk; give every TB one
        bounds.resize(tb_count + 1, *bounds.last().expect("bounds"));
        let partition = MergePartition {
            level: Level::Tb,
            bounds,
        };
        let carry_slots = 1
            + (0..tb_count)
                .map(|t| {
                    let (s, e) = partition.chunk(t);
                    e.nnz - s.nnz
                })
                .max()
                .unwrap_or(0);
        Ok(CgLayout {
            n,
            tb_count,
            tb_size,
            row_starts: (0..=tb_count).map(|t| split_diagonal(t, tb_count, n)).collect(),
            partition,
            carry_slots,
        })
    }

    pub fn rows(&self, tb: usize) -> std::ops::Range<usize> {
        self.row_starts[tb]..self.row_starts[tb + 1]
    }

    pub fn owner(&self, row: usize) -> usize {
        self.row_starts.partition_point(|&s| s <= row) - 1
    }

    pub fn footprint(&self) -> CgFootprint {
        let rows = (0..self.tb_count).map(|t| self.rows(t).len()).max().unwrap_or(0);
        let nnz = (0..self.tb_count)
            .map(|t| {
                let (s, e) = self.partition.chunk(t);
                e.nnz - s.nnz
            })
            .max()
            .unwrap_or(0);
        CgFootprint {
            tb_count: self.tb_count as u64,
            rows_per_tb: rows as u64,
            nnz_per_tb: nnz as u64,
            vectors: VECTORS.iter().map(|v| v.to_string()).collect(),
            value_bytes: 8,
            index_bytes: INDEX_BYTES,
            tmp_tb_bytes: TMP_TB_ENTRIES as u64 * INDEX_BYTES,
            tmp_t_bytes: self.tmp_t_entries() as u64 * INDEX_BYTES,
        }
    }

    fn tmp_t_entries(&self) -> usize {
        2 * self.tb_size
    }

    /// Translates per-TB plan units into element ranges.
    pub fn residency_map(&self, plan: &CachePlan) -> Result<ResidencyMap> {
        if plan.tb_count != self.tb_count as u64 {
            return Err(Error::InvalidPlan(format!(
                "plan is for {} TBs but the launch has {}",
                plan.tb_count, self.tb_count
            )));
        }
        let mut map = ResidencyMap::new();
        for res in [Residency::Register, Residency::Shared] {
            for v in VECTORS {
                let u = plan.units(v, res);
                for tb in 0..self.tb_count {
                    let rows = self.rows(tb);
                    let start = (rows.start + u.start).min(rows.end);
                    let end = (rows.start + u.end).min(rows.end);
                    map.assign(v, start, end, res, tb);
                }
            }
            let u = plan.units(planner::MATRIX, res);
            let chunk = planner::NNZ_CHUNK as usize;
            for tb in 0..self.tb_count {
                let (s, e) = self.partition.chunk(tb);
                let start = (s.nnz + u.start * chunk).min(e.nnz);
                let end = (s.nnz + u.end * chunk).min(e.nnz);
                map.assign("vals", start, end, res, tb);
                map.assign("cols", start, end, res, tb);
            }
            if !plan.units(planner::TMP_TB, res).is_empty() {
                for tb in 0..self.tb_count {
                    map.assign("tmp_tb", tb * TMP_TB_ENTRIES, (tb + 1) * TMP_TB_ENTRIES, res, tb);
                }
            }
            if !plan.units(planner::TMP_T, res).is_empty() {
                let s = self.tmp_t_entries();
                for tb in 0..self.tb_count {
                    map.assign("tmp_t", tb * s, (tb + 1) * s, res, tb);
                }
            }
        }
        Ok(map)
    }
}

/// Registers for `tb_size` threads at 64 registers each, plus a shared
/// reduction buffer of one value per thread.
pub fn default_usage(tb_size: usize) -> KernelUsage {
    KernelUsage::new(tb_size as u64 * 64 * 4, tb_size as u64 * 8)
}

/// TB count that gives each thread about `items_per_thread` path steps.
pub fn default_tb_count(mat: &CsrMatrix, opts: &CgOptions, capacity: usize) -> usize {
    let per_tb = (opts.tb_size * opts.items_per_thread).max(1);
    path_len(mat).div_ceil(per_tb).clamp(1, capacity.max(1))
}

struct CgKernel<'a> {
    mat: &'a CsrMatrix,
    b: &'a [f64],
    layout: &'a CgLayout,
    tol2: f64,
    /// Whether thread-level search results survive between iterations.
    keep_thread_search: bool,
    a: Arrays,
    rho: f64,
    rho_next: f64,
    alpha: f64,
    beta: f64,
    converged: bool,
    history: Vec<f64>,
    meta: Vec<(usize, bool)>,
    record: bool,
    snap_x: Vec<f64>,
    snap_r: Vec<f64>,
    iterates: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Array ids, resolved once per phase.
#[derive(Default, Clone, Copy)]
struct Arrays {
    b: usize,
    x: usize,
    r: usize,
    p: usize,
    q: usize,
    vals: usize,
    cols: usize,
    row_offsets: usize,
    tmp_tb: usize,
    tmp_t: usize,
    carry: usize,
    carry_meta: usize,
    part_rr: usize,
    part_pq: usize,
}

impl Arrays {
    fn resolve(port: &TbPort<'_, f64>) -> Result<Self> {
        Ok(Arrays {
            b: port.array("b")?,
            x: port.array("x")?,
            r: port.array("r")?,
            p: port.array("p")?,
            q: port.array("q")?,
            vals: port.array("vals")?,
            cols: port.array("cols")?,
            row_offsets: port.array("row_offsets")?,
            tmp_tb: port.array("tmp_tb")?,
            tmp_t: port.array("tmp_t")?,
            carry: port.array("carry")?,
            carry_meta: port.array("carry_meta")?,
            part_rr: port.array("part_rr")?,
            part_pq: port.array("part_pq")?,
        })
    }
}

/// SpMV reads of one TB, counted through its port.
struct PortSource<'p, 'm, 'k> {
    port: &'p mut TbPort<'m, f64>,
    a: Arrays,
    mat: &'k CsrMatrix,
    layout: &'k CgLayout,
}

impl SpmvSource for PortSource<'_, '_, '_> {
    fn row_end(&mut self, row: usize) -> Result<usize> {
        self.port.touch_load(self.a.row_offsets, row + 1, Category::Interior)?;
        Ok(self.mat.row_offsets()[row + 1])
    }

    fn entry(&mut self, k: usize) -> Result<(usize, f64)> {
        self.port.touch_load(self.a.cols, k, Category::Interior)?;
        let v = self.port.load(self.a.vals, k, Category::Interior)?;
        Ok((self.mat.col_indices()[k], v))
    }

    fn x(&mut self, col: usize) -> Result<f64> {
        let cat = if self.layout.owner(col) == self.port.tb() {
            Category::Interior
        } else {
            Category::Halo
        };
        self.port.load(self.a.p, col, cat)
    }
}

impl<'a> CgKernel<'a> {
    fn sum_partials(&self, port: &mut TbPort<'_, f64>, arr: usize) -> Result<f64> {
        let mut s = 0.0;
        for t in 0..self.layout.tb_count {
            s += port.load(arr, t, Category::Halo)?;
        }
        Ok(s)
    }

    /// Probing search on the TB's own part of the path.
    fn probe(&self, port: &mut TbPort<'_, f64>, d: usize, lo: PathCoord, hi: PathCoord) -> Result<PathCoord> {
        let offsets = self.mat.row_offsets();
        let mut probes = Vec::new();
        let c = search(d, lo, hi, |r| {
            probes.push(r + 1);
            offsets[r + 1]
        });
        for i in probes {
            port.touch_load(self.a.row_offsets, i, Category::Interior)?;
        }
        Ok(c)
    }

    fn setup(&mut self, ctx: &PhaseCtx, port: &mut TbPort<'_, f64>) -> Result<()> {
        let a = self.a;
        let tb = port.tb();
        match ctx.phase {
            0 => {
                let end = PathCoord {
                    row: self.mat.n_rows(),
                    nnz: self.mat.nnz(),
                };
                let (s, e) = self.layout.partition.chunk(tb);
                for d in [s.diagonal(), e.diagonal()] {
                    let c = self.probe(port, d, PathCoord::default(), end)?;
                    debug_assert!(c == s || c == e);
                }
                for k in 0..TMP_TB_ENTRIES {
                    port.touch_store(a.tmp_tb, tb * TMP_TB_ENTRIES + k, Category::Interior)?;
                }
                let mut rr = 0.0;
                for i in self.layout.rows(tb) {
                    let bi = port.load(a.b, i, Category::Interior)?;
                    port.store(a.x, i, 0.0, Category::Interior)?;
                    port.store(a.r, i, bi, Category::Interior)?;
                    port.publish(a.p, i, bi, Category::Interior)?;
                    rr += bi * bi;
                    if self.record {
                        self.snap_r[i] = bi;
                    }
                }
                port.store(a.part_rr, tb, rr, Category::Interior)?;
            }
            _ => {
                self.rho = self.sum_partials(port, a.part_rr)?;
            }
        }
        Ok(())
    }

    fn spmv(&mut self, ctx: &PhaseCtx, port: &mut TbPort<'_, f64>) -> Result<()> {
        let a = self.a;
        let tb = port.tb();
        for k in 0..TMP_TB_ENTRIES {
            port.touch_load(a.tmp_tb, tb * TMP_TB_ENTRIES + k, Category::Interior)?;
        }
        let (lo, hi) = self.layout.partition.chunk(tb);
        let len = hi.diagonal() - lo.diagonal();
        let threads = self.layout.tb_size;
        let base = tb * self.layout.tmp_t_entries();
        let reuse = self.keep_thread_search && ctx.step != Some(0);
        let mut cuts = Vec::with_capacity(threads + 1);
        for t in 0..threads {
            let d = lo.diagonal() + split_diagonal(t, threads, len);
            if reuse {
                port.touch_load(a.tmp_t, base + 2 * t, Category::Interior)?;
                port.touch_load(a.tmp_t, base + 2 * t + 1, Category::Interior)?;
                cuts.push(search(d, lo, hi, |r| self.mat.row_offsets()[r + 1]));
            } else {
                cuts.push(self.probe(port, d, lo, hi)?);
                if self.keep_thread_search {
                    port.touch_store(a.tmp_t, base + 2 * t, Category::Interior)?;
                    port.touch_store(a.tmp_t, base + 2 * t + 1, Category::Interior)?;
                }
            }
        }
        cuts.push(hi);

        let mut rows: Vec<(usize, f64)> = Vec::new();
        let mut carries: Vec<ChunkCarry> = Vec::with_capacity(threads);
        {
            let mut src = PortSource {
                port: &mut *port,
                a,
                mat: self.mat,
                layout: self.layout,
            };
            for w in cuts.windows(2) {
                carries.push(walk_chunk(&mut src, w[0], w[1], |r, v| {
                    rows.push((r, v));
                    Ok(())
                })?);
            }
        }
        let tb_carry = combine(&carries, |r, v| {
            rows.push((r, v));
            Ok(())
        })?;
        for (r, v) in rows {
            port.store(a.q, r, v, Category::Interior)?;
        }
        let slot = tb * self.layout.carry_slots;
        port.store(a.carry, slot, tb_carry.carry, Category::Interior)?;
        for (j, &v) in tb_carry.leading.iter().enumerate() {
            port.store(a.carry, slot + 1 + j, v, Category::Interior)?;
        }
        port.touch_store(a.carry_meta, 2 * tb, Category::Interior)?;
        port.touch_store(a.carry_meta, 2 * tb + 1, Category::Interior)?;
        self.meta[tb] = (tb_carry.leading.len(), tb_carry.closes_first);
        Ok(())
    }

    fn spmv_fixup(&mut self, port: &mut TbPort<'_, f64>) -> Result<()> {
        if port.tb() != 0 {
            return Ok(());
        }
        let a = self.a;
        let mut carries = Vec::with_capacity(self.layout.tb_count);
        for t in 0..self.layout.tb_count {
            port.touch_load(a.carry_meta, 2 * t, Category::Halo)?;
            port.touch_load(a.carry_meta, 2 * t + 1, Category::Halo)?;
            let (len, closes) = self.meta[t];
            let slot = t * self.layout.carry_slots;
            let leading = (0..len)
                .map(|j| port.load(a.carry, slot + 1 + j, Category::Halo))
                .collect::<Result<Vec<_>>>()?;
            let carry = if closes {
                port.load(a.carry, slot, Category::Halo)?
            } else {
                0.0
            };
            carries.push(ChunkCarry {
                first_row: self.layout.partition.chunk(t).0.row,
                leading,
                closes_first: closes,
                carry,
            });
        }
        fixup(&carries, |r, v| port.store(a.q, r, v, Category::Halo).map(|_| ()))
    }

    fn step(&mut self, ctx: &PhaseCtx, port: &mut TbPort<'_, f64>) -> Result<()> {
        let a = self.a;
        let tb = port.tb();
        match ctx.phase {
            0 => self.spmv(ctx, port)?,
            1 => self.spmv_fixup(port)?,
            2 => {
                let mut pq = 0.0;
                for i in self.layout.rows(tb) {
                    pq += port.load(a.p, i, Category::Interior)? * port.load(a.q, i, Category::Interior)?;
                }
                port.store(a.part_pq, tb, pq, Category::Interior)?;
            }
            3 => {
                let pq = self.sum_partials(port, a.part_pq)?;
                if pq.is_nan() || pq <= 0.0 {
                    return Err(Error::NotPositiveDefinite(pq, ctx.step.unwrap_or(0)));
                }
                let alpha = self.rho / pq;
                self.alpha = alpha;
                let mut rr = 0.0;
                for i in self.layout.rows(tb) {
                    let pi = port.load(a.p, i, Category::Interior)?;
                    let xi = port.load(a.x, i, Category::Interior)? + alpha * pi;
                    port.store(a.x, i, xi, Category::Interior)?;
                    let qi = port.load(a.q, i, Category::Interior)?;
                    let ri = port.load(a.r, i, Category::Interior)? - alpha * qi;
                    port.store(a.r, i, ri, Category::Interior)?;
                    rr += ri * ri;
                    if self.record {
                        self.snap_x[i] = xi;
                        self.snap_r[i] = ri;
                    }
                }
                port.store(a.part_rr, tb, rr, Category::Interior)?;
            }
            _ => {
                let rho_new = self.sum_partials(port, a.part_rr)?;
                self.rho_next = rho_new;
                if rho_new <= self.tol2 {
                    return Ok(());
                }
                let beta = rho_new / self.rho;
                self.beta = beta;
                for i in self.layout.rows(tb) {
                    let ri = port.load(a.r, i, Category::Interior)?;
                    let pi = port.load(a.p, i, Category::Interior)?;
                    port.publish(a.p, i, ri + beta * pi, Category::Interior)?;
                }
            }
        }
        Ok(())
    }
}

impl Kernel<f64> for CgKernel<'_> {
    fn arrays(&self) -> Vec<ArrayDecl<f64>> {
        let n = self.layout.n;
        let nnz = self.mat.nnz();
        let t = self.layout.tb_count;
        vec![
            ArrayDecl::values("b", 8, self.b.to_vec()),
            ArrayDecl::values("x", 8, vec![0.0; n]).writeback(),
            ArrayDecl::values("r", 8, vec![0.0; n]),
            ArrayDecl::values("p", 8, vec![0.0; n]),
            ArrayDecl::values("q", 8, vec![0.0; n]),
            ArrayDecl::values("vals", 8, self.mat.values().to_vec()),
            ArrayDecl::shadow("cols", INDEX_BYTES, nnz),
            ArrayDecl::shadow("row_offsets", INDEX_BYTES, n + 1),
            ArrayDecl::shadow("tmp_tb", INDEX_BYTES, t * TMP_TB_ENTRIES),
            ArrayDecl::shadow("tmp_t", INDEX_BYTES, t * self.layout.tmp_t_entries()),
            ArrayDecl::values("carry", 8, vec![0.0; t * self.layout.carry_slots]),
            ArrayDecl::shadow("carry_meta", INDEX_BYTES, 2 * t),
            ArrayDecl::values("part_rr", 8, vec![0.0; t]),
            ArrayDecl::values("part_pq", 8, vec![0.0; t]),
        ]
    }

    fn setup_phases(&self) -> usize {
        2
    }

    fn phases_per_step(&self) -> usize {
        5
    }

    fn execute(&mut self, ctx: &PhaseCtx, port: &mut TbPort<'_, f64>) -> Result<()> {
        self.a = Arrays::resolve(port)?;
        match ctx.step {
            None => self.setup(ctx, port),
            Some(_) => self.step(ctx, port),
        }
    }

    fn after_phase(&mut self, ctx: &PhaseCtx) -> Result<Control> {
        match (ctx.step, ctx.phase) {
            (None, 1) => {
                self.history.push(self.rho);
                if self.rho <= self.tol2 {
                    self.converged = true;
                    return Ok(Control::Stop);
                }
            }
            (Some(_), 3) if self.record => {
                self.iterates.push((self.snap_x.clone(), self.snap_r.clone()));
            }
            (Some(_), 4) => {
                self.history.push(self.rho_next);
                self.rho = self.rho_next;
                if self.rho <= self.tol2 {
                    self.converged = true;
                    return Ok(Control::Stop);
                }
            }
            _ => {}
        }
        Ok(Control::Continue)
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`, starting from zero.
pub fn cg_solve(mat: &CsrMatrix, b: &[f64], opts: &CgOptions, device: &DeviceSpec) -> Result<CgResult> {
    mat.check_symmetric()?;
    if b.len() != mat.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "right-hand side has {} entries for {} rows",
            b.len(),
            mat.n_rows()
        )));
    }
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {}",
            opts.tol
        )));
    }
    if opts.tb_per_smx == 0 {
        return Err(Error::InvalidArgument(
            "occupancy must be at least one TB per SMX".into(),
        ));
    }
    let capacity = opts.tb_per_smx as usize * device.smx_count() as usize;
    let tb_count = opts.tb_count.unwrap_or_else(|| default_tb_count(mat, opts, capacity));
    let layout = CgLayout::new(mat, tb_count, opts.tb_size)?;
    let grid = VirtualGrid::new(
        tb_count,
        opts.tb_size,
        opts.tb_per_smx as usize,
        device.smx_count() as usize,
    )?;

    let plan = if opts.baseline {
        CachePlan::empty(device.smx_count(), opts.tb_per_smx, tb_count as u64)
    } else {
        planner::plan_cg(
            opts.policy,
            &layout.footprint(),
            device,
            opts.tb_per_smx,
            default_usage(opts.tb_size),
        )?
    };
    let map = layout.residency_map(&plan)?;
    let n = mat.n_rows();
    let mut kernel = CgKernel {
        mat,
        b,
        layout: &layout,
        tol2: opts.tol * opts.tol,
        keep_thread_search: !plan.units(planner::TMP_T, Residency::Shared).is_empty()
            || !plan.units(planner::TMP_T, Residency::Register).is_empty(),
        a: Arrays::default(),
        rho: 0.0,
        rho_next: 0.0,
        alpha: 0.0,
        beta: 0.0,
        converged: false,
        history: Vec::new(),
        meta: vec![(0, false); tb_count],
        record: opts.record_iterates,
        snap_x: vec![0.0; if opts.record_iterates { n } else { 0 }],
        snap_r: vec![0.0; if opts.record_iterates { n } else { 0 }],
        iterates: Vec::new(),
    };
    let run = RunOptions { order: opts.order };
    let exec: Execution<f64> = if opts.baseline {
        sim::run_baseline(&grid, opts.max_iters, &mut kernel, &run)?
    } else {
        sim::run_persistent(&grid, opts.max_iters, &map, &mut kernel, &run)?
    };
    let x = exec.global("x")?.to_vec();
    let state = CgState {
        x: x.clone(),
        r: exec.newest("r")?,
        p: exec.newest("p")?,
        alpha: kernel.alpha,
        beta: kernel.beta,
        rho: kernel.rho,
        iteration: exec.steps_run,
        residual_history: kernel.history,
    };
    Ok(CgResult {
        x,
        state,
        report: exec.report,
        converged: kernel.converged,
        tb_count,
        plan,
        iterates: kernel.iterates,
    })
}

#[derive(Clone, Debug)]
pub struct PolicyRun {
    pub policy: CgPolicy,
    pub plan: CachePlan,
    pub report: TrafficReport,
    pub state: CgState,
}

/// Runs exactly `steps` iterations under each policy (stopping early only on
/// an exactly zero residual).
pub fn policy_traffic_compare(
    mat: &CsrMatrix,
    b: &[f64],
    policies: &[CgPolicy],
    steps: usize,
    base: &CgOptions,
    device: &DeviceSpec,
) -> Result<Vec<PolicyRun>> {
    policies
        .iter()
        .map(|&policy| {
            let opts = CgOptions {
                policy,
                max_iters: steps,
                // squares to zero
                tol: f64::MIN_POSITIVE,
                ..base.clone()
            };
            let res = cg_solve(mat, b, &opts, device)?;
            Ok(PolicyRun {
                policy,
                plan: res.plan,
                report: res.report,
                state: res.state,
            })
        })
        .collect()
}
