//! Deterministic virtual GPU running persistent kernels.
//!
//! The simulator owns every array a kernel touches. Each element has a home
//! in global memory and, when the residency map says so, a slot in the
//! register or shared-memory cache of exactly one thread block. Loads and
//! stores are routed through that map and counted per array, route,
//! category and direction.
//!
//! Routing rules for an element cached by block `t`:
//! - `t` loading a valid slot reads the cache; the first load of a cold slot
//!   reads global memory and fills the slot.
//! - `t` storing writes the slot and marks global memory stale, except in the
//!   last step, where the store goes straight to global memory.
//! - other blocks read global memory and fail with a stale-read error if
//!   the newest value only lives in the cache; they may never store.
//!
//! Steps are separated by a device-wide barrier, and every step may have
//! several phases with a barrier in between. An element written by one block
//! and touched by another in the same phase is reported as a data race,
//! whatever order the blocks run in.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::Residency;

/// Element type of simulated value arrays.
pub trait Real: num_traits::Float + Default + fmt::Debug + Send + Sync + 'static {
    const BYTES: u64;

    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite conversion")
    }
}

impl Real for f32 {
    const BYTES: u64 = 4;
}

impl Real for f64 {
    const BYTES: u64 = 8;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Interior,
    TbBoundary,
    Halo,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Interior, Category::TbBoundary, Category::Halo];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Global,
    Shared,
    Register,
}

impl Route {
    pub const ALL: [Route; 3] = [Route::Global, Route::Shared, Route::Register];

    fn index(self) -> usize {
        self as usize
    }

    fn of(residency: Residency) -> Route {
        match residency {
            Residency::Global => Route::Global,
            Residency::Shared => Route::Shared,
            Residency::Register => Route::Register,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Load,
    Store,
}

impl Mode {
    fn index(self) -> usize {
        self as usize
    }
}

/// Persistent launch geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualGrid {
    pub tb_count: usize,
    pub threads_per_tb: usize,
    pub tb_per_smx: usize,
    pub smx_count: usize,
}

impl VirtualGrid {
    pub fn new(tb_count: usize, threads_per_tb: usize, tb_per_smx: usize, smx_count: usize) -> Result<Self> {
        let g = VirtualGrid {
            tb_count,
            threads_per_tb,
            tb_per_smx,
            smx_count,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tb_count == 0 || self.threads_per_tb == 0 || self.tb_per_smx == 0 || self.smx_count == 0 {
            return Err(Error::InvalidGrid(format!(
                "all grid dimensions must be positive: {self:?}"
            )));
        }
        if self.tb_count > self.tb_per_smx * self.smx_count {
            return Err(Error::InvalidGrid(format!(
                "{} TBs over-subscribe {} SMX at {} TB/SMX",
                self.tb_count, self.smx_count, self.tb_per_smx
            )));
        }
        Ok(())
    }
}

/// Initial contents of an array. Shadow arrays carry no values; accesses to
/// them are counted and checked but the kernel keeps the data itself.
#[derive(Clone, Debug)]
pub enum ArrayInit<T> {
    Values(Vec<T>),
    Shadow(usize),
}

#[derive(Clone, Debug)]
pub struct ArrayDecl<T> {
    pub name: String,
    pub elem_bytes: u64,
    pub init: ArrayInit<T>,
    /// Flush dirty cached elements to global memory when the run ends.
    pub writeback: bool,
}

impl<T> ArrayDecl<T> {
    pub fn values(name: impl Into<String>, elem_bytes: u64, values: Vec<T>) -> Self {
        ArrayDecl {
            name: name.into(),
            elem_bytes,
            init: ArrayInit::Values(values),
            writeback: false,
        }
    }

    pub fn shadow(name: impl Into<String>, elem_bytes: u64, len: usize) -> Self {
        ArrayDecl {
            name: name.into(),
            elem_bytes,
            init: ArrayInit::Shadow(len),
            writeback: false,
        }
    }

    pub fn writeback(mut self) -> Self {
        self.writeback = true;
        self
    }

    fn len(&self) -> usize {
        match &self.init {
            ArrayInit::Values(v) => v.len(),
            ArrayInit::Shadow(n) => *n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidencyRange {
    pub array: String,
    pub start: usize,
    pub end: usize,
    pub residency: Residency,
    pub owner: usize,
}

/// Cached element ranges; everything not listed lives in global memory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidencyMap {
    ranges: Vec<ResidencyRange>,
}

impl ResidencyMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(&mut self, array: &str, start: usize, end: usize, residency: Residency, owner: usize) {
        if start < end && residency.is_cached() {
            self.ranges.push(ResidencyRange {
                array: array.to_string(),
                start,
                end,
                residency,
                owner,
            });
        }
    }

    pub fn ranges(&self) -> &[ResidencyRange] {
        &self.ranges
    }

    pub fn cached_elements(&self, array: &str, residency: Residency) -> usize {
        self.ranges
            .iter()
            .filter(|r| r.array == array && r.residency == residency)
            .map(|r| r.end - r.start)
            .sum()
    }
}

const VALID: u8 = 1;
const DIRTY: u8 = 2;
const MANY: u32 = u32::MAX;

struct ArrayState<T> {
    name: String,
    writeback: bool,
    shadow: bool,
    len: usize,
    gm: Vec<T>,
    cache: Vec<T>,
    residency: Vec<Residency>,
    owner: Vec<u32>,
    state: Vec<u8>,
    w_phase: Vec<u64>,
    w_tb: Vec<u32>,
    r_phase: Vec<u64>,
    r_tb: Vec<u32>,
}

impl<T: Real> ArrayState<T> {
    fn new(decl: ArrayDecl<T>) -> Self {
        let len = decl.len();
        let (gm, shadow) = match decl.init {
            ArrayInit::Values(v) => (v, false),
            ArrayInit::Shadow(_) => (Vec::new(), true),
        };
        ArrayState {
            name: decl.name,
            writeback: decl.writeback,
            shadow,
            len,
            cache: vec![T::zero(); if shadow { 0 } else { len }],
            gm,
            residency: vec![Residency::Global; len],
            owner: vec![0; len],
            state: vec![0; len],
            w_phase: vec![0; len],
            w_tb: vec![0; len],
            r_phase: vec![0; len],
            r_tb: vec![0; len],
        }
    }

    fn newest(&self, i: usize) -> T {
        if self.residency[i].is_cached() && self.state[i] & DIRTY != 0 {
            self.cache[i]
        } else {
            self.gm[i]
        }
    }
}

type Cell = [[[u64; 2]; 3]; 3];

/// Access counts per array, route, category and mode.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    cells: Vec<Cell>,
}

impl Counters {
    fn with_arrays(n: usize) -> Self {
        Counters {
            cells: vec![[[[0; 2]; 3]; 3]; n],
        }
    }

    fn bump(&mut self, array: usize, route: Route, category: Category, mode: Mode) {
        self.cells[array][route.index()][category.index()][mode.index()] += 1;
    }

    pub fn get(&self, array: usize, route: Route, category: Category, mode: Mode) -> u64 {
        self.cells[array][route.index()][category.index()][mode.index()]
    }

    /// Sum over all arrays.
    pub fn sum(&self, route: Route, category: Category, mode: Mode) -> u64 {
        (0..self.cells.len()).map(|a| self.get(a, route, category, mode)).sum()
    }

    /// Loads plus stores over all arrays for one route and category.
    pub fn accesses(&self, route: Route, category: Category) -> u64 {
        self.sum(route, category, Mode::Load) + self.sum(route, category, Mode::Store)
    }

    pub fn route_total(&self, route: Route) -> u64 {
        Category::ALL.iter().map(|&c| self.accesses(route, c)).sum()
    }

    fn add(&mut self, other: &Counters) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            for r in 0..3 {
                for c in 0..3 {
                    for m in 0..2 {
                        a[r][c][m] += b[r][c][m];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub elem_bytes: u64,
}

/// One non-zero counter line, used for both CSV and JSON output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRow {
    pub step: String,
    pub array: String,
    pub route: Route,
    pub category: Category,
    pub loads: u64,
    pub stores: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub steps: usize,
    pub global_elements: u64,
    pub shared_elements: u64,
    pub register_elements: u64,
    pub global_bytes: u64,
    pub rows: Vec<CounterRow>,
}

/// Exact access counts of one run. `total` is the sum of the setup
/// counters, every step and the final flush.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficReport {
    pub arrays: Vec<ArrayInfo>,
    pub setup: Counters,
    pub steps: Vec<Counters>,
    pub flush: Counters,
    pub total: Counters,
}

impl TrafficReport {
    fn new(arrays: Vec<ArrayInfo>) -> Self {
        let n = arrays.len();
        TrafficReport {
            arrays,
            setup: Counters::with_arrays(n),
            steps: Vec::new(),
            flush: Counters::with_arrays(n),
            total: Counters::with_arrays(n),
        }
    }

    /// Index of a named array.
    pub fn array(&self, name: &str) -> Option<usize> {
        self.arrays.iter().position(|a| a.name == name)
    }

    /// Total count for one named array, 0 if the array does not exist.
    pub fn count(&self, name: &str, route: Route, category: Category, mode: Mode) -> u64 {
        self.array(name).map_or(0, |a| self.total.get(a, route, category, mode))
    }

    pub fn global_bytes(&self) -> u64 {
        let mut bytes = 0;
        for (a, info) in self.arrays.iter().enumerate() {
            for c in Category::ALL {
                for m in [Mode::Load, Mode::Store] {
                    bytes += self.total.get(a, Route::Global, c, m) * info.elem_bytes;
                }
            }
        }
        bytes
    }

    fn rows(&self, label: &str, counters: &Counters) -> Vec<CounterRow> {
        let mut rows = Vec::new();
        for (a, info) in self.arrays.iter().enumerate() {
            for route in Route::ALL {
                for category in Category::ALL {
                    let loads = counters.get(a, route, category, Mode::Load);
                    let stores = counters.get(a, route, category, Mode::Store);
                    if loads + stores > 0 {
                        rows.push(CounterRow {
                            step: label.to_string(),
                            array: info.name.clone(),
                            route,
                            category,
                            loads,
                            stores,
                            bytes: (loads + stores) * info.elem_bytes,
                        });
                    }
                }
            }
        }
        rows
    }

    pub fn totals(&self) -> ReportTotals {
        ReportTotals {
            steps: self.steps.len(),
            global_elements: self.total.route_total(Route::Global),
            shared_elements: self.total.route_total(Route::Shared),
            register_elements: self.total.route_total(Route::Register),
            global_bytes: self.global_bytes(),
            rows: self.rows("total", &self.total),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.totals()).expect("report serializes")
    }

    /// Per-step counters as CSV, one row per non-zero counter.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut write = |rows: Vec<CounterRow>| -> Result<()> {
            for row in rows {
                w.serialize(row)
                    .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
            }
            Ok(())
        };
        write(self.rows("setup", &self.setup))?;
        for (i, step) in self.steps.iter().enumerate() {
            write(self.rows(&i.to_string(), step))?;
        }
        write(self.rows("flush", &self.flush))?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Where a phase sits in the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseCtx {
    /// `None` during setup phases.
    pub step: Option<usize>,
    pub phase: usize,
    pub steps: usize,
    pub tb_count: usize,
}

impl PhaseCtx {
    pub fn is_last_step(&self) -> bool {
        self.step == Some(self.steps.saturating_sub(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// A persistent kernel: a fixed set of arrays and a per-TB body for each
/// phase of each step.
pub trait Kernel<T: Real> {
    fn arrays(&self) -> Vec<ArrayDecl<T>>;

    fn setup_phases(&self) -> usize {
        0
    }

    fn phases_per_step(&self) -> usize {
        1
    }

    fn execute(&mut self, ctx: &PhaseCtx, port: &mut TbPort<'_, T>) -> Result<()>;

    /// Called at each barrier, after every TB finished the phase.
    fn after_phase(&mut self, _ctx: &PhaseCtx) -> Result<Control> {
        Ok(Control::Continue)
    }
}

/// Order in which TBs are evaluated inside a phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TbOrder {
    #[default]
    Forward,
    Reverse,
    Shuffled(u64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub order: TbOrder,
}

/// Global-memory state shared by all TBs during a run.
pub struct Memory<T> {
    arrays: Vec<ArrayState<T>>,
    counters: Counters,
    phase_id: u64,
    last_step: bool,
}

impl<T: Real> Memory<T> {
    fn new(decls: Vec<ArrayDecl<T>>, map: &ResidencyMap, tb_count: usize) -> Result<Self> {
        let mut arrays: Vec<ArrayState<T>> = decls.into_iter().map(ArrayState::new).collect();
        for (i, a) in arrays.iter().enumerate() {
            if arrays[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidArgument(format!("array `{}` declared twice", a.name)));
            }
        }
        for r in map.ranges() {
            let a = arrays
                .iter_mut()
                .find(|a| a.name == r.array)
                .ok_or_else(|| Error::InvalidPlan(format!("residency map names unknown array `{}`", r.array)))?;
            if r.end > a.len {
                return Err(Error::InvalidPlan(format!(
                    "cached range {}..{} exceeds `{}` (len {})",
                    r.start, r.end, a.name, a.len
                )));
            }
            if r.owner >= tb_count {
                return Err(Error::InvalidPlan(format!(
                    "cached range of `{}` owned by missing TB {}",
                    a.name, r.owner
                )));
            }
            for i in r.start..r.end {
                if a.residency[i].is_cached() {
                    return Err(Error::InvalidPlan(format!(
                        "`{}`[{i}] is assigned to two caches",
                        a.name
                    )));
                }
                a.residency[i] = r.residency;
                a.owner[i] = r.owner as u32;
            }
        }
        let n = arrays.len();
        Ok(Memory {
            arrays,
            counters: Counters::with_arrays(n),
            phase_id: 0,
            last_step: false,
        })
    }

    fn array_id(&self, name: &str) -> Result<usize> {
        self.arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::NotFound(format!("array `{name}`")))
    }
}

/// Handle through which one TB accesses memory during one phase.
pub struct TbPort<'a, T> {
    mem: &'a mut Memory<T>,
    tb: u32,
}

impl<T: Real> TbPort<'_, T> {
    pub fn tb(&self) -> usize {
        self.tb as usize
    }

    /// Resolves an array name once so hot loops can use the index.
    pub fn array(&self, name: &str) -> Result<usize> {
        self.mem.array_id(name)
    }

    fn check(&self, a: usize, i: usize) -> Result<()> {
        let arr = &self.mem.arrays[a];
        if i >= arr.len {
            return Err(Error::OutOfBounds {
                array: arr.name.clone(),
                index: i,
                len: arr.len,
            });
        }
        Ok(())
    }

    fn race(&self, a: usize, i: usize, other: u32) -> Error {
        Error::DataRace {
            array: self.mem.arrays[a].name.clone(),
            index: i,
            step: 0,
            phase: 0,
            reader: self.tb as usize,
            writer: other as usize,
        }
    }

    fn track_read(&mut self, a: usize, i: usize) -> Result<()> {
        let now = self.mem.phase_id;
        let tb = self.tb;
        let arr = &mut self.mem.arrays[a];
        if arr.w_phase[i] == now && arr.w_tb[i] != tb {
            let w = arr.w_tb[i];
            return Err(self.race(a, i, w));
        }
        if arr.r_phase[i] == now {
            if arr.r_tb[i] != tb {
                arr.r_tb[i] = MANY;
            }
        } else {
            arr.r_phase[i] = now;
            arr.r_tb[i] = tb;
        }
        Ok(())
    }

    fn track_write(&mut self, a: usize, i: usize) -> Result<()> {
        let now = self.mem.phase_id;
        let tb = self.tb;
        let arr = &mut self.mem.arrays[a];
        if arr.w_phase[i] == now && arr.w_tb[i] != tb {
            let w = arr.w_tb[i];
            return Err(self.race(a, i, w));
        }
        if arr.r_phase[i] == now && arr.r_tb[i] != tb {
            let r = arr.r_tb[i];
            let mut e = self.race(a, i, tb);
            if let Error::DataRace { reader, .. } = &mut e {
                *reader = if r == MANY { usize::MAX } else { r as usize };
            }
            return Err(e);
        }
        arr.w_phase[i] = now;
        arr.w_tb[i] = tb;
        Ok(())
    }

    fn route_load(&mut self, a: usize, i: usize) -> Result<Route> {
        let tb = self.tb;
        let arr = &mut self.mem.arrays[a];
        let res = arr.residency[i];
        if !res.is_cached() {
            return Ok(Route::Global);
        }
        if arr.owner[i] != tb {
            if arr.state[i] & DIRTY != 0 {
                return Err(Error::StaleRead {
                    array: arr.name.clone(),
                    index: i,
                    reader: tb as usize,
                    owner: arr.owner[i] as usize,
                });
            }
            return Ok(Route::Global);
        }
        if arr.state[i] & VALID != 0 {
            Ok(Route::of(res))
        } else {
            if !arr.shadow {
                arr.cache[i] = arr.gm[i];
            }
            arr.state[i] = VALID;
            Ok(Route::Global)
        }
    }

    fn do_load(&mut self, a: usize, i: usize, category: Category) -> Result<Route> {
        self.check(a, i)?;
        self.track_read(a, i)?;
        let route = self.route_load(a, i)?;
        self.mem.counters.bump(a, route, category, Mode::Load);
        Ok(route)
    }

    pub fn load(&mut self, a: usize, i: usize, category: Category) -> Result<T> {
        let route = self.do_load(a, i, category)?;
        let arr = &self.mem.arrays[a];
        if arr.shadow {
            return Err(Error::InvalidArgument(format!("`{}` holds no values", arr.name)));
        }
        Ok(if route == Route::Global {
            arr.gm[i]
        } else {
            arr.cache[i]
        })
    }

    /// Counted load from a shadow array.
    pub fn touch_load(&mut self, a: usize, i: usize, category: Category) -> Result<Route> {
        self.do_load(a, i, category)
    }

    fn do_store(&mut self, a: usize, i: usize, value: Option<T>, category: Category, publish: bool) -> Result<Route> {
        self.check(a, i)?;
        self.track_write(a, i)?;
        let tb = self.tb;
        let last = self.mem.last_step;
        let arr = &mut self.mem.arrays[a];
        let res = arr.residency[i];
        let route = if !res.is_cached() {
            Route::Global
        } else if arr.owner[i] != tb {
            return Err(Error::OwnershipViolation {
                array: arr.name.clone(),
                index: i,
                writer: tb as usize,
                owner: arr.owner[i] as usize,
            });
        } else if publish {
            arr.state[i] = VALID;
            if let Some(v) = value {
                arr.cache[i] = v;
            }
            Route::Global
        } else if last {
            arr.state[i] = 0;
            Route::Global
        } else {
            arr.state[i] = VALID | DIRTY;
            if let Some(v) = value {
                arr.cache[i] = v;
            }
            Route::of(res)
        };
        if route == Route::Global {
            if let Some(v) = value {
                arr.gm[i] = v;
            }
        }
        self.mem.counters.bump(a, route, category, Mode::Store);
        Ok(route)
    }

    pub fn store(&mut self, a: usize, i: usize, value: T, category: Category) -> Result<Route> {
        if self.mem.arrays[a].shadow {
            return Err(Error::InvalidArgument(format!(
                "`{}` holds no values",
                self.mem.arrays[a].name
            )));
        }
        self.do_store(a, i, Some(value), category, false)
    }

    /// Store that always reaches global memory and keeps a cached copy
    /// valid, so other blocks may read the element.
    pub fn publish(&mut self, a: usize, i: usize, value: T, category: Category) -> Result<Route> {
        if self.mem.arrays[a].shadow {
            return Err(Error::InvalidArgument(format!(
                "`{}` holds no values",
                self.mem.arrays[a].name
            )));
        }
        self.do_store(a, i, Some(value), category, true)
    }

    /// Counted store to a shadow array.
    pub fn touch_store(&mut self, a: usize, i: usize, category: Category) -> Result<Route> {
        self.do_store(a, i, None, category, false)
    }
}

/// Final memory contents and traffic of a run.
pub struct Execution<T> {
    arrays: Vec<ArrayState<T>>,
    pub report: TrafficReport,
    pub steps_run: usize,
}

impl<T: Real> Execution<T> {
    /// Global-memory contents after the final flush.
    pub fn global(&self, name: &str) -> Result<&[T]> {
        let a = self.find(name)?;
        Ok(&a.gm)
    }

    /// Newest value of every element, wherever it lives.
    pub fn newest(&self, name: &str) -> Result<Vec<T>> {
        let a = self.find(name)?;
        Ok((0..a.gm.len()).map(|i| a.newest(i)).collect())
    }

    fn find(&self, name: &str) -> Result<&ArrayState<T>> {
        self.arrays
            .iter()
            .find(|a| a.name == name && !a.shadow)
            .ok_or_else(|| Error::NotFound(format!("value array `{name}`")))
    }
}

fn tb_order(order: TbOrder, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    match order {
        TbOrder::Forward => {}
        TbOrder::Reverse => v.reverse(),
        TbOrder::Shuffled(_) => v.shuffle(rng),
    }
    v
}

fn run_phase<T: Real, K: Kernel<T>>(
    mem: &mut Memory<T>,
    kernel: &mut K,
    ctx: &PhaseCtx,
    opts: &RunOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Control> {
    mem.phase_id += 1;
    mem.last_step = ctx.is_last_step();
    for tb in tb_order(opts.order, ctx.tb_count, rng) {
        let mut port = TbPort { mem, tb: tb as u32 };
        kernel.execute(ctx, &mut port).map_err(|e| match e {
            Error::DataRace {
                array,
                index,
                reader,
                writer,
                ..
            } => Error::DataRace {
                array,
                index,
                step: ctx.step.unwrap_or(0),
                phase: ctx.phase,
                reader,
                writer,
            },
            other => other,
        })?;
    }
    kernel.after_phase(ctx)
}

/// Runs `kernel` as one persistent launch of `steps` steps.
pub fn run_persistent<T: Real, K: Kernel<T>>(
    grid: &VirtualGrid,
    steps: usize,
    map: &ResidencyMap,
    kernel: &mut K,
    opts: &RunOptions,
) -> Result<Execution<T>> {
    grid.validate()?;
    let decls = kernel.arrays();
    let infos = decls
        .iter()
        .map(|d| ArrayInfo {
            name: d.name.clone(),
            elem_bytes: d.elem_bytes,
        })
        .collect();
    let mut mem = Memory::new(decls, map, grid.tb_count)?;
    let mut report = TrafficReport::new(infos);
    let n = mem.arrays.len();
    let seed = match opts.order {
        TbOrder::Shuffled(s) => s,
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut stopped = false;
    for phase in 0..kernel.setup_phases() {
        let ctx = PhaseCtx {
            step: None,
            phase,
            steps,
            tb_count: grid.tb_count,
        };
        if run_phase(&mut mem, kernel, &ctx, opts, &mut rng)? == Control::Stop {
            stopped = true;
            break;
        }
    }
    report.setup = std::mem::replace(&mut mem.counters, Counters::with_arrays(n));

    let mut steps_run = 0;
    if !stopped {
        'steps: for step in 0..steps {
            for phase in 0..kernel.phases_per_step() {
                let ctx = PhaseCtx {
                    step: Some(step),
                    phase,
                    steps,
                    tb_count: grid.tb_count,
                };
                let control = run_phase(&mut mem, kernel, &ctx, opts, &mut rng)?;
                if control == Control::Stop {
                    report
                        .steps
                        .push(std::mem::replace(&mut mem.counters, Counters::with_arrays(n)));
                    steps_run = step + 1;
                    break 'steps;
                }
            }
            report
                .steps
                .push(std::mem::replace(&mut mem.counters, Counters::with_arrays(n)));
            steps_run = step + 1;
        }
    }

    for (a, arr) in mem.arrays.iter_mut().enumerate() {
        if !arr.writeback {
            continue;
        }
        for i in 0..arr.len {
            if arr.residency[i].is_cached() && arr.state[i] & DIRTY != 0 {
                if !arr.shadow {
                    arr.gm[i] = arr.cache[i];
                }
                arr.state[i] = VALID;
                report
                    .flush
                    .bump(a, Route::of(arr.residency[i]), Category::Interior, Mode::Load);
                report.flush.bump(a, Route::Global, Category::Interior, Mode::Store);
            }
        }
    }

    let mut total = report.setup.clone();
    for s in &report.steps {
        total.add(s);
    }
    total.add(&report.flush);
    report.total = total;

    Ok(Execution {
        arrays: mem.arrays,
        report,
        steps_run,
    })
}

/// Host-loop execution: nothing survives between launches, so every access
/// goes to global memory.
pub fn run_baseline<T: Real, K: Kernel<T>>(
    grid: &VirtualGrid,
    steps: usize,
    kernel: &mut K,
    opts: &RunOptions,
) -> Result<Execution<T>> {
    run_persistent(grid, steps, &ResidencyMap::new(), kernel, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Each TB owns a block of `v` and adds one per step; optional misbehaviour.
    struct Counter {
        n: usize,
        tbs: usize,
        cross_read: bool,
        cross_write: bool,
    }

    impl Counter {
        fn new(n: usize, tbs: usize) -> Self {
            Counter {
                n,
                tbs,
                cross_read: false,
                cross_write: false,
            }
        }
    }

    impl Kernel<f64> for Counter {
        fn arrays(&self) -> Vec<ArrayDecl<f64>> {
            vec![ArrayDecl::values("v", 8, vec![0.0; self.n]).writeback()]
        }

        fn execute(&mut self, _ctx: &PhaseCtx, port: &mut TbPort<'_, f64>) -> Result<()> {
            let a = port.array("v")?;
            let per = self.n / self.tbs;
            let tb = port.tb();
            for i in tb * per..(tb + 1) * per {
                let x = port.load(a, i, Category::Interior)?;
                port.store(a, i, x + 1.0, Category::Interior)?;
            }
            let other = ((tb + 1) % self.tbs) * per;
            if self.cross_read {
                port.load(a, other, Category::Halo)?;
            }
            if self.cross_write {
                port.store(a, other, 0.0, Category::Halo)?;
            }
            Ok(())
        }
    }

    fn grid(tbs: usize) -> VirtualGrid {
        VirtualGrid::new(tbs, 32, 1, tbs).unwrap()
    }

    fn full_map(n: usize, tbs: usize, res: Residency) -> ResidencyMap {
        let mut map = ResidencyMap::new();
        let per = n / tbs;
        for tb in 0..tbs {
            map.assign("v", tb * per, (tb + 1) * per, res, tb);
        }
        map
    }

    #[test]
    fn grid_rejects_oversubscription() {
        assert!(matches!(VirtualGrid::new(9, 32, 2, 4), Err(Error::InvalidGrid(_))));
        assert!(VirtualGrid::new(8, 32, 2, 4).is_ok());
    }

    #[test]
    fn baseline_counts_every_access() {
        let ex = run_baseline(&grid(4), 3, &mut Counter::new(16, 4), &RunOptions::default()).unwrap();
        assert_eq!(ex.global("v").unwrap(), &[3.0; 16]);
        let t = &ex.report.total;
        assert_eq!(t.sum(Route::Global, Category::Interior, Mode::Load), 48);
        assert_eq!(t.sum(Route::Global, Category::Interior, Mode::Store), 48);
        assert_eq!(ex.report.steps.len(), 3);
        for s in &ex.report.steps {
            assert_eq!(s.route_total(Route::Global), 32);
        }
    }

    #[test]
    fn cached_elements_touch_global_twice() {
        let map = full_map(16, 4, Residency::Shared);
        let ex = run_persistent(&grid(4), 5, &map, &mut Counter::new(16, 4), &RunOptions::default()).unwrap();
        assert_eq!(ex.global("v").unwrap(), &[5.0; 16]);
        let t = &ex.report.total;
        assert_eq!(t.route_total(Route::Global), 2 * 16);
        assert_eq!(t.route_total(Route::Shared), 2 * 4 * 16);
        assert_eq!(t.route_total(Route::Register), 0);
        assert_eq!(ex.report.flush.route_total(Route::Global), 0);
    }

    #[test]
    fn early_stop_flushes_dirty_writeback() {
        struct Stopper(Counter);
        impl Kernel<f64> for Stopper {
            fn arrays(&self) -> Vec<ArrayDecl<f64>> {
                self.0.arrays()
            }
            fn execute(&mut self, ctx: &PhaseCtx, port: &mut TbPort<'_, f64>) -> Result<()> {
                self.0.execute(ctx, port)
            }
            fn after_phase(&mut self, ctx: &PhaseCtx) -> Result<Control> {
                Ok(if ctx.step == Some(2) {
                    Control::Stop
                } else {
                    Control::Continue
                })
            }
        }
        let map = full_map(16, 4, Residency::Register);
        let ex = run_persistent(
            &grid(4),
            10,
            &map,
            &mut Stopper(Counter::new(16, 4)),
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(ex.steps_run, 3);
        assert_eq!(ex.global("v").unwrap(), &[3.0; 16]);
        assert_eq!(ex.report.flush.sum(Route::Global, Category::Interior, Mode::Store), 16);
        assert_eq!(ex.report.flush.sum(Route::Register, Category::Interior, Mode::Load), 16);
    }

    #[test]
    fn same_phase_cross_tb_access_is_a_race_in_any_order() {
        for order in [TbOrder::Forward, TbOrder::Reverse, TbOrder::Shuffled(7)] {
            let mut k = Counter::new(16, 4);
            k.cross_read = true;
            let err = run_baseline(&grid(4), 1, &mut k, &RunOptions { order }).err().unwrap();
            assert!(matches!(err, Error::DataRace { .. }), "{err}");
        }
    }

    #[test]
    fn foreign_store_to_cache_is_rejected() {
        let mut k = Counter::new(16, 4);
        k.cross_write = true;
        let map = full_map(16, 4, Residency::Shared);
        let err = run_persistent(&grid(4), 2, &map, &mut k, &RunOptions::default())
            .err()
            .unwrap();
        assert!(
            matches!(err, Error::OwnershipViolation { .. } | Error::DataRace { .. }),
            "{err}"
        );
    }

    #[test]
    fn stale_reads_are_detected() {
        struct Reader;
        impl Kernel<f64> for Reader {
            fn arrays(&self) -> Vec<ArrayDecl<f64>> {
                vec![ArrayDecl::values("v", 8, vec![0.0; 2])]
            }
            fn phases_per_step(&self) -> usize {
                2
            }
            fn execute(&mut self, ctx: &PhaseCtx, port: &mut TbPort<'_, f64>) -> Result<()> {
                let a = port.array("v")?;
                match (ctx.phase, port.tb()) {
                    (0, 0) => port.store(a, 0, 1.0, Category::Interior).map(|_| ()),
                    (1, 1) => port.load(a, 0, Category::Halo).map(|_| ()),
                    _ => Ok(()),
                }
            }
        }
        let mut map = ResidencyMap::new();
        map.assign("v", 0, 1, Residency::Register, 0);
        let err = run_persistent(&grid(2), 3, &map, &mut Reader, &RunOptions::default())
            .err()
            .unwrap();
        assert!(
            matches!(
                err,
                Error::StaleRead {
                    owner: 0,
                    reader: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn out_of_bounds_and_bad_maps() {
        struct Oob;
        impl Kernel<f64> for Oob {
            fn arrays(&self) -> Vec<ArrayDecl<f64>> {
                vec![ArrayDecl::values("v", 8, vec![0.0; 2])]
            }
            fn execute(&mut self, _: &PhaseCtx, port: &mut TbPort<'_, f64>) -> Result<()> {
                let a = port.array("v")?;
                port.load(a, 2, Category::Interior).map(|_| ())
            }
        }
        let err = run_baseline(&grid(1), 1, &mut Oob, &RunOptions::default())
            .err()
            .unwrap();
        assert!(matches!(err, Error::OutOfBounds { index: 2, len: 2, .. }));

        let mut map = ResidencyMap::new();
        map.assign("v", 0, 8, Residency::Shared, 0);
        map.assign("v", 4, 9, Residency::Shared, 1);
        let err = run_persistent(&grid(4), 1, &map, &mut Counter::new(16, 4), &RunOptions::default())
            .err()
            .unwrap();
        assert!(matches!(err, Error::InvalidPlan(_)));
    }

    #[test]
    fn report_serializations() {
        let map = full_map(16, 4, Residency::Shared);
        let ex = run_persistent(&grid(4), 2, &map, &mut Counter::new(16, 4), &RunOptions::default()).unwrap();
        let csv = ex.report.to_csv().unwrap();
        assert!(csv.starts_with("step,array,route,category,loads,stores,bytes"));
        assert!(csv.lines().any(|l| l == "0,v,global,interior,16,0,128"));
        let totals: ReportTotals = serde_json::from_str(&ex.report.to_json()).unwrap();
        assert_eq!(totals.global_elements, 32);
        assert_eq!(totals.global_bytes, 256);
    }
}
