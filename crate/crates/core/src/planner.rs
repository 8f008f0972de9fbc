//! Register / shared-memory cache planning under per-SMX budgets.
//!
//! Plans are built per thread block: every block gets the same share of the
//! free on-chip storage and fills it greedily from an ordered list of units
//! (stencil row segments, CG vector rows or nnz chunks). Registers are filled
//! first, then shared memory continues from where registers stopped. Filling
//! stops at the first unit that does not fit, so the cached set is always a
//! prefix of the unit list and shrinks monotonically with the budget.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::device::DeviceSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependencyClass {
    /// Produced and consumed by the same thread block.
    NoInterTb,
    /// Produced by one block, also read by neighbours.
    InterTb,
    /// Owned by another block; never worth caching.
    Halo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    Register,
    Shared,
    Global,
}

impl Residency {
    pub fn is_cached(self) -> bool {
        self != Residency::Global
    }
}

impl fmt::Display for Residency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Residency::Register => "register",
            Residency::Shared => "shared",
            Residency::Global => "global",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRegion {
    pub name: String,
    pub bytes: u64,
    pub dependency_class: DependencyClass,
    pub loads_per_step: f64,
    pub stores_per_step: f64,
}

/// Cache rank of a region, lower first. `None` means never cache.
pub fn region_priority(region: &DataRegion) -> Option<u32> {
    match region.dependency_class {
        DependencyClass::NoInterTb => Some(0),
        DependencyClass::InterTb => Some(1),
        DependencyClass::Halo => None,
    }
}

/// Per-TB on-chip usage of the kernel itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelUsage {
    pub reg_bytes_per_tb: u64,
    pub sm_bytes_per_tb: u64,
}

impl KernelUsage {
    pub fn new(reg_bytes_per_tb: u64, sm_bytes_per_tb: u64) -> Self {
        KernelUsage {
            reg_bytes_per_tb,
            sm_bytes_per_tb,
        }
    }

    /// Registers the compiler spends beyond the nominal kernel, e.g. 48 extra
    /// 4-byte registers per thread, which shrink the register cache.
    pub fn with_extra_registers(mut self, regs_per_thread: u64, threads_per_tb: u64) -> Self {
        self.reg_bytes_per_tb += regs_per_thread * 4 * threads_per_tb;
        self
    }
}

/// Free bytes per SMX.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub reg_free: u64,
    pub sm_free: u64,
}

pub fn cacheable_budget(spec: &DeviceSpec, tb_per_smx: u32, usage: KernelUsage) -> Result<Budget> {
    if tb_per_smx == 0 {
        return Err(Error::InvalidArgument("occupancy must be at least 1 TB/SMX".into()));
    }
    let occ = tb_per_smx as u64;
    Ok(Budget {
        reg_free: spec.reg_bytes_per_smx().saturating_sub(usage.reg_bytes_per_tb * occ),
        sm_free: spec.shared_bytes_per_smx().saturating_sub(usage.sm_bytes_per_tb * occ),
    })
}

/// A run of same-region units offered to the greedy fill.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitGroup {
    pub region: String,
    pub unit_bytes: Vec<u64>,
    pub allow_register: bool,
    pub allow_shared: bool,
}

impl UnitGroup {
    pub fn new(region: impl Into<String>, unit_bytes: Vec<u64>) -> Self {
        UnitGroup {
            region: region.into(),
            unit_bytes,
            allow_register: true,
            allow_shared: true,
        }
    }

    pub fn shared_only(mut self) -> Self {
        self.allow_register = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub region: String,
    pub residency: Residency,
    /// Unit range within the region, identical for every TB.
    pub first_unit: usize,
    pub units: usize,
    pub bytes_per_tb: u64,
    /// `bytes_per_tb * tb_count`.
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePlan {
    pub smx_count: u32,
    pub tb_per_smx: u32,
    pub tb_count: u64,
    /// Free bytes per SMX available to the cache.
    pub budget_reg: u64,
    pub budget_sm: u64,
    pub allocations: Vec<Allocation>,
}

impl CachePlan {
    /// A plan that keeps everything in global memory.
    pub fn empty(smx_count: u32, tb_per_smx: u32, tb_count: u64) -> Self {
        CachePlan {
            smx_count,
            tb_per_smx,
            tb_count,
            budget_reg: 0,
            budget_sm: 0,
            allocations: Vec::new(),
        }
    }

    /// Unit range of `region` held in `residency`, empty if none.
    pub fn units(&self, region: &str, residency: Residency) -> Range<usize> {
        self.allocations
            .iter()
            .find(|a| a.region == region && a.residency == residency)
            .map(|a| a.first_unit..a.first_unit + a.units)
            .unwrap_or(0..0)
    }

    pub fn residency_of(&self, region: &str, unit: usize) -> Residency {
        self.allocations
            .iter()
            .find(|a| {
                a.region == region && a.residency.is_cached() && (a.first_unit..a.first_unit + a.units).contains(&unit)
            })
            .map_or(Residency::Global, |a| a.residency)
    }

    pub fn bytes_in(&self, residency: Residency) -> u64 {
        self.allocations
            .iter()
            .filter(|a| a.residency == residency)
            .map(|a| a.bytes)
            .sum()
    }

    pub fn bytes_per_tb_in(&self, residency: Residency) -> u64 {
        self.allocations
            .iter()
            .filter(|a| a.residency == residency)
            .map(|a| a.bytes_per_tb)
            .sum()
    }

    /// Per-SMX and aggregate budget checks.
    pub fn validate(&self) -> Result<()> {
        if self.tb_count > self.tb_per_smx as u64 * self.smx_count as u64 {
            return Err(Error::InvalidPlan(format!(
                "{} TBs do not fit on {} SMX at {} TB/SMX",
                self.tb_count, self.smx_count, self.tb_per_smx
            )));
        }
        for (res, budget) in [
            (Residency::Register, self.budget_reg),
            (Residency::Shared, self.budget_sm),
        ] {
            let per_smx = self.bytes_per_tb_in(res) * self.tb_per_smx as u64;
            if per_smx > budget {
                return Err(Error::InvalidPlan(format!(
                    "{res} cache needs {per_smx} B/SMX but only {budget} B/SMX are free"
                )));
            }
            if self.bytes_in(res) > budget * self.smx_count as u64 {
                return Err(Error::InvalidPlan(format!(
                    "{res} cache exceeds the device-wide budget"
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: CachePlan = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// Greedy prefix fill of `groups` with per-TB register and shared budgets.
pub fn fill_units(groups: &[UnitGroup], reg_per_tb: u64, sm_per_tb: u64, tb_count: u64) -> Vec<Allocation> {
    let mut taken: Vec<(usize, Residency, Range<usize>, u64)> = Vec::new();
    let (mut g, mut u) = (0usize, 0usize);

    for (residency, mut left, allowed) in [
        (
            Residency::Register,
            reg_per_tb,
            (|x: &UnitGroup| x.allow_register) as fn(&UnitGroup) -> bool,
        ),
        (Residency::Shared, sm_per_tb, |x: &UnitGroup| x.allow_shared),
    ] {
        while g < groups.len() {
            let group = &groups[g];
            if !allowed(group) {
                break;
            }
            let start = u;
            let mut bytes = 0;
            while u < group.unit_bytes.len() && group.unit_bytes[u] <= left {
                left -= group.unit_bytes[u];
                bytes += group.unit_bytes[u];
                u += 1;
            }
            if u > start {
                taken.push((g, residency, start..u, bytes));
            }
            if u < group.unit_bytes.len() {
                break;
            }
            g += 1;
            u = 0;
        }
    }

    let mut out = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        let mut covered = 0;
        for (_, residency, range, bytes) in taken.iter().filter(|t| t.0 == gi) {
            covered = covered.max(range.end);
            out.push(Allocation {
                region: group.region.clone(),
                residency: *residency,
                first_unit: range.start,
                units: range.len(),
                bytes_per_tb: *bytes,
                bytes: bytes * tb_count,
            });
        }
        let n = group.unit_bytes.len();
        if covered < n {
            let bytes: u64 = group.unit_bytes[covered..].iter().sum();
            out.push(Allocation {
                region: group.region.clone(),
                residency: Residency::Global,
                first_unit: covered,
                units: n - covered,
                bytes_per_tb: bytes,
                bytes: bytes * tb_count,
            });
        }
    }
    out
}

/// Cacheable pieces of one stencil tile, in cells.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilFootprint {
    pub tb_count: u64,
    pub elem_bytes: u64,
    pub interior_units: Vec<u64>,
    pub boundary_units: Vec<u64>,
    pub halo_cells: u64,
}

pub const INTERIOR: &str = "interior";
pub const TB_BOUNDARY: &str = "tb_boundary";
pub const HALO: &str = "halo";

fn per_tb_share(spec: &DeviceSpec, tb_per_smx: u32, tb_count: u64, usage: KernelUsage) -> Result<(Budget, u64, u64)> {
    if tb_per_smx == 0 {
        return Err(Error::InvalidArgument("occupancy must be at least 1 TB/SMX".into()));
    }
    let occ = tb_per_smx as u64;
    let reg_used = usage.reg_bytes_per_tb * occ;
    let sm_used = usage.sm_bytes_per_tb * occ;
    if reg_used > spec.reg_bytes_per_smx() || sm_used > spec.shared_bytes_per_smx() {
        return Err(Error::InfeasibleOccupancy(format!(
            "{tb_per_smx} TB/SMX need {reg_used} B registers and {sm_used} B shared memory per SMX; {} has {} B and {} B",
            spec.name(),
            spec.reg_bytes_per_smx(),
            spec.shared_bytes_per_smx()
        )));
    }
    if tb_count > occ * spec.smx_count() as u64 {
        return Err(Error::InfeasibleOccupancy(format!(
            "{tb_count} persistent TBs exceed {tb_per_smx} TB/SMX x {} SMX",
            spec.smx_count()
        )));
    }
    let budget = cacheable_budget(spec, tb_per_smx, usage)?;
    Ok((budget, budget.reg_free / occ, budget.sm_free / occ))
}

/// Interior row segments first, then boundary segments; halo stays global.
pub fn plan_stencil(
    fp: &StencilFootprint,
    spec: &DeviceSpec,
    tb_per_smx: u32,
    usage: KernelUsage,
) -> Result<CachePlan> {
    let (budget, reg_tb, sm_tb) = per_tb_share(spec, tb_per_smx, fp.tb_count, usage)?;
    let bytes = |cells: &Vec<u64>| cells.iter().map(|c| c * fp.elem_bytes).collect::<Vec<_>>();
    let groups = [
        UnitGroup::new(INTERIOR, bytes(&fp.interior_units)),
        UnitGroup::new(TB_BOUNDARY, bytes(&fp.boundary_units)),
    ];
    let mut allocations = fill_units(&groups, reg_tb, sm_tb, fp.tb_count);
    let halo_bytes = fp.halo_cells * fp.elem_bytes;
    allocations.push(Allocation {
        region: HALO.into(),
        residency: Residency::Global,
        first_unit: 0,
        units: 1,
        bytes_per_tb: halo_bytes,
        bytes: halo_bytes * fp.tb_count,
    });
    let plan = CachePlan {
        smx_count: spec.smx_count(),
        tb_per_smx,
        tb_count: fp.tb_count,
        budget_reg: budget.reg_free,
        budget_sm: budget.sm_free,
        allocations,
    };
    plan.validate()?;
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgPolicy {
    /// Nothing cached explicitly; hardware caches only.
    Imp,
    Vec,
    Mat,
    Mix,
    TmpTb,
    TmpT,
}

impl CgPolicy {
    pub const ALL: [CgPolicy; 6] = [
        CgPolicy::Imp,
        CgPolicy::Vec,
        CgPolicy::Mat,
        CgPolicy::Mix,
        CgPolicy::TmpTb,
        CgPolicy::TmpT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CgPolicy::Imp => "imp",
            CgPolicy::Vec => "vec",
            CgPolicy::Mat => "mat",
            CgPolicy::Mix => "mix",
            CgPolicy::TmpTb => "tmp_tb",
            CgPolicy::TmpT => "tmp_t",
        }
    }
}

impl fmt::Display for CgPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CgPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CgPolicy::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown CG policy `{s}` (expected imp, vec, mat, mix, tmp_tb or tmp_t)"
                ))
            })
    }
}

/// Nonzeros per matrix cache unit.
pub const NNZ_CHUNK: u64 = 32;

/// Per-TB CG data sizes. Vectors are listed in cache order.
#[derive(Clone, Debug, PartialEq)]
pub struct CgFootprint {
    pub tb_count: u64,
    pub rows_per_tb: u64,
    pub nnz_per_tb: u64,
    pub vectors: Vec<String>,
    pub value_bytes: u64,
    pub index_bytes: u64,
    pub tmp_tb_bytes: u64,
    pub tmp_t_bytes: u64,
}

pub const MATRIX: &str = "matrix";
pub const TMP_TB: &str = "tmp_tb";
pub const TMP_T: &str = "tmp_t";

fn vector_groups(fp: &CgFootprint) -> Vec<UnitGroup> {
    fp.vectors
        .iter()
        .map(|v| UnitGroup::new(v.clone(), vec![fp.value_bytes; fp.rows_per_tb as usize]))
        .collect()
}

fn matrix_group(fp: &CgFootprint) -> UnitGroup {
    let per_nnz = fp.value_bytes + fp.index_bytes;
    let full = fp.nnz_per_tb / NNZ_CHUNK;
    let mut units = vec![NNZ_CHUNK * per_nnz; full as usize];
    if !fp.nnz_per_tb.is_multiple_of(NNZ_CHUNK) {
        units.push((fp.nnz_per_tb % NNZ_CHUNK) * per_nnz);
    }
    UnitGroup::new(MATRIX, units)
}

pub fn plan_cg(
    policy: CgPolicy,
    fp: &CgFootprint,
    spec: &DeviceSpec,
    tb_per_smx: u32,
    usage: KernelUsage,
) -> Result<CachePlan> {
    let (budget, reg_tb, sm_tb) = per_tb_share(spec, tb_per_smx, fp.tb_count, usage)?;
    let groups = match policy {
        CgPolicy::Imp => Vec::new(),
        CgPolicy::Vec => vector_groups(fp),
        CgPolicy::Mat => vec![matrix_group(fp)],
        CgPolicy::Mix => {
            let mut g = vector_groups(fp);
            g.push(matrix_group(fp));
            g
        }
        CgPolicy::TmpTb => vec![UnitGroup::new(TMP_TB, vec![fp.tmp_tb_bytes])],
        CgPolicy::TmpT => vec![UnitGroup::new(TMP_T, vec![fp.tmp_t_bytes]).shared_only()],
    };
    let plan = CachePlan {
        smx_count: spec.smx_count(),
        tb_per_smx,
        tb_count: fp.tb_count,
        budget_reg: budget.reg_free,
        budget_sm: budget.sm_free,
        allocations: fill_units(&groups, reg_tb, sm_tb, fp.tb_count),
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KB: u64 = 1024;

    fn a100() -> DeviceSpec {
        DeviceSpec::preset("a100").unwrap()
    }

    fn region(class: DependencyClass) -> DataRegion {
        DataRegion {
            name: "r".into(),
            bytes: 1,
            dependency_class: class,
            loads_per_step: 1.0,
            stores_per_step: 1.0,
        }
    }

    #[test]
    fn priorities() {
        assert_eq!(region_priority(&region(DependencyClass::NoInterTb)), Some(0));
        assert_eq!(region_priority(&region(DependencyClass::InterTb)), Some(1));
        assert_eq!(region_priority(&region(DependencyClass::Halo)), None);
    }

    #[test]
    fn register_budget_rows() {
        let spec = a100();
        let usage = KernelUsage::new(32 * KB, 0);
        for (occ, free) in [(1, 224 * KB), (2, 192 * KB), (8, 0)] {
            let b = cacheable_budget(&spec, occ, usage).unwrap();
            assert_eq!(b.reg_free, free);
            assert_eq!(spec.reg_bytes_per_smx() - b.reg_free, 32 * KB * occ as u64);
        }
        let b = cacheable_budget(&spec, 1, KernelUsage::default()).unwrap();
        assert_eq!(b.reg_free, spec.reg_bytes_per_smx());
        assert_eq!(b.sm_free, spec.shared_bytes_per_smx());
        assert_eq!(cacheable_budget(&spec, 9, usage).unwrap().reg_free, 0);
        assert!(cacheable_budget(&spec, 0, usage).is_err());
    }

    #[test]
    fn extra_registers_shrink_budget() {
        let u = KernelUsage::new(0, 0).with_extra_registers(48, 256);
        assert_eq!(u.reg_bytes_per_tb, 48 * 4 * 256);
    }

    fn fp(interior: usize, boundary: usize, cells: u64) -> StencilFootprint {
        StencilFootprint {
            tb_count: 108,
            elem_bytes: 4,
            interior_units: vec![cells; interior],
            boundary_units: vec![cells; boundary],
            halo_cells: 2 * cells + 16,
        }
    }

    #[test]
    fn stencil_plan_fills_registers_then_shared() {
        let spec = a100();
        // 256-cell rows of 1 KB: 224 rows fit the register share
        let plan = plan_stencil(&fp(300, 2, 256), &spec, 1, KernelUsage::new(32 * KB, 0)).unwrap();
        assert_eq!(plan.units(INTERIOR, Residency::Register), 0..224);
        assert_eq!(plan.units(INTERIOR, Residency::Shared), 224..300);
        assert_eq!(plan.units(TB_BOUNDARY, Residency::Shared), 0..2);
        assert_eq!(plan.residency_of(HALO, 0), Residency::Global);
        assert_eq!(plan.bytes_in(Residency::Register), 224 * KB * 108);
        plan.validate().unwrap();
    }

    #[test]
    fn exhausted_budget_gives_empty_plan() {
        let spec = a100();
        let usage = KernelUsage::new(spec.reg_bytes_per_smx(), spec.shared_bytes_per_smx());
        let plan = plan_stencil(&fp(10, 4, 16), &spec, 1, usage).unwrap();
        assert_eq!(plan.bytes_in(Residency::Register) + plan.bytes_in(Residency::Shared), 0);
        assert_eq!(plan.units(INTERIOR, Residency::Global), 0..10);
        assert_eq!(plan.units(TB_BOUNDARY, Residency::Global), 0..4);
    }

    #[test]
    fn big_budget_caches_everything() {
        let plan = plan_stencil(&fp(10, 4, 16), &a100(), 1, KernelUsage::default()).unwrap();
        assert_eq!(plan.units(INTERIOR, Residency::Register), 0..10);
        assert_eq!(plan.units(TB_BOUNDARY, Residency::Register), 0..4);
        assert_eq!(plan.units(INTERIOR, Residency::Global), 0..0);
    }

    #[test]
    fn overfull_kernel_is_infeasible() {
        let spec = a100();
        let err = plan_stencil(&fp(1, 1, 1), &spec, 9, KernelUsage::new(32 * KB, 0)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleOccupancy(_)), "{err}");
        let mut too_many = fp(1, 1, 1);
        too_many.tb_count = 109;
        assert!(matches!(
            plan_stencil(&too_many, &spec, 1, KernelUsage::default()),
            Err(Error::InfeasibleOccupancy(_))
        ));
    }

    fn cg_fp() -> CgFootprint {
        CgFootprint {
            tb_count: 4,
            rows_per_tb: 1024,
            nnz_per_tb: 100_000,
            vectors: vec!["r".into(), "x".into(), "p".into()],
            value_bytes: 8,
            index_bytes: 4,
            tmp_tb_bytes: 16,
            tmp_t_bytes: 1024,
        }
    }

    #[test]
    fn cg_policies() {
        let spec = a100();
        let usage = KernelUsage::new(32 * KB, 0);
        let vec = plan_cg(CgPolicy::Vec, &cg_fp(), &spec, 1, usage).unwrap();
        // r is 8 KB per TB and fits the 224 KB register share entirely
        assert_eq!(vec.units("r", Residency::Register), 0..1024);
        assert_eq!(vec.units("p", Residency::Register), 0..1024);

        let mat = plan_cg(CgPolicy::Mat, &cg_fp(), &spec, 1, usage).unwrap();
        let g = mat.units(MATRIX, Residency::Global);
        assert!(!g.is_empty() && g.end == 3125, "{g:?}");
        assert!(mat.units(MATRIX, Residency::Register).start == 0);

        assert!(plan_cg(CgPolicy::Imp, &cg_fp(), &spec, 1, usage)
            .unwrap()
            .allocations
            .is_empty());

        let t = plan_cg(CgPolicy::TmpT, &cg_fp(), &spec, 1, usage).unwrap();
        assert_eq!(t.units(TMP_T, Residency::Shared), 0..1);
        assert_eq!(t.units(TMP_T, Residency::Register), 0..0);
        let t = plan_cg(CgPolicy::TmpTb, &cg_fp(), &spec, 1, usage).unwrap();
        assert_eq!(t.units(TMP_TB, Residency::Register), 0..1);

        assert!("bogus".parse::<CgPolicy>().is_err());
        assert_eq!("TMP_TB".parse::<CgPolicy>().unwrap(), CgPolicy::TmpTb);
    }

    #[test]
    fn plan_toml_round_trip() {
        let plan = plan_stencil(&fp(300, 2, 256), &a100(), 1, KernelUsage::new(32 * KB, 0)).unwrap();
        let back = CachePlan::from_toml_str(&plan.to_toml_string()).unwrap();
        assert_eq!(plan, back);
    }

    fn cached_units(allocs: &[Allocation]) -> Vec<(String, usize)> {
        let mut v: Vec<_> = allocs
            .iter()
            .filter(|a| a.residency.is_cached())
            .flat_map(|a| (a.first_unit..a.first_unit + a.units).map(move |u| (a.region.clone(), u)))
            .collect();
        v.sort();
        v
    }

    proptest! {
        #[test]
        fn plans_are_nested_and_within_budget(
            sizes in proptest::collection::vec(1u64..64, 0..40),
            split in 0usize..40,
            reg in 0u64..1500,
            sm in 0u64..1500,
            dr in 0u64..500,
            ds in 0u64..500,
        ) {
            let split = split.min(sizes.len());
            let groups = [
                UnitGroup::new(INTERIOR, sizes[..split].to_vec()),
                UnitGroup::new(TB_BOUNDARY, sizes[split..].to_vec()),
            ];
            let big = fill_units(&groups, reg, sm, 3);
            let small = fill_units(&groups, reg.saturating_sub(dr), sm.saturating_sub(ds), 3);
            for a in &big {
                prop_assert_eq!(a.bytes, a.bytes_per_tb * 3);
            }
            let reg_used: u64 = big.iter().filter(|a| a.residency == Residency::Register).map(|a| a.bytes_per_tb).sum();
            let sm_used: u64 = big.iter().filter(|a| a.residency == Residency::Shared).map(|a| a.bytes_per_tb).sum();
            prop_assert!(reg_used <= reg && sm_used <= sm);

            let b = cached_units(&big);
            let s = cached_units(&small);
            prop_assert!(s.iter().all(|u| b.contains(u)));

            // no boundary unit cached while an interior unit stays global
            let boundary_cached = b.iter().any(|(r, _)| r == TB_BOUNDARY);
            let interior_cached = b.iter().filter(|(r, _)| r == INTERIOR).count();
            prop_assert!(!boundary_cached || interior_cached == split);

            // every unit of every group appears exactly once
            let total: usize = big.iter().map(|a| a.units).sum();
            prop_assert_eq!(total, sizes.len());
        }
    }
}
