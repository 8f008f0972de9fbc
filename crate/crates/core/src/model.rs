//! Closed-form traffic and time projection for a persistent kernel.
//!
//! All traffic is counted in element accesses (cells) and converted to bytes
//! with the element size only when a time is computed.

use serde::{Deserialize, Serialize};

use crate::device::DeviceSpec;
use crate::error::{Error, Result};

/// Domain extents in cells plus the element size in bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    extents: Vec<u64>,
    elem_bytes: u64,
}

impl DomainSpec {
    pub fn new(extents: &[u64], elem_bytes: u64) -> Result<Self> {
        if !(2..=3).contains(&extents.len()) {
            return Err(Error::InvalidDomain(format!(
                "expected 2 or 3 extents, got {}",
                extents.len()
            )));
        }
        if extents.contains(&0) {
            return Err(Error::InvalidDomain(format!("extents must be positive: {extents:?}")));
        }
        if elem_bytes != 4 && elem_bytes != 8 {
            return Err(Error::InvalidDomain(format!(
                "element size must be 4 or 8 bytes, got {elem_bytes}"
            )));
        }
        Ok(DomainSpec {
            extents: extents.to_vec(),
            elem_bytes,
        })
    }

    pub fn extents(&self) -> &[u64] {
        &self.extents
    }

    pub fn elem_bytes(&self) -> u64 {
        self.elem_bytes
    }

    pub fn total_cells(&self) -> u64 {
        self.extents.iter().product()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_cells() * self.elem_bytes
    }
}

/// Number of cells cached in shared memory and in registers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSplit {
    pub cached_cells_sm: u64,
    pub cached_cells_reg: u64,
}

impl CacheSplit {
    pub fn new(cached_cells_sm: u64, cached_cells_reg: u64) -> Self {
        CacheSplit {
            cached_cells_sm,
            cached_cells_reg,
        }
    }

    pub fn cached_cells(&self) -> u64 {
        self.cached_cells_sm + self.cached_cells_reg
    }
}

/// Halo exchange geometry: `tb_count` blocks each moving `perimeter_elements`
/// cells per step in each direction (one store, one load).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaloGeometry {
    pub tb_count: u64,
    pub perimeter_elements: u64,
}

impl HaloGeometry {
    pub fn new(tb_count: u64, perimeter_elements: u64) -> Self {
        HaloGeometry {
            tb_count,
            perimeter_elements,
        }
    }

    /// Star-shaped 2D halo without corners: `2 * rad * (tile_x + tile_y)`.
    pub fn star_2d(tb_count: u64, tile_x: u64, tile_y: u64, rad: u64) -> Self {
        Self::new(tb_count, 2 * rad * (tile_x + tile_y))
    }

    pub fn accesses_per_step(&self) -> u64 {
        2 * self.tb_count * self.perimeter_elements
    }
}

/// Global memory element accesses for `steps` steps.
pub fn gm_traffic(domain: &DomainSpec, split: &CacheSplit, steps: u64) -> Result<u64> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let total = domain.total_cells();
    let cached = split.cached_cells();
    if cached > total {
        return Err(Error::InvalidPlan(format!(
            "{cached} cached cells exceed the {total}-cell domain"
        )));
    }
    Ok(2 * steps * (total - cached) + 2 * cached)
}

/// Seconds spent on `a_gm` global element accesses.
pub fn time_gm(a_gm: u64, elem_bytes: u64, spec: &DeviceSpec) -> f64 {
    (a_gm as f64 * elem_bytes as f64) / spec.global_bandwidth()
}

/// Shared memory element accesses caused by the cache: no cached load in the
/// first step and no cached store in the last.
pub fn sm_traffic(split: &CacheSplit, steps: u64) -> Result<u64> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    Ok(2 * (steps - 1) * split.cached_cells_sm)
}

/// Seconds spent on shared memory, cache traffic plus the kernel's own use.
pub fn time_sm(a_sm_cache: u64, a_sm_kernel: u64, elem_bytes: u64, spec: &DeviceSpec) -> f64 {
    ((a_sm_cache + a_sm_kernel) as f64 * elem_bytes as f64) / spec.shared_bandwidth()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HaloTraffic {
    pub elements: u64,
    pub seconds: f64,
}

pub fn halo_traffic(geom: &HaloGeometry, steps: u64, elem_bytes: u64, spec: &DeviceSpec) -> HaloTraffic {
    let elements = steps * geom.accesses_per_step();
    HaloTraffic {
        elements,
        seconds: time_gm(elements, elem_bytes, spec),
    }
}

/// Which term dominates the projected time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    GlobalMemory,
    SharedMemory,
}

/// Everything `project` needs besides the device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionInput {
    pub domain: DomainSpec,
    pub split: CacheSplit,
    pub halo: HaloGeometry,
    pub steps: u64,
    /// Shared memory accesses the unmodified kernel makes per cell per step.
    pub sm_accesses_per_cell: u64,
}

/// Flat projection record. Times in seconds, traffic in elements and bytes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Projection {
    pub total_cells: u64,
    pub steps: u64,
    pub elem_bytes: u64,
    pub a_gm_elements: u64,
    pub a_gm_bytes: f64,
    pub a_sm_cache_elements: u64,
    pub a_sm_kernel_elements: u64,
    pub a_sm_bytes: f64,
    pub halo_elements: u64,
    pub t_gm: f64,
    pub t_sm: f64,
    pub t_halo: f64,
    pub t_perks: f64,
    pub bound: Bound,
    pub peak_cells_per_s: f64,
    pub peak_gcells_per_s: f64,
    pub measured_cells_per_s: Option<f64>,
    pub measured_gcells_per_s: Option<f64>,
    pub efficiency_vs_peak: Option<f64>,
}

pub fn project(input: &ProjectionInput, spec: &DeviceSpec) -> Result<Projection> {
    let ProjectionInput {
        domain,
        split,
        halo,
        steps,
        sm_accesses_per_cell,
    } = input;
    let steps = *steps;
    let eb = domain.elem_bytes();
    let a_gm = gm_traffic(domain, split, steps)?;
    let a_sm_cache = sm_traffic(split, steps)?;
    let a_sm_kernel = domain.total_cells() * steps * sm_accesses_per_cell;
    let halo = halo_traffic(halo, steps, eb, spec);

    let t_gm = time_gm(a_gm, eb, spec);
    let t_sm = time_sm(a_sm_cache, a_sm_kernel, eb, spec);
    let gm_side = t_gm + halo.seconds;
    let (t_perks, bound) = if gm_side >= t_sm {
        (gm_side, Bound::GlobalMemory)
    } else {
        (t_sm, Bound::SharedMemory)
    };
    if !(t_perks > 0.0) {
        return Err(Error::InvalidArgument(
            "projected time is zero; nothing to project".into(),
        ));
    }
    let peak = domain.total_cells() as f64 * steps as f64 / t_perks;
    Ok(Projection {
        total_cells: domain.total_cells(),
        steps,
        elem_bytes: eb,
        a_gm_elements: a_gm,
        a_gm_bytes: a_gm as f64 * eb as f64,
        a_sm_cache_elements: a_sm_cache,
        a_sm_kernel_elements: a_sm_kernel,
        a_sm_bytes: (a_sm_cache + a_sm_kernel) as f64 * eb as f64,
        halo_elements: halo.elements,
        t_gm,
        t_sm,
        t_halo: halo.seconds,
        t_perks,
        bound,
        peak_cells_per_s: peak,
        peak_gcells_per_s: peak / 1e9,
        measured_cells_per_s: None,
        measured_gcells_per_s: None,
        efficiency_vs_peak: None,
    })
}

/// Ratio of two projected peaks.
pub fn projected_speedup(perks: &Projection, baseline: &Projection) -> Result<f64> {
    if !(baseline.peak_cells_per_s > 0.0) {
        return Err(Error::InvalidArgument("baseline peak must be positive".into()));
    }
    Ok(perks.peak_cells_per_s / baseline.peak_cells_per_s)
}

/// Attaches a measured rate (cells/s) and the resulting fraction of peak.
pub fn attach_measured(mut projection: Projection, measured_cells_per_s: f64) -> Result<Projection> {
    if !(measured_cells_per_s >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "measured performance must be non-negative, got {measured_cells_per_s}"
        )));
    }
    projection.measured_cells_per_s = Some(measured_cells_per_s);
    projection.measured_gcells_per_s = Some(measured_cells_per_s / 1e9);
    projection.efficiency_vs_peak = Some(measured_cells_per_s / projection.peak_cells_per_s);
    Ok(projection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a100() -> DeviceSpec {
        DeviceSpec::preset("a100").unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn domain_validation() {
        assert!(DomainSpec::new(&[4], 4).is_err());
        assert!(DomainSpec::new(&[4, 0], 4).is_err());
        assert!(DomainSpec::new(&[4, 4], 2).is_err());
        assert_eq!(DomainSpec::new(&[3, 4, 5], 8).unwrap().total_cells(), 60);
    }

    #[test]
    fn gm_traffic_cases() {
        let d = DomainSpec::new(&[3072, 3072], 4).unwrap();
        let a = gm_traffic(&d, &CacheSplit::new(0, 3072 * 2448), 1000).unwrap();
        assert_eq!(a, 3_848_896_512);
        assert_eq!(a * 4, 15_395_586_048);
        assert_eq!(
            gm_traffic(&d, &CacheSplit::default(), 1000).unwrap(),
            2000 * d.total_cells()
        );
        assert_eq!(
            gm_traffic(&d, &CacheSplit::new(d.total_cells(), 0), 77).unwrap(),
            2 * d.total_cells()
        );
        assert!(matches!(
            gm_traffic(&d, &CacheSplit::new(d.total_cells(), 1), 5),
            Err(Error::InvalidPlan(_))
        ));
        assert!(gm_traffic(&d, &CacheSplit::default(), 0).is_err());
    }

    #[test]
    fn time_gm_cases() {
        let spec = a100();
        let t = time_gm(3_848_896_512, 4, &spec);
        assert!(rel(t, 9900.70e-6) < 1e-6, "{t}");
        assert_eq!(time_gm(0, 4, &spec), 0.0);
        assert!(rel(time_gm(1_555_000_000_000, 1, &spec), 1.0) < 1e-15);
    }

    #[test]
    fn sm_traffic_cases() {
        let s = CacheSplit::new(3072 * 1152, 0);
        assert_eq!(sm_traffic(&s, 1000).unwrap(), 3072 * 1152 * 999 * 2);
        assert_eq!(sm_traffic(&s, 1).unwrap(), 0);
        assert_eq!(sm_traffic(&CacheSplit::new(0, 99), 10).unwrap(), 0);
    }

    #[test]
    fn time_sm_cases() {
        let spec = a100();
        let d = 3072 * 2448u64;
        let t = time_sm(3072 * 1152 * 999 * 2, d * 1000 * 4, 4, &spec);
        assert!((t - 7.6e-3).abs() < 0.05e-3, "{t}");
        assert_eq!(time_sm(0, 0, 4, &spec), 0.0);
        let bsm = spec.shared_bandwidth() as u64;
        assert!(rel(time_sm(0, bsm, 1, &spec), 1.0) < 1e-15);
    }

    #[test]
    fn halo_cases() {
        let spec = a100();
        let h = halo_traffic(&HaloGeometry::new(216, 136 * 2 + 256 * 2), 1000, 4, &spec);
        assert_eq!(h.elements, 338_688_000);
        assert!(rel(h.seconds, 871.22e-6) < 1e-5, "{}", h.seconds);
        assert_eq!(HaloGeometry::star_2d(216, 256, 136, 1).perimeter_elements, 784);
        assert_eq!(halo_traffic(&HaloGeometry::new(0, 784), 1000, 4, &spec).elements, 0);
        assert_eq!(halo_traffic(&HaloGeometry::new(216, 0), 1000, 4, &spec).seconds, 0.0);
    }

    fn large() -> ProjectionInput {
        ProjectionInput {
            domain: DomainSpec::new(&[3072, 3072], 4).unwrap(),
            split: CacheSplit::new(3072 * 1152, 3072 * 1296),
            halo: HaloGeometry::new(216, 784),
            steps: 1000,
            sm_accesses_per_cell: 4,
        }
    }

    fn baseline() -> ProjectionInput {
        ProjectionInput {
            split: CacheSplit::default(),
            halo: HaloGeometry::default(),
            ..large()
        }
    }

    #[test]
    fn projections() {
        let spec = a100();
        let p = project(&large(), &spec).unwrap();
        assert_eq!(p.bound, Bound::GlobalMemory);
        assert!(rel(p.peak_gcells_per_s, 876.09) < 5e-5, "{}", p.peak_gcells_per_s);

        let small = ProjectionInput {
            domain: DomainSpec::new(&[3072, 2448], 4).unwrap(),
            split: CacheSplit::new(3072 * 1152, 3072 * 1296),
            ..large()
        };
        let p = project(&small, &spec).unwrap();
        assert_eq!(p.bound, Bound::SharedMemory);
        assert!(rel(p.peak_gcells_per_s, 986.38) < 5e-5, "{}", p.peak_gcells_per_s);

        // nothing cached: B_gm / (2 * elem_bytes), checked by hand: 1555 / 8 = 194.375
        let b = project(&baseline(), &spec).unwrap();
        assert!(rel(b.peak_gcells_per_s, 194.375) < 1e-12);
    }

    #[test]
    fn speedups() {
        let spec = a100();
        let perks = project(&large(), &spec).unwrap();
        let base = project(&baseline(), &spec).unwrap();
        let s = projected_speedup(&perks, &base).unwrap();
        assert!((s - 4.51).abs() < 0.005, "{s}");
        assert_eq!(projected_speedup(&base, &base).unwrap(), 1.0);
        let zero = Projection {
            peak_cells_per_s: 0.0,
            ..base.clone()
        };
        assert_eq!(projected_speedup(&zero, &base).unwrap(), 0.0);
        assert!(projected_speedup(&base, &zero).is_err());
    }

    #[test]
    fn measured_ratios() {
        let spec = a100();
        let p = attach_measured(project(&large(), &spec).unwrap(), 444.19e9).unwrap();
        assert!((p.efficiency_vs_peak.unwrap() - 0.5070).abs() < 0.001);
        let same = p.peak_cells_per_s;
        let p = attach_measured(p, same).unwrap();
        assert_eq!(p.efficiency_vs_peak, Some(1.0));
        assert!(attach_measured(p, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn gm_traffic_decreases_with_cache(total in 1u64..10_000, steps in 2u64..100, a in 0u64..10_000, b in 0u64..10_000) {
            let d = DomainSpec::new(&[total, 1], 4).unwrap();
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            prop_assume!(lo < hi);
            let t_lo = gm_traffic(&d, &CacheSplit::new(lo, 0), steps).unwrap();
            let t_hi = gm_traffic(&d, &CacheSplit::new(0, hi), steps).unwrap();
            prop_assert!(t_hi < t_lo);
        }

        #[test]
        fn t_perks_is_max_of_branches(
            cached in 0u64..=1_000_000,
            steps in 1u64..2000,
            sm_per_cell in 0u64..8,
            tbs in 0u64..500,
            perim in 0u64..2000,
        ) {
            let spec = DeviceSpec::preset("a100").unwrap();
            let input = ProjectionInput {
                domain: DomainSpec::new(&[1000, 1000], 4).unwrap(),
                split: CacheSplit::new(cached / 2, cached - cached / 2),
                halo: HaloGeometry::new(tbs, perim),
                steps,
                sm_accesses_per_cell: sm_per_cell,
            };
            let p = project(&input, &spec).unwrap();
            prop_assert!(p.t_perks >= p.t_gm + p.t_halo);
            prop_assert!(p.t_perks >= p.t_sm);
            prop_assert!(p.t_perks == p.t_gm + p.t_halo || p.t_perks == p.t_sm);

            // more halo traffic never raises the peak
            let more = ProjectionInput { halo: HaloGeometry::new(tbs + 1, perim + 1), ..input };
            let q = project(&more, &spec).unwrap();
            prop_assert!(q.peak_cells_per_s <= p.peak_cells_per_s);
        }
    }
}
