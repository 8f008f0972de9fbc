//! Virtual GPU description and the Little's-law concurrency model.
//!
//! Hardware concurrency of an operation class is the number of bytes that
//! must be in flight to keep that channel busy: `throughput * latency`.
//! A kernel saturates the device when the bytes it exposes per SMX reach the
//! per-SMX hardware value for every relevant class; below that point the
//! efficiency is taken as the linear ratio `c_sw / c_hw`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Data-access operation classes tracked by the concurrency model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    GlobalMem,
    SharedMem,
    L2,
}

impl OpClass {
    pub const ALL: [OpClass; 3] = [OpClass::GlobalMem, OpClass::SharedMem, OpClass::L2];

    pub const fn index(self) -> usize {
        match self {
            OpClass::GlobalMem => 0,
            OpClass::SharedMem => 1,
            OpClass::L2 => 2,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            OpClass::GlobalMem => "global_mem",
            OpClass::SharedMem => "shared_mem",
            OpClass::L2 => "l2",
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Device-aggregate throughput and average latency of one operation class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRate {
    pub throughput_bytes_per_s: f64,
    pub latency_s: f64,
}

/// On-disk layout of a device file. Totals are optional and, when present,
/// are cross-checked against the per-SMX values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceFile {
    name: String,
    smx_count: u32,
    reg_bytes_per_smx: u64,
    shared_bytes_per_smx: u64,
    l2_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reg_bytes_total: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shared_bytes_total: Option<u64>,
    global_mem: ChannelRate,
    shared_mem: ChannelRate,
    l2: ChannelRate,
}

/// A validated virtual GPU.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviceSpec {
    name: String,
    smx_count: u32,
    reg_bytes_per_smx: u64,
    shared_bytes_per_smx: u64,
    l2_bytes: u64,
    rates: [ChannelRate; 3],
}

const A100_TOML: &str = include_str!("../configs/devices/a100.toml");
const V100_TOML: &str = include_str!("../configs/devices/v100.toml");

impl DeviceSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        smx_count: u32,
        reg_bytes_per_smx: u64,
        shared_bytes_per_smx: u64,
        l2_bytes: u64,
        global_mem: ChannelRate,
        shared_mem: ChannelRate,
        l2: ChannelRate,
    ) -> Result<Self> {
        let spec = DeviceSpec {
            name: name.into(),
            smx_count,
            reg_bytes_per_smx,
            shared_bytes_per_smx,
            l2_bytes,
            rates: [global_mem, shared_mem, l2],
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidDevice(format!("{}: {what} must be positive", self.name)));
        if self.smx_count == 0 {
            return bad("smx_count");
        }
        if self.reg_bytes_per_smx == 0 {
            return bad("reg_bytes_per_smx");
        }
        if self.shared_bytes_per_smx == 0 {
            return bad("shared_bytes_per_smx");
        }
        if self.l2_bytes == 0 {
            return bad("l2_bytes");
        }
        for op in OpClass::ALL {
            let rate = self.rate(op);
            if !(rate.throughput_bytes_per_s.is_finite() && rate.throughput_bytes_per_s > 0.0) {
                return bad(&format!("{op}.throughput_bytes_per_s"));
            }
            if !(rate.latency_s.is_finite() && rate.latency_s > 0.0) {
                return bad(&format!("{op}.latency_s"));
            }
        }
        Ok(())
    }

    /// Parses a device file (TOML key/value layout).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: DeviceFile = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let spec = DeviceSpec::new(
            file.name,
            file.smx_count,
            file.reg_bytes_per_smx,
            file.shared_bytes_per_smx,
            file.l2_bytes,
            file.global_mem,
            file.shared_mem,
            file.l2,
        )?;
        let check_total = |label: &str, per_smx: u64, total: Option<u64>| -> Result<()> {
            if let Some(total) = total {
                let derived = per_smx as f64 * spec.smx_count as f64;
                let rel = (derived - total as f64).abs() / total as f64;
                if rel > 0.01 {
                    return Err(Error::InvalidDevice(format!(
                        "{}: {label} per SMX x smx_count = {derived} differs from total {total} by {:.2}%",
                        spec.name,
                        rel * 100.0
                    )));
                }
            }
            Ok(())
        };
        check_total("reg_bytes", spec.reg_bytes_per_smx, file.reg_bytes_total)?;
        check_total("shared_bytes", spec.shared_bytes_per_smx, file.shared_bytes_total)?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        let file = DeviceFile {
            name: self.name.clone(),
            smx_count: self.smx_count,
            reg_bytes_per_smx: self.reg_bytes_per_smx,
            shared_bytes_per_smx: self.shared_bytes_per_smx,
            l2_bytes: self.l2_bytes,
            reg_bytes_total: None,
            shared_bytes_total: None,
            global_mem: self.rates[0],
            shared_mem: self.rates[1],
            l2: self.rates[2],
        };
        toml::to_string(&file).expect("device file serializes")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Shipped presets: `a100`, `v100`.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "a100" => Self::from_toml_str(A100_TOML),
            "v100" => Self::from_toml_str(V100_TOML),
            other => Err(Error::NotFound(format!("device preset `{other}` (known: a100, v100)"))),
        }
    }

    /// Resolves a preset name, falling back to a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::preset(name_or_path) {
            Ok(spec) => Ok(spec),
            Err(Error::NotFound(_)) if Path::new(name_or_path).exists() => Self::from_file(Path::new(name_or_path)),
            Err(e) => Err(e),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn smx_count(&self) -> u32 {
        self.smx_count
    }

    pub fn reg_bytes_per_smx(&self) -> u64 {
        self.reg_bytes_per_smx
    }

    pub fn shared_bytes_per_smx(&self) -> u64 {
        self.shared_bytes_per_smx
    }

    pub fn l2_bytes(&self) -> u64 {
        self.l2_bytes
    }

    pub fn rate(&self, op: OpClass) -> ChannelRate {
        self.rates[op.index()]
    }

    /// Global memory bandwidth in bytes/s.
    pub fn global_bandwidth(&self) -> f64 {
        self.rates[OpClass::GlobalMem.index()].throughput_bytes_per_s
    }

    /// Aggregate shared memory bandwidth in bytes/s.
    pub fn shared_bandwidth(&self) -> f64 {
        self.rates[OpClass::SharedMem.index()].throughput_bytes_per_s
    }

    /// Returns a copy with one channel replaced (used by sweeps and tests).
    pub fn with_rate(&self, op: OpClass, rate: ChannelRate) -> Result<Self> {
        let mut out = self.clone();
        out.rates[op.index()] = rate;
        out.validate()?;
        Ok(out)
    }
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

/// Device-wide bytes in flight needed to saturate `op`.
pub fn hw_concurrency(spec: &DeviceSpec, op: OpClass) -> f64 {
    let rate = spec.rate(op);
    rate.throughput_bytes_per_s * rate.latency_s
}

/// Per-SMX hardware concurrency, floor-rounded to whole bytes.
pub fn hw_concurrency_per_smx(spec: &DeviceSpec, op: OpClass) -> u64 {
    let per_smx = hw_concurrency(spec, op) / spec.smx_count() as f64;
    // absorb representation error so that exact products such as 128 B x 28 cycles stay exact
    (per_smx * (1.0 + 1e-12)).floor() as u64
}

/// Bytes exposed per thread block for each op class at a given occupancy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcurrencyProfile {
    pub c_sw_tb: [f64; 3],
    pub tb_per_smx: u32,
}

impl ConcurrencyProfile {
    pub fn new(global_mem: f64, shared_mem: f64, l2: f64, tb_per_smx: u32) -> Self {
        ConcurrencyProfile {
            c_sw_tb: [global_mem, shared_mem, l2],
            tb_per_smx,
        }
    }

    pub fn per_tb(&self, op: OpClass) -> f64 {
        self.c_sw_tb[op.index()]
    }

    pub fn with_occupancy(mut self, tb_per_smx: u32) -> Self {
        self.tb_per_smx = tb_per_smx;
        self
    }
}

/// Bytes in flight per SMX exposed by the kernel.
pub fn sw_concurrency(profile: &ConcurrencyProfile, op: OpClass) -> f64 {
    profile.per_tb(op) * profile.tb_per_smx as f64
}

/// Efficiency of a channel given exposed and required concurrency.
///
/// Saturated at 1.0 once `c_sw >= c_hw`; linear below that.
pub fn efficiency(c_sw: f64, c_hw: f64) -> Result<f64> {
    if !(c_hw > 0.0) {
        return Err(Error::InvalidDevice(format!(
            "hardware concurrency must be positive, got {c_hw}"
        )));
    }
    if c_sw >= c_hw {
        Ok(1.0)
    } else {
        Ok((c_sw / c_hw).clamp(0.0, 1.0))
    }
}

/// Global memory operations per SMX issued by one tile sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TileOps {
    pub loads: u64,
    pub stores: u64,
}

/// Load/store counts for a `tile_x x tile_y` tile with a `rad`-wide halo,
/// corners included.
pub fn count_tile_gm_ops(tile_x: u64, tile_y: u64, rad: u64, tb_per_smx: u64) -> TileOps {
    TileOps {
        loads: (tile_x + 2 * rad) * (tile_y + 2 * rad) * tb_per_smx,
        stores: tile_x * tile_y * tb_per_smx,
    }
}

/// Profile of a stencil tile kernel: reads may be served from L2 (halo hits)
/// and writes go to global memory.
pub fn stencil_tile_profile(
    tile_x: u64,
    tile_y: u64,
    rad: u64,
    elem_bytes: u64,
    tb_per_smx: u32,
) -> ConcurrencyProfile {
    let ops = count_tile_gm_ops(tile_x, tile_y, rad, 1);
    ConcurrencyProfile::new(
        (ops.stores * elem_bytes) as f64,
        0.0,
        (ops.loads * elem_bytes) as f64,
        tb_per_smx,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassEfficiency {
    pub class: OpClass,
    pub c_sw_smx: f64,
    pub c_hw_smx: u64,
    pub efficiency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OccupancyAdvice {
    pub tb_per_smx: u32,
    /// False when no occupancy up to the limit saturates every relevant class.
    pub saturated: bool,
    pub classes: Vec<ClassEfficiency>,
}

/// Efficiency of each relevant class at one occupancy.
pub fn class_efficiencies(
    spec: &DeviceSpec,
    profile: &ConcurrencyProfile,
    relevant: &[OpClass],
) -> Result<Vec<ClassEfficiency>> {
    relevant
        .iter()
        .map(|&class| {
            let c_sw_smx = sw_concurrency(profile, class);
            let c_hw_smx = hw_concurrency_per_smx(spec, class);
            Ok(ClassEfficiency {
                class,
                c_sw_smx,
                c_hw_smx,
                efficiency: efficiency(c_sw_smx, c_hw_smx as f64)?,
            })
        })
        .collect()
}

/// Smallest occupancy at which every relevant class is saturated.
pub fn advise_occupancy(
    spec: &DeviceSpec,
    profile_at: impl Fn(u32) -> ConcurrencyProfile,
    relevant: &[OpClass],
    max_tb_per_smx: u32,
) -> Result<OccupancyAdvice> {
    if relevant.is_empty() {
        return Err(Error::InvalidArgument("no relevant operation classes given".into()));
    }
    if max_tb_per_smx == 0 {
        return Err(Error::InvalidArgument("max_tb_per_smx must be at least 1".into()));
    }
    for tb in 1..=max_tb_per_smx {
        let classes = class_efficiencies(spec, &profile_at(tb).with_occupancy(tb), relevant)?;
        if classes.iter().all(|c| c.efficiency >= 1.0) {
            return Ok(OccupancyAdvice {
                tb_per_smx: tb,
                saturated: true,
                classes,
            });
        }
    }
    let classes = class_efficiencies(
        spec,
        &profile_at(max_tb_per_smx).with_occupancy(max_tb_per_smx),
        relevant,
    )?;
    Ok(OccupancyAdvice {
        tb_per_smx: max_tb_per_smx,
        saturated: false,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(gm: ChannelRate) -> DeviceSpec {
        let r = ChannelRate {
            throughput_bytes_per_s: 1e12,
            latency_s: 1e-8,
        };
        DeviceSpec::new("toy", 10, 65536, 65536, 1 << 20, gm, r, r).unwrap()
    }

    #[test]
    fn littles_law_products() {
        let spec = toy(ChannelRate {
            throughput_bytes_per_s: 1555e9,
            latency_s: 400e-9,
        });
        let c = hw_concurrency(&spec, OpClass::GlobalMem);
        assert!((c - 622_000.0).abs() < 1e-6, "{c}");

        let spec = toy(ChannelRate {
            throughput_bytes_per_s: 900e9,
            latency_s: 300e-9,
        });
        assert!((hw_concurrency(&spec, OpClass::GlobalMem) - 270_000.0).abs() < 1e-6);
        assert_eq!(hw_concurrency_per_smx(&spec, OpClass::GlobalMem), 27_000);
    }

    #[test]
    fn zero_latency_rejected_at_construction() {
        let r = ChannelRate {
            throughput_bytes_per_s: 1e9,
            latency_s: 0.0,
        };
        assert!(matches!(
            DeviceSpec::new("z", 1, 1, 1, 1, r, r, r),
            Err(Error::InvalidDevice(_))
        ));
    }

    #[test]
    fn presets_parse_and_match_totals() {
        let a100 = DeviceSpec::preset("a100").unwrap();
        assert_eq!(a100.smx_count(), 108);
        assert_eq!(a100.reg_bytes_per_smx(), 256 * 1024);
        assert_eq!(a100.global_bandwidth(), 1555e9);
        assert_eq!(hw_concurrency_per_smx(&a100, OpClass::SharedMem), 3584);
        let v100 = DeviceSpec::preset("V100").unwrap();
        assert_eq!(v100.smx_count(), 80);
        assert_eq!(v100.global_bandwidth(), 900e9);
        assert_eq!(hw_concurrency_per_smx(&v100, OpClass::SharedMem), 3328);
        assert!(matches!(DeviceSpec::preset("h100"), Err(Error::NotFound(_))));
    }

    #[test]
    fn total_mismatch_is_rejected() {
        let text = A100_TOML.replace("reg_bytes_total = 28311552", "reg_bytes_total = 30000000");
        assert!(matches!(DeviceSpec::from_toml_str(&text), Err(Error::InvalidDevice(_))));
    }

    #[test]
    fn device_file_round_trips() {
        let a100 = DeviceSpec::preset("a100").unwrap();
        let back = DeviceSpec::from_toml_str(&a100.to_toml_string()).unwrap();
        assert_eq!(a100, back);
    }

    #[test]
    fn sw_concurrency_table_rows() {
        let p = ConcurrencyProfile::new(10_320.0, 0.0, 0.0, 1);
        assert_eq!(sw_concurrency(&p, OpClass::GlobalMem), 10_320.0);
        assert_eq!(sw_concurrency(&p.with_occupancy(2), OpClass::GlobalMem), 20_640.0);
        assert_eq!(
            sw_concurrency(&ConcurrencyProfile::new(0.0, 0.0, 0.0, 7), OpClass::GlobalMem),
            0.0
        );
    }

    #[test]
    fn efficiency_branches() {
        assert_eq!(efficiency(5_000.0, 3_584.0).unwrap(), 1.0);
        assert_eq!(efficiency(0.0, 3_584.0).unwrap(), 0.0);
        assert_eq!(efficiency(1_792.0, 3_584.0).unwrap(), 0.5);
        assert!(matches!(efficiency(1.0, 0.0), Err(Error::InvalidDevice(_))));
    }

    #[test]
    fn tile_ops() {
        assert_eq!(
            count_tile_gm_ops(256, 8, 1, 1),
            TileOps {
                loads: 2580,
                stores: 2048
            }
        );
        assert_eq!(
            count_tile_gm_ops(256, 8, 1, 8),
            TileOps {
                loads: 20640,
                stores: 16384
            }
        );
        assert_eq!(count_tile_gm_ops(1, 1, 1, 1), TileOps { loads: 9, stores: 1 });
    }

    #[test]
    fn advisor_edge_cases() {
        let a100 = DeviceSpec::preset("a100").unwrap();
        let huge = |tb| ConcurrencyProfile::new(1e9, 1e9, 1e9, tb);
        let advice = advise_occupancy(&a100, huge, &OpClass::ALL, 8).unwrap();
        assert_eq!(advice.tb_per_smx, 1);
        assert!(advice.saturated);

        let tiny = |tb| ConcurrencyProfile::new(1.0, 1.0, 1.0, tb);
        let advice = advise_occupancy(&a100, tiny, &OpClass::ALL, 8).unwrap();
        assert_eq!(advice.tb_per_smx, 8);
        assert!(!advice.saturated);

        assert!(matches!(
            advise_occupancy(&a100, tiny, &[], 8),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn table_profile_needs_two_blocks_for_l2() {
        // GM stores saturate at one block per SMX, halo reads through L2 need two
        let a100 = DeviceSpec::preset("a100").unwrap();
        let profile = |tb| stencil_tile_profile(256, 8, 1, 4, tb);
        let advice = advise_occupancy(&a100, profile, &[OpClass::GlobalMem, OpClass::L2], 8).unwrap();
        assert_eq!(advice.tb_per_smx, 2);
        // brute force: the advised value is the first k with every class saturated
        let first = (1..=8)
            .find(|&k| {
                [OpClass::GlobalMem, OpClass::L2]
                    .iter()
                    .all(|&op| sw_concurrency(&profile(k), op) >= hw_concurrency_per_smx(&a100, op) as f64)
            })
            .unwrap();
        assert_eq!(first, advice.tb_per_smx);
    }
}
