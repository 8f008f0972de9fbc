//! Command-line front end. Every command reads one TOML run config and
//! produces a deterministic report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cg::{self, CgOptions, CsrMatrix};
use crate::device::{self, DeviceSpec, OpClass};
use crate::error::{Error, Result};
use crate::model::{self, CacheSplit, DomainSpec, HaloGeometry, Projection, ProjectionInput};
use crate::planner::{self, CachePlan, CgPolicy, KernelUsage, Residency};
use crate::reference::Reference;
use crate::sim::{Category, Real, Route, RunOptions, TrafficReport};
use crate::stencil::{self, ExecMode, Grid, StencilSpec, TileLayout, TilingSpec};

#[derive(Parser, Debug, Clone)]
#[command(
    name = "perks",
    version,
    about = "Traffic model, cache planner and virtual-GPU simulator for persistent kernels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Device preset name or device TOML file; overrides the config.
    #[arg(long, global = true)]
    pub device: Option<String>,
    /// Directory for report files. Without it the report goes to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Seed for generated inputs; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Projected peak performance from the traffic model.
    Project,
    /// Occupancy recommendation and freed on-chip resources per occupancy.
    Advise,
    /// Cache plan for a stencil or CG workload.
    Plan,
    /// Baseline and persistent stencil runs with equivalence and conservation checks.
    RunStencil,
    /// CG under one or more caching policies.
    RunCg,
    /// Model projection next to simulated traffic, with published measurements.
    Compare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Project => "project",
            Command::Advise => "advise",
            Command::Plan => "plan",
            Command::RunStencil => "run-stencil",
            Command::RunCg => "run-cg",
            Command::Compare => "compare",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: Option<String>,
    /// Preset name, or a path relative to the config file.
    pub device: Option<String>,
    /// Bytes per value, 4 or 8.
    pub precision: Option<u64>,
    pub steps: Option<u64>,
    /// `baseline`, `perks` or `both`.
    pub mode: Option<String>,
    /// TBs per SMX.
    pub occupancy: Option<u32>,
    pub seed: Option<u64>,
    pub projection: Option<ProjectionSection>,
    pub kernel: Option<KernelSection>,
    pub stencil: Option<StencilSection>,
    pub cg: Option<CgSection>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSection {
    pub domain: Vec<u64>,
    #[serde(default)]
    pub shared_cells: u64,
    #[serde(default)]
    pub register_cells: u64,
    #[serde(default)]
    pub tb_count: u64,
    #[serde(default)]
    pub halo_perimeter: u64,
    pub sm_accesses_per_cell: u64,
    /// Published measurement for this configuration, in GCells/s.
    pub measured_gcells: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub tile: Vec<u64>,
    pub rad: u64,
    pub reg_bytes_per_tb: u64,
    #[serde(default)]
    pub sm_bytes_per_tb: u64,
    pub max_occupancy: Option<u32>,
    /// Classes that must saturate; defaults to those the kernel uses.
    pub classes: Option<Vec<OpClass>>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StencilSection {
    pub name: String,
    /// Updated cells per axis, without the fixed frame.
    pub domain: Vec<usize>,
    pub tile: Option<Vec<usize>>,
    pub items_per_thread: Option<usize>,
    pub reg_bytes_per_tb: Option<u64>,
    pub sm_bytes_per_tb: Option<u64>,
    pub sm_accesses_per_cell: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgSection {
    /// MatrixMarket file, relative to the config file.
    pub matrix: Option<String>,
    /// `poisson` (n x n grid) or `trefethen` (n rows).
    pub generator: Option<String>,
    pub size: Option<usize>,
    pub policies: Option<Vec<String>>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub tb_size: Option<usize>,
    pub tb_count: Option<usize>,
    /// `ones` or `random`.
    pub rhs: Option<String>,
    /// Run exactly `max_iters` iterations regardless of the residual.
    #[serde(default)]
    pub fixed_iterations: bool,
    /// Keep `x` in the report even for large systems.
    #[serde(default)]
    pub include_x: bool,
}

fn syntax_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
    Error::Parse {
        line,
        message: e.message().to_string(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| syntax_error(text, &e))?;
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().to_string())
        })
    }

    pub fn precision(&self) -> Result<u64> {
        match self.precision.unwrap_or(4) {
            p @ (4 | 8) => Ok(p),
            p => Err(Error::config("precision", format!("must be 4 or 8 bytes, got {p}"))),
        }
    }

    pub fn steps(&self) -> Result<u64> {
        match self.steps {
            None => Err(Error::config("steps", "is required")),
            Some(0) => Err(Error::config("steps", "must be at least 1")),
            Some(n) => Ok(n),
        }
    }

    pub fn occupancy(&self) -> Result<u32> {
        match self.occupancy.unwrap_or(1) {
            0 => Err(Error::config("occupancy", "must be at least 1 TB per SMX")),
            n => Ok(n),
        }
    }

    fn modes(&self) -> Result<Vec<ExecMode>> {
        match self.mode.as_deref().unwrap_or("both") {
            "both" => Ok(vec![ExecMode::Baseline, ExecMode::Perks]),
            "baseline" => Ok(vec![ExecMode::Baseline]),
            "perks" => Ok(vec![ExecMode::Perks]),
            m => Err(Error::config(
                "mode",
                format!("expected baseline, perks or both, got `{m}`"),
            )),
        }
    }
}

/// Result of one command: a summary for people and a report for files.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: String,
    pub report: Value,
    /// CSV rendering of the main table.
    pub csv: String,
    /// Additional files, by name.
    pub extra: Vec<(String, String)>,
    /// False when an embedded check (equivalence, conservation) failed.
    pub passed: bool,
}

struct Loaded {
    text: String,
    dir: PathBuf,
    config: RunConfig,
}

fn load_config(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config = RunConfig::from_toml_str(&text)?;
    Ok(Loaded {
        text,
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        config,
    })
}

fn resolve_device(cli: &Cli, cfg: &Loaded) -> Result<DeviceSpec> {
    if let Some(d) = &cli.device {
        return DeviceSpec::resolve(d);
    }
    match cfg.config.device.as_deref() {
        None => DeviceSpec::preset("a100"),
        Some(d) if d.ends_with(".toml") || d.contains('/') => DeviceSpec::from_file(&cfg.dir.join(d)),
        Some(d) => DeviceSpec::preset(d).map_err(|_| Error::config("device", format!("unknown preset `{d}`"))),
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("`{}` needs --config <file>", cli.command.name())))?;
    let cfg = load_config(path)?;
    let device = resolve_device(cli, &cfg)?;
    let seed = cli.seed.or(cfg.config.seed).unwrap_or(0);
    let mut out = match cli.command {
        Command::Project => cmd_project(&cfg.config, &device)?,
        Command::Advise => cmd_advise(&cfg.config, &device)?,
        Command::Plan => cmd_plan(&cfg, &device, seed)?,
        Command::RunStencil => cmd_run_stencil(&cfg.config, &device, seed)?,
        Command::RunCg => cmd_run_cg(&cfg, &device, seed)?,
        Command::Compare => cmd_compare(&cfg, &device, seed)?,
    };
    if let Value::Object(map) = &mut out.report {
        map.insert("command".into(), json!(cli.command.name()));
        map.insert("name".into(), json!(cfg.config.name));
        map.insert("device".into(), json!(device.name()));
        map.insert("passed".into(), json!(out.passed));
        map.insert("config".into(), json!(cfg.text));
    }
    Ok(out)
}

/// Writes the report into `dir` and returns the written paths.
pub fn write_outputs(out: &Outcome, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![match format {
        Format::Json => ("report.json".to_string(), render(out, format)),
        Format::Csv => ("report.csv".to_string(), render(out, format)),
    }];
    files.extend(out.extra.iter().cloned());
    files
        .into_iter()
        .map(|(name, body)| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect()
}

pub fn render(out: &Outcome, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(&out.report).expect("report serialises") + "\n",
        Format::Csv => out.csv.clone(),
    }
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn projection_input(cfg: &RunConfig) -> Result<ProjectionInput> {
    let p = cfg
        .projection
        .as_ref()
        .ok_or_else(|| Error::config("projection", "section is required"))?;
    let domain =
        DomainSpec::new(&p.domain, cfg.precision()?).map_err(|e| Error::config("projection.domain", e.to_string()))?;
    let split = CacheSplit::new(p.shared_cells, p.register_cells);
    if split.cached_cells() > domain.total_cells() {
        return Err(Error::config(
            "projection.shared_cells",
            format!(
                "{} cached cells exceed the {}-cell domain",
                split.cached_cells(),
                domain.total_cells()
            ),
        ));
    }
    Ok(ProjectionInput {
        domain,
        split,
        halo: HaloGeometry::new(p.tb_count, p.halo_perimeter),
        steps: cfg.steps()?,
        sm_accesses_per_cell: p.sm_accesses_per_cell,
    })
}

/// Same domain and kernel with nothing cached and no exchange.
fn baseline_input(input: &ProjectionInput) -> ProjectionInput {
    ProjectionInput {
        split: CacheSplit::default(),
        halo: HaloGeometry::default(),
        ..input.clone()
    }
}

fn projection_rows(p: &Projection) -> Vec<Vec<String>> {
    let mut rows = vec![
        ("total_cells", p.total_cells.to_string()),
        ("steps", p.steps.to_string()),
        ("a_gm_elements", p.a_gm_elements.to_string()),
        ("a_sm_cache_elements", p.a_sm_cache_elements.to_string()),
        ("a_sm_kernel_elements", p.a_sm_kernel_elements.to_string()),
        ("halo_elements", p.halo_elements.to_string()),
        ("t_gm_s", format!("{:e}", p.t_gm)),
        ("t_sm_s", format!("{:e}", p.t_sm)),
        ("t_halo_s", format!("{:e}", p.t_halo)),
        ("t_perks_s", format!("{:e}", p.t_perks)),
        ("bound", format!("{:?}", p.bound)),
        ("peak_gcells_per_s", format!("{}", p.peak_gcells_per_s)),
    ];
    if let (Some(m), Some(e)) = (p.measured_gcells_per_s, p.efficiency_vs_peak) {
        rows.push(("measured_gcells_per_s", m.to_string()));
        rows.push(("efficiency_vs_peak", e.to_string()));
    }
    rows.into_iter().map(|(k, v)| vec![k.to_string(), v]).collect()
}

pub fn cmd_project(cfg: &RunConfig, device: &DeviceSpec) -> Result<Outcome> {
    let input = projection_input(cfg)?;
    let mut p = model::project(&input, device)?;
    if let Some(m) = cfg.projection.as_ref().and_then(|s| s.measured_gcells) {
        p = model::attach_measured(p, m * 1e9)
            .map_err(|e| Error::config("projection.measured_gcells", e.to_string()))?;
    }
    let base = model::project(&baseline_input(&input), device)?;
    let speedup = model::projected_speedup(&p, &base)?;

    let mut s = String::new();
    let _ = writeln!(s, "T_gm    = {:.2} us", p.t_gm * 1e6);
    let _ = writeln!(s, "T_halo  = {:.2} us", p.t_halo * 1e6);
    let _ = writeln!(s, "T_sm    = {:.3} ms", p.t_sm * 1e3);
    let _ = writeln!(s, "T_perks = {:.3} ms ({:?} bound)", p.t_perks * 1e3, p.bound);
    let _ = writeln!(s, "peak    = {:.2} GCells/s", p.peak_gcells_per_s);
    let _ = writeln!(
        s,
        "uncached peak = {:.3} GCells/s, projected speedup {:.2}x",
        base.peak_gcells_per_s, speedup
    );
    if let (Some(m), Some(e)) = (p.measured_gcells_per_s, p.efficiency_vs_peak) {
        let _ = writeln!(
            s,
            "measured {m:.2} GCells/s = {:.2}% of peak (published measurement, not reproduced here)",
            e * 100.0
        );
    }
    let reference = Reference::load()?;
    Ok(Outcome {
        summary: s,
        csv: csv_table(&["quantity", "value"], &projection_rows(&p))?,
        report: json!({
            "projection": p,
            "uncached": base,
            "projected_speedup": speedup,
            "reference_label": reference.label,
        }),
        extra: Vec::new(),
        passed: true,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AdviseRow {
    pub tb_per_smx: u32,
    pub gm_loads_per_smx: u64,
    pub gm_stores_per_smx: u64,
    pub used_reg_bytes: u64,
    pub unused_reg_bytes: u64,
    pub used_sm_bytes: u64,
    pub unused_sm_bytes: u64,
    pub feasible: bool,
    pub efficiency: Vec<(OpClass, f64)>,
}

pub fn cmd_advise(cfg: &RunConfig, device: &DeviceSpec) -> Result<Outcome> {
    let k = cfg
        .kernel
        .as_ref()
        .ok_or_else(|| Error::config("kernel", "section is required"))?;
    let [tx, ty] = k.tile[..] else {
        return Err(Error::config("kernel.tile", "needs two extents"));
    };
    if tx == 0 || ty == 0 {
        return Err(Error::config("kernel.tile", "extents must be positive"));
    }
    let eb = cfg.precision()?;
    let max = k.max_occupancy.unwrap_or(8);
    if max == 0 {
        return Err(Error::config("kernel.max_occupancy", "must be at least 1"));
    }
    let usage = KernelUsage::new(k.reg_bytes_per_tb, k.sm_bytes_per_tb);
    let fits = |occ: u32| {
        usage.reg_bytes_per_tb * occ as u64 <= device.reg_bytes_per_smx()
            && usage.sm_bytes_per_tb * occ as u64 <= device.shared_bytes_per_smx()
    };
    if !fits(1) {
        return Err(Error::InfeasibleOccupancy(format!(
            "the kernel needs {} B of registers and {} B of shared memory per TB; one TB per SMX already exceeds the {} B / {} B available",
            usage.reg_bytes_per_tb,
            usage.sm_bytes_per_tb,
            device.reg_bytes_per_smx(),
            device.shared_bytes_per_smx()
        )));
    }
    let profile = |occ| device::stencil_tile_profile(tx, ty, k.rad, eb, occ);
    let classes: Vec<OpClass> = match &k.classes {
        Some(c) if c.is_empty() => return Err(Error::config("kernel.classes", "must not be empty")),
        Some(c) => c.clone(),
        None => OpClass::ALL
            .into_iter()
            .filter(|&c| profile(1).per_tb(c) > 0.0)
            .collect(),
    };
    let advice = device::advise_occupancy(device, profile, &classes, max)?;
    let mut rows = Vec::new();
    for occ in 1..=max {
        let ops = device::count_tile_gm_ops(tx, ty, k.rad, occ as u64);
        let budget = planner::cacheable_budget(device, occ, usage)?;
        let eff = device::class_efficiencies(device, &profile(occ), &classes)?;
        rows.push(AdviseRow {
            tb_per_smx: occ,
            gm_loads_per_smx: ops.loads,
            gm_stores_per_smx: ops.stores,
            used_reg_bytes: device.reg_bytes_per_smx() - budget.reg_free,
            unused_reg_bytes: budget.reg_free,
            used_sm_bytes: device.shared_bytes_per_smx() - budget.sm_free,
            unused_sm_bytes: budget.sm_free,
            feasible: fits(occ),
            efficiency: eff.iter().map(|c| (c.class, c.efficiency)).collect(),
        });
    }
    let max_feasible = (1..=max).take_while(|&o| fits(o)).last().unwrap_or(1);
    let recommended = advice.tb_per_smx.min(max_feasible);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "TB/SMX  GM load/SMX  GM store/SMX  used reg  unused reg  unused smem  feasible"
    );
    for r in &rows {
        let _ = writeln!(
            s,
            "{:>6}  {:>11}  {:>12}  {:>6} KB  {:>8} KB  {:>9} KB  {}",
            r.tb_per_smx,
            r.gm_loads_per_smx,
            r.gm_stores_per_smx,
            r.used_reg_bytes / 1024,
            r.unused_reg_bytes / 1024,
            r.unused_sm_bytes / 1024,
            if r.feasible { "yes" } else { "no" }
        );
    }
    let _ = writeln!(
        s,
        "recommended occupancy: {recommended} TB/SMX ({})",
        if advice.saturated && recommended == advice.tb_per_smx {
            "every relevant class saturated"
        } else {
            "not every class saturates within the limit"
        }
    );
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![
                r.tb_per_smx.to_string(),
                r.gm_loads_per_smx.to_string(),
                r.gm_stores_per_smx.to_string(),
                r.used_reg_bytes.to_string(),
                r.unused_reg_bytes.to_string(),
                r.used_sm_bytes.to_string(),
                r.unused_sm_bytes.to_string(),
                r.feasible.to_string(),
            ];
            v.extend(r.efficiency.iter().map(|(_, e)| e.to_string()));
            v
        })
        .collect();
    let mut header = vec![
        "tb_per_smx",
        "gm_loads_per_smx",
        "gm_stores_per_smx",
        "used_reg_bytes",
        "unused_reg_bytes",
        "used_sm_bytes",
        "unused_sm_bytes",
        "feasible",
    ];
    let eff_names: Vec<String> = classes.iter().map(|c| format!("efficiency_{c}")).collect();
    header.extend(eff_names.iter().map(String::as_str));
    Ok(Outcome {
        summary: s,
        csv: csv_table(&header, &csv_rows)?,
        report: json!({
            "recommended_tb_per_smx": recommended,
            "saturated": advice.saturated,
            "classes": classes,
            "rows": rows,
        }),
        extra: Vec::new(),
        passed: true,
    })
}

struct StencilSetup {
    spec: StencilSpec,
    tiling: TilingSpec,
    grid_ext: Vec<usize>,
    layout: TileLayout,
    eb: u64,
}

fn stencil_setup(cfg: &RunConfig) -> Result<StencilSetup> {
    let s = cfg
        .stencil
        .as_ref()
        .ok_or_else(|| Error::config("stencil", "section is required"))?;
    let spec = stencil::lookup(&s.name).map_err(|e| Error::config("stencil.name", e.to_string()))?;
    if s.domain.len() != spec.dims || s.domain.contains(&0) {
        return Err(Error::config(
            "stencil.domain",
            format!("{} needs {} positive extents, got {:?}", spec.name, spec.dims, s.domain),
        ));
    }
    let default = TilingSpec::default_for(spec.dims);
    let tiling = match &s.tile {
        Some(t) => TilingSpec::new(t, s.items_per_thread.unwrap_or(default.items_per_thread))
            .map_err(|e| Error::config("stencil.tile", e.to_string()))?,
        None => default,
    };
    let grid_ext: Vec<usize> = s.domain.iter().map(|e| e + 2 * spec.rad).collect();
    let layout =
        TileLayout::new(&spec, &grid_ext, &tiling).map_err(|e| Error::config("stencil.tile", e.to_string()))?;
    Ok(StencilSetup {
        spec,
        tiling,
        grid_ext,
        layout,
        eb: cfg.precision()?,
    })
}

fn stencil_usage(cfg: &RunConfig, st: &StencilSetup) -> KernelUsage {
    let d = stencil::default_usage(&st.layout, &st.tiling, st.eb);
    let s = cfg.stencil.as_ref().expect("checked by stencil_setup");
    KernelUsage::new(
        s.reg_bytes_per_tb.unwrap_or(d.reg_bytes_per_tb),
        s.sm_bytes_per_tb.unwrap_or(d.sm_bytes_per_tb),
    )
}

fn stencil_plan(cfg: &RunConfig, st: &StencilSetup, device: &DeviceSpec) -> Result<CachePlan> {
    stencil::plan_for(&st.layout, st.eb, device, cfg.occupancy()?, stencil_usage(cfg, st))
}

struct CgSetup {
    matrix: CsrMatrix,
    source: String,
    b: Vec<f64>,
    policies: Vec<CgPolicy>,
    opts: CgOptions,
    include_x: bool,
}

fn cg_setup(cfg: &Loaded, seed: u64) -> Result<CgSetup> {
    let c = cfg
        .config
        .cg
        .as_ref()
        .ok_or_else(|| Error::config("cg", "section is required"))?;
    let (matrix, source) = match (&c.matrix, &c.generator) {
        (Some(m), None) => {
            let p = cfg.dir.join(m);
            (cg::load_matrix_market(&p)?, p.display().to_string())
        }
        (None, Some(g)) => {
            let n = c
                .size
                .ok_or_else(|| Error::config("cg.size", "is required with a generator"))?;
            if n == 0 {
                return Err(Error::config("cg.size", "must be positive"));
            }
            match g.as_str() {
                "poisson" => (CsrMatrix::poisson_2d(n), format!("poisson {n}x{n}")),
                "trefethen" => (CsrMatrix::trefethen(n), format!("trefethen {n}")),
                g => {
                    return Err(Error::config(
                        "cg.generator",
                        format!("expected poisson or trefethen, got `{g}`"),
                    ))
                }
            }
        }
        _ => return Err(Error::config("cg", "set exactly one of `matrix` or `generator`")),
    };
    if matrix.n_rows() != matrix.n_cols() {
        return Err(Error::config(
            "cg.matrix",
            format!("{}x{} is not square", matrix.n_rows(), matrix.n_cols()),
        ));
    }
    let n = matrix.n_rows();
    let b = match c.rhs.as_deref().unwrap_or("ones") {
        "ones" => vec![1.0; n],
        "random" => Grid::<f64>::random(&[n.max(1), 1], seed)?.into_data()[..n].to_vec(),
        r => return Err(Error::config("cg.rhs", format!("expected ones or random, got `{r}`"))),
    };
    let policies = match &c.policies {
        None => vec![CgPolicy::Imp],
        Some(v) if v.is_empty() => return Err(Error::config("cg.policies", "must not be empty")),
        Some(v) => v
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.parse()
                    .map_err(|e: Error| Error::config(format!("cg.policies[{i}]"), e.to_string()))
            })
            .collect::<Result<_>>()?,
    };
    let d = CgOptions::default();
    let tol = c.tol.unwrap_or(d.tol);
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::config("cg.tol", "must be positive"));
    }
    let opts = CgOptions {
        tol: if c.fixed_iterations { f64::MIN_POSITIVE } else { tol },
        max_iters: c.max_iters.unwrap_or(d.max_iters),
        tb_size: c.tb_size.unwrap_or(d.tb_size),
        tb_count: c.tb_count,
        tb_per_smx: cfg.config.occupancy()?,
        ..d
    };
    if opts.tb_size == 0 {
        return Err(Error::config("cg.tb_size", "must be positive"));
    }
    Ok(CgSetup {
        matrix,
        source,
        b,
        policies,
        opts,
        include_x: c.include_x,
    })
}

fn cmd_plan(cfg: &Loaded, device: &DeviceSpec, seed: u64) -> Result<Outcome> {
    let plan = if cfg.config.stencil.is_some() {
        let st = stencil_setup(&cfg.config)?;
        stencil_plan(&cfg.config, &st, device)?
    } else if cfg.config.cg.is_some() {
        let c = cg_setup(cfg, seed)?;
        let capacity = c.opts.tb_per_smx as usize * device.smx_count() as usize;
        let tbs = c
            .opts
            .tb_count
            .unwrap_or_else(|| cg::solver::default_tb_count(&c.matrix, &c.opts, capacity));
        let layout = cg::CgLayout::new(&c.matrix, tbs, c.opts.tb_size)?;
        planner::plan_cg(
            c.policies[0],
            &layout.footprint(),
            device,
            c.opts.tb_per_smx,
            cg::solver::default_usage(c.opts.tb_size),
        )?
    } else {
        return Err(Error::config("stencil", "plan needs a [stencil] or [cg] section"));
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} TBs at {} TB/SMX; cache budget per SMX: {} B registers, {} B shared",
        plan.tb_count, plan.tb_per_smx, plan.budget_reg, plan.budget_sm
    );
    for a in &plan.allocations {
        let _ = writeln!(
            s,
            "  {:<12} {:<8} units {}..{}  {} B/TB",
            a.region,
            a.residency.to_string(),
            a.first_unit,
            a.first_unit + a.units,
            a.bytes_per_tb
        );
    }
    let rows: Vec<Vec<String>> = plan
        .allocations
        .iter()
        .map(|a| {
            vec![
                a.region.clone(),
                a.residency.to_string(),
                a.first_unit.to_string(),
                a.units.to_string(),
                a.bytes_per_tb.to_string(),
                a.bytes.to_string(),
            ]
        })
        .collect();
    Ok(Outcome {
        summary: s,
        csv: csv_table(
            &["region", "residency", "first_unit", "units", "bytes_per_tb", "bytes"],
            &rows,
        )?,
        report: json!({ "plan": plan }),
        extra: vec![("plan.toml".into(), plan.to_toml_string())],
        passed: true,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StencilModeReport {
    pub mode: String,
    pub tb_count: usize,
    pub cached_cells_shared: u64,
    pub cached_cells_register: u64,
    pub sim_gm_elements: u64,
    pub model_gm_elements: u64,
    pub gm_delta: i64,
    pub sim_halo_elements: u64,
    pub model_halo_elements: u64,
    pub halo_delta: i64,
    pub global_bytes: u64,
    pub matches_reference: bool,
}

fn sim_gm(r: &TrafficReport) -> u64 {
    r.total.accesses(Route::Global, Category::Interior) + r.total.accesses(Route::Global, Category::TbBoundary)
}

struct StencilRuns {
    modes: Vec<StencilModeReport>,
    reports: Vec<(String, TrafficReport)>,
    equivalent: bool,
}

fn run_stencil_typed<T: Real>(
    cfg: &RunConfig,
    st: &StencilSetup,
    device: &DeviceSpec,
    seed: u64,
    steps: usize,
) -> Result<StencilRuns> {
    let input = Grid::<T>::random(&st.grid_ext, seed)?;
    let want = stencil::reference_run(&input, &st.spec, steps)?;
    let interior: Vec<u64> = cfg
        .stencil
        .as_ref()
        .expect("checked")
        .domain
        .iter()
        .map(|&e| e as u64)
        .collect();
    let domain = DomainSpec::new(&interior, st.eb)?;
    let halo = HaloGeometry::new(st.layout.tb_count as u64, st.layout.halo_cells as u64);
    let mut modes = Vec::new();
    let mut reports = Vec::new();
    let mut grids = Vec::new();
    for mode in cfg.modes()? {
        let plan = match mode {
            ExecMode::Perks => Some(stencil_plan(cfg, st, device)?),
            ExecMode::Baseline => None,
        };
        let run = stencil::run_stencil(
            &st.spec,
            &input,
            &st.tiling,
            steps,
            mode,
            plan.as_ref(),
            &RunOptions::default(),
        )?;
        let model_gm = model::gm_traffic(&domain, &run.split, steps as u64)?;
        let n = steps as u64;
        // the baseline reads halos straight from the input grid and writes no edges
        let model_halo = match mode {
            ExecMode::Perks => model::halo_traffic(&halo, n, st.eb, device).elements,
            ExecMode::Baseline => n * halo.accesses_per_step() / 2,
        };
        let sim_gm = sim_gm(&run.report);
        let sim_halo = run.report.total.accesses(Route::Global, Category::Halo);
        let name = match mode {
            ExecMode::Baseline => "baseline",
            ExecMode::Perks => "perks",
        };
        modes.push(StencilModeReport {
            mode: name.into(),
            tb_count: st.layout.tb_count,
            cached_cells_shared: run.split.cached_cells_sm,
            cached_cells_register: run.split.cached_cells_reg,
            sim_gm_elements: sim_gm,
            model_gm_elements: model_gm,
            gm_delta: sim_gm as i64 - model_gm as i64,
            sim_halo_elements: sim_halo,
            model_halo_elements: model_halo,
            halo_delta: sim_halo as i64 - model_halo as i64,
            global_bytes: run.report.global_bytes(),
            matches_reference: run.grid == want,
        });
        reports.push((name.to_string(), run.report));
        grids.push(run.grid);
    }
    let equivalent = grids.iter().all(|g| *g == want);
    Ok(StencilRuns {
        modes,
        reports,
        equivalent,
    })
}

fn run_stencils(cfg: &RunConfig, st: &StencilSetup, device: &DeviceSpec, seed: u64) -> Result<StencilRuns> {
    let steps = cfg.steps()? as usize;
    if st.eb == 4 {
        run_stencil_typed::<f32>(cfg, st, device, seed, steps)
    } else {
        run_stencil_typed::<f64>(cfg, st, device, seed, steps)
    }
}

fn traffic_csv(reports: &[(String, TrafficReport)]) -> Result<String> {
    let mut out = String::new();
    for (i, (label, r)) in reports.iter().enumerate() {
        let csv = r.to_csv()?;
        for (j, line) in csv.lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    let _ = writeln!(out, "run,{line}");
                }
                continue;
            }
            let _ = writeln!(out, "{label},{line}");
        }
    }
    Ok(out)
}

fn stencil_summary(st: &StencilSetup, runs: &StencilRuns, steps: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} on {:?} ({} TBs of {:?}), {} steps",
        st.spec.name,
        st.grid_ext,
        st.layout.tb_count,
        &st.layout.tile[..st.spec.dims],
        steps
    );
    for m in &runs.modes {
        let _ = writeln!(
            s,
            "  {:<8} GM {} (model {}, delta {})  halo {} (model {}, delta {})  cached {} cells",
            m.mode,
            m.sim_gm_elements,
            m.model_gm_elements,
            m.gm_delta,
            m.sim_halo_elements,
            m.model_halo_elements,
            m.halo_delta,
            m.cached_cells_shared + m.cached_cells_register
        );
    }
    let _ = writeln!(s, "equivalence: {}", if runs.equivalent { "PASS" } else { "FAIL" });
    let conserved = runs.modes.iter().all(|m| m.gm_delta == 0 && m.halo_delta == 0);
    let _ = writeln!(s, "conservation: {}", if conserved { "PASS" } else { "FAIL" });
    s
}

fn cmd_run_stencil(cfg: &RunConfig, device: &DeviceSpec, seed: u64) -> Result<Outcome> {
    cfg.steps()?;
    let st = stencil_setup(cfg)?;
    let runs = run_stencils(cfg, &st, device, seed)?;
    let conserved = runs.modes.iter().all(|m| m.gm_delta == 0 && m.halo_delta == 0);
    let traffic: Vec<Value> = runs
        .reports
        .iter()
        .map(|(l, r)| json!({ "mode": l, "totals": r.totals() }))
        .collect();
    Ok(Outcome {
        summary: stencil_summary(&st, &runs, cfg.steps()?),
        csv: traffic_csv(&runs.reports)?,
        report: json!({
            "stencil": st.spec.name,
            "grid": st.grid_ext,
            "seed": seed,
            "equivalence": runs.equivalent,
            "conservation": conserved,
            "modes": runs.modes,
            "traffic": traffic,
        }),
        extra: Vec::new(),
        passed: runs.equivalent && conserved,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicySummary {
    pub policy: CgPolicy,
    pub iterations: usize,
    pub converged: bool,
    pub cached_register_bytes: u64,
    pub cached_shared_bytes: u64,
    pub gm_loads: u64,
    pub gm_stores: u64,
    pub global_bytes: u64,
    pub final_residual: f64,
}

struct CgRuns {
    summaries: Vec<PolicySummary>,
    reports: Vec<(String, TrafficReport)>,
    history: Vec<f64>,
    x: Vec<f64>,
    identical: bool,
    converged: bool,
}

fn run_cg_policies(c: &CgSetup, device: &DeviceSpec) -> Result<CgRuns> {
    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    let mut first: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut identical = true;
    let mut converged = true;
    for &policy in &c.policies {
        let opts = CgOptions {
            policy,
            ..c.opts.clone()
        };
        let res = cg::cg_solve(&c.matrix, &c.b, &opts, device)?;
        let t = &res.report.total;
        let gm = |mode| {
            Category::ALL
                .iter()
                .map(|&cat| t.sum(Route::Global, cat, mode))
                .sum::<u64>()
        };
        summaries.push(PolicySummary {
            policy,
            iterations: res.state.iteration,
            converged: res.converged,
            cached_register_bytes: res.plan.bytes_in(Residency::Register),
            cached_shared_bytes: res.plan.bytes_in(Residency::Shared),
            gm_loads: gm(crate::sim::Mode::Load),
            gm_stores: gm(crate::sim::Mode::Store),
            global_bytes: res.report.global_bytes(),
            final_residual: res.state.residual_history.last().copied().unwrap_or(0.0),
        });
        converged &= res.converged;
        match &first {
            None => first = Some((res.x.clone(), res.state.residual_history.clone())),
            Some((x, h)) => identical &= *x == res.x && *h == res.state.residual_history,
        }
        reports.push((policy.name().to_string(), res.report));
    }
    let (x, history) = first.expect("at least one policy");
    Ok(CgRuns {
        summaries,
        reports,
        history,
        x,
        identical,
        converged,
    })
}

fn cg_report(c: &CgSetup, runs: &CgRuns) -> Value {
    let n = c.matrix.n_rows();
    let mut v = json!({
        "matrix": c.source,
        "rows": n,
        "nnz": c.matrix.nnz(),
        "tol": c.opts.tol,
        "max_iters": c.opts.max_iters,
        "identical_numerics": runs.identical,
        "policies": runs.summaries,
        "residual_history": runs.history,
    });
    if n <= 10_000 || c.include_x {
        v["x"] = json!(runs.x);
    }
    v
}

fn history_csv(history: &[f64]) -> Result<String> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .enumerate()
        .map(|(i, r)| vec![i.to_string(), format!("{r:e}")])
        .collect();
    csv_table(&["iteration", "rr"], &rows)
}

fn cg_summary(c: &CgSetup, runs: &CgRuns) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "CG on {} ({} rows, {} nnz)",
        c.source,
        c.matrix.n_rows(),
        c.matrix.nnz()
    );
    for p in &runs.summaries {
        let _ = writeln!(
            s,
            "  {:<7} {:>5} iterations  GM {:>12} B  cached reg {} B, shared {} B  final <r,r> {:e}",
            p.policy.name(),
            p.iterations,
            p.global_bytes,
            p.cached_register_bytes,
            p.cached_shared_bytes,
            p.final_residual
        );
    }
    let _ = writeln!(
        s,
        "identical numerics across policies: {}",
        if runs.identical { "PASS" } else { "FAIL" }
    );
    s
}

fn cmd_run_cg(cfg: &Loaded, device: &DeviceSpec, seed: u64) -> Result<Outcome> {
    let c = cg_setup(cfg, seed)?;
    let runs = run_cg_policies(&c, device)?;
    let fixed = cfg.config.cg.as_ref().is_some_and(|s| s.fixed_iterations);
    Ok(Outcome {
        summary: cg_summary(&c, &runs),
        csv: traffic_csv(&runs.reports)?,
        report: cg_report(&c, &runs),
        extra: vec![("residuals.csv".into(), history_csv(&runs.history)?)],
        passed: runs.identical && (fixed || runs.converged),
    })
}

fn cmd_compare(cfg: &Loaded, device: &DeviceSpec, seed: u64) -> Result<Outcome> {
    let reference = Reference::load()?;
    let mut report = json!({ "reference": reference });
    let mut summary = String::new();
    let mut csv = String::new();
    let mut passed = true;

    if cfg.config.stencil.is_some() {
        let c = &cfg.config;
        let st = stencil_setup(c)?;
        let runs = run_stencils(c, &st, device, seed)?;
        let interior: Vec<u64> = c
            .stencil
            .as_ref()
            .expect("checked")
            .domain
            .iter()
            .map(|&e| e as u64)
            .collect();
        let sm_per_cell = c
            .stencil
            .as_ref()
            .and_then(|s| s.sm_accesses_per_cell)
            .unwrap_or(st.spec.points() as u64 - 1);
        let steps = c.steps()?;
        let mut projections = serde_json::Map::new();
        let mut peaks = Vec::new();
        for m in &runs.modes {
            let perks = m.mode == "perks";
            let input = ProjectionInput {
                domain: DomainSpec::new(&interior, st.eb)?,
                split: CacheSplit::new(m.cached_cells_shared, m.cached_cells_register),
                halo: if perks {
                    HaloGeometry::new(st.layout.tb_count as u64, st.layout.halo_cells as u64)
                } else {
                    HaloGeometry::default()
                },
                steps,
                sm_accesses_per_cell: sm_per_cell,
            };
            let p = model::project(&input, device)?;
            peaks.push((m.mode.clone(), p.peak_gcells_per_s));
            projections.insert(m.mode.clone(), json!(p));
        }
        let speedup = match (
            peaks.iter().find(|p| p.0 == "perks"),
            peaks.iter().find(|p| p.0 == "baseline"),
        ) {
            (Some(p), Some(b)) => Some(p.1 / b.1),
            _ => None,
        };
        let conserved = runs.modes.iter().all(|m| m.gm_delta == 0 && m.halo_delta == 0);
        passed &= runs.equivalent && conserved;
        summary += &stencil_summary(&st, &runs, steps);
        for (mode, peak) in &peaks {
            let _ = writeln!(summary, "  projected peak {mode}: {peak:.2} GCells/s");
        }
        if let Some(s) = speedup {
            let _ = writeln!(summary, "  projected speedup: {s:.2}x");
        }
        csv += &traffic_csv(&runs.reports)?;
        report["stencil"] = json!({
            "stencil": st.spec.name,
            "grid": st.grid_ext,
            "equivalence": runs.equivalent,
            "conservation": conserved,
            "modes": runs.modes,
            "projections": projections,
            "projected_speedup": speedup,
        });
    }
    if cfg.config.cg.is_some() {
        let c = cg_setup(cfg, seed)?;
        let runs = run_cg_policies(&c, device)?;
        passed &= runs.identical;
        summary += &cg_summary(&c, &runs);
        if csv.is_empty() {
            csv = traffic_csv(&runs.reports)?;
        }
        report["cg"] = cg_report(&c, &runs);
    }
    if report.get("stencil").is_none() && report.get("cg").is_none() {
        return Err(Error::config("stencil", "compare needs a [stencil] or [cg] section"));
    }
    let _ = writeln!(summary, "published measurements ({}):", reference.label);
    for m in &reference.measured {
        let _ = writeln!(summary, "  {}: {} GCells/s", m.what, m.gcells_per_s);
    }
    for g in &reference.geomean_speedup {
        let _ = writeln!(summary, "  geomean speedup, {}: {}x", g.what, g.value);
    }
    Ok(Outcome {
        summary,
        report,
        csv,
        extra: Vec::new(),
        passed,
    })
}

/// Parses `args`, runs the command and writes outputs. Returns the exit code.
pub fn main_with_args<I, S>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 2;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    let out = match execute(&cli) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return 2;
        }
    };
    match &cli.out {
        Some(dir) => {
            let _ = write!(stdout, "{}", out.summary);
            match write_outputs(&out, dir, cli.format) {
                Ok(paths) => {
                    for p in paths {
                        let _ = writeln!(stdout, "wrote {}", p.display());
                    }
                }
                Err(e) => {
                    let _ = writeln!(stderr, "error: {e}");
                    return 2;
                }
            }
        }
        None => {
            let _ = write!(stdout, "{}", render(&out, cli.format));
        }
    }
    if out.passed {
        0
    } else {
        let _ = writeln!(stderr, "one or more embedded checks failed");
        1
    }
}
