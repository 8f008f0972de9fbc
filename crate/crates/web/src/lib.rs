//! Browser demo. Each export takes plain numbers and returns a JSON string,
//! so the page needs no bindings beyond `JSON.parse`.
//!
//! The `*_json` functions hold the logic and are tested natively; the
//! `#[wasm_bindgen]` wrappers only turn errors into JS exceptions.

use perks::cli::{self, KernelSection, RunConfig};
use perks::device::DeviceSpec;
use perks::model::{self, CacheSplit, DomainSpec, HaloGeometry, ProjectionInput};
use perks::sim::{Category, Route, RunOptions};
use perks::stencil::{self, ExecMode, Grid, TileLayout, TilingSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

type Out = std::result::Result<String, String>;

fn device(name: &str) -> std::result::Result<DeviceSpec, String> {
    DeviceSpec::preset(name).map_err(|e| e.to_string())
}

/// Projected peak of a 2D star stencil as the cached share of the domain
/// grows from 0 to 1. Registers fill first, then shared memory.
pub fn peak_curve_json(device_name: &str, nx: u64, ny: u64, elem_bytes: u64, steps: u64, points: u32) -> Out {
    let dev = device(device_name)?;
    let domain = DomainSpec::new(&[nx, ny], elem_bytes).map_err(|e| e.to_string())?;
    if points < 2 || steps == 0 {
        return Err("need at least 2 points and 1 step".into());
    }
    let smx = dev.smx_count() as u64;
    let reg_cells = dev.reg_bytes_per_smx() * smx / elem_bytes;
    let sm_cells = dev.shared_bytes_per_smx() * smx / elem_bytes;
    // one 256x8 tile per TB, as in the reference configs
    let tb_count = nx.div_ceil(256) * ny.div_ceil(8);
    let halo = HaloGeometry::star_2d(tb_count, 256, 8, 1);
    let mut rows = Vec::new();
    for i in 0..points {
        let frac = i as f64 / (points - 1) as f64;
        let want = (frac * domain.total_cells() as f64).round() as u64;
        let reg = want.min(reg_cells);
        let sm = (want - reg).min(sm_cells);
        let input = ProjectionInput {
            domain: domain.clone(),
            split: CacheSplit::new(sm, reg),
            halo,
            steps,
            sm_accesses_per_cell: 4,
        };
        let p = model::project(&input, &dev).map_err(|e| e.to_string())?;
        rows.push(json!({
            "requested_fraction": frac,
            "cached_fraction": (reg + sm) as f64 / domain.total_cells() as f64,
            "peak_gcells_per_s": p.peak_gcells_per_s,
            "bound": p.bound,
        }));
    }
    Ok(json!({ "device": dev.name(), "on_chip_cells": reg_cells + sm_cells, "points": rows }).to_string())
}

/// Per-occupancy GM operation counts, freed register and shared memory, and
/// the recommended TBs per SMX for a 2D tile kernel.
pub fn occupancy_table_json(
    device_name: &str,
    tile_x: u64,
    tile_y: u64,
    rad: u64,
    reg_bytes_per_tb: u64,
    max_occupancy: u32,
) -> Out {
    let dev = device(device_name)?;
    let cfg = RunConfig {
        kernel: Some(KernelSection {
            tile: vec![tile_x, tile_y],
            rad,
            reg_bytes_per_tb,
            max_occupancy: Some(max_occupancy),
            ..Default::default()
        }),
        ..Default::default()
    };
    let out = cli::cmd_advise(&cfg, &dev).map_err(|e| e.to_string())?;
    Ok(out.report.to_string())
}

/// Runs a named 2D stencil in both modes on the virtual GPU with the default
/// cache plan and reports global traffic and whether the grids match.
pub fn simulate_stencil_json(name: &str, nx: usize, ny: usize, tile: usize, steps: usize, seed: u64) -> Out {
    let spec = stencil::lookup(name).map_err(|e| e.to_string())?;
    if spec.dims != 2 {
        return Err(format!("{name} is 3D; the demo runs 2D stencils"));
    }
    if steps == 0 || steps > 200 || nx * ny > 256 * 256 {
        return Err("keep to at most 256x256 cells and 1..=200 steps".into());
    }
    let dev = device("a100")?;
    let tiling = TilingSpec::new(&[tile, tile], 1).map_err(|e| e.to_string())?;
    let input = Grid::<f32>::framed(&[nx, ny], spec.rad, seed).map_err(|e| e.to_string())?;
    let layout = TileLayout::new(&spec, input.extents(), &tiling).map_err(|e| e.to_string())?;
    let usage = stencil::default_usage(&layout, &tiling, 4);
    let plan = stencil::plan_for(&layout, 4, &dev, 1, usage).map_err(|e| e.to_string())?;
    let opts = RunOptions::default();
    let base = stencil::run_stencil(&spec, &input, &tiling, steps, ExecMode::Baseline, None, &opts)
        .map_err(|e| e.to_string())?;
    let perks = stencil::run_stencil(&spec, &input, &tiling, steps, ExecMode::Perks, Some(&plan), &opts)
        .map_err(|e| e.to_string())?;
    let gm = |r: &stencil::StencilRun<f32>| {
        let t = &r.report.total;
        json!({
            "own_cells": t.accesses(Route::Global, Category::Interior) + t.accesses(Route::Global, Category::TbBoundary),
            "halo": t.accesses(Route::Global, Category::Halo),
            "bytes": r.report.global_bytes(),
        })
    };
    Ok(json!({
        "stencil": spec.name,
        "tb_count": layout.tb_count,
        "cached_cells": perks.split.cached_cells(),
        "baseline": gm(&base),
        "perks": gm(&perks),
        "grids_match": base.grid == perks.grid,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn peak_curve(
    device_name: &str,
    nx: u32,
    ny: u32,
    elem_bytes: u32,
    steps: u32,
    points: u32,
) -> Result<String, JsError> {
    peak_curve_json(
        device_name,
        nx as u64,
        ny as u64,
        elem_bytes as u64,
        steps as u64,
        points,
    )
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn occupancy_table(
    device_name: &str,
    tile_x: u32,
    tile_y: u32,
    rad: u32,
    reg_bytes_per_tb: u32,
    max_occupancy: u32,
) -> Result<String, JsError> {
    occupancy_table_json(
        device_name,
        tile_x as u64,
        tile_y as u64,
        rad as u64,
        reg_bytes_per_tb as u64,
        max_occupancy,
    )
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn simulate_stencil(name: &str, nx: u32, ny: u32, tile: u32, steps: u32, seed: u32) -> Result<String, JsError> {
    simulate_stencil_json(
        name,
        nx as usize,
        ny as usize,
        tile as usize,
        steps as usize,
        seed as u64,
    )
    .map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn curve_rises_with_cached_fraction() {
        let v = parse(&peak_curve_json("a100", 3072, 3072, 4, 1000, 5).unwrap());
        let peaks: Vec<f64> = v["points"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["peak_gcells_per_s"].as_f64().unwrap())
            .collect();
        assert_eq!(peaks.len(), 5);
        assert!(peaks.windows(2).all(|w| w[1] >= w[0]), "{peaks:?}");
    }

    #[test]
    fn occupancy_table_matches_the_cli() {
        let v = parse(&occupancy_table_json("a100", 256, 8, 1, 32768, 8).unwrap());
        let rows = v["rows"].as_array().unwrap();
        assert_eq!(rows[0]["gm_loads_per_smx"], 2580);
        assert_eq!(rows[7]["unused_reg_bytes"], 0);
    }

    #[test]
    fn simulation_keeps_results_and_cuts_traffic() {
        let v = parse(&simulate_stencil_json("2d5pt", 64, 64, 16, 10, 1).unwrap());
        assert_eq!(v["grids_match"], true);
        assert!(v["perks"]["own_cells"].as_u64() < v["baseline"]["own_cells"].as_u64());
    }

    #[test]
    fn bad_input_is_an_error_string() {
        assert!(simulate_stencil_json("3d7pt", 16, 16, 8, 1, 0).is_err());
        assert!(simulate_stencil_json("nope", 16, 16, 8, 1, 0).is_err());
        assert!(peak_curve_json("a100", 0, 16, 4, 1, 4).is_err());
        assert!(occupancy_table_json("a100", 256, 8, 1, 1 << 30, 4).is_err());
    }
}
