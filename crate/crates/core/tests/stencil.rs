use perks::device::DeviceSpec;
use perks::model::{self, DomainSpec, HaloGeometry};
use perks::sim::{Category, Route, RunOptions, TbOrder};
use perks::stencil::{self, lookup, reference_run, run_stencil, ExecMode, Grid, TileLayout, TilingSpec};
use proptest::prelude::*;

fn a100() -> DeviceSpec {
    DeviceSpec::preset("a100").unwrap()
}

#[test]
fn fully_cached_2d5pt_reads_the_domain_once() {
    let spec = lookup("2d5pt").unwrap();
    let tiling = TilingSpec::new(&[16, 16], 1).unwrap();
    let input = Grid::<f32>::framed(&[64, 64], 1, 3).unwrap();
    let layout = TileLayout::new(&spec, input.extents(), &tiling).unwrap();
    let usage = stencil::default_usage(&layout, &tiling, 4);
    let plan = stencil::plan_for(&layout, 4, &a100(), 1, usage).unwrap();
    let run = run_stencil(
        &spec,
        &input,
        &tiling,
        10,
        ExecMode::Perks,
        Some(&plan),
        &RunOptions::default(),
    )
    .unwrap();

    assert_eq!(run.split.cached_cells(), 64 * 64, "64x64 fits on chip");

    let t = &run.report.total;
    let own = t.accesses(Route::Global, Category::Interior) + t.accesses(Route::Global, Category::TbBoundary);
    assert_eq!(own, 2 * 64 * 64);
    let halo = HaloGeometry::new(layout.tb_count as u64, layout.halo_cells as u64);
    let want = model::halo_traffic(&halo, 10, 4, &a100()).elements;
    assert_eq!(t.accesses(Route::Global, Category::Halo), want);
    let domain = DomainSpec::new(&[64, 64], 4).unwrap();
    assert_eq!(own, model::gm_traffic(&domain, &run.split, 10).unwrap());
    assert_eq!(run.grid, reference_run(&input, &spec, 10).unwrap());
}

#[test]
fn baseline_touches_the_domain_every_step() {
    let spec = lookup("2d5pt").unwrap();
    let tiling = TilingSpec::new(&[16, 16], 1).unwrap();
    let input = Grid::<f32>::framed(&[64, 64], 1, 3).unwrap();
    let run = run_stencil(
        &spec,
        &input,
        &tiling,
        10,
        ExecMode::Baseline,
        None,
        &RunOptions::default(),
    )
    .unwrap();
    let t = &run.report.total;
    let own = t.accesses(Route::Global, Category::Interior) + t.accesses(Route::Global, Category::TbBoundary);
    assert_eq!(own, 2 * 10 * 64 * 64);
}

#[test]
fn tb_order_does_not_change_results() {
    let spec = lookup("2d9pt").unwrap();
    let tiling = TilingSpec::new(&[8, 8], 1).unwrap();
    let input = Grid::<f64>::framed(&[32, 24], spec.rad, 9).unwrap();
    let fwd = run_stencil(&spec, &input, &tiling, 6, ExecMode::Perks, None, &RunOptions::default()).unwrap();
    let opts = RunOptions {
        order: TbOrder::Reverse,
    };
    let rev = run_stencil(&spec, &input, &tiling, 6, ExecMode::Perks, None, &opts).unwrap();
    assert_eq!(fwd.grid, rev.grid);
    assert_eq!(fwd.report.total, rev.report.total);
}

#[test]
fn three_d_modes_agree() {
    let spec = lookup("3d7pt").unwrap();
    let tiling = TilingSpec::new(&[8, 4, 4], 2).unwrap();
    let input = Grid::<f64>::framed(&[16, 8, 8], 1, 4).unwrap();
    let want = reference_run(&input, &spec, 5).unwrap();
    for mode in [ExecMode::Baseline, ExecMode::Perks] {
        let run = run_stencil(&spec, &input, &tiling, 5, mode, None, &RunOptions::default()).unwrap();
        assert_eq!(run.grid, want, "{mode:?}");
    }
}

#[test]
fn tile_that_does_not_divide_is_rejected() {
    let spec = lookup("2d5pt").unwrap();
    let tiling = TilingSpec::new(&[16, 16], 1).unwrap();
    let input = Grid::<f32>::framed(&[40, 32], 1, 0).unwrap();
    assert!(run_stencil(
        &spec,
        &input,
        &tiling,
        1,
        ExecMode::Baseline,
        None,
        &RunOptions::default()
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perks_equals_reference(
        tx in 1usize..4, ty in 1usize..4, steps in 1usize..8, seed in any::<u64>(), which in 0usize..2,
    ) {
        let spec = lookup(["2d5pt", "2ds9pt"][which]).unwrap();
        let t = 8;
        let tiling = TilingSpec::new(&[t, t], 1).unwrap();
        let input = Grid::<f32>::framed(&[tx * t, ty * t], spec.rad, seed).unwrap();
        let run = run_stencil(&spec, &input, &tiling, steps, ExecMode::Perks, None, &RunOptions::default()).unwrap();
        prop_assert_eq!(run.grid, reference_run(&input, &spec, steps).unwrap());
    }
}
