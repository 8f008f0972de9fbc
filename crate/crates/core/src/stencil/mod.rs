//! Iterative stencil benchmarks run through the virtual GPU.

mod grid;
mod kernel;
mod layout;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use grid::{reference_run, reference_step, Grid};
pub use kernel::{cache_split, default_usage, footprint, plan_for, run_stencil, ExecMode, StencilRun};
pub use layout::{pack_halo_edges, unpack_halo_edges, EdgeBuffers, HaloGroup, Run, TileLayout, TilingSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Star,
    Box,
    /// Neither a full star nor a full box (3d17pt, poisson).
    Custom,
}

pub type Offset = [i32; 3];

/// A constant-coefficient stencil with its offsets in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StencilSpec {
    pub name: String,
    pub dims: usize,
    pub shape: Shape,
    pub rad: usize,
    pub offsets: Vec<Offset>,
    pub coefficients: Vec<f64>,
    pub flops_per_cell: u32,
}

/// Sort key giving the accumulation order W, E, S, C, N, then the other
/// planes: first the x axis, then the rest of the centre plane row by row,
/// then off-plane points.
fn canonical_key(o: &Offset) -> (u8, i32, i32, i32) {
    let [dx, dy, dz] = *o;
    if dy == 0 && dz == 0 && dx != 0 {
        (0, dx, 0, 0)
    } else if dz == 0 {
        (1, dy, dx, 0)
    } else {
        (2, dz, dy, dx)
    }
}

fn cube(dims: usize, r: i32) -> impl Iterator<Item = Offset> {
    let zr = if dims == 3 { r } else { 0 };
    (-zr..=zr).flat_map(move |z| (-r..=r).flat_map(move |y| (-r..=r).map(move |x| [x, y, z])))
}

fn star(dims: usize, r: i32) -> Vec<Offset> {
    cube(dims, r)
        .filter(|o| o.iter().filter(|&&c| c != 0).count() <= 1)
        .collect()
}

fn boxed(dims: usize, r: i32) -> Vec<Offset> {
    cube(dims, r).collect()
}

impl StencilSpec {
    /// Builds a spec with the default weights: 0.25 at the centre and the
    /// remaining 0.75 shared evenly, so the weights sum to one.
    pub fn new(name: &str, dims: usize, shape: Shape, mut offsets: Vec<Offset>, flops_per_cell: u32) -> Result<Self> {
        if dims != 2 && dims != 3 {
            return Err(Error::InvalidArgument(format!(
                "stencil dims must be 2 or 3, got {dims}"
            )));
        }
        if !offsets.contains(&[0, 0, 0]) || offsets.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{name}: offsets need the centre and a neighbour"
            )));
        }
        if dims == 2 && offsets.iter().any(|o| o[2] != 0) {
            return Err(Error::InvalidArgument(format!("{name}: 2D stencil with a z offset")));
        }
        offsets.sort_by_key(canonical_key);
        offsets.dedup();
        let rad = offsets
            .iter()
            .flat_map(|o| o.iter().map(|c| c.unsigned_abs()))
            .max()
            .unwrap_or(0) as usize;
        let side = 0.75 / (offsets.len() - 1) as f64;
        let coefficients = offsets
            .iter()
            .map(|o| if *o == [0, 0, 0] { 0.25 } else { side })
            .collect();
        Ok(StencilSpec {
            name: name.to_string(),
            dims,
            shape,
            rad,
            offsets,
            coefficients,
            flops_per_cell,
        })
    }

    pub fn star(name: &str, dims: usize, rad: usize, flops: u32) -> Result<Self> {
        Self::new(name, dims, Shape::Star, star(dims, rad as i32), flops)
    }

    pub fn boxed(name: &str, dims: usize, rad: usize, flops: u32) -> Result<Self> {
        Self::new(name, dims, Shape::Box, boxed(dims, rad as i32), flops)
    }

    /// Replaces the weights; `weights[k]` belongs to `offsets[k]`.
    pub fn with_coefficients(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.offsets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} has {} points but {} weights were given",
                self.name,
                self.offsets.len(),
                weights.len()
            )));
        }
        self.coefficients = weights;
        Ok(self)
    }

    pub fn points(&self) -> usize {
        self.offsets.len()
    }

    /// Index of an offset in the accumulation order.
    pub fn position(&self, o: Offset) -> Option<usize> {
        self.offsets.iter().position(|&p| p == o)
    }
}

impl fmt::Display for StencilSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.name, self.rad, self.flops_per_cell)
    }
}

/// The thirteen benchmark stencils with their order and FLOPs per cell.
pub fn benchmark_table() -> Vec<StencilSpec> {
    let s = |n, d, r, f| StencilSpec::star(n, d, r, f).expect("valid star");
    let b = |n, d, r, f| StencilSpec::boxed(n, d, r, f).expect("valid box");
    // centre plane as a 3x3 box plus the four (x,z) and four (y,z) diagonals
    let d3_17: Vec<Offset> = boxed(2, 1)
        .into_iter()
        .chain([[-1, 0, -1], [1, 0, -1], [-1, 0, 1], [1, 0, 1]])
        .chain([[0, -1, -1], [0, 1, -1], [0, -1, 1], [0, 1, 1]])
        .collect();
    // faces and edges of the unit cube
    let poisson: Vec<Offset> = boxed(3, 1)
        .into_iter()
        .filter(|o| o.iter().filter(|&&c| c != 0).count() <= 2)
        .collect();
    vec![
        s("2d5pt", 2, 1, 10),
        s("2ds9pt", 2, 2, 18),
        s("2d13pt", 2, 3, 26),
        s("2d17pt", 2, 4, 34),
        s("2d21pt", 2, 5, 42),
        s("2ds25pt", 2, 6, 59),
        b("2d9pt", 2, 1, 18),
        b("2d25pt", 2, 2, 50),
        s("3d7pt", 3, 1, 14),
        s("3d13pt", 3, 2, 26),
        StencilSpec::new("3d17pt", 3, Shape::Custom, d3_17, 34).expect("valid 3d17pt"),
        b("3d27pt", 3, 1, 54),
        StencilSpec::new("poisson", 3, Shape::Custom, poisson, 38).expect("valid poisson"),
    ]
}

pub fn lookup(name: &str) -> Result<StencilSpec> {
    benchmark_table()
        .into_iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::NotFound(format!("stencil `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_entries() {
        let t = benchmark_table();
        assert_eq!(t.len(), 13);
        let expect = [
            ("2d5pt", 1, 10, 5),
            ("2ds9pt", 2, 18, 9),
            ("2d13pt", 3, 26, 13),
            ("2d17pt", 4, 34, 17),
            ("2d21pt", 5, 42, 21),
            ("2ds25pt", 6, 59, 25),
            ("2d9pt", 1, 18, 9),
            ("2d25pt", 2, 50, 25),
            ("3d7pt", 1, 14, 7),
            ("3d13pt", 2, 26, 13),
            ("3d17pt", 1, 34, 17),
            ("3d27pt", 1, 54, 27),
            ("poisson", 1, 38, 19),
        ];
        for (spec, (name, rad, flops, pts)) in t.iter().zip(expect) {
            assert_eq!(
                (spec.name.as_str(), spec.rad, spec.flops_per_cell, spec.points()),
                (name, rad, flops, pts)
            );
        }
        assert_eq!(lookup("2ds25pt").unwrap().rad, 6);
        assert_eq!(lookup("3d27pt").unwrap().flops_per_cell, 54);
        assert!(matches!(lookup("4d1pt"), Err(Error::NotFound(_))));
    }

    #[test]
    fn canonical_order_is_w_e_s_c_n() {
        let s = lookup("2d5pt").unwrap();
        assert_eq!(s.offsets, vec![[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 0, 0], [0, 1, 0]]);
        let s = lookup("3d7pt").unwrap();
        assert_eq!(&s.offsets[5..], &[[0, 0, -1], [0, 0, 1]]);
    }

    #[test]
    fn weights_sum_to_one() {
        for s in benchmark_table() {
            let sum: f64 = s.coefficients.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "{}", s.name);
        }
        assert!(lookup("2d5pt").unwrap().with_coefficients(vec![1.0]).is_err());
    }

    #[test]
    fn custom_shapes_are_symmetric() {
        for name in ["3d17pt", "poisson"] {
            let s = lookup(name).unwrap();
            for o in &s.offsets {
                assert!(s.position([-o[0], -o[1], -o[2]]).is_some());
            }
        }
    }
}
