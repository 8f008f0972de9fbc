use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StencilSpec;
use crate::error::{Error, Result};
use crate::sim::Real;

/// Dense 2D or 3D array, x fastest. A 2D grid has a z extent of 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: usize,
    ext: [usize; 3],
    data: Vec<T>,
}

fn extents3(ext: &[usize]) -> Result<[usize; 3]> {
    if !(2..=3).contains(&ext.len()) || ext.contains(&0) {
        return Err(Error::InvalidDomain(format!(
            "grid extents must be 2 or 3 positive values, got {ext:?}"
        )));
    }
    Ok([ext[0], ext[1], ext.get(2).copied().unwrap_or(1)])
}

impl<T: Real> Grid<T> {
    pub fn new(ext: &[usize], fill: T) -> Result<Self> {
        let e = extents3(ext)?;
        Ok(Grid {
            dims: ext.len(),
            ext: e,
            data: vec![fill; e.iter().product()],
        })
    }

    pub fn from_vec(ext: &[usize], data: Vec<T>) -> Result<Self> {
        let e = extents3(ext)?;
        if data.len() != e.iter().product::<usize>() {
            return Err(Error::InvalidDomain(format!(
                "{} values do not fill a {ext:?} grid",
                data.len()
            )));
        }
        Ok(Grid {
            dims: ext.len(),
            ext: e,
            data,
        })
    }

    /// Uniform values in `[0, 1)` from a seeded generator.
    pub fn random(ext: &[usize], seed: u64) -> Result<Self> {
        let mut g = Self::new(ext, T::zero())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut g.data {
            *v = T::from_f64(rng.gen::<f64>());
        }
        Ok(g)
    }

    /// Grid whose updated region is `interior`, framed by `rad` fixed cells.
    pub fn framed(interior: &[usize], rad: usize, seed: u64) -> Result<Self> {
        let mut ext = interior.to_vec();
        for e in &mut ext {
            *e += 2 * rad;
        }
        Self::random(&ext, seed)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn extents(&self) -> &[usize] {
        &self.ext[..self.dims]
    }

    pub(crate) fn ext3(&self) -> [usize; 3] {
        self.ext
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ext[1] + y) * self.ext[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Cells updated by `spec`: the grid minus a `rad` frame on active axes.
    pub fn interior(&self, spec: &StencilSpec) -> Result<[usize; 3]> {
        if spec.dims != self.dims {
            return Err(Error::InvalidDomain(format!(
                "{}D stencil {} on a {}D grid",
                spec.dims, spec.name, self.dims
            )));
        }
        let mut out = [1; 3];
        for (axis, o) in out.iter_mut().enumerate().take(self.dims) {
            if self.ext[axis] < 2 * spec.rad + 1 {
                return Err(Error::InvalidDomain(format!(
                    "extent {} on axis {axis} is smaller than the {}-point support of {}",
                    self.ext[axis],
                    2 * spec.rad + 1,
                    spec.name
                )));
            }
            *o = self.ext[axis] - 2 * spec.rad;
        }
        Ok(out)
    }
}

/// Weighted sum in the canonical order: `acc = v0*w0`, then `acc = acc + vk*wk`.
#[inline]
pub(crate) fn apply<T: Real>(weights: &[T], mut value: impl FnMut(usize) -> T) -> T {
    let mut acc = value(0) * weights[0];
    for (k, &w) in weights.iter().enumerate().skip(1) {
        acc = acc + value(k) * w;
    }
    acc
}

pub(crate) fn weights<T: Real>(spec: &StencilSpec) -> Vec<T> {
    spec.coefficients.iter().map(|&c| T::from_f64(c)).collect()
}

/// One sweep over the interior; frame cells are copied unchanged.
pub fn reference_step<T: Real>(grid: &Grid<T>, spec: &StencilSpec) -> Result<Grid<T>> {
    let interior = grid.interior(spec)?;
    let w = weights::<T>(spec);
    let r = spec.rad;
    let rz = if grid.dims == 3 { r } else { 0 };
    let mut out = grid.clone();
    for z in rz..rz + interior[2] {
        for y in r..r + interior[1] {
            for x in r..r + interior[0] {
                let v = apply(&w, |k| {
                    let [dx, dy, dz] = spec.offsets[k];
                    grid.get(
                        (x as i64 + dx as i64) as usize,
                        (y as i64 + dy as i64) as usize,
                        (z as i64 + dz as i64) as usize,
                    )
                });
                out.set(x, y, z, v);
            }
        }
    }
    Ok(out)
}

pub fn reference_run<T: Real>(grid: &Grid<T>, spec: &StencilSpec, steps: usize) -> Result<Grid<T>> {
    grid.interior(spec)?;
    let mut g = grid.clone();
    for _ in 0..steps {
        g = reference_step(&g, spec)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stencil::{benchmark_table, lookup};
    use proptest::prelude::*;

    #[test]
    fn identity_weights_copy_the_grid() {
        for spec in benchmark_table() {
            let centre = spec.position([0, 0, 0]).unwrap();
            let w = (0..spec.points())
                .map(|k| if k == centre { 1.0 } else { 0.0 })
                .collect();
            let spec = spec.with_coefficients(w).unwrap();
            let ext = vec![2 * spec.rad + 3; spec.dims];
            let g = Grid::<f64>::random(&ext, 3).unwrap();
            assert_eq!(reference_step(&g, &spec).unwrap(), g, "{}", spec.name);
        }
    }

    #[test]
    fn constant_grid_is_a_fixed_point() {
        // 0.25 + 4 * 0.1875 is exactly one in binary
        let g = Grid::<f32>::new(&[9, 7], 2.0).unwrap();
        assert_eq!(reference_step(&g, &lookup("2d5pt").unwrap()).unwrap(), g);
        for spec in benchmark_table() {
            let g = Grid::<f64>::new(&vec![2 * spec.rad + 2; spec.dims], 1.5).unwrap();
            let out = reference_step(&g, &spec).unwrap();
            assert!(out.data().iter().all(|v| (v - 1.5).abs() < 1e-14), "{}", spec.name);
        }
    }

    #[test]
    fn matches_scalar_formula() {
        let spec = lookup("2d5pt").unwrap();
        let g = Grid::<f64>::random(&[8, 8], 11).unwrap();
        let out = reference_step(&g, &spec).unwrap();
        let (c, s) = (0.25, 0.1875);
        for y in 0..8 {
            for x in 0..8 {
                let want = if x == 0 || y == 0 || x == 7 || y == 7 {
                    g.get(x, y, 0)
                } else {
                    g.get(x - 1, y, 0) * s
                        + g.get(x + 1, y, 0) * s
                        + g.get(x, y - 1, 0) * s
                        + g.get(x, y, 0) * c
                        + g.get(x, y + 1, 0) * s
                };
                assert_eq!(out.get(x, y, 0), want);
            }
        }
    }

    #[test]
    fn too_small_domains_are_rejected() {
        let g = Grid::<f64>::new(&[4, 20], 0.0).unwrap();
        assert!(matches!(
            reference_step(&g, &lookup("2ds9pt").unwrap()),
            Err(Error::InvalidDomain(_))
        ));
        let g3 = Grid::<f64>::new(&[5, 5, 5], 0.0).unwrap();
        assert!(reference_step(&g3, &lookup("2d5pt").unwrap()).is_err());
        assert!(Grid::<f64>::new(&[5], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn step_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, pick in 0usize..13) {
            let spec = benchmark_table().swap_remove(pick);
            let ext = vec![2 * spec.rad + 4; spec.dims];
            let u = Grid::<f64>::random(&ext, seed).unwrap();
            let v = Grid::<f64>::random(&ext, seed ^ 0x5555).unwrap();
            let mix: Vec<f64> = u.data().iter().zip(v.data()).map(|(x, y)| a * x + b * y).collect();
            let lhs = reference_step(&Grid::from_vec(&ext, mix).unwrap(), &spec).unwrap();
            let su = reference_step(&u, &spec).unwrap();
            let sv = reference_step(&v, &spec).unwrap();
            for ((l, x), y) in lhs.data().iter().zip(su.data()).zip(sv.data()) {
                let want = a * x + b * y;
                prop_assert!((l - want).abs() <= 1e-14 * (1.0 + want.abs()) * spec.points() as f64);
            }
        }
    }
}
