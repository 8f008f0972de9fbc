//! Published hardware measurements and benchmark metadata, for display next
//! to projections. None of these numbers are produced by this crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REFERENCE_TOML: &str = include_str!("../configs/reference.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub label: String,
    pub measured: Vec<Measured>,
    pub geomean_speedup: Vec<Geomean>,
    pub dataset: Vec<Dataset>,
    pub domain_preset: Vec<DomainPreset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Measured {
    pub what: String,
    pub device: String,
    pub gcells_per_s: f64,
    pub fraction_of_projected_peak: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geomean {
    pub what: String,
    pub value: f64,
}

/// A SuiteSparse matrix used in the CG evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub id: String,
    pub name: String,
    pub rows: u64,
    pub nnz: u64,
}

/// Largest domains used per stencil, device and precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPreset {
    pub stencil: String,
    pub a100_single: Vec<u64>,
    pub v100_single: Vec<u64>,
    pub a100_double: Vec<u64>,
    pub v100_double: Vec<u64>,
}

impl Reference {
    pub fn load() -> Result<Self> {
        toml::from_str(REFERENCE_TOML).map_err(|e| Error::InvalidArgument(format!("reference metadata: {e}")))
    }

    pub fn dataset(&self, name: &str) -> Option<&Dataset> {
        self.dataset
            .iter()
            .find(|d| d.name.eq_ignore_ascii_case(name) || d.id.eq_ignore_ascii_case(name))
    }

    pub fn domain(&self, stencil: &str, device: &str, elem_bytes: u64) -> Option<&[u64]> {
        let p = self.domain_preset.iter().find(|p| p.stencil == stencil)?;
        Some(match (device, elem_bytes) {
            ("a100", 4) => &p.a100_single,
            ("v100", 4) => &p.v100_single,
            ("a100", 8) => &p.a100_double,
            ("v100", 8) => &p.v100_double,
            _ => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cg::CsrMatrix;
    use crate::stencil::benchmark_table;

    #[test]
    fn loads_and_is_labelled() {
        let r = Reference::load().unwrap();
        assert_eq!(r.label, "measured on hardware, not reproduced here");
        assert_eq!(r.dataset.len(), 20);
        assert_eq!(r.domain("2d5pt", "a100", 4), Some(&[4608, 3072][..]));
        assert_eq!(r.domain("3d7pt", "v100", 8), Some(&[128, 128, 128][..]));
        assert!(r.domain("2d5pt", "h100", 4).is_none());
    }

    #[test]
    fn every_benchmark_has_a_preset() {
        let r = Reference::load().unwrap();
        for s in benchmark_table() {
            for (dev, eb) in [("a100", 4), ("v100", 4), ("a100", 8), ("v100", 8)] {
                assert_eq!(r.domain(&s.name, dev, eb).unwrap().len(), s.dims, "{}", s.name);
            }
        }
    }

    #[test]
    fn generated_trefethen_matches_dataset_row() {
        let r = Reference::load().unwrap();
        let d = r.dataset("Trefethen_2000").unwrap();
        let m = CsrMatrix::trefethen(d.rows as usize);
        assert_eq!(m.nnz() as u64, d.nnz);
    }
}
