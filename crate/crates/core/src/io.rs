//! Run configuration files and output writers.

use crate::audit::AuditConfig;
use crate::dsmc::{DsmcConfig, Domain, InitialSampler};
use crate::homogeneous::{HomoRow, HomogeneousConfig, MassGrid, SectionalState};
use crate::kernels::{BuiltinCoag, BuiltinFrag, KernelSuite, MassKernelSuite};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("config is missing section `{0}`")]
    Missing(&'static str),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ConfigError {
    fn field(path: &str, message: impl ToString) -> Self {
        ConfigError::Field { path: path.to_string(), message: message.to_string() }
    }
}

/// Kernel name plus its numeric parameters, e.g. `{"name": "constant", "a0": 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsSection {
    pub coag: KernelSpec,
    pub frag: KernelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(rename = "C0", default = "default_c0")]
    pub c0: f64,
}

fn default_s() -> f64 {
    1.5
}
fn default_delta() -> f64 {
    0.2
}
fn default_c0() -> f64 {
    3.0
}

impl Default for SuiteSection {
    fn default() -> Self {
        SuiteSection { s: default_s(), delta: default_delta(), c0: default_c0() }
    }
}

/// Spatial box and particle data of a DSMC run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(default = "one")]
    pub cells: usize,
    pub particles: usize,
    pub initial: InitialSampler,
    #[serde(default)]
    pub duplicate_below: Option<f64>,
    #[serde(default)]
    pub max_particles: Option<usize>,
    #[serde(default)]
    pub b1_cache_nodes: Option<usize>,
    #[serde(default)]
    pub b1_budget: Option<u64>,
    #[serde(default)]
    pub sampler_floor: Option<f64>,
}

fn one() -> usize {
    1
}

/// Initial data of a homogeneous run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HomoInitial {
    Monodisperse { mass: f64, number: f64 },
    Exponential { number: f64, mean: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub m_min: f64,
    pub ratio: f64,
    pub bins: usize,
    pub initial: HomoInitial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub cadence: f64,
    #[serde(default)]
    pub dt_min: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    /// Growth-probe radii.
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
    #[serde(default)]
    pub samples: Option<u64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub quadrature_samples: Option<u64>,
    #[serde(default)]
    pub weight_radii: Option<Vec<f64>>,
    #[serde(default)]
    pub weight_samples: Option<u64>,
    #[serde(default)]
    pub growth_tol: Option<f64>,
}

/// Top-level configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kernels: KernelsSection,
    #[serde(default)]
    pub suite: SuiteSection,
    #[serde(default)]
    pub domain: Option<DomainSection>,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub time: Option<TimeSection>,
    #[serde(default)]
    pub audit: Option<AuditSection>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(s);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Field { path, message: e.into_inner().to_string() }
        })
    }

    pub fn from_path(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let text = String::from_utf8_lossy(&bytes);
        Ok((Self::from_json_str(&text)?, bytes))
    }

    fn coag(&self) -> Result<BuiltinCoag, ConfigError> {
        BuiltinCoag::from_name(&self.kernels.coag.name, &self.kernels.coag.params)
            .map_err(|e| ConfigError::field("kernels.coag", e))
    }

    fn frag(&self) -> Result<BuiltinFrag, ConfigError> {
        BuiltinFrag::from_name(&self.kernels.frag.name, &self.kernels.frag.params)
            .map_err(|e| ConfigError::field("kernels.frag", e))
    }

    pub fn kernel_suite(&self) -> Result<KernelSuite, ConfigError> {
        KernelSuite::new(
            Arc::new(self.coag()?),
            Arc::new(self.frag()?),
            self.suite.c0,
            self.suite.s,
            self.suite.delta,
        )
        .map_err(|e| ConfigError::field("suite", e))
    }

    pub fn mass_suite(&self) -> Result<MassKernelSuite, ConfigError> {
        let coag = self.coag()?.mass_only().map_err(|e| ConfigError::field("kernels.coag", e))?;
        let frag = self.frag()?.mass_only().map_err(|e| ConfigError::field("kernels.frag", e))?;
        MassKernelSuite::new(coag, frag, self.suite.s, self.suite.delta).map_err(|e| ConfigError::field("suite", e))
    }

    fn time(&self) -> Result<&TimeSection, ConfigError> {
        self.time.as_ref().ok_or(ConfigError::Missing("time"))
    }

    pub fn homogeneous(&self) -> Result<(HomogeneousConfig, SectionalState), ConfigError> {
        let g = self.grid.as_ref().ok_or(ConfigError::Missing("grid"))?;
        let t = self.time()?;
        let grid = MassGrid::geometric(g.m_min, g.ratio, g.bins).map_err(|e| ConfigError::field("grid", e))?;
        let init = match g.initial {
            HomoInitial::Monodisperse { mass, number } => SectionalState::monodisperse(&grid, mass, number)
                .map_err(|e| ConfigError::field("grid.initial", e))?,
            HomoInitial::Exponential { number, mean } => SectionalState::exponential(&grid, number, mean),
        };
        let cfg = HomogeneousConfig {
            suite: self.mass_suite()?,
            grid,
            t_end: t.t_end,
            dt: t.dt,
            dt_min: t.dt_min.unwrap_or(t.dt * 1e-6),
            cadence: t.cadence,
        };
        cfg.validate().map_err(|e| ConfigError::field("time", e))?;
        Ok((cfg, init))
    }

    /// DSMC parameters; `seed` and `budget` override the file values.
    pub fn dsmc(&self, seed: Option<u64>, budget: Option<usize>) -> Result<(DsmcConfig, InitialSampler), ConfigError> {
        let d = self.domain.as_ref().ok_or(ConfigError::Missing("domain"))?;
        let t = self.time()?;
        let domain = Domain::new(d.length, d.cells).map_err(|e| ConfigError::field("domain", e))?;
        let seed = seed.or(self.seed).unwrap_or(0);
        let mut cfg = DsmcConfig::new(domain, budget.unwrap_or(d.particles), t.dt, t.t_end, seed, self.kernel_suite()?);
        cfg.cadence = t.cadence;
        if let Some(v) = d.duplicate_below {
            cfg.duplicate_below = v;
        }
        if let Some(v) = d.max_particles {
            cfg.max_particles = v;
        }
        if let Some(v) = d.b1_cache_nodes {
            cfg.b1_cache_nodes = v;
        }
        if let Some(v) = d.b1_budget {
            cfg.b1_budget = v;
        }
        if let Some(v) = d.sampler_floor {
            cfg.sampler_floor = v;
        }
        cfg.validate().map_err(|e| ConfigError::field("domain", e))?;
        Ok((cfg, d.initial.clone()))
    }

    pub fn audit_config(&self, budget: Option<u64>) -> AuditConfig {
        let mut c = AuditConfig::default();
        if let Some(a) = &self.audit {
            if let Some(v) = &a.radii {
                c.growth_radii = v.clone();
            }
            if let Some(v) = a.samples {
                c.samples = v;
            }
            if let Some(v) = a.gamma {
                c.gamma = v;
            }
            if let Some(v) = a.r {
                c.r = v;
            }
            if let Some(v) = a.quadrature_samples {
                c.quadrature_samples = v;
            }
            if let Some(v) = &a.weight_radii {
                c.weight_radii = v.clone();
            }
            if let Some(v) = a.weight_samples {
                c.weight_samples = v;
            }
            if let Some(v) = a.growth_tol {
                c.growth_tol = v;
            }
        }
        if let Some(b) = budget {
            c.samples = b;
        }
        c
    }
}

/// Writes `t, N, M, Ls, D1, D2, overflow_mass` rows.
pub fn write_homo_csv<W: std::io::Write>(rows: &[HomoRow], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "N", "M", "Ls", "D1", "D2", "overflow_mass"])?;
    for r in rows {
        wr.write_record([r.t, r.n, r.m, r.ls, r.d1, r.d2, r.overflow_mass].map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads rows written by [`write_homo_csv`]; the cumulative integrals are not stored.
pub fn read_homo_csv<R: std::io::Read>(r: R) -> Result<Vec<[f64; 7]>, csv::Error> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"{
        "kernels": {"coag": {"name": "constant", "a0": 1.0}, "frag": {"name": "constant", "b0": 0.1, "c0": 3}},
        "suite": {"s": 1.5, "delta": 0.2, "C0": 3.0},
        "domain": {"L": 1.0, "cells": 2, "particles": 1000,
                   "initial": {"kind": "monodisperse", "m": 1.0, "p": [0, 0, 0], "e": 1.0, "concentration": 1.0}},
        "time": {"dt": 0.01, "T": 1.0, "cadence": 0.1},
        "audit": {"radii": [100, 1000], "samples": 5000, "gamma": 5.5},
        "seed": 11
    }"#;

    #[test]
    fn parses_full_config() {
        let c = RunConfig::from_json_str(FULL).unwrap();
        assert_eq!(c.kernels.frag.params["c0"], 3.0);
        let suite = c.kernel_suite().unwrap();
        assert_eq!(suite.c0, 3.0);
        let (d, s) = c.dsmc(None, None).unwrap();
        assert_eq!(d.seed, 11);
        assert_eq!(d.particles, 1000);
        assert_eq!(d.domain.cells, 2);
        assert!(matches!(s, InitialSampler::Monodisperse { .. }));
        let (d, _) = c.dsmc(Some(5), Some(10)).unwrap();
        assert_eq!((d.seed, d.particles), (5, 10));
        let a = c.audit_config(None);
        assert_eq!(a.growth_radii, vec![100.0, 1000.0]);
        assert_eq!(a.samples, 5000);
        assert!(matches!(c.homogeneous(), Err(ConfigError::Missing("grid"))));
    }

    #[test]
    fn errors_name_the_field() {
        let bad = FULL.replace(r#""dt": 0.01"#, r#""dt": "fast""#);
        match RunConfig::from_json_str(&bad) {
            Err(ConfigError::Field { path, .. }) => assert_eq!(path, "time.dt"),
            other => panic!("{other:?}"),
        }
        let bad = FULL.replace(r#""cells": 2"#, r#""cels": 2"#);
        match RunConfig::from_json_str(&bad) {
            Err(ConfigError::Field { path, message }) => {
                assert!(path.starts_with("domain"), "{path}");
                assert!(message.contains("cels"));
            }
            other => panic!("{other:?}"),
        }
        let bad = FULL.replace(r#""a0": 1.0"#, r#""a1": 1.0"#);
        let c = RunConfig::from_json_str(&bad).unwrap();
        match c.kernel_suite() {
            Err(ConfigError::Field { path, message }) => {
                assert_eq!(path, "kernels.coag");
                assert!(message.contains("a1"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn homogeneous_section() {
        let text = r#"{
            "kernels": {"coag": {"name": "constant"}, "frag": {"name": "zero"}},
            "grid": {"m_min": 0.0625, "ratio": 1.09, "bins": 128, "initial": {"kind": "monodisperse", "mass": 1, "number": 1}},
            "time": {"dt": 0.05, "T": 2, "cadence": 0.5}
        }"#;
        let c = RunConfig::from_json_str(text).unwrap();
        let (h, s) = c.homogeneous().unwrap();
        assert_eq!(h.grid.len(), 128);
        assert!((s.number(&h.grid) - 1.0).abs() < 1e-12);
        assert!(c.dsmc(None, None).is_err());
    }

    #[test]
    fn homo_csv_round_trip() {
        let row = HomoRow {
            t: 0.1,
            n: 1.0 / 3.0,
            m: 0.7,
            ls: 2f64.sqrt(),
            d1: 1e-300,
            d2: 0.0,
            overflow_mass: 5e-17,
            int_d1: 0.0,
            int_frag_gain: 0.0,
            int_frag_loss: 0.0,
        };
        let mut buf = Vec::new();
        write_homo_csv(&[row.clone()], &mut buf).unwrap();
        let back = read_homo_csv(&buf[..]).unwrap();
        assert_eq!(back[0], [row.t, row.n, row.m, row.ls, row.d1, row.d2, row.overflow_mass]);
    }

    #[test]
    fn config_round_trip() {
        let c = RunConfig::from_json_str(FULL).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json_str(&text).unwrap(), c);
    }
}
