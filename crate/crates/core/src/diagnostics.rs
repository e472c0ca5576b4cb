//! Moment series, conservation ledgers, estimate checks and run manifests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Per-event relative tolerance for conserved quantities.
pub const EVENT_TOL: f64 = 1e-12;
/// Relative tolerance on the cumulative drift of a run.
pub const DRIFT_TOL: f64 = 1e-9;

/// `(N0 + C T (M0 + E0)) e^{C T} + M0 + E0`.
pub fn gronwall_bound(n0: f64, m0: f64, e0: f64, c: f64, t: f64) -> f64 {
    let ct = c * t;
    (n0 + ct * (m0 + e0)) * ct.exp() + m0 + e0
}

/// One row of ensemble moments, all weighted by the particle weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "Px")]
    pub px: f64,
    #[serde(rename = "Py")]
    pub py: f64,
    #[serde(rename = "Pz")]
    pub pz: f64,
    #[serde(rename = "Ekin")]
    pub ekin: f64,
    #[serde(rename = "Eint")]
    pub eint: f64,
    #[serde(rename = "Etot")]
    pub etot: f64,
    /// `sum w m |x|^2` in unwrapped coordinates.
    #[serde(rename = "Mx2")]
    pub mx2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentSeries {
    pub rows: Vec<MomentRow>,
    /// `int f^s` per row where the producer can define it.
    pub ls: Option<Vec<f64>>,
    pub d1: Option<Vec<f64>>,
    pub d2: Option<Vec<f64>>,
}

impl MomentSeries {
    pub fn push(&mut self, row: MomentRow) {
        if let Some(last) = self.rows.last() {
            assert!(row.t > last.t, "moment rows must have increasing t");
        }
        self.rows.push(row);
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self, csv::Error> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<Result<Vec<MomentRow>, _>>()?;
        Ok(MomentSeries { rows, ..Default::default() })
    }
}

/// Conservation and event accounting for one step of a particle run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub step: u64,
    pub t: f64,
    pub coag_candidates: u64,
    pub coag_events: u64,
    pub frag_events: u64,
    pub frag_skips: u64,
    /// Expected fragmentation events and their variance for this step.
    pub frag_expected: f64,
    pub frag_variance: f64,
    pub duplications: u64,
    pub particles: u64,
    pub max_event_mass: f64,
    pub max_event_momentum: f64,
    pub max_event_energy: f64,
    pub drift_mass: f64,
    pub drift_momentum: f64,
    pub drift_energy: f64,
    pub coag_acceptance: f64,
    pub frag_sampler_acceptance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConservationLedger {
    pub rows: Vec<LedgerRow>,
}

impl ConservationLedger {
    pub fn total_events(&self) -> u64 {
        self.rows.iter().map(|r| r.coag_events + r.frag_events).sum()
    }

    pub fn total_skips(&self) -> u64 {
        self.rows.iter().map(|r| r.frag_skips).sum()
    }

    pub fn max_event_residual(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.max_event_mass.max(r.max_event_momentum).max(r.max_event_energy))
            .fold(0.0, f64::max)
    }

    pub fn max_drift(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.drift_mass.max(r.drift_momentum).max(r.drift_energy))
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self, csv::Error> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<Result<Vec<LedgerRow>, _>>()?;
        Ok(ConservationLedger { rows })
    }
}

/// Inputs of the estimate checks beyond the series itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateInputs {
    /// Gronwall constant; `None` skips the particle-count item.
    pub gronwall_c: Option<f64>,
    pub pure_coagulation: bool,
    /// Relative tolerance on conserved totals.
    pub conservation_tol: f64,
    /// Relative slack on the space-moment slope and `L^s` items.
    pub slope_tol: f64,
}

impl Default for EstimateInputs {
    fn default() -> Self {
        EstimateInputs {
            gronwall_c: None,
            pure_coagulation: false,
            conservation_tol: DRIFT_TOL,
            slope_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    /// Smallest `(allowed - observed)` margin; negative when failed.
    pub worst_margin: f64,
    pub worst_row: Option<usize>,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub items: Vec<CheckItem>,
}

impl EstimateReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

fn item(name: &str, margins: impl Iterator<Item = f64>) -> CheckItem {
    let mut worst = f64::INFINITY;
    let mut row = None;
    for (i, m) in margins.enumerate() {
        if m < worst || m.is_nan() {
            worst = m;
            row = Some(i);
        }
    }
    CheckItem {
        name: name.to_string(),
        passed: !(worst < 0.0) && !worst.is_nan(),
        worst_margin: worst,
        worst_row: row,
        skipped: false,
    }
}

fn skipped(name: &str) -> CheckItem {
    CheckItem {
        name: name.to_string(),
        passed: true,
        worst_margin: f64::INFINITY,
        worst_row: None,
        skipped: true,
    }
}

/// Uniform-in-time checks of a moment series: conserved totals, the Gronwall
/// particle bound, the space-moment slope inequality and, for pure
/// coagulation, boundedness of `int f^s`.
pub fn check_estimates(series: &MomentSeries, inputs: &EstimateInputs) -> EstimateReport {
    let rows = &series.rows;
    let mut items = Vec::new();
    let Some(r0) = rows.first() else {
        return EstimateReport { items };
    };
    let tol = inputs.conservation_tol;
    let rel = |v: f64, v0: f64, scale: f64| tol - (v - v0).abs() / scale.max(f64::MIN_POSITIVE);
    let m_scale = r0.m.abs();
    items.push(item("mass_conservation", rows.iter().map(|r| rel(r.m, r0.m, m_scale))));
    let p_scale = r0.px.abs().max(r0.py.abs()).max(r0.pz.abs()).max((2.0 * r0.m * r0.etot).sqrt()).max(m_scale * f64::EPSILON);
    items.push(item(
        "momentum_conservation",
        rows.iter().map(|r| {
            rel(r.px, r0.px, p_scale).min(rel(r.py, r0.py, p_scale)).min(rel(r.pz, r0.pz, p_scale))
        }),
    ));
    let e_scale = r0.etot.abs().max(if r0.etot == 0.0 { 1.0 } else { 0.0 });
    items.push(item("energy_conservation", rows.iter().map(|r| rel(r.etot, r0.etot, e_scale))));
    match inputs.gronwall_c {
        Some(c) => items.push(item(
            "particle_bound",
            rows.iter().map(|r| {
                let b = gronwall_bound(r0.n, r0.m, r0.etot, c, (r.t - r0.t).max(0.0));
                if b.is_infinite() {
                    f64::INFINITY
                } else {
                    (b - r.n) / b.max(f64::MIN_POSITIVE)
                }
            }),
        )),
        None => items.push(skipped("particle_bound")),
    }
    let slope_rhs = |r: &MomentRow| 2.0 * (r.mx2 * 2.0 * r.ekin).max(0.0).sqrt();
    items.push(item(
        "space_moment_slope",
        std::iter::once(f64::INFINITY).chain(rows.windows(2).map(|w| {
            let slope = (w[1].mx2 - w[0].mx2) / (w[1].t - w[0].t);
            let bound = slope_rhs(&w[0]).max(slope_rhs(&w[1]));
            let scale = bound.max(w[0].mx2.abs() / (w[1].t - w[0].t) * 1e-12).max(f64::MIN_POSITIVE);
            (bound * (1.0 + inputs.slope_tol) - slope) / scale
        })),
    ));
    match (&series.ls, inputs.pure_coagulation) {
        (Some(ls), true) if !ls.is_empty() => {
            let l0 = ls[0];
            let scale = l0.abs().max(f64::MIN_POSITIVE);
            items.push(item(
                "ls_bounded",
                ls.iter().map(|&l| (l0 * (1.0 + inputs.slope_tol) - l) / scale),
            ))
        }
        _ => items.push(skipped("ls_bounded")),
    }
    EstimateReport { items }
}

/// Histogram estimate of `int f^s` over the `(m, e)` marginal of a weighted
/// particle set. The value depends on the binning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLs {
    pub value: f64,
    pub bins_m: usize,
    pub bins_e: usize,
    pub estimator_dependent: bool,
}

pub fn empirical_ls(
    samples: &[(f64, f64, f64)],
    s: f64,
    m_max: f64,
    e_max: f64,
    bins_m: usize,
    bins_e: usize,
) -> EmpiricalLs {
    let mut h = vec![0.0; bins_m * bins_e];
    let (dm, de) = (m_max / bins_m as f64, e_max / bins_e as f64);
    for &(w, m, e) in samples {
        let i = (m / dm) as usize;
        let j = (e / de) as usize;
        if i < bins_m && j < bins_e {
            h[i * bins_e + j] += w;
        }
    }
    let cell = dm * de;
    let value = h.iter().map(|&c| (c / cell).powf(s) * cell).sum();
    EmpiricalLs { value, bins_m, bins_e, estimator_dependent: true }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub kernels: BTreeMap<String, String>,
    pub audit_report: Option<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_bytes: &[u8], seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_sha256: config_hash(config_bytes),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            kernels: BTreeMap::new(),
            audit_report: None,
            outputs: Vec::new(),
        }
    }
}

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
