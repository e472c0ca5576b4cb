//! Sectional solver for the mass-only coagulation-fragmentation equation.
//!
//! Numbers `n_k = f_k dm_k` live on the pivots of a geometric grid. Newborn
//! and daughter masses falling between two pivots are split between them so
//! that number and mass are both reproduced; products beyond the last pivot
//! leave the grid into an overflow account.

use crate::kernels::{MassCoagKernel, MassFragKernel, MassKernelSuite};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomogeneousError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid run parameters: {0}")]
    Config(String),
    #[error("time step underflow at t = {t}: dt = {dt:e} below floor {floor:e}")]
    DtUnderflow { t: f64, dt: f64, floor: f64 },
}

/// Geometric mass grid with edges `m_min r^k`, `k = 0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassGrid {
    pub edges: Vec<f64>,
    /// Log-scale midpoints `sqrt(m_k m_{k+1})`.
    pub pivots: Vec<f64>,
    pub widths: Vec<f64>,
}

impl MassGrid {
    pub fn geometric(m_min: f64, ratio: f64, bins: usize) -> Result<Self, HomogeneousError> {
        if !(m_min > 0.0 && m_min.is_finite()) {
            return Err(HomogeneousError::Grid(format!("m_min must be positive, got {m_min}")));
        }
        if !(ratio > 1.0 && ratio.is_finite()) {
            return Err(HomogeneousError::Grid(format!("ratio must exceed 1, got {ratio}")));
        }
        if bins < 2 {
            return Err(HomogeneousError::Grid("need at least 2 bins".into()));
        }
        let edges: Vec<f64> = (0..=bins).map(|k| m_min * ratio.powi(k as i32)).collect();
        let pivots = edges.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
        let widths = edges.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(MassGrid { edges, pivots, widths })
    }

    pub fn len(&self) -> usize {
        self.pivots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pivots.is_empty()
    }

    /// Bin whose edges contain `m`, if any.
    pub fn bin_of(&self, m: f64) -> Option<usize> {
        if m < self.edges[0] || m >= self.edges[self.len()] {
            return None;
        }
        Some(self.edges.partition_point(|&e| e <= m) - 1)
    }

    /// Splits one particle of mass `m` between the bracketing pivots.
    fn assign(&self, m: f64) -> Assignment {
        let x = &self.pivots;
        let last = x.len() - 1;
        if m < x[0] {
            return Assignment::Under { frac: m / x[0] };
        }
        if m > x[last] {
            return Assignment::Over;
        }
        if m == x[last] {
            return Assignment::Split { lo: last, a: 1.0 };
        }
        let l = x.partition_point(|&p| p <= m) - 1;
        Assignment::Split { lo: l, a: (x[l + 1] - m) / (x[l + 1] - x[l]) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Assignment {
    /// Fraction `a` of the particle at pivot `lo`, the rest at `lo + 1`.
    Split { lo: usize, a: f64 },
    /// Below the first pivot: mass-conserving fraction `frac` at pivot 0.
    Under { frac: f64 },
    Over,
}

/// Number densities per bin plus the mass and number that left the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionalState {
    pub t: f64,
    pub f: Vec<f64>,
    pub overflow_mass: f64,
    pub overflow_number: f64,
    /// Number lost by assigning sub-grid daughters mass-conservingly.
    pub underflow_number_deficit: f64,
}

impl SectionalState {
    pub fn zeros(grid: &MassGrid) -> Self {
        SectionalState {
            t: 0.0,
            f: vec![0.0; grid.len()],
            overflow_mass: 0.0,
            overflow_number: 0.0,
            underflow_number_deficit: 0.0,
        }
    }

    /// All mass `number * m` in the bin containing `m`, at its pivot.
    pub fn monodisperse(grid: &MassGrid, m: f64, number: f64) -> Result<Self, HomogeneousError> {
        let k = grid
            .bin_of(m)
            .ok_or_else(|| HomogeneousError::Config(format!("mass {m} outside grid")))?;
        let mut s = Self::zeros(grid);
        s.f[k] = number / grid.widths[k];
        Ok(s)
    }

    /// Exponential density `(number / mean) exp(-m/mean)` sampled at the pivots.
    pub fn exponential(grid: &MassGrid, number: f64, mean: f64) -> Self {
        let mut s = Self::zeros(grid);
        for (fk, &x) in s.f.iter_mut().zip(&grid.pivots) {
            *fk = number / mean * (-x / mean).exp();
        }
        s
    }

    pub fn number(&self, grid: &MassGrid) -> f64 {
        self.f.iter().zip(&grid.widths).map(|(f, w)| f * w).sum()
    }

    pub fn mass(&self, grid: &MassGrid) -> f64 {
        functional(self, grid, |m| m, |u| u)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.f.iter().all(|&v| v >= 0.0)
    }
}

/// `sum_k phi(m_k) H(f_k) dm_k`.
pub fn functional(
    state: &SectionalState,
    grid: &MassGrid,
    phi: impl Fn(f64) -> f64,
    h: impl Fn(f64) -> f64,
) -> f64 {
    state
        .f
        .iter()
        .zip(grid.pivots.iter().zip(&grid.widths))
        .map(|(&f, (&x, &w))| phi(x) * h(f) * w)
        .sum()
}

const GL4_X: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL4_W: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// Composite 4-point Gauss-Legendre nodes on `(0, m')` with the given breakpoints.
fn daughter_nodes(m_prime: f64, mut cuts: Vec<f64>) -> Vec<(f64, f64)> {
    cuts.retain(|&c| c > 0.0 && c < m_prime);
    cuts.push(0.0);
    cuts.push(m_prime);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut out = Vec::with_capacity(4 * cuts.len());
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (x, wt) in GL4_X.iter().zip(GL4_W) {
            out.push((mid + half * x, half * wt));
        }
    }
    out
}

/// Precomputed coagulation and fragmentation tables for one grid and suite.
#[derive(Clone, Debug)]
pub struct SectionalOperator {
    pub grid: MassGrid,
    pub s: f64,
    pub delta: f64,
    a: Vec<f64>,
    /// Target of `x_i + x_j` for `i <= j`, row-major upper triangle.
    targets: Vec<Assignment>,
    /// Per parent bin: `(bin, rate)` daughter production per parent particle.
    frag_gain: Vec<Vec<(usize, f64)>>,
    frag_underflow: Vec<f64>,
    /// Event rate `B1 / 2` per particle.
    frag_loss: Vec<f64>,
    /// `B1` by the daughter quadrature.
    pub b1: Vec<f64>,
    /// `int_0^{m'} B(m', m)^s / A(m, m')^{s-1} dm` at each pivot.
    comparison: Vec<f64>,
    frag_active: bool,
}

fn tri(k: usize, i: usize, j: usize) -> usize {
    i * k - i * (i + 1) / 2 + j
}

impl SectionalOperator {
    pub fn new(grid: MassGrid, suite: &MassKernelSuite) -> Self {
        let k = grid.len();
        let x = grid.pivots.clone();
        let coag: &dyn MassCoagKernel = suite.coag.as_ref();
        let frag: &dyn MassFragKernel = suite.frag.as_ref();
        let mut a = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                a[i * k + j] = coag.eval_mass(x[i], x[j]);
            }
        }
        let mut targets = Vec::with_capacity(k * (k + 1) / 2);
        for i in 0..k {
            for j in i..k {
                targets.push(grid.assign(x[i] + x[j]));
            }
        }
        let s = suite.s;
        let mut frag_gain = Vec::with_capacity(k);
        let mut frag_underflow = vec![0.0; k];
        let mut frag_loss = vec![0.0; k];
        let mut b1 = vec![0.0; k];
        let mut comparison = vec![0.0; k];
        for p in 0..k {
            let mp = x[p];
            let mut cuts = frag.breakpoints(mp);
            for &xl in &x[..p] {
                cuts.push(xl);
                cuts.push(mp - xl);
            }
            let mut gain = vec![0.0; k];
            for (m, w) in daughter_nodes(mp, cuts) {
                let bv = frag.eval_mass(mp, m);
                if bv == 0.0 {
                    continue;
                }
                b1[p] += w * bv;
                let av = coag.eval_mass(m, mp);
                comparison[p] += w * bv.powf(s) / av.powf(s - 1.0);
                for d in [m, mp - m] {
                    match grid.assign(d) {
                        Assignment::Split { lo, a } => {
                            gain[lo] += 0.5 * w * bv * a;
                            if a < 1.0 {
                                gain[lo + 1] += 0.5 * w * bv * (1.0 - a);
                            }
                        }
                        Assignment::Under { frac } => {
                            gain[0] += 0.5 * w * bv * frac;
                            frag_underflow[p] += 0.5 * w * bv * (1.0 - frac);
                        }
                        Assignment::Over => unreachable!("daughters are lighter than their parent"),
                    }
                }
            }
            frag_loss[p] = 0.5 * b1[p];
            frag_gain.push(gain.into_iter().enumerate().filter(|g| g.1 != 0.0).collect());
        }
        let frag_active = b1.iter().any(|&v| v > 0.0);
        SectionalOperator {
            grid,
            s,
            delta: suite.delta,
            a,
            targets,
            frag_gain,
            frag_underflow,
            frag_loss,
            b1,
            comparison,
            frag_active,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn has_fragmentation(&self) -> bool {
        self.frag_active
    }

    pub fn coag_rate(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.len() + j]
    }
}

/// Time derivative of a sectional state: `df` per bin plus account rates.
#[derive(Clone, Debug, PartialEq)]
pub struct Rates {
    pub df: Vec<f64>,
    pub overflow_mass: f64,
    pub overflow_number: f64,
    pub underflow_number: f64,
}

impl Rates {
    fn zeros(k: usize) -> Self {
        Rates { df: vec![0.0; k], overflow_mass: 0.0, overflow_number: 0.0, underflow_number: 0.0 }
    }

    fn add(&mut self, other: &Rates) {
        for (a, b) in self.df.iter_mut().zip(&other.df) {
            *a += b;
        }
        self.overflow_mass += other.overflow_mass;
        self.overflow_number += other.overflow_number;
        self.underflow_number += other.underflow_number;
    }

    /// `sum_k m_k df_k dm_k + overflow`: zero for a mass-conserving operator.
    pub fn mass_production(&self, grid: &MassGrid) -> f64 {
        self.df
            .iter()
            .zip(grid.pivots.iter().zip(&grid.widths))
            .map(|(d, (x, w))| d * x * w)
            .sum::<f64>()
            + self.overflow_mass
    }
}

/// Coagulation rates: loss `f L f` and binary gain redistributed to pivots.
pub fn coag_rhs(state: &SectionalState, op: &SectionalOperator) -> Rates {
    let k = op.len();
    let g = &op.grid;
    let n: Vec<f64> = state.f.iter().zip(&g.widths).map(|(f, w)| f * w).collect();
    let mut r = Rates::zeros(k);
    let mut dn = vec![0.0; k];
    for i in 0..k {
        if n[i] == 0.0 {
            continue;
        }
        for j in i..k {
            if n[j] == 0.0 {
                continue;
            }
            let half = if i == j { 0.5 } else { 1.0 };
            let rate = half * op.coag_rate(i, j) * n[i] * n[j];
            if rate == 0.0 {
                continue;
            }
            dn[i] -= rate;
            dn[j] -= rate;
            match op.targets[tri(k, i, j)] {
                Assignment::Split { lo, a } => {
                    dn[lo] += a * rate;
                    if a < 1.0 {
                        dn[lo + 1] += (1.0 - a) * rate;
                    }
                }
                Assignment::Over => {
                    r.overflow_mass += rate * (g.pivots[i] + g.pivots[j]);
                    r.overflow_number += rate;
                }
                Assignment::Under { .. } => unreachable!("a product is heavier than its parents"),
            }
        }
    }
    for (d, (v, w)) in r.df.iter_mut().zip(dn.iter().zip(&g.widths)) {
        *d = v / w;
    }
    r
}

/// Fragmentation rates in event form: each particle breaks at rate `B1/2`
/// into a daughter pair `(m, m' - m)`.
pub fn frag_rhs(state: &SectionalState, op: &SectionalOperator) -> Rates {
    let k = op.len();
    let g = &op.grid;
    let mut r = Rates::zeros(k);
    if !op.frag_active {
        return r;
    }
    let mut dn = vec![0.0; k];
    for p in 0..k {
        let np = state.f[p] * g.widths[p];
        if np == 0.0 {
            continue;
        }
        dn[p] -= op.frag_loss[p] * np;
        for &(l, rate) in &op.frag_gain[p] {
            dn[l] += rate * np;
        }
        r.underflow_number += op.frag_underflow[p] * np;
    }
    for (d, (v, w)) in r.df.iter_mut().zip(dn.iter().zip(&g.widths)) {
        *d = v / w;
    }
    r
}

pub fn rhs(state: &SectionalState, op: &SectionalOperator) -> Rates {
    let mut r = coag_rhs(state, op);
    r.add(&frag_rhs(state, op));
    r
}

fn advance(state: &SectionalState, r: &Rates, dt: f64) -> SectionalState {
    SectionalState {
        t: state.t + dt,
        f: state.f.iter().zip(&r.df).map(|(f, d)| f + dt * d).collect(),
        overflow_mass: state.overflow_mass + dt * r.overflow_mass,
        overflow_number: state.overflow_number + dt * r.overflow_number,
        underflow_number_deficit: state.underflow_number_deficit + dt * r.underflow_number,
    }
}

/// Step-controller outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: SectionalState,
    /// Heun stages rejected for producing a negative density.
    pub rejected: u64,
    pub substeps: u64,
}

/// One Heun (explicit trapezoidal) step of exactly `dt`; a stage producing a
/// negative density is rejected and replaced by two steps of `dt/2`.
pub fn step(
    state: &SectionalState,
    op: &SectionalOperator,
    dt: f64,
    dt_min: f64,
) -> Result<StepOutcome, HomogeneousError> {
    if dt < dt_min {
        return Err(HomogeneousError::DtUnderflow { t: state.t, dt, floor: dt_min });
    }
    let k1 = rhs(state, op);
    let pred = advance(state, &k1, dt);
    if pred.is_nonnegative() {
        let k2 = rhs(&pred, op);
        let mut avg = k1.clone();
        avg.add(&k2);
        let mut next = advance(state, &avg, 0.5 * dt);
        next.t = state.t + dt;
        if next.is_nonnegative() {
            return Ok(StepOutcome { state: next, rejected: 0, substeps: 1 });
        }
    }
    let a = step(state, op, 0.5 * dt, dt_min)?;
    let mut b = step(&a.state, op, 0.5 * dt, dt_min)?;
    b.state.t = state.t + dt;
    Ok(StepOutcome {
        state: b.state,
        rejected: 1 + a.rejected + b.rejected,
        substeps: a.substeps + b.substeps,
    })
}

/// `D1 = 1/2 sum A sup(f,f*) inf(f,f*)^s dm dm*` and
/// `D2 = (s - delta)/2 sum B1 f^s dm`.
pub fn dissipation_functionals(state: &SectionalState, op: &SectionalOperator) -> (f64, f64) {
    let g = &op.grid;
    let s = op.s;
    let k = op.len();
    let mut d1 = 0.0;
    for i in 0..k {
        let fi = state.f[i];
        if fi == 0.0 {
            continue;
        }
        for j in 0..k {
            let fj = state.f[j];
            if fj == 0.0 {
                continue;
            }
            d1 += op.coag_rate(i, j) * fi.max(fj) * fi.min(fj).powf(s) * g.widths[i] * g.widths[j];
        }
    }
    let d2: f64 = (0..k).map(|p| op.b1[p] * state.f[p].powf(s) * g.widths[p]).sum();
    (0.5 * d1, 0.5 * (s - op.delta) * d2)
}

/// Fragmentation terms of the `L^s` inequality:
/// `G = sum_{m < m'} B^s / A(m,m')^{s-1} f(m') dm dm'` and `F = s/2 sum B1 f^s dm`.
pub fn fragmentation_ls_terms(state: &SectionalState, op: &SectionalOperator) -> (f64, f64) {
    let g = &op.grid;
    let mut gain = 0.0;
    let mut loss = 0.0;
    for p in 0..op.len() {
        let f = state.f[p];
        if f == 0.0 || op.b1[p] == 0.0 {
            continue;
        }
        gain += op.comparison[p] * f * g.widths[p];
        loss += op.b1[p] * f.powf(op.s) * g.widths[p];
    }
    (gain, 0.5 * op.s * loss)
}

/// Right side of the `Phi`-moment identity restricted to the grid: products
/// leaving the grid count as removals.
pub fn moment_rhs(state: &SectionalState, op: &SectionalOperator, phi: &dyn Fn(f64) -> f64) -> (f64, f64) {
    let g = &op.grid;
    let x = &g.pivots;
    let k = op.len();
    let n: Vec<f64> = state.f.iter().zip(&g.widths).map(|(f, w)| f * w).collect();
    let mut total = 0.0;
    let mut scale = 0.0;
    for i in 0..k {
        if n[i] == 0.0 {
            continue;
        }
        for j in i..k {
            if n[j] == 0.0 {
                continue;
            }
            let half = if i == j { 0.5 } else { 1.0 };
            let rate = half * op.coag_rate(i, j) * n[i] * n[j];
            let born = match op.targets[tri(k, i, j)] {
                Assignment::Over => 0.0,
                _ => phi(x[i] + x[j]),
            };
            total += rate * (born - phi(x[i]) - phi(x[j]));
            scale += rate * (born.abs() + phi(x[i]).abs() + phi(x[j]).abs());
        }
    }
    if op.frag_active {
        let frag = frag_rhs(state, op);
        // event form: daughter content through the same quadrature as the solver
        for (l, (d, w)) in frag.df.iter().zip(&g.widths).enumerate() {
            total += phi(x[l]) * d * w;
            scale += (phi(x[l]) * d * w).abs();
        }
    }
    (total, scale)
}

/// Discrete moment balance over one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentBalance {
    /// Finite-difference `d/dt int Phi f`.
    pub lhs: f64,
    /// Trapezoidal average of the moment right side.
    pub rhs: f64,
    pub residual: f64,
    /// Sum of the magnitudes of the individual gain and loss terms.
    pub scale: f64,
}

pub fn moment_balance_residual(
    prev: &SectionalState,
    next: &SectionalState,
    op: &SectionalOperator,
    phi: &dyn Fn(f64) -> f64,
) -> MomentBalance {
    let dt = next.t - prev.t;
    let g = &op.grid;
    let lhs = (functional(next, g, phi, |u| u) - functional(prev, g, phi, |u| u)) / dt;
    let (r0, s0) = moment_rhs(prev, op, phi);
    let (r1, s1) = moment_rhs(next, op, phi);
    let rhs = 0.5 * (r0 + r1);
    MomentBalance { lhs, rhs, residual: (lhs - rhs).abs(), scale: 0.5 * (s0 + s1) }
}

/// Run parameters of the homogeneous solver.
#[derive(Clone, Debug)]
pub struct HomogeneousConfig {
    pub suite: MassKernelSuite,
    pub grid: MassGrid,
    pub t_end: f64,
    pub dt: f64,
    pub dt_min: f64,
    /// Output interval in time units; every step is integrated regardless.
    pub cadence: f64,
}

impl HomogeneousConfig {
    pub fn validate(&self) -> Result<(), HomogeneousError> {
        if !(self.t_end > 0.0) {
            return Err(HomogeneousError::Config(format!("T must be positive, got {}", self.t_end)));
        }
        if !(self.dt > 0.0 && self.dt_min > 0.0 && self.dt_min <= self.dt) {
            return Err(HomogeneousError::Config("need 0 < dt_min <= dt".into()));
        }
        if !(self.cadence > 0.0) {
            return Err(HomogeneousError::Config("cadence must be positive".into()));
        }
        Ok(())
    }
}

/// One diagnostics row; the cumulative integrals feed the `L^s` check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomoRow {
    pub t: f64,
    pub n: f64,
    pub m: f64,
    pub ls: f64,
    pub d1: f64,
    pub d2: f64,
    pub overflow_mass: f64,
    pub int_d1: f64,
    pub int_frag_gain: f64,
    pub int_frag_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<HomoRow>,
    pub final_state: SectionalState,
    pub rejected_steps: u64,
    pub steps: u64,
    /// Largest `|M(t) + overflow(t) - M(0)| / M(0)` over all steps.
    pub max_mass_drift: f64,
    /// Largest per-step `Phi = m` balance residual.
    pub max_mass_balance_residual: f64,
    pub s: f64,
}

struct Instant {
    d1: f64,
    d2: f64,
    gain: f64,
    loss: f64,
}

fn instant(state: &SectionalState, op: &SectionalOperator) -> Instant {
    let (d1, d2) = dissipation_functionals(state, op);
    let (gain, loss) = fragmentation_ls_terms(state, op);
    Instant { d1, d2, gain, loss }
}

/// Integrates to `T` with fixed steps of `dt` (the last one shortened),
/// recording a row every `cadence` time units.
pub fn run(
    cfg: &HomogeneousConfig,
    initial: SectionalState,
) -> Result<Trajectory, HomogeneousError> {
    cfg.validate()?;
    let op = SectionalOperator::new(cfg.grid.clone(), &cfg.suite);
    run_with(cfg, &op, initial)
}

pub fn run_with(
    cfg: &HomogeneousConfig,
    op: &SectionalOperator,
    initial: SectionalState,
) -> Result<Trajectory, HomogeneousError> {
    let g = &op.grid;
    let s = op.s;
    let m0 = initial.mass(g);
    let mut state = initial;
    let mut inst = instant(&state, op);
    let mut acc = (0.0, 0.0, 0.0);
    let row = |st: &SectionalState, i: &Instant, acc: (f64, f64, f64)| HomoRow {
        t: st.t,
        n: st.number(g),
        m: st.mass(g),
        ls: functional(st, g, |_| 1.0, |u| u.powf(s)),
        d1: i.d1,
        d2: i.d2,
        overflow_mass: st.overflow_mass,
        int_d1: acc.0,
        int_frag_gain: acc.1,
        int_frag_loss: acc.2,
    };
    let mut rows = vec![row(&state, &inst, acc)];
    let mut rejected = 0;
    let mut steps = 0;
    let mut max_drift = 0.0_f64;
    let mut max_resid = 0.0_f64;
    let mut next_out = cfg.cadence;
    let n_steps = (cfg.t_end / cfg.dt).ceil() as u64;
    for i in 0..n_steps {
        let t_target = if i + 1 == n_steps { cfg.t_end } else { (i + 1) as f64 * cfg.dt };
        let h = t_target - state.t;
        let out = step(&state, op, h, cfg.dt_min)?;
        rejected += out.rejected;
        steps += 1;
        let mut next = out.state;
        next.t = t_target;
        if out.substeps == 1 {
            let bal = moment_balance_residual(&state, &next, op, &|m| m);
            max_resid = max_resid.max(bal.residual);
        }
        let ni = instant(&next, op);
        acc.0 += 0.5 * h * (inst.d1 + ni.d1);
        acc.1 += 0.5 * h * (inst.gain + ni.gain);
        acc.2 += 0.5 * h * (inst.loss + ni.loss);
        inst = ni;
        state = next;
        if m0 > 0.0 {
            max_drift = max_drift.max((state.mass(g) + state.overflow_mass - m0).abs() / m0);
        }
        let last = i + 1 == n_steps;
        if last || state.t >= next_out * (1.0 - 1e-12) {
            rows.push(row(&state, &inst, acc));
            while next_out <= state.t * (1.0 + 1e-12) {
                next_out += cfg.cadence;
            }
        }
    }
    Ok(Trajectory {
        rows,
        final_state: state,
        rejected_steps: rejected,
        steps,
        max_mass_drift: max_drift,
        max_mass_balance_residual: max_resid,
        s,
    })
}

/// Per-row margins of the discrete `L^s` inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsReport {
    pub pure_coagulation: bool,
    /// Rows where `int f^s` increased (pure coagulation only).
    pub increases: Vec<usize>,
    /// `rhs - lhs` per row, relative to `int f_0^s`.
    pub margins: Vec<f64>,
    pub worst_margin: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the `L^s` dissipation inequality along a trajectory.
///
/// Pure coagulation: `int f^s` nonincreasing and
/// `int f^s(t) + int_0^t D1 <= int f_0^s`. With fragmentation:
/// `int f^s(t) <= int f_0^s - int_0^t D1 + int_0^t G - int_0^t F`.
/// The mass-only inequality is the analogue of the kinetic one.
pub fn ls_dissipation_check(traj: &Trajectory, pure_coagulation: bool, tol: f64) -> LsReport {
    let rows = &traj.rows;
    let ls0 = rows[0].ls;
    let scale = if ls0 > 0.0 { ls0 } else { 1.0 };
    let mut increases = Vec::new();
    let mut margins = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if pure_coagulation && i > 0 && r.ls > rows[i - 1].ls {
            increases.push(i);
        }
        let rhs = if pure_coagulation {
            ls0 - r.int_d1
        } else {
            ls0 - r.int_d1 + r.int_frag_gain - r.int_frag_loss
        };
        margins.push((rhs - r.ls) / scale);
    }
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    LsReport {
        pure_coagulation,
        passed: increases.is_empty() && worst >= -tol,
        increases,
        margins,
        worst_margin: worst,
        tolerance: tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BuiltinCoag, BuiltinFrag};
    use std::sync::Arc;

    fn suite(coag: BuiltinCoag, frag: BuiltinFrag) -> MassKernelSuite {
        MassKernelSuite::new(coag.mass_only().unwrap(), frag.mass_only().unwrap(), 1.5, 0.2).unwrap()
    }

    fn grid() -> MassGrid {
        MassGrid::geometric(1.0 / 16.0, 2f64.powf(1.0 / 8.0), 128).unwrap()
    }

    fn random_state(g: &MassGrid, seed: u64) -> SectionalState {
        use rand::Rng;
        let mut rng = crate::stochastics::StreamKey::new(seed).rng();
        let mut s = SectionalState::zeros(g);
        for f in s.f.iter_mut() {
            *f = rng.random::<f64>();
        }
        s
    }

    #[test]
    fn grid_layout() {
        let g = MassGrid::geometric(1.0, 2.0, 4).unwrap();
        assert_eq!(g.edges, vec![1.0, 2.0, 4.0, 8.0, 16.0]);
        assert!((g.pivots[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(g.bin_of(3.0), Some(1));
        assert_eq!(g.bin_of(16.0), None);
        assert!(MassGrid::geometric(1.0, 1.0, 4).is_err());
        assert!(MassGrid::geometric(0.0, 2.0, 4).is_err());
    }

    #[test]
    fn zero_state_has_zero_rates() {
        let g = grid();
        let op = SectionalOperator::new(
            g.clone(),
            &suite(BuiltinCoag::Constant { a0: 1.0 }, BuiltinFrag::MassTruncated { b0: 1.0, c0: Some(2.0) }),
        );
        let r = rhs(&SectionalState::zeros(&g), &op);
        assert!(r.df.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coagulation_conserves_mass_on_random_states() {
        let g = grid();
        for kern in [BuiltinCoag::Constant { a0: 1.0 }, BuiltinCoag::AdditivePower { alpha: 0.5 }] {
            let op = SectionalOperator::new(g.clone(), &suite(kern, BuiltinFrag::Zero));
            for seed in 0..5 {
                let s = random_state(&g, seed);
                let r = coag_rhs(&s, &op);
                let scale: f64 = r.df.iter().zip(&g.pivots).zip(&g.widths).map(|((d, x), w)| (d * x * w).abs()).sum();
                assert!(r.mass_production(&g).abs() <= 1e-12 * scale, "{}", r.mass_production(&g));
                assert!(r.overflow_mass > 0.0);
            }
        }
    }

    #[test]
    fn monodisperse_number_rate() {
        let g = grid();
        let a0 = 0.7;
        let op = SectionalOperator::new(g.clone(), &suite(BuiltinCoag::Constant { a0 }, BuiltinFrag::Zero));
        let s = SectionalState::monodisperse(&g, 1.0, 2.0).unwrap();
        let r = coag_rhs(&s, &op);
        let dn: f64 = r.df.iter().zip(&g.widths).map(|(d, w)| d * w).sum();
        assert!((dn + 0.5 * a0 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn fragmentation_rates() {
        let g = grid();
        let b0 = 1.3;
        let op = SectionalOperator::new(
            g.clone(),
            &suite(BuiltinCoag::Zero, BuiltinFrag::MassTruncated { b0, c0: Some(2.0) }),
        );
        // quadrature B1 agrees with the closed form b0 m'(1 - 1/C0)
        for (x, b) in g.pivots.iter().zip(&op.b1) {
            assert!((b - b0 * x * 0.5).abs() < 1e-12 * b, "{b}");
        }
        let mut s = random_state(&g, 3);
        for f in s.f.iter_mut().take(16) {
            *f = 0.0;
        }
        let r = frag_rhs(&s, &op);
        let scale: f64 = r.df.iter().zip(&g.pivots).zip(&g.widths).map(|((d, x), w)| (d * x * w).abs()).sum();
        assert!(r.mass_production(&g).abs() <= 1e-12 * scale);
        assert!(r.underflow_number > 0.0);
        let dn: f64 = r.df.iter().zip(&g.widths).map(|(d, w)| d * w).sum();
        let expected: f64 = (0..g.len()).map(|k| 0.5 * b0 * g.pivots[k] * 0.5 * s.f[k] * g.widths[k]).sum();
        let got = dn + r.underflow_number;
        assert!((got - expected).abs() < 1e-12 * expected, "{got} vs {expected}");

        let op0 = SectionalOperator::new(g.clone(), &suite(BuiltinCoag::Zero, BuiltinFrag::Zero));
        assert!(frag_rhs(&s, &op0).df.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_with_zero_rhs_is_identity() {
        let g = grid();
        let op = SectionalOperator::new(g.clone(), &suite(BuiltinCoag::Zero, BuiltinFrag::Zero));
        let s = random_state(&g, 9);
        let out = step(&s, &op, 0.1, 1e-9).unwrap();
        assert_eq!(out.state.f, s.f);
        assert_eq!(out.rejected, 0);
    }

    fn constant_run(dt: f64) -> (f64, Trajectory) {
        let g = grid();
        let cfg = HomogeneousConfig {
            suite: suite(BuiltinCoag::Constant { a0: 1.0 }, BuiltinFrag::Zero),
            grid: g.clone(),
            t_end: 1.0,
            dt,
            dt_min: 1e-9,
            cadence: 0.25,
        };
        let init = SectionalState::monodisperse(&g, 1.0, 1.0).unwrap();
        let traj = run(&cfg, init).unwrap();
        (traj.rows.last().unwrap().n, traj)
    }

    #[test]
    fn constant_kernel_benchmark_and_order() {
        let exact = 1.0 / 1.5;
        let (n1, traj) = constant_run(0.1);
        assert!((n1 - exact).abs() < 0.01 * exact);
        assert_eq!(traj.rows.len(), 5);
        let (n2, _) = constant_run(0.05);
        let ratio = (n1 - exact).abs() / (n2 - exact).abs();
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
        assert!(traj.max_mass_drift < 1e-12);
    }

    #[test]
    fn functional_examples() {
        let g = grid();
        let mut s = SectionalState::zeros(&g);
        s.f[5] = 3.0;
        let v = functional(&s, &g, |m| m * m, |u| u.sqrt());
        assert!((v - g.pivots[5].powi(2) * 3f64.sqrt() * g.widths[5]).abs() < 1e-15);
        assert_eq!(functional(&s, &g, |m| m, |u| u), s.mass(&g));
    }

    #[test]
    fn dissipation_examples() {
        let g = grid();
        let a0 = 2.0;
        let op = SectionalOperator::new(g.clone(), &suite(BuiltinCoag::Constant { a0 }, BuiltinFrag::Zero));
        assert_eq!(dissipation_functionals(&SectionalState::zeros(&g), &op), (0.0, 0.0));
        let mut s = SectionalState::zeros(&g);
        let c = 0.8;
        s.f[10] = c;
        let (d1, d2) = dissipation_functionals(&s, &op);
        let expected = 0.5 * a0 * c.powf(2.5) * g.widths[10].powi(2);
        assert!((d1 - expected).abs() < 1e-15 * expected);
        assert_eq!(d2, 0.0);
    }

    #[test]
    fn moment_balance() {
        let g = grid();
        let op = SectionalOperator::new(
            g.clone(),
            &suite(BuiltinCoag::Constant { a0: 1.0 }, BuiltinFrag::MassTruncated { b0: 0.5, c0: Some(4.0) }),
        );
        let s0 = SectionalState::exponential(&g, 1.0, 1.0);
        let s1 = step(&s0, &op, 0.01, 1e-9).unwrap().state;
        let b = moment_balance_residual(&s0, &s1, &op, &|m| m);
        assert!(b.residual <= 1e-12 * b.scale.max(1.0), "{b:?}");

        // number moment under pure constant coagulation: both sides near -N^2/2
        let opc = SectionalOperator::new(g.clone(), &suite(BuiltinCoag::Constant { a0: 1.0 }, BuiltinFrag::Zero));
        let m0 = SectionalState::monodisperse(&g, 1.0, 1.0).unwrap();
        let m1 = step(&m0, &opc, 1e-3, 1e-9).unwrap().state;
        let b = moment_balance_residual(&m0, &m1, &opc, &|_| 1.0);
        assert!((b.lhs + 0.5).abs() < 1e-3 && (b.rhs + 0.5).abs() < 1e-3, "{b:?}");

        let op0 = SectionalOperator::new(g.clone(), &suite(BuiltinCoag::Zero, BuiltinFrag::Zero));
        let z1 = step(&s0, &op0, 0.01, 1e-9).unwrap().state;
        assert_eq!(moment_balance_residual(&s0, &z1, &op0, &|m| m * m).residual, 0.0);
    }

    #[test]
    fn ls_decreases_under_coagulation() {
        let (_, traj) = constant_run(0.05);
        let rep = ls_dissipation_check(&traj, true, 1e-6);
        assert!(rep.passed, "{rep:?}");
        assert!(traj.rows.windows(2).all(|w| w[1].ls < w[0].ls));

        let g = grid();
        let cfg = HomogeneousConfig {
            suite: suite(BuiltinCoag::Zero, BuiltinFrag::Zero),
            grid: g.clone(),
            t_end: 1.0,
            dt: 0.1,
            dt_min: 1e-9,
            cadence: 0.5,
        };
        let traj = run(&cfg, SectionalState::exponential(&g, 1.0, 1.0)).unwrap();
        assert!(traj.rows.windows(2).all(|w| w[1].ls == w[0].ls));
    }

    #[test]
    fn full_suite_inequality_and_number_monotonicity() {
        let g = grid();
        let cfg = HomogeneousConfig {
            suite: suite(BuiltinCoag::Zero, BuiltinFrag::MassTruncated { b0: 0.5, c0: Some(4.0) }),
            grid: g.clone(),
            t_end: 2.0,
            dt: 0.01,
            dt_min: 1e-9,
            cadence: 0.1,
        };
        let traj = run(&cfg, SectionalState::exponential(&g, 1.0, 4.0)).unwrap();
        assert!(traj.rows.windows(2).all(|w| w[1].n >= w[0].n));
        assert!(traj.max_mass_drift < 1e-10);

        let cfg = HomogeneousConfig {
            suite: suite(BuiltinCoag::Constant { a0: 1.0 }, BuiltinFrag::MassTruncated { b0: 0.5, c0: Some(4.0) }),
            ..cfg
        };
        let traj = run(&cfg, SectionalState::exponential(&g, 1.0, 1.0)).unwrap();
        let rep = ls_dissipation_check(&traj, false, 1e-6);
        assert!(rep.passed, "{rep:?}");
        assert!(traj.max_mass_drift < 1e-10, "{}", traj.max_mass_drift);
    }

    #[test]
    fn dt_underflow_is_reported() {
        let g = grid();
        let op = SectionalOperator::new(g.clone(), &suite(BuiltinCoag::Constant { a0: 1e6 }, BuiltinFrag::Zero));
        let s = SectionalState::monodisperse(&g, 1.0, 1.0).unwrap();
        let err = step(&s, &op, 1.0, 1e-3).unwrap_err();
        assert!(matches!(err, HomogeneousError::DtUnderflow { .. }));
    }

    #[test]
    fn trait_objects_share_tables() {
        let s = suite(BuiltinCoag::AdditivePower { alpha: 0.5 }, BuiltinFrag::Zero);
        let op = SectionalOperator::new(grid(), &s);
        let arc: Arc<dyn MassCoagKernel> = s.coag.clone();
        assert_eq!(op.coag_rate(3, 7), arc.eval_mass(op.grid.pivots[3], op.grid.pivots[7]));
    }


    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sectional_rates_conserve_mass(seed in any::<u64>(), a0 in 0.1..3.0f64, b0 in 0.0..2.0f64) {
            let g = MassGrid::geometric(0.1, 1.3, 40).unwrap();
            let op = SectionalOperator::new(
                g.clone(),
                &suite(BuiltinCoag::Constant { a0 }, BuiltinFrag::MassTruncated { b0, c0: Some(3.0) }),
            );
            let s = random_state(&g, seed);
            let r = rhs(&s, &op);
            let scale: f64 = r.df.iter().zip(g.pivots.iter().zip(&g.widths)).map(|(d, (x, w))| (d * x * w).abs()).sum::<f64>()
                + r.overflow_mass.abs();
            prop_assert!(r.mass_production(&g).abs() <= 1e-12 * scale.max(1.0));
        }

        #[test]
        fn heun_step_keeps_mass(seed in any::<u64>(), dt in 0.001..0.05f64) {
            let g = MassGrid::geometric(0.1, 1.3, 40).unwrap();
            let op = SectionalOperator::new(g.clone(), &suite(BuiltinCoag::AdditivePower { alpha: 0.5 }, BuiltinFrag::Zero));
            let s = random_state(&g, seed);
            let out = step(&s, &op, dt, 1e-9).unwrap();
            let m0 = s.mass(&g);
            prop_assert!(out.state.is_nonnegative());
            prop_assert!((out.state.mass(&g) + out.state.overflow_mass - m0).abs() <= 1e-13 * m0);
        }
    }
}
