//! Direct-simulation Monte Carlo for the full spatially inhomogeneous model.
//!
//! Each step applies free transport, then cell-local coagulation by majorant
//! thinning, then fragmentation of every particle with probability
//! `1 - exp(-B1 dt / 2)`. Cells run in parallel on disjoint stream lanes and
//! are merged in cell order, so outputs do not depend on the thread count.

use crate::audit::{check_symmetries, AuditStatus};
use crate::diagnostics::{
    check_estimates, ConservationLedger, EstimateInputs, EstimateReport, LedgerRow, MomentRow, MomentSeries,
};
use crate::kernels::{b1_monte_carlo, gronwall_constant, CoagKernel, FragKernel, GronwallConstant, KernelError, KernelSuite};
use crate::state_space::{coalesce, split, ParticleState, StateError};
use crate::stochastics::{phase, sample_fragment_with, AcceptanceStats, SampleError, SamplerLimits, StreamKey};
use crate::vec3::Vec3;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DsmcError {
    #[error("empty ensemble")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("kernel {kernel} has no finite majorant at radius {radius} (cell {cell})")]
    UnboundedMajorant { kernel: String, radius: f64, cell: usize },
    #[error("majorant breach in cell {cell}: A({y:?}, {y_star:?}) = {value} > {bound}")]
    MajorantBreach { cell: usize, y: ParticleState, y_star: ParticleState, value: f64, bound: f64 },
    #[error("step too large: dt * rate = {product} exceeds {limit} ({what})")]
    StepTooLarge { product: f64, limit: f64, what: String },
    #[error("kernel fails the symmetry audit: {0}")]
    AsymmetricKernel(String),
    #[error("particle count {count} exceeds the limit {limit}")]
    PopulationLimit { count: usize, limit: usize },
    #[error(transparent)]
    Sampling(#[from] SampleError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Periodic cube `[0, L)^3` cut into `cells^3` equal cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub length: f64,
    pub cells: usize,
}

impl Domain {
    pub fn new(length: f64, cells: usize) -> Result<Self, DsmcError> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(DsmcError::Config(format!("box length must be positive, got {length}")));
        }
        if cells == 0 {
            return Err(DsmcError::Config("need at least one cell per axis".into()));
        }
        Ok(Domain { length, cells })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.pow(3)
    }

    pub fn cell_volume(&self) -> f64 {
        (self.length / self.cells as f64).powi(3)
    }

    pub fn volume(&self) -> f64 {
        self.length.powi(3)
    }

    pub fn cell_of(&self, x: &Vec3) -> usize {
        let c = self.cells;
        let idx = |v: f64| ((v / self.length * c as f64) as usize).min(c - 1);
        (idx(x.0[0]) * c + idx(x.0[1])) * c + idx(x.0[2])
    }

    /// Wraps an unwrapped coordinate into `[0, L)`, returning the image shift.
    fn wrap1(&self, u: f64) -> (f64, i64) {
        let l = self.length;
        let k = (u / l).floor();
        let mut x = u - k * l;
        let mut k = k as i64;
        if x >= l {
            x -= l;
            k += 1;
        }
        if x < 0.0 {
            x += l;
            k -= 1;
        }
        (x, k)
    }

    fn wrap(&self, u: Vec3) -> (Vec3, [i64; 3]) {
        let mut x = Vec3::ZERO;
        let mut img = [0; 3];
        for a in 0..3 {
            (x.0[a], img[a]) = self.wrap1(u.0[a]);
        }
        (x, img)
    }
}

/// `w` physical particles sharing one state and position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParticle {
    pub w: f64,
    /// Position wrapped into the box.
    pub x: Vec3,
    /// Number of box lengths crossed along each axis.
    pub image: [i64; 3],
    pub state: ParticleState,
}

impl SimParticle {
    pub fn unwrapped(&self, length: f64) -> Vec3 {
        self.x + Vec3::new(self.image[0] as f64, self.image[1] as f64, self.image[2] as f64) * length
    }
}

/// Initial-data samplers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSampler {
    /// Every particle in state `(m, p, e)`.
    Monodisperse { m: f64, p: [f64; 3], e: f64, concentration: f64 },
    /// Half the particles with momentum `(+speed, 0, 0)`, half with `(-speed, 0, 0)`.
    TwoBeam { m: f64, e: f64, speed: f64, concentration: f64 },
    /// `m ~ Gamma(mass_shape, mass_scale)`, `p_i ~ N(0, momentum_sigma^2)`,
    /// `e ~ Exp(mean energy_mean)`, independently.
    Product { concentration: f64, mass_shape: f64, mass_scale: f64, momentum_sigma: f64, energy_mean: f64 },
}

impl InitialSampler {
    pub fn concentration(&self) -> f64 {
        match self {
            InitialSampler::Monodisperse { concentration, .. }
            | InitialSampler::TwoBeam { concentration, .. }
            | InitialSampler::Product { concentration, .. } => *concentration,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, i: usize, n: usize, rng: &mut R) -> Result<ParticleState, DsmcError> {
        let y = match self {
            InitialSampler::Monodisperse { m, p, e, .. } => ParticleState::new(*m, *p, *e)?,
            InitialSampler::TwoBeam { m, e, speed, .. } => {
                let sign = if i < n / 2 { 1.0 } else { -1.0 };
                ParticleState::new(*m, [sign * speed, 0.0, 0.0], *e)?
            }
            InitialSampler::Product { mass_shape, mass_scale, momentum_sigma, energy_mean, .. } => {
                let gm = Gamma::new(*mass_shape, *mass_scale)
                    .map_err(|e| DsmcError::Config(format!("mass distribution: {e}")))?;
                let nd = Normal::new(0.0, *momentum_sigma)
                    .map_err(|e| DsmcError::Config(format!("momentum distribution: {e}")))?;
                loop {
                    let m = gm.sample(rng);
                    let p = Vec3::new(nd.sample(rng), nd.sample(rng), nd.sample(rng));
                    let ex: f64 = Exp1.sample(rng);
                    if let Ok(y) = ParticleState::new(m, p, ex * energy_mean) {
                        break y;
                    }
                }
            }
        };
        Ok(y)
    }
}

/// Run parameters.
#[derive(Clone, Debug)]
pub struct DsmcConfig {
    pub domain: Domain,
    /// Initial number of simulation particles.
    pub particles: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub suite: KernelSuite,
    /// Output interval in time units.
    pub cadence: f64,
    /// Duplicate every particle when the count drops below this fraction of
    /// the initial count; `0` disables population control.
    pub duplicate_below: f64,
    pub max_particles: usize,
    /// Upper limit on `dt` times any per-particle majorant event rate.
    pub rate_limit: f64,
    pub sampler_floor: f64,
    pub b1_cache_nodes: usize,
    pub b1_budget: u64,
    pub gronwall_nodes: usize,
    pub symmetry_samples: u64,
}

impl DsmcConfig {
    pub fn new(domain: Domain, particles: usize, dt: f64, t_end: f64, seed: u64, suite: KernelSuite) -> Self {
        DsmcConfig {
            domain,
            particles,
            dt,
            t_end,
            seed,
            suite,
            cadence: t_end / 10.0,
            duplicate_below: 0.5,
            max_particles: 10_000_000,
            rate_limit: 0.1,
            sampler_floor: 1e-5,
            b1_cache_nodes: 9,
            b1_budget: 4096,
            gronwall_nodes: 9,
            symmetry_samples: 4096,
        }
    }

    pub fn validate(&self) -> Result<(), DsmcError> {
        if self.particles == 0 {
            return Err(DsmcError::Empty);
        }
        if !(self.dt > 0.0 && self.t_end > 0.0 && self.cadence > 0.0) {
            return Err(DsmcError::Config("dt, T and cadence must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.duplicate_below) {
            return Err(DsmcError::Config("duplicate_below must lie in [0, 1)".into()));
        }
        if !(self.rate_limit > 0.0) || !(self.sampler_floor > 0.0 && self.sampler_floor <= 1.0) {
            return Err(DsmcError::Config("rate_limit and sampler_floor must be positive".into()));
        }
        if self.b1_cache_nodes < 2 || self.b1_budget == 0 {
            return Err(DsmcError::Config("B1 cache needs at least 2 nodes and a positive budget".into()));
        }
        Ok(())
    }

    fn key(&self) -> StreamKey {
        StreamKey::new(self.seed)
    }
}

/// `B1` on a `(m', |p'|, e')` grid with trilinear interpolation. `B1` of
/// every builtin is invariant under rotations of `p'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct B1Cache {
    pub nodes: usize,
    pub m_max: f64,
    pub p_max: f64,
    pub e_max: f64,
    values: Vec<f64>,
    /// Largest node standard error divided by the largest node value.
    pub relative_std_error: f64,
    pub builds: u64,
}

impl B1Cache {
    fn build(
        kernel: &dyn FragKernel,
        nodes: usize,
        ranges: (f64, f64, f64),
        budget: u64,
        key: StreamKey,
        generation: u64,
    ) -> Result<Self, DsmcError> {
        let (m_max, p_max, e_max) = ranges;
        let at = |i: usize, hi: f64| hi * i as f64 / (nodes - 1) as f64;
        let idx: Vec<(usize, usize, usize)> = (0..nodes)
            .flat_map(|i| (0..nodes).flat_map(move |j| (0..nodes).map(move |k| (i, j, k))))
            .collect();
        let key = key.with_phase(phase::B1_CACHE).with_step(generation);
        let est: Vec<Result<(f64, f64), SampleError>> = idx
            .par_iter()
            .enumerate()
            .map(|(n, &(i, j, k))| {
                if i == 0 || k == 0 {
                    return Ok((0.0, 0.0));
                }
                let y = ParticleState::new_unchecked(at(i, m_max), Vec3::new(at(j, p_max), 0.0, 0.0), at(k, e_max));
                let e = b1_monte_carlo(kernel, &y, budget, key.with_counter(n as u64))?;
                Ok((e.value, e.std_error))
            })
            .collect();
        let mut values = Vec::with_capacity(est.len());
        let (mut peak, mut worst) = (0.0_f64, 0.0_f64);
        for r in est {
            let (v, se) = r?;
            peak = peak.max(v);
            worst = worst.max(se);
            values.push(v);
        }
        let worst = if peak > 0.0 { worst / peak } else { 0.0 };
        Ok(B1Cache {
            nodes,
            m_max,
            p_max,
            e_max,
            values,
            relative_std_error: worst,
            builds: generation + 1,
        })
    }

    fn covers(&self, y: &ParticleState) -> bool {
        y.m <= self.m_max && y.p.norm() <= self.p_max && y.e <= self.e_max
    }

    pub fn interpolate(&self, y: &ParticleState) -> f64 {
        let n = self.nodes;
        let locate = |v: f64, hi: f64| {
            let s = (v / hi * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            (i, s - i as f64)
        };
        let (i, fi) = locate(y.m, self.m_max);
        let (j, fj) = locate(y.p.norm(), self.p_max);
        let (k, fk) = locate(y.e, self.e_max);
        let v = |a: usize, b: usize, c: usize| self.values[(a * n + b) * n + c];
        let mut out = 0.0;
        for (da, wa) in [(0, 1.0 - fi), (1, fi)] {
            for (db, wb) in [(0, 1.0 - fj), (1, fj)] {
                for (dc, wc) in [(0, 1.0 - fk), (1, fk)] {
                    out += wa * wb * wc * v(i + da, j + db, k + dc);
                }
            }
        }
        out
    }
}

/// Source of `B1` values during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum B1Source {
    ClosedForm,
    Cache(B1Cache),
}

/// Particles plus the bookkeeping needed to advance them.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub particles: Vec<SimParticle>,
    pub domain: Domain,
    pub t: f64,
    pub step: u64,
    /// Count that population control compares against.
    pub reference_count: usize,
}

impl Ensemble {
    pub fn moments(&self) -> MomentRow {
        let mut r = MomentRow { t: self.t, n: 0.0, m: 0.0, px: 0.0, py: 0.0, pz: 0.0, ekin: 0.0, eint: 0.0, etot: 0.0, mx2: 0.0 };
        let l = self.domain.length;
        for p in &self.particles {
            let y = &p.state;
            let w = p.w;
            let ek = y.p.norm_sq() / (2.0 * y.m);
            r.n += w;
            r.m += w * y.m;
            r.px += w * y.p.0[0];
            r.py += w * y.p.0[1];
            r.pz += w * y.p.0[2];
            r.ekin += w * ek;
            r.eint += w * y.e;
            r.etot += w * (ek + y.e);
            r.mx2 += w * y.m * p.unwrapped(l).norm_sq();
        }
        r
    }

    /// `sum w x . p` in unwrapped coordinates.
    pub fn space_moment_flux(&self) -> f64 {
        let l = self.domain.length;
        self.particles.iter().map(|p| p.w * p.unwrapped(l).dot(&p.state.p)).sum()
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    fn max_state_norm(&self) -> f64 {
        self.particles.iter().map(|p| p.state.norm()).fold(0.0, f64::max)
    }
}

/// Draws `particles` states and uniform positions; all weights equal
/// `concentration * L^3 / particles`.
pub fn init(sampler: &InitialSampler, cfg: &DsmcConfig) -> Result<Ensemble, DsmcError> {
    let n = cfg.particles;
    if n == 0 {
        return Err(DsmcError::Empty);
    }
    let c = sampler.concentration();
    if !(c > 0.0 && c.is_finite()) {
        return Err(DsmcError::Config(format!("concentration must be positive, got {c}")));
    }
    if matches!(sampler, InitialSampler::TwoBeam { .. }) && n % 2 != 0 {
        return Err(DsmcError::Config("two-beam data needs an even particle count".into()));
    }
    let dom = cfg.domain;
    let w = c * dom.volume() / n as f64;
    let mut rng = cfg.key().with_phase(phase::INIT).rng();
    let mut particles = Vec::with_capacity(n);
    for i in 0..n {
        let state = sampler.draw(i, n, &mut rng)?;
        let x = Vec3::new(
            rng.random::<f64>() * dom.length,
            rng.random::<f64>() * dom.length,
            rng.random::<f64>() * dom.length,
        );
        particles.push(SimParticle { w, x, image: [0; 3], state });
    }
    Ok(Ensemble { particles, domain: dom, t: 0.0, step: 0, reference_count: n })
}

/// Free flight `x += dt p / m`, wrapped into the box.
pub fn transport_step(ens: &mut Ensemble, dt: f64) {
    let dom = ens.domain;
    ens.particles.par_iter_mut().for_each(|p| {
        let u = p.x + p.state.velocity() * dt;
        let (x, img) = dom.wrap(u);
        p.x = x;
        for a in 0..3 {
            p.image[a] += img[a];
        }
    });
}

/// Event and residual tallies of one cell or step; merged associatively.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub coag_candidates: u64,
    pub coag_events: u64,
    pub frag_events: u64,
    pub frag_skips: u64,
    /// `sum (1 - exp(-B1 dt / 2))` over the particles tested.
    pub frag_expected: f64,
    /// Variance of the fragmentation event count.
    pub frag_variance: f64,
    pub max_mass: f64,
    pub max_momentum: f64,
    pub max_energy: f64,
    pub sampler: AcceptanceStats,
}

impl StepStats {
    pub fn merge(&mut self, o: &StepStats) {
        self.coag_candidates += o.coag_candidates;
        self.coag_events += o.coag_events;
        self.frag_events += o.frag_events;
        self.frag_skips += o.frag_skips;
        self.frag_expected += o.frag_expected;
        self.frag_variance += o.frag_variance;
        self.max_mass = self.max_mass.max(o.max_mass);
        self.max_momentum = self.max_momentum.max(o.max_momentum);
        self.max_energy = self.max_energy.max(o.max_energy);
        self.sampler.merge(&o.sampler);
    }

    fn record(&mut self, before: &[ParticleState], after: &[ParticleState]) {
        let sum = |s: &[ParticleState]| {
            s.iter().fold((0.0, Vec3::ZERO, 0.0, 0.0), |acc, y| {
                (acc.0 + y.m, acc.1 + y.p, acc.2 + y.total_energy(), acc.3 + y.p.max_abs())
            })
        };
        let (m0, p0, e0, ps) = sum(before);
        let (m1, p1, e1, _) = sum(after);
        let rel = |d: f64, s: f64| if s > 0.0 { d / s } else { d };
        self.max_mass = self.max_mass.max(rel((m1 - m0).abs(), m0));
        self.max_momentum = self.max_momentum.max(rel((p1 - p0).max_abs(), ps));
        self.max_energy = self.max_energy.max(rel((e1 - e0).abs(), e0));
    }
}

fn bucketize(ens: &mut Ensemble) -> Vec<Vec<SimParticle>> {
    let mut cells = vec![Vec::new(); ens.domain.n_cells()];
    for p in ens.particles.drain(..) {
        cells[ens.domain.cell_of(&p.x)].push(p);
    }
    cells
}

fn cell_majorant(coag: &dyn CoagKernel, parts: &[SimParticle], cell: usize) -> Result<(f64, f64), DsmcError> {
    let r = parts.iter().map(|p| p.state.norm()).fold(0.0, f64::max) * (1.0 + 1e-9);
    let a = coag.local_sup(r);
    if !a.is_finite() {
        return Err(DsmcError::UnboundedMajorant { kernel: coag.name(), radius: r, cell });
    }
    Ok((r, a))
}

/// Majorant-thinned coagulation inside one cell over a time `dt`.
fn coag_cell(
    parts: &mut Vec<SimParticle>,
    coag: &dyn CoagKernel,
    dt: f64,
    dom: &Domain,
    cell: usize,
    key: StreamKey,
) -> Result<StepStats, DsmcError> {
    let mut st = StepStats::default();
    if parts.len() < 2 {
        return Ok(st);
    }
    let (mut r, mut ahat) = cell_majorant(coag, parts, cell)?;
    if ahat <= 0.0 {
        return Ok(st);
    }
    let w = parts[0].w;
    let v = dom.cell_volume();
    let l = dom.length;
    let mut rng = key.rng();
    let mut clock = 0.0;
    loop {
        let n = parts.len();
        if n < 2 {
            break;
        }
        let rate = w * ahat * (n * (n - 1)) as f64 / (2.0 * v);
        let tau: f64 = Exp1.sample(&mut rng);
        clock += tau / rate;
        if clock > dt {
            break;
        }
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        st.coag_candidates += 1;
        let (yi, yj) = (parts[i].state, parts[j].state);
        let a = coag.eval(&yi, &yj);
        if a > ahat * (1.0 + 1e-12) {
            return Err(DsmcError::MajorantBreach { cell, y: yi, y_star: yj, value: a, bound: ahat });
        }
        if rng.random::<f64>() * ahat >= a {
            continue;
        }
        let child = coalesce(&yi, &yj);
        st.record(&[yi, yj], &[child]);
        let u = (parts[i].unwrapped(l) * yi.m + parts[j].unwrapped(l) * yj.m) * (1.0 / child.m);
        let (x, image) = dom.wrap(u);
        parts[i] = SimParticle { w, x, image, state: child };
        parts.swap_remove(j);
        st.coag_events += 1;
        let cn = child.norm();
        if cn >= r {
            r = cn * (1.0 + 1e-9);
            ahat = ahat.max(coag.local_sup(r));
            if !ahat.is_finite() {
                return Err(DsmcError::UnboundedMajorant { kernel: coag.name(), radius: r, cell });
            }
        }
    }
    Ok(st)
}

fn b1_value(src: &B1Source, kernel: &dyn FragKernel, y: &ParticleState) -> f64 {
    match src {
        B1Source::ClosedForm => kernel.b1_closed_form(y).unwrap_or(0.0),
        B1Source::Cache(c) => c.interpolate(y),
    }
}

/// Independent fragmentation trials for the particles of one cell.
fn frag_cell(
    parts: &mut Vec<SimParticle>,
    frag: &dyn FragKernel,
    b1: &B1Source,
    dt: f64,
    limits: &SamplerLimits,
    key: StreamKey,
) -> Result<StepStats, DsmcError> {
    let mut st = StepStats::default();
    let mut rng = key.rng();
    let n = parts.len();
    for i in 0..n {
        let mother = parts[i];
        let b = b1_value(b1, frag, &mother.state);
        if !(b > 0.0) {
            continue;
        }
        let prob = -(-0.5 * b * dt).exp_m1();
        st.frag_expected += prob;
        st.frag_variance += prob * (1.0 - prob);
        if rng.random::<f64>() >= prob {
            continue;
        }
        match sample_fragment_with(&mother.state, frag, &mut rng, limits, &mut st.sampler) {
            Ok(y) => {
                let ys = split(&mother.state, &y)?;
                st.record(&[mother.state], &[y, ys]);
                parts[i].state = y;
                parts.push(SimParticle { state: ys, ..mother });
                st.frag_events += 1;
            }
            Err(SampleError::Degenerate { .. } | SampleError::NothingToSample(_)) => st.frag_skips += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(st)
}

/// Coagulation over all cells of the current configuration.
pub fn coag_step(ens: &mut Ensemble, coag: &dyn CoagKernel, dt: f64, key: StreamKey) -> Result<StepStats, DsmcError> {
    let dom = ens.domain;
    let mut cells = bucketize(ens);
    let key = key.with_phase(phase::COAGULATION).with_step(ens.step);
    let stats: Vec<Result<StepStats, DsmcError>> = cells
        .par_iter_mut()
        .enumerate()
        .map(|(c, parts)| coag_cell(parts, coag, dt, &dom, c, key.with_cell(c as u64)))
        .collect();
    ens.particles = cells.into_iter().flatten().collect();
    let mut total = StepStats::default();
    for s in stats {
        total.merge(&s?);
    }
    Ok(total)
}

/// Fragmentation over all cells; daughters replace their mother in place and
/// the complements are appended within the cell.
pub fn frag_step(
    ens: &mut Ensemble,
    frag: &dyn FragKernel,
    b1: &B1Source,
    dt: f64,
    limits: &SamplerLimits,
    key: StreamKey,
) -> Result<StepStats, DsmcError> {
    let mut cells = bucketize(ens);
    let key = key.with_phase(phase::FRAGMENTATION).with_step(ens.step);
    let stats: Vec<Result<StepStats, DsmcError>> = cells
        .par_iter_mut()
        .enumerate()
        .map(|(c, parts)| frag_cell(parts, frag, b1, dt, limits, key.with_cell(c as u64)))
        .collect();
    ens.particles = cells.into_iter().flatten().collect();
    let mut total = StepStats::default();
    for s in stats {
        total.merge(&s?);
    }
    Ok(total)
}

/// Doubles the population, halving all weights, while it is below
/// `fraction` of the reference count. Returns the number of doublings.
pub fn population_control(ens: &mut Ensemble, fraction: f64) -> u64 {
    let mut k = 0;
    while fraction > 0.0 && !ens.particles.is_empty() && (ens.len() as f64) < fraction * ens.reference_count as f64 {
        let mut out = Vec::with_capacity(2 * ens.len());
        for p in &ens.particles {
            let h = SimParticle { w: 0.5 * p.w, ..*p };
            out.push(h);
            out.push(h);
        }
        ens.particles = out;
        k += 1;
    }
    k
}

fn check_rates(
    ens: &Ensemble,
    suite: &KernelSuite,
    b1: &B1Source,
    dt: f64,
    limit: f64,
) -> Result<(), DsmcError> {
    let dom = ens.domain;
    let mut counts = vec![Vec::new(); dom.n_cells()];
    for p in &ens.particles {
        counts[dom.cell_of(&p.x)].push(*p);
    }
    for (c, parts) in counts.iter().enumerate() {
        if parts.len() < 2 {
            continue;
        }
        let (_, a) = cell_majorant(suite.coag.as_ref(), parts, c)?;
        let rate = parts[0].w * a * (parts.len() - 1) as f64 / dom.cell_volume();
        if dt * rate > limit {
            return Err(DsmcError::StepTooLarge {
                product: dt * rate,
                limit,
                what: format!("coagulation majorant in cell {c}"),
            });
        }
    }
    let worst = ens
        .particles
        .iter()
        .map(|p| 0.5 * b1_value(b1, suite.frag.as_ref(), &p.state))
        .fold(0.0, f64::max);
    if dt * worst > limit {
        return Err(DsmcError::StepTooLarge { product: dt * worst, limit, what: "fragmentation".into() });
    }
    Ok(())
}

fn ensure_b1(
    src: &mut B1Source,
    ens: &Ensemble,
    cfg: &DsmcConfig,
) -> Result<(), DsmcError> {
    let B1Source::Cache(cache) = src else {
        return Ok(());
    };
    if ens.particles.iter().all(|p| cache.covers(&p.state)) {
        return Ok(());
    }
    let need = ens.particles.iter().fold((0.0_f64, 0.0_f64, 0.0_f64), |a, p| {
        (a.0.max(p.state.m), a.1.max(p.state.p.norm()), a.2.max(p.state.e))
    });
    let ranges = (
        cache.m_max.max(2.0 * need.0),
        cache.p_max.max(2.0 * need.1),
        cache.e_max.max(2.0 * need.2),
    );
    *cache = B1Cache::build(cfg.suite.frag.as_ref(), cfg.b1_cache_nodes, ranges, cfg.b1_budget, cfg.key(), cache.builds)?;
    Ok(())
}

fn initial_b1(ens: &Ensemble, cfg: &DsmcConfig) -> Result<B1Source, DsmcError> {
    let frag = cfg.suite.frag.as_ref();
    if ens.particles.iter().all(|p| frag.b1_closed_form(&p.state).is_some()) && frag.b1_closed_form(&ens.particles[0].state).is_some() {
        return Ok(B1Source::ClosedForm);
    }
    let need = ens.particles.iter().fold((0.0_f64, 0.0_f64, 0.0_f64), |a, p| {
        (a.0.max(p.state.m), a.1.max(p.state.p.norm()), a.2.max(p.state.e))
    });
    let ranges = (2.0 * need.0, (2.0 * need.1).max(need.0), 2.0 * need.2);
    Ok(B1Source::Cache(B1Cache::build(frag, cfg.b1_cache_nodes, ranges, cfg.b1_budget, cfg.key(), 0)?))
}

/// Refuses kernel pairs whose symmetry audit fails on the initial state range.
pub fn symmetry_gate(suite: &KernelSuite, radius: f64, samples: u64, key: StreamKey) -> Result<(), DsmcError> {
    if samples == 0 {
        return Ok(());
    }
    for e in check_symmetries(suite, radius, samples, key.with_phase(phase::AUDIT)) {
        if e.status == AuditStatus::Fail {
            return Err(DsmcError::AsymmetricKernel(format!("{}: {}", e.id, e.note)));
        }
    }
    Ok(())
}

/// Output of a particle run.
#[derive(Clone, Debug)]
pub struct DsmcOutput {
    pub ensemble: Ensemble,
    pub series: MomentSeries,
    pub ledger: ConservationLedger,
    pub gronwall: GronwallConstant,
    pub estimates: EstimateReport,
    pub b1_source: B1Source,
}

impl DsmcOutput {
    pub fn skip_rate(&self) -> f64 {
        let tried = self.ledger.total_skips() + self.ledger.rows.iter().map(|r| r.frag_events).sum::<u64>();
        if tried == 0 {
            0.0
        } else {
            self.ledger.total_skips() as f64 / tried as f64
        }
    }
}

/// Runs from a sampler to `T` by operator splitting.
pub fn run(cfg: &DsmcConfig, sampler: &InitialSampler) -> Result<DsmcOutput, DsmcError> {
    cfg.validate()?;
    let ens = init(sampler, cfg)?;
    run_from(cfg, ens)
}

pub fn run_from(cfg: &DsmcConfig, mut ens: Ensemble) -> Result<DsmcOutput, DsmcError> {
    cfg.validate()?;
    if ens.is_empty() {
        return Err(DsmcError::Empty);
    }
    let key = cfg.key();
    let suite = &cfg.suite;
    symmetry_gate(suite, 2.0 * ens.max_state_norm(), cfg.symmetry_samples, key)?;
    let gron = gronwall_constant(suite.frag.as_ref(), suite.c0, cfg.gronwall_nodes, cfg.b1_budget, key.with_phase(phase::QUADRATURE))?;
    let mut b1 = initial_b1(&ens, cfg)?;
    let limits = SamplerLimits::with_floor(cfg.sampler_floor);

    let first = ens.moments();
    let mut series = MomentSeries::default();
    series.push(first);
    let mut ledger = ConservationLedger::default();
    let p_scale = ens
        .particles
        .iter()
        .map(|p| p.w * p.state.p.max_abs())
        .sum::<f64>()
        .max((2.0 * first.m * first.etot).sqrt())
        .max(f64::MIN_POSITIVE);
    let n_steps = (cfg.t_end / cfg.dt - 1e-9).ceil().max(1.0) as u64;
    let mut next_out = cfg.cadence;
    let t0 = ens.t;
    for s in 0..n_steps {
        let t_next = if s + 1 == n_steps { t0 + cfg.t_end } else { t0 + (s + 1) as f64 * cfg.dt };
        let h = t_next - ens.t;
        ensure_b1(&mut b1, &ens, cfg)?;
        check_rates(&ens, suite, &b1, h, cfg.rate_limit)?;
        transport_step(&mut ens, h);
        let mut stats = coag_step(&mut ens, suite.coag.as_ref(), h, key)?;
        ensure_b1(&mut b1, &ens, cfg)?;
        stats.merge(&frag_step(&mut ens, suite.frag.as_ref(), &b1, h, &limits, key)?);
        let duplications = population_control(&mut ens, cfg.duplicate_below);
        if ens.len() > cfg.max_particles {
            return Err(DsmcError::PopulationLimit { count: ens.len(), limit: cfg.max_particles });
        }
        ens.t = t_next;
        ens.step += 1;
        let mo = ens.moments();
        let drift = |v: f64, v0: f64, sc: f64| (v - v0).abs() / sc.max(f64::MIN_POSITIVE);
        let dp = drift(mo.px, first.px, p_scale).max(drift(mo.py, first.py, p_scale)).max(drift(mo.pz, first.pz, p_scale));
        ledger.rows.push(LedgerRow {
            step: ens.step,
            t: ens.t,
            coag_candidates: stats.coag_candidates,
            coag_events: stats.coag_events,
            frag_events: stats.frag_events,
            frag_skips: stats.frag_skips,
            frag_expected: stats.frag_expected,
            frag_variance: stats.frag_variance,
            duplications,
            particles: ens.len() as u64,
            max_event_mass: stats.max_mass,
            max_event_momentum: stats.max_momentum,
            max_event_energy: stats.max_energy,
            drift_mass: drift(mo.m, first.m, first.m),
            drift_momentum: dp,
            drift_energy: drift(mo.etot, first.etot, first.etot),
            coag_acceptance: if stats.coag_candidates > 0 {
                stats.coag_events as f64 / stats.coag_candidates as f64
            } else {
                0.0
            },
            frag_sampler_acceptance: stats.sampler.rate(),
        });
        let last = s + 1 == n_steps;
        if last || ens.t - t0 >= next_out * (1.0 - 1e-9) {
            series.push(mo);
            while next_out <= (ens.t - t0) * (1.0 + 1e-9) {
                next_out += cfg.cadence;
            }
        }
    }
    let estimates = check_estimates(
        &series,
        &EstimateInputs { gronwall_c: Some(gron.value), ..Default::default() },
    );
    Ok(DsmcOutput { ensemble: ens, series, ledger, gronwall: gron, estimates, b1_source: b1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BuiltinCoag, BuiltinFrag};
    use std::sync::Arc;

    fn suite(coag: BuiltinCoag, frag: BuiltinFrag, c0: f64) -> KernelSuite {
        KernelSuite::new(Arc::new(coag), Arc::new(frag), c0, 1.5, 0.2).unwrap()
    }

    fn cfg(n: usize, dt: f64, t: f64, s: KernelSuite) -> DsmcConfig {
        DsmcConfig::new(Domain::new(1.0, 1).unwrap(), n, dt, t, 7, s)
    }

    fn mono() -> InitialSampler {
        InitialSampler::Monodisperse { m: 1.0, p: [0.0; 3], e: 0.5, concentration: 1.0 }
    }

    #[test]
    fn init_examples() {
        let c = cfg(100, 0.1, 1.0, suite(BuiltinCoag::Zero, BuiltinFrag::Zero, 3.0));
        let ens = init(&mono(), &c).unwrap();
        let mo = ens.moments();
        assert_eq!(mo.ekin, 0.0);
        assert!((mo.eint - 100.0 * ens.particles[0].w * 0.5).abs() < 1e-12);
        assert!((mo.n - 1.0).abs() < 1e-12);

        let beam = InitialSampler::TwoBeam { m: 1.0, e: 1.0, speed: 1.0, concentration: 2.0 };
        let ens = init(&beam, &c).unwrap();
        let mo = ens.moments();
        assert!(mo.px.abs() < 1e-15);
        assert!((mo.ekin - 100.0 * ens.particles[0].w * 0.5).abs() < 1e-12);
        let odd = cfg(3, 0.1, 1.0, suite(BuiltinCoag::Zero, BuiltinFrag::Zero, 3.0));
        assert!(init(&beam, &odd).is_err());
        let empty = cfg(0, 0.1, 1.0, suite(BuiltinCoag::Zero, BuiltinFrag::Zero, 3.0));
        assert!(matches!(init(&mono(), &empty), Err(DsmcError::Empty)));
    }

    #[test]
    fn product_density_moments() {
        let (k, th, sig, mu) = (3.0, 0.5, 0.7, 2.0);
        let sampler = InitialSampler::Product {
            concentration: 1.0,
            mass_shape: k,
            mass_scale: th,
            momentum_sigma: sig,
            energy_mean: mu,
        };
        let n = 20_000;
        let ens = init(&sampler, &cfg(n, 0.1, 1.0, suite(BuiltinCoag::Zero, BuiltinFrag::Zero, 3.0))).unwrap();
        let check = |f: &dyn Fn(&ParticleState) -> f64, exact: f64| {
            let v: Vec<f64> = ens.particles.iter().map(|p| f(&p.state)).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
        };
        check(&|y| y.m, k * th);
        check(&|y| y.e, mu);
        check(&|y| y.p.norm_sq(), 3.0 * sig * sig);
        check(&|y| y.p.norm_sq() / (2.0 * y.m), 1.5 * sig * sig / (th * (k - 1.0)));
    }

    #[test]
    fn transport_examples() {
        let c = cfg(50, 0.1, 1.0, suite(BuiltinCoag::Zero, BuiltinFrag::Zero, 3.0));
        let beam = InitialSampler::TwoBeam { m: 2.0, e: 1.0, speed: 0.3, concentration: 1.0 };
        let mut ens = init(&beam, &c).unwrap();
        let before = ens.clone();
        transport_step(&mut ens, 0.0);
        assert_eq!(ens.particles, before.particles);

        let dom = Domain::new(1.0, 1).unwrap();
        let y = ParticleState::new(2.0, [0.2, -0.4, 0.0], 1.0).unwrap();
        let mut one = Ensemble {
            particles: vec![SimParticle { w: 1.0, x: Vec3::new(0.5, 0.5, 0.5), image: [0; 3], state: y }],
            domain: dom,
            t: 0.0,
            step: 0,
            reference_count: 1,
        };
        transport_step(&mut one, 0.5);
        assert_eq!(one.particles[0].x, Vec3::new(0.55, 0.4, 0.5));
        transport_step(&mut one, 5.0);
        let p = one.particles[0];
        assert!(p.x.0.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(p.image, [1, -1, 0]);
        let u = p.unwrapped(1.0);
        assert!((u.0[0] - 1.05).abs() < 1e-12 && (u.0[1] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_kernels_keep_everything() {
        let c = cfg(200, 0.1, 1.0, suite(BuiltinCoag::Zero, BuiltinFrag::Zero, 3.0));
        let beam = InitialSampler::TwoBeam { m: 1.0, e: 1.0, speed: 1.0, concentration: 1.0 };
        let out = run(&c, &beam).unwrap();
        assert_eq!(out.ledger.total_events(), 0);
        let r0 = out.series.rows[0];
        for r in &out.series.rows {
            assert_eq!(r.n, r0.n);
            assert!((r.m - r0.m).abs() <= 1e-12 * r0.m);
            assert!((r.etot - r0.etot).abs() <= 1e-12 * r0.etot);
        }
        assert_eq!(out.series.rows.len(), 11);
        assert!(out.estimates.passed(), "{:?}", out.estimates);
    }

    #[test]
    fn pure_coagulation() {
        let c = DsmcConfig { cadence: 0.1, ..cfg(2000, 0.05, 1.0, suite(BuiltinCoag::Constant { a0: 1.0 }, BuiltinFrag::Zero, 3.0)) };
        let out = run(&c, &mono()).unwrap();
        assert!(out.ledger.total_events() > 500);
        assert!(out.series.rows.windows(2).all(|w| w[1].n < w[0].n));
        assert!(out.ledger.max_event_residual() <= 1e-12);
        assert!(out.ledger.max_drift() <= 1e-9);
        assert_eq!(out.ledger.rows.iter().map(|r| r.coag_acceptance).fold(0.0, f64::max), 1.0);
        let exact = 1.0 / 1.5;
        let n = out.series.rows.last().unwrap().n;
        assert!((n - exact).abs() < 0.05, "{n}");
    }

    #[test]
    fn majorant_rules() {
        let c = cfg(100, 0.01, 0.1, suite(BuiltinCoag::Smoluchowski, BuiltinFrag::Zero, 3.0));
        assert!(matches!(run(&c, &mono()), Err(DsmcError::UnboundedMajorant { .. })));
        let c = cfg(100, 1.0, 1.0, suite(BuiltinCoag::Constant { a0: 1.0 }, BuiltinFrag::Zero, 3.0));
        assert!(matches!(run(&c, &mono()), Err(DsmcError::StepTooLarge { .. })));

        #[derive(Debug)]
        struct Liar;
        impl CoagKernel for Liar {
            fn name(&self) -> String {
                "liar".into()
            }
            fn eval(&self, _: &ParticleState, _: &ParticleState) -> f64 {
                2.0
            }
            fn local_sup(&self, _: f64) -> f64 {
                1.0
            }
        }
        let s = KernelSuite::new(Arc::new(Liar), Arc::new(BuiltinFrag::Zero), 3.0, 1.5, 0.2).unwrap();
        let c = cfg(100, 0.01, 0.1, s);
        match run(&c, &mono()) {
            Err(DsmcError::MajorantBreach { value, bound, .. }) => assert!(value > bound),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn asymmetric_fragmentation_refused() {
        let c = cfg(100, 0.01, 0.1, suite(BuiltinCoag::Zero, BuiltinFrag::MassTruncated { b0: 1.0, c0: Some(2.0) }, 3.0));
        assert!(matches!(run(&c, &mono()), Err(DsmcError::AsymmetricKernel(_))));
    }

    #[test]
    fn fragmentation_events_and_expectation() {
        let c = DsmcConfig {
            cadence: 0.05,
            ..cfg(4000, 0.01, 0.2, suite(BuiltinCoag::Zero, BuiltinFrag::Constant { b0: 0.5, c0: None }, 3.0))
        };
        let sampler = InitialSampler::Monodisperse { m: 1.0, p: [0.1, 0.0, 0.0], e: 1.0, concentration: 1.0 };
        let out = run(&c, &sampler).unwrap();
        assert!(matches!(out.b1_source, B1Source::ClosedForm));
        assert!(out.series.rows.windows(2).all(|w| w[1].n >= w[0].n));
        let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
        for r in &out.ledger.rows {
            obs += r.frag_events as f64;
            exp += r.frag_expected;
            var += r.frag_variance;
        }
        assert!((obs - exp).abs() < 3.0 * var.sqrt(), "{obs} vs {exp}");
        assert_eq!(out.ledger.total_skips(), 0);
        assert!(out.ledger.max_event_residual() <= 1e-12);
        assert!(out.ensemble.particles.iter().all(|p| p.state.e > 0.0 && p.state.m > 0.0));
        assert!(out.estimates.get("particle_bound").unwrap().passed);
    }

    #[test]
    fn truncated_fragmentation_uses_cache() {
        let c = DsmcConfig {
            b1_budget: 8192,
            b1_cache_nodes: 5,
            ..cfg(500, 0.05, 0.5, suite(BuiltinCoag::Zero, BuiltinFrag::Constant { b0: 1.0, c0: Some(3.0) }, 3.0))
        };
        let sampler = InitialSampler::Monodisperse { m: 1.0, p: [0.0; 3], e: 1.0, concentration: 1.0 };
        let out = run(&c, &sampler).unwrap();
        let B1Source::Cache(cache) = &out.b1_source else { panic!("expected cache") };
        assert!(cache.relative_std_error < 0.12, "{}", cache.relative_std_error);
        assert!(out.ledger.rows.iter().map(|r| r.frag_events).sum::<u64>() > 0);
        for p in &out.ensemble.particles {
            assert!(p.state.m >= 1.0 / 3.0 - 1e-12);
        }
    }

    #[test]
    fn population_control_doubles() {
        let c = cfg(10, 0.1, 1.0, suite(BuiltinCoag::Zero, BuiltinFrag::Zero, 3.0));
        let mut ens = init(&mono(), &c).unwrap();
        let before = ens.moments();
        ens.particles.truncate(4);
        ens.reference_count = 10;
        let m4 = ens.moments();
        assert_eq!(population_control(&mut ens, 0.5), 1);
        assert_eq!(ens.len(), 8);
        let m8 = ens.moments();
        assert!((m4.m - m8.m).abs() < 1e-15 * m4.m);
        assert!(m8.n < before.n);
    }

    #[test]
    fn cache_interpolates_linear_data() {
        let mut cache = B1Cache {
            nodes: 3,
            m_max: 2.0,
            p_max: 2.0,
            e_max: 2.0,
            values: vec![0.0; 27],
            relative_std_error: 0.0,
            builds: 1,
        };
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    cache.values[(i * 3 + j) * 3 + k] = i as f64 + 2.0 * j as f64 + 3.0 * k as f64;
                }
            }
        }
        let y = ParticleState::new(0.5, [0.0, 1.5, 0.0], 1.25).unwrap();
        assert!((cache.interpolate(&y) - (0.5 + 3.0 + 3.75)).abs() < 1e-12);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let mut c = cfg(
            3000,
            0.01,
            0.3,
            suite(BuiltinCoag::AdditivePower { alpha: 0.5 }, BuiltinFrag::Constant { b0: 0.002, c0: None }, 3.0),
        );
        c.domain = Domain::new(2.0, 2).unwrap();
        c.cadence = 0.1;
        let sampler = InitialSampler::Product {
            concentration: 1.0,
            mass_shape: 4.0,
            mass_scale: 0.25,
            momentum_sigma: 0.3,
            energy_mean: 0.5,
        };
        let go = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run(&c, &sampler).unwrap())
        };
        let a = go(1);
        let b = go(4);
        assert_eq!(a.series, b.series);
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.ensemble.particles, b.ensemble.particles);
    }
}
