//! Coagulation and fragmentation kernels.
//!
//! Kinetic kernels act on full states `y = (m, p, e)`; mass-only kernels act
//! on masses and drive the homogeneous sectional solver. Every kernel declares
//! explicit local sup-bounds, which the audit checks and the particle
//! simulator uses as its majorant.

use crate::state_space::{admissible_bounds, ParticleState};
use crate::stochastics::{integrate_admissible, McEstimate, SampleError, StreamKey};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("unknown {kind} kernel `{name}` (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("kernel `{name}`: {message}")]
    BadParameter { name: String, message: String },
    #[error("kernel `{0}` has no mass-only form")]
    NotMassOnly(String),
    #[error("invalid comparison exponents: need 1 < s and 0 < delta < 1/(6s-5), got s = {s}, delta = {delta}")]
    Exponents { s: f64, delta: f64 },
    #[error("truncation constant C0 must exceed 1, got {0}")]
    TruncationConstant(f64),
    #[error("quadrature budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Sampling(#[from] SampleError),
}

/// Coagulation kernel `A(y, y*)`.
pub trait CoagKernel: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn eval(&self, y: &ParticleState, y_star: &ParticleState) -> f64;
    /// Upper bound of `A` over `Y_R x Y_R`; `f64::INFINITY` when `A` is not
    /// locally bounded.
    fn local_sup(&self, r: f64) -> f64;
}

/// Fragmentation kernel `B(y', y)`, the rate density for `y'` to break into
/// `y` and `y' - y`.
pub trait FragKernel: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    /// Evaluated on admissible pairs `y < y'` only.
    fn eval(&self, y_prime: &ParticleState, y: &ParticleState) -> f64;
    /// Upper bound of `B(y', .)` over the admissible daughters of `y'`.
    fn local_sup(&self, y_prime: &ParticleState) -> f64;
    /// Declared truncation constant, if the kernel is truncated.
    fn truncation(&self) -> Option<f64>;
    fn b1_closed_form(&self, _y_prime: &ParticleState) -> Option<f64> {
        None
    }
}

/// Mass-only coagulation kernel `A(m, m*)`.
pub trait MassCoagKernel: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn eval_mass(&self, m: f64, m_star: f64) -> f64;
}

/// Mass-only fragmentation kernel `B(m', m)` with its total rate
/// `B1(m') = int_0^{m'} B(m', m) dm`.
pub trait MassFragKernel: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn eval_mass(&self, m_prime: f64, m: f64) -> f64;
    fn b1_mass(&self, m_prime: f64) -> f64;
    /// Daughter masses in `(0, m')` where `B(m', .)` may jump.
    fn breakpoints(&self, _m_prime: f64) -> Vec<f64> {
        Vec::new()
    }
}

/// Builtin coagulation kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BuiltinCoag {
    Zero,
    /// `A = a0`.
    Constant { a0: f64 },
    /// `A = m^alpha + m*^alpha`, `0 < alpha < 1`.
    AdditivePower { alpha: f64 },
    /// Brownian kernel `(m^{1/3} + m*^{1/3})(m^{-1/3} + m*^{-1/3})`.
    Smoluchowski,
    /// `(m^alpha + m*^alpha)^2 |p/m - p*/m*|`.
    Droplet { alpha: f64 },
    /// `((m + m*)/(m m*))^alpha |p/m - p*/m*|^gamma`.
    Stellar { alpha: f64, gamma: f64 },
    /// `A(y, y*) = m`; deliberately asymmetric, for audit fault injection.
    AsymmetricTest,
}

impl BuiltinCoag {
    pub const NAMES: [&'static str; 7] = [
        "zero",
        "constant",
        "additive_power",
        "smoluchowski",
        "droplet",
        "stellar",
        "asymmetric_test",
    ];

    pub fn from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<Self, KernelError> {
        let mut p = Params::new(name, params);
        let k = match name {
            "zero" => BuiltinCoag::Zero,
            "constant" => {
                let a0 = p.get_or("a0", 1.0)?;
                p.require(a0 >= 0.0, "a0 must be nonnegative")?;
                BuiltinCoag::Constant { a0 }
            }
            "additive_power" => {
                let alpha = p.get_or("alpha", 0.5)?;
                p.require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)")?;
                BuiltinCoag::AdditivePower { alpha }
            }
            "smoluchowski" => BuiltinCoag::Smoluchowski,
            "droplet" => {
                let alpha = p.get_or("alpha", 0.25)?;
                p.require(alpha >= 0.0, "alpha must be nonnegative")?;
                BuiltinCoag::Droplet { alpha }
            }
            "stellar" => {
                let alpha = p.get_or("alpha", 0.5)?;
                let gamma = p.get_or("gamma", -1.0)?;
                BuiltinCoag::Stellar { alpha, gamma }
            }
            "asymmetric_test" => BuiltinCoag::AsymmetricTest,
            _ => {
                return Err(KernelError::UnknownName {
                    kind: "coagulation",
                    name: name.to_string(),
                    known: Self::NAMES.join(", "),
                })
            }
        };
        p.finish()?;
        Ok(k)
    }

    /// Mass-only view, available for kernels independent of momentum and energy.
    pub fn mass_only(&self) -> Result<Arc<dyn MassCoagKernel>, KernelError> {
        match self {
            BuiltinCoag::Droplet { .. } | BuiltinCoag::Stellar { .. } => {
                Err(KernelError::NotMassOnly(CoagKernel::name(self)))
            }
            other => Ok(Arc::new(other.clone())),
        }
    }
}

fn smoluchowski(m: f64, ms: f64) -> f64 {
    (m.cbrt() + ms.cbrt()) * (1.0 / m.cbrt() + 1.0 / ms.cbrt())
}

impl CoagKernel for BuiltinCoag {
    fn name(&self) -> String {
        match self {
            BuiltinCoag::Zero => "zero".into(),
            BuiltinCoag::Constant { a0 } => format!("constant(a0={a0})"),
            BuiltinCoag::AdditivePower { alpha } => format!("additive_power(alpha={alpha})"),
            BuiltinCoag::Smoluchowski => "smoluchowski".into(),
            BuiltinCoag::Droplet { alpha } => format!("droplet(alpha={alpha})"),
            BuiltinCoag::Stellar { alpha, gamma } => format!("stellar(alpha={alpha},gamma={gamma})"),
            BuiltinCoag::AsymmetricTest => "asymmetric_test".into(),
        }
    }

    fn eval(&self, y: &ParticleState, ys: &ParticleState) -> f64 {
        match self {
            BuiltinCoag::Droplet { alpha } => {
                let s = y.m.powf(*alpha) + ys.m.powf(*alpha);
                s * s * (y.velocity() - ys.velocity()).norm()
            }
            BuiltinCoag::Stellar { alpha, gamma } => {
                let dv = (y.velocity() - ys.velocity()).norm();
                ((y.m + ys.m) / (y.m * ys.m)).powf(*alpha) * dv.powf(*gamma)
            }
            _ => self.eval_mass(y.m, ys.m),
        }
    }

    fn local_sup(&self, r: f64) -> f64 {
        match self {
            BuiltinCoag::Zero => 0.0,
            BuiltinCoag::Constant { a0 } => *a0,
            BuiltinCoag::AdditivePower { alpha } => 2.0 * r.powf(*alpha),
            BuiltinCoag::Smoluchowski | BuiltinCoag::Droplet { .. } => f64::INFINITY,
            BuiltinCoag::Stellar { alpha, gamma } => {
                if *alpha == 0.0 && *gamma == 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            }
            BuiltinCoag::AsymmetricTest => r,
        }
    }
}

impl MassCoagKernel for BuiltinCoag {
    fn name(&self) -> String {
        CoagKernel::name(self)
    }

    fn eval_mass(&self, m: f64, ms: f64) -> f64 {
        match self {
            BuiltinCoag::Zero => 0.0,
            BuiltinCoag::Constant { a0 } => *a0,
            BuiltinCoag::AdditivePower { alpha } => m.powf(*alpha) + ms.powf(*alpha),
            BuiltinCoag::Smoluchowski => smoluchowski(m, ms),
            BuiltinCoag::AsymmetricTest => m,
            BuiltinCoag::Droplet { .. } | BuiltinCoag::Stellar { .. } => f64::NAN,
        }
    }
}

/// Builtin fragmentation kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BuiltinFrag {
    Zero,
    /// `B = b0` on admissible pairs for which both daughters satisfy the
    /// truncation constraints `m' <= C0 m` and
    /// `e' + |p'|^2/2m' <= C0 (e + |p|^2/2m)`; untruncated when `c0` is `None`.
    Constant { b0: f64, c0: Option<f64> },
    /// Mass-only `B(m', m) = b0 1{m' <= C0 m}`.
    MassTruncated { b0: f64, c0: Option<f64> },
}

impl BuiltinFrag {
    pub const NAMES: [&'static str; 3] = ["zero", "constant", "mass_truncated"];

    pub fn from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<Self, KernelError> {
        let mut p = Params::new(name, params);
        let k = match name {
            "zero" => BuiltinFrag::Zero,
            "constant" | "mass_truncated" => {
                let b0 = p.get_or("b0", 1.0)?;
                p.require(b0 >= 0.0, "b0 must be nonnegative")?;
                let c0 = p.get("c0");
                if let Some(c) = c0 {
                    if !(c > 1.0) {
                        return Err(KernelError::TruncationConstant(c));
                    }
                }
                if name == "constant" {
                    BuiltinFrag::Constant { b0, c0 }
                } else {
                    BuiltinFrag::MassTruncated { b0, c0 }
                }
            }
            _ => {
                return Err(KernelError::UnknownName {
                    kind: "fragmentation",
                    name: name.to_string(),
                    known: Self::NAMES.join(", "),
                })
            }
        };
        p.finish()?;
        Ok(k)
    }

    pub fn mass_only(&self) -> Result<Arc<dyn MassFragKernel>, KernelError> {
        match self {
            BuiltinFrag::Constant { c0: Some(_), .. } => {
                Err(KernelError::NotMassOnly(FragKernel::name(self)))
            }
            BuiltinFrag::Constant { b0, c0: None } => Ok(Arc::new(BuiltinFrag::MassTruncated {
                b0: *b0,
                c0: None,
            })),
            other => Ok(Arc::new(other.clone())),
        }
    }
}

/// `int_{u_lo}^{u_hi} (u (1 - u))^{3/2} du` for `0 <= u_lo <= u_hi <= 1`.
fn beta_52_partial(u_lo: f64, u_hi: f64) -> f64 {
    // u = (1 - cos t)/2 turns the integrand into sin^4(t)/16.
    let anti = |u: f64| {
        let t = (1.0 - 2.0 * u.clamp(0.0, 1.0)).acos();
        (3.0 * t / 8.0 - (2.0 * t).sin() / 4.0 + (4.0 * t).sin() / 32.0) / 16.0
    };
    anti(u_hi) - anti(u_lo)
}

/// Measure of admissible daughters of `y'` whose mass fraction `m/m'` lies in
/// `[u_lo, u_hi]`.
///
/// For fixed `m` the admissible `(p, e)` set is a paraboloid over a ball of
/// radius `sqrt(e'/a)`, `a = m' / (2 m (m' - m))`, with volume
/// `(8 pi / 15) e'^{5/2} a^{-3/2}`.
pub fn admissible_volume_between(y_prime: &ParticleState, u_lo: f64, u_hi: f64) -> f64 {
    let mp = y_prime.m;
    (8.0 * PI / 15.0)
        * y_prime.e.powf(2.5)
        * (2.0 / mp).powf(1.5)
        * mp.powi(4)
        * beta_52_partial(u_lo, u_hi)
}

/// Total measure of `{y : y < y'}`.
pub fn admissible_volume(y_prime: &ParticleState) -> f64 {
    admissible_volume_between(y_prime, 0.0, 1.0)
}

fn truncation_holds(c0: f64, y_prime: &ParticleState, y: &ParticleState) -> bool {
    y_prime.m <= c0 * y.m && y_prime.total_energy() <= c0 * y.total_energy()
}

impl FragKernel for BuiltinFrag {
    fn name(&self) -> String {
        match self {
            BuiltinFrag::Zero => "zero".into(),
            BuiltinFrag::Constant { b0, c0: Some(c) } => format!("constant(b0={b0},c0={c})"),
            BuiltinFrag::Constant { b0, c0: None } => format!("constant(b0={b0},untruncated)"),
            BuiltinFrag::MassTruncated { b0, c0: Some(c) } => format!("mass_truncated(b0={b0},c0={c})"),
            BuiltinFrag::MassTruncated { b0, c0: None } => format!("mass_truncated(b0={b0},untruncated)"),
        }
    }

    fn eval(&self, y_prime: &ParticleState, y: &ParticleState) -> f64 {
        match self {
            BuiltinFrag::Zero => 0.0,
            BuiltinFrag::Constant { b0, c0: None } => *b0,
            BuiltinFrag::Constant { b0, c0: Some(c0) } => {
                // Evaluated only where y < y', so the complement is a valid state.
                let Ok(complement) = crate::state_space::split(y_prime, y) else {
                    return 0.0;
                };
                if truncation_holds(*c0, y_prime, y) && truncation_holds(*c0, y_prime, &complement) {
                    *b0
                } else {
                    0.0
                }
            }
            BuiltinFrag::MassTruncated { .. } => self.eval_mass(y_prime.m, y.m),
        }
    }

    fn local_sup(&self, _y_prime: &ParticleState) -> f64 {
        match self {
            BuiltinFrag::Zero => 0.0,
            BuiltinFrag::Constant { b0, .. } | BuiltinFrag::MassTruncated { b0, .. } => *b0,
        }
    }

    fn truncation(&self) -> Option<f64> {
        match self {
            BuiltinFrag::Zero => None,
            BuiltinFrag::Constant { c0, .. } | BuiltinFrag::MassTruncated { c0, .. } => *c0,
        }
    }

    fn b1_closed_form(&self, y_prime: &ParticleState) -> Option<f64> {
        match self {
            BuiltinFrag::Zero => Some(0.0),
            BuiltinFrag::Constant { b0, c0: None } => Some(b0 * admissible_volume(y_prime)),
            BuiltinFrag::Constant { c0: Some(_), .. } => None,
            BuiltinFrag::MassTruncated { b0, c0 } => {
                let lo = c0.map_or(0.0, |c| 1.0 / c);
                Some(b0 * admissible_volume_between(y_prime, lo, 1.0))
            }
        }
    }
}

impl MassFragKernel for BuiltinFrag {
    fn name(&self) -> String {
        FragKernel::name(self)
    }

    fn eval_mass(&self, m_prime: f64, m: f64) -> f64 {
        match self {
            BuiltinFrag::Zero => 0.0,
            BuiltinFrag::MassTruncated { b0, c0 } | BuiltinFrag::Constant { b0, c0 } => {
                if m <= 0.0 || m >= m_prime {
                    0.0
                } else if c0.is_none_or(|c| m_prime <= c * m) {
                    *b0
                } else {
                    0.0
                }
            }
        }
    }

    fn b1_mass(&self, m_prime: f64) -> f64 {
        match self {
            BuiltinFrag::Zero => 0.0,
            BuiltinFrag::MassTruncated { b0, c0 } | BuiltinFrag::Constant { b0, c0 } => {
                b0 * m_prime * (1.0 - c0.map_or(0.0, |c| 1.0 / c))
            }
        }
    }

    fn breakpoints(&self, m_prime: f64) -> Vec<f64> {
        match self.truncation() {
            Some(c) => vec![m_prime / c],
            None => Vec::new(),
        }
    }
}

/// Kinetic kernel pair with the truncation constant and comparison exponents.
#[derive(Clone, Debug)]
pub struct KernelSuite {
    pub coag: Arc<dyn CoagKernel>,
    pub frag: Arc<dyn FragKernel>,
    pub c0: f64,
    pub s: f64,
    pub delta: f64,
}

impl KernelSuite {
    pub fn new(
        coag: Arc<dyn CoagKernel>,
        frag: Arc<dyn FragKernel>,
        c0: f64,
        s: f64,
        delta: f64,
    ) -> Result<Self, KernelError> {
        validate_exponents(s, delta)?;
        if !(c0 > 1.0) {
            return Err(KernelError::TruncationConstant(c0));
        }
        Ok(KernelSuite { coag, frag, c0, s, delta })
    }
}

/// Mass-only kernel pair driving the homogeneous solver.
#[derive(Clone, Debug)]
pub struct MassKernelSuite {
    pub coag: Arc<dyn MassCoagKernel>,
    pub frag: Arc<dyn MassFragKernel>,
    pub s: f64,
    pub delta: f64,
}

impl MassKernelSuite {
    pub fn new(
        coag: Arc<dyn MassCoagKernel>,
        frag: Arc<dyn MassFragKernel>,
        s: f64,
        delta: f64,
    ) -> Result<Self, KernelError> {
        validate_exponents(s, delta)?;
        Ok(MassKernelSuite { coag, frag, s, delta })
    }
}

pub fn validate_exponents(s: f64, delta: f64) -> Result<(), KernelError> {
    if s > 1.0 && delta > 0.0 && delta < 1.0 / (6.0 * s - 5.0) {
        Ok(())
    } else {
        Err(KernelError::Exponents { s, delta })
    }
}

/// Names of every builtin coagulation and fragmentation kernel.
pub fn builtin_kernels() -> (Vec<&'static str>, Vec<&'static str>) {
    (BuiltinCoag::NAMES.to_vec(), BuiltinFrag::NAMES.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum B1Method {
    ClosedForm,
    MonteCarlo,
}

/// Total fragmentation rate of a state, with its quadrature error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct B1Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
    pub method: B1Method,
}

/// `B1(y') = int B(y', y) 1{y < y'} dy`: closed form when the kernel has one,
/// otherwise a Monte-Carlo estimate over the admissible envelope.
pub fn b1(
    kernel: &dyn FragKernel,
    y_prime: &ParticleState,
    budget: u64,
    key: StreamKey,
) -> Result<B1Estimate, KernelError> {
    if budget == 0 {
        return Err(KernelError::ZeroBudget);
    }
    if let Some(v) = kernel.b1_closed_form(y_prime) {
        return Ok(B1Estimate {
            value: v,
            std_error: 0.0,
            samples: 0,
            method: B1Method::ClosedForm,
        });
    }
    let est = b1_monte_carlo(kernel, y_prime, budget.max(2), key)?;
    Ok(B1Estimate {
        value: est.value,
        std_error: est.std_error,
        samples: est.samples,
        method: B1Method::MonteCarlo,
    })
}

/// Monte-Carlo `B1`, ignoring any closed form.
pub fn b1_monte_carlo(
    kernel: &dyn FragKernel,
    y_prime: &ParticleState,
    budget: u64,
    key: StreamKey,
) -> Result<McEstimate, SampleError> {
    integrate_admissible(&|y: &ParticleState| kernel.eval(y_prime, y), y_prime, budget, key)
}

/// Upper estimate of `sup B1` over `Y_{2 C0}` and how it was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallConstant {
    pub value: f64,
    pub method: String,
    /// Nodes per axis of the `(m', |p'|, e')` grid.
    pub grid_nodes: usize,
    pub grid_max: f64,
    pub argmax: Option<ParticleState>,
    /// `sup_B(y') * |envelope(y')|` maximized over the grid.
    pub envelope_bound: f64,
    pub max_relative_std_error: f64,
}

/// Relative standard error above which the sampled grid maximum is
/// considered inconclusive and the envelope bound is reported instead.
const GRONWALL_CONCLUSIVE_REL_SE: f64 = 0.05;

/// Estimates `C = sup_{y' in Y_{2 C0}} B1(y')`.
///
/// `B1` is rotation invariant for every builtin, so the maximization runs over
/// a grid in `(m', |p'|, e')` with `p'` along the first axis. Monte-Carlo
/// node values enter as `estimate + 3 std_error`.
pub fn gronwall_constant(
    kernel: &dyn FragKernel,
    c0: f64,
    nodes: usize,
    budget: u64,
    key: StreamKey,
) -> Result<GronwallConstant, KernelError> {
    if budget == 0 {
        return Err(KernelError::ZeroBudget);
    }
    let nodes = nodes.max(2);
    let r = 2.0 * c0;
    // Open box: stay a hair inside the boundary so nodes are states of Y_R.
    let edge = r * (1.0 - 1e-9);
    let axis = |i: usize, allow_zero: bool| {
        if allow_zero {
            edge * i as f64 / (nodes - 1) as f64
        } else {
            edge * (i + 1) as f64 / nodes as f64
        }
    };
    let mut points = Vec::with_capacity(nodes * nodes * nodes);
    for i in 0..nodes {
        for j in 0..nodes {
            for k in 0..nodes {
                let y = ParticleState::new_unchecked(
                    axis(i, false),
                    crate::vec3::Vec3::new(axis(j, true), 0.0, 0.0),
                    axis(k, false),
                );
                points.push(y);
            }
        }
    }
    let results: Vec<Result<(f64, f64, f64, f64), KernelError>> = points
        .par_iter()
        .enumerate()
        .map(|(idx, y)| {
            let est = b1(kernel, y, budget, key.with_counter(idx as u64))?;
            let env = kernel.local_sup(y) * admissible_bounds(y).volume();
            Ok((est.value + 3.0 * est.std_error, est.value, est.std_error, env))
        })
        .collect();
    let mut grid_max = 0.0_f64;
    let mut argmax = None;
    let mut envelope_bound = 0.0_f64;
    let mut rel_se_at_max = 0.0;
    let mut max_rel_se = 0.0_f64;
    for (y, res) in points.iter().zip(results) {
        let (upper, value, se, env) = res?;
        envelope_bound = envelope_bound.max(env);
        if value > 0.0 {
            max_rel_se = max_rel_se.max(se / value);
        }
        if upper > grid_max || argmax.is_none() {
            grid_max = upper;
            argmax = Some(*y);
            rel_se_at_max = if value > 0.0 { se / value } else { 0.0 };
        }
    }
    let closed = points.first().and_then(|y| kernel.b1_closed_form(y)).is_some();
    let (value, method) = if closed {
        (grid_max, "closed_form_grid".to_string())
    } else if rel_se_at_max <= GRONWALL_CONCLUSIVE_REL_SE {
        (grid_max, "monte_carlo_grid".to_string())
    } else {
        (envelope_bound, "envelope_bound".to_string())
    };
    Ok(GronwallConstant {
        value,
        method,
        grid_nodes: nodes,
        grid_max,
        argmax,
        envelope_bound,
        max_relative_std_error: max_rel_se,
    })
}

/// `sup_{0 < m' <= 2 C0} B1(m')` for a mass-only kernel, sampled on a uniform grid.
pub fn gronwall_constant_mass(kernel: &dyn MassFragKernel, c0: f64, nodes: usize) -> f64 {
    let nodes = nodes.max(2);
    (1..=nodes)
        .map(|i| kernel.b1_mass(2.0 * c0 * i as f64 / nodes as f64))
        .fold(0.0, f64::max)
}

/// Parameter-map reader that rejects unknown keys.
struct Params<'a> {
    kernel: &'a str,
    map: &'a BTreeMap<String, f64>,
    used: Vec<&'static str>,
}

impl<'a> Params<'a> {
    fn new(kernel: &'a str, map: &'a BTreeMap<String, f64>) -> Self {
        Params { kernel, map, used: Vec::new() }
    }

    fn get(&mut self, key: &'static str) -> Option<f64> {
        self.used.push(key);
        self.map.get(key).copied()
    }

    fn get_or(&mut self, key: &'static str, default: f64) -> Result<f64, KernelError> {
        let v = self.get(key).unwrap_or(default);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(KernelError::BadParameter {
                name: self.kernel.to_string(),
                message: format!("parameter `{key}` must be finite"),
            })
        }
    }

    fn require(&self, ok: bool, message: &str) -> Result<(), KernelError> {
        if ok {
            Ok(())
        } else {
            Err(KernelError::BadParameter {
                name: self.kernel.to_string(),
                message: message.to_string(),
            })
        }
    }

    fn finish(self) -> Result<(), KernelError> {
        match self.map.keys().find(|k| !self.used.contains(&k.as_str())) {
            Some(k) => Err(KernelError::BadParameter {
                name: self.kernel.to_string(),
                message: format!("unknown parameter `{k}`"),
            }),
            None => Ok(()),
        }
    }
}
