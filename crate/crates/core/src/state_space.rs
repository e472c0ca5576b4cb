//! Microscopic kinematics of coalescence and binary fragmentation.
//!
//! A particle state is `y = (m, p, e)`: mass, momentum and internal energy.
//! Both reactions conserve mass, momentum and total (kinetic + internal)
//! energy; the kinetic energy lost in a merger is absorbed into the internal
//! energy of the product, and the kinetic energy gained in a break-up is paid
//! from the internal energy of the mother particle.

use crate::vec3::Vec3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("invalid particle state: {0}")]
    Invalid(String),
    #[error("split mass m = {m} is not below mother mass m' = {m_prime}")]
    SplitMass { m_prime: f64, m: f64 },
    #[error("daughter {daughter:?} is not admissible for mother {mother:?}")]
    Inadmissible {
        mother: ParticleState,
        daughter: ParticleState,
    },
}

/// A point `(m, p, e)` of the state space `]0,inf[ x R^3 x ]0,inf[`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub m: f64,
    pub p: Vec3,
    pub e: f64,
}

impl ParticleState {
    /// Validated constructor.
    pub fn new(m: f64, p: impl Into<Vec3>, e: f64) -> Result<Self, StateError> {
        let y = ParticleState { m, p: p.into(), e };
        if y.is_valid() {
            Ok(y)
        } else {
            Err(StateError::Invalid(format!(
                "require m > 0, e > 0 and finite momentum, got {y:?}"
            )))
        }
    }

    /// Unchecked constructor for call sites that have already established the invariants.
    pub const fn new_unchecked(m: f64, p: Vec3, e: f64) -> Self {
        ParticleState { m, p, e }
    }

    pub fn is_valid(&self) -> bool {
        self.m > 0.0
            && self.e > 0.0
            && self.m.is_finite()
            && self.e.is_finite()
            && self.p.is_finite()
            && kinetic_energy(self).is_finite()
    }

    pub fn velocity(&self) -> Vec3 {
        self.p * (1.0 / self.m)
    }

    /// Kinetic plus internal energy.
    pub fn total_energy(&self) -> f64 {
        kinetic_energy(self) + self.e
    }

    /// Max-norm `max(m, |p|, e)`, used wherever a size of `y` is needed.
    pub fn norm(&self) -> f64 {
        self.m.max(self.p.norm()).max(self.e)
    }
}

/// Position together with a particle state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec3,
    pub state: ParticleState,
}

/// The open box `Y_R = ]0,R[ x B_R x ]0,R[`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    r: f64,
}

impl StateBox {
    pub fn new(r: f64) -> Result<Self, StateError> {
        if r > 0.0 && r.is_finite() {
            Ok(StateBox { r })
        } else {
            Err(StateError::Invalid(format!("box radius must be positive, got {r}")))
        }
    }

    pub fn radius(&self) -> f64 {
        self.r
    }

    pub fn contains(&self, y: &ParticleState) -> bool {
        y.m > 0.0 && y.m < self.r && y.p.norm() < self.r && y.e > 0.0 && y.e < self.r
    }

    /// Lebesgue measure `R * (4 pi / 3) R^3 * R`.
    pub fn volume(&self) -> f64 {
        self.r * (4.0 * PI / 3.0) * self.r.powi(3) * self.r
    }

    /// Region containing every admissible daughter of a mother in this box:
    /// `]0,R[ x B_{sqrt(3) R} x ]0,R[`.
    pub fn daughter_envelope(&self) -> AdmissibleEnvelope {
        AdmissibleEnvelope {
            m_max: self.r,
            p_radius: 3.0_f64.sqrt() * self.r,
            e_max: self.r,
        }
    }
}

/// Bounding box `]0,m_max[ x B_{p_radius} x ]0,e_max[` for admissible daughters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleEnvelope {
    pub m_max: f64,
    pub p_radius: f64,
    pub e_max: f64,
}

impl AdmissibleEnvelope {
    pub fn volume(&self) -> f64 {
        self.m_max * (4.0 * PI / 3.0) * self.p_radius.powi(3) * self.e_max
    }

    pub fn contains(&self, y: &ParticleState) -> bool {
        y.m > 0.0 && y.m < self.m_max && y.p.norm() <= self.p_radius && y.e > 0.0 && y.e < self.e_max
    }

    pub fn is_within(&self, other: &AdmissibleEnvelope) -> bool {
        self.m_max <= other.m_max && self.p_radius <= other.p_radius && self.e_max <= other.e_max
    }
}

/// `|p|^2 / 2m`.
#[inline]
pub fn kinetic_energy(y: &ParticleState) -> f64 {
    y.p.norm_sq() / (2.0 * y.m)
}

/// Kinetic energy lost when `(m, p)` and `(m_star, p_star)` merge:
/// `|m* p - m p*|^2 / (2 m m* (m + m*))`.
///
/// The expression is evaluated so that swapping the two particles gives a
/// bit-identical result.
#[inline]
pub fn energy_loss(m: f64, m_star: f64, p: Vec3, p_star: Vec3) -> f64 {
    let rel = p * m_star - p_star * m;
    rel.norm_sq() / (2.0 * (m * m_star) * (m + m_star))
}

/// Kinetic energy gained when `(m', p')` breaks into `(m, p)` and its
/// complement: `|m' p - m p'|^2 / (2 m m' (m' - m))`.
#[inline]
pub fn energy_gain(m_prime: f64, m: f64, p_prime: Vec3, p: Vec3) -> Result<f64, StateError> {
    if !(m > 0.0 && m < m_prime) {
        return Err(StateError::SplitMass { m_prime, m });
    }
    Ok(energy_gain_unchecked(m_prime, m, p_prime, p))
}

#[inline]
fn energy_gain_unchecked(m_prime: f64, m: f64, p_prime: Vec3, p: Vec3) -> f64 {
    let rel = p * m_prime - p_prime * m;
    rel.norm_sq() / (2.0 * (m * m_prime) * (m_prime - m))
}

/// Coalesced state `y + y*`.
pub fn coalesce(y: &ParticleState, y_star: &ParticleState) -> ParticleState {
    ParticleState {
        m: y.m + y_star.m,
        p: y.p + y_star.p,
        e: y.e + y_star.e + energy_loss(y.m, y_star.m, y.p, y_star.p),
    }
}

/// Internal energy left for the complement when `y` is split off `y_prime`,
/// or `None` when the mass condition fails.
#[inline]
fn complement_energy_budget(y: &ParticleState, y_prime: &ParticleState) -> Option<f64> {
    if !(y.m < y_prime.m) {
        return None;
    }
    Some(y_prime.e - energy_gain_unchecked(y_prime.m, y.m, y_prime.p, y.p))
}

/// `y < y'`: `m < m'` and `e < e' - E+(m', m, p', p)`.
///
/// Degenerate boundaries (`m = m'`, exhausted energy budget) give `false`.
pub fn admissible(y: &ParticleState, y_prime: &ParticleState) -> bool {
    match complement_energy_budget(y, y_prime) {
        Some(budget) => y.e < budget,
        None => false,
    }
}

/// Complement `y' - y` of an admissible daughter.
pub fn split(y_prime: &ParticleState, y: &ParticleState) -> Result<ParticleState, StateError> {
    match complement_energy_budget(y, y_prime) {
        Some(budget) if y.e < budget => Ok(ParticleState {
            m: y_prime.m - y.m,
            p: y_prime.p - y.p,
            // `budget - e > 0` exactly whenever `e < budget` in IEEE arithmetic.
            e: budget - y.e,
        }),
        _ => Err(StateError::Inadmissible {
            mother: *y_prime,
            daughter: *y,
        }),
    }
}

/// Box containing `{y : y < y'}`.
pub fn admissible_bounds(y_prime: &ParticleState) -> AdmissibleEnvelope {
    AdmissibleEnvelope {
        m_max: y_prime.m,
        p_radius: (2.0 * y_prime.m * y_prime.e + y_prime.p.norm_sq()).sqrt(),
        e_max: y_prime.e,
    }
}

/// Free transport along the characteristic `x + t p / m`.
pub fn advect(pt: &PhasePoint, dt: f64) -> PhasePoint {
    PhasePoint {
        x: pt.x + pt.state.velocity() * dt,
        state: pt.state,
    }
}

/// Coordinates `(m', m, p', p, e', e)` packed as a 10-vector.
pub type SplitCoordinates = [f64; 10];

/// The change of variables `(m', m, p', p, e', e) -> (m', m*, p', p*, e', e*)`
/// relating mother/daughter coordinates to mother/complement coordinates.
///
/// Defined for `m < m'`; it maps the admissible set onto itself.
pub fn split_change_of_variables(c: &SplitCoordinates) -> SplitCoordinates {
    let (m_prime, m) = (c[0], c[1]);
    let p_prime = Vec3([c[2], c[3], c[4]]);
    let p = Vec3([c[5], c[6], c[7]]);
    let (e_prime, e) = (c[8], c[9]);
    let gain = energy_gain_unchecked(m_prime, m, p_prime, p);
    let p_star = p_prime - p;
    [
        m_prime,
        m_prime - m,
        p_prime.0[0],
        p_prime.0[1],
        p_prime.0[2],
        p_star.0[0],
        p_star.0[1],
        p_star.0[2],
        e_prime,
        e_prime - e - gain,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(m: f64, p: [f64; 3], e: f64) -> ParticleState {
        ParticleState::new(m, p, e).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn kinetic_energy_examples() {
        assert_eq!(kinetic_energy(&st(1.0, [0.0; 3], 1.0)), 0.0);
        assert_eq!(kinetic_energy(&st(2.0, [2.0, 0.0, 0.0], 1.0)), 1.0);
        assert_eq!(kinetic_energy(&st(1.0, [1.0, 1.0, 1.0], 5.0)), 1.5);
    }

    #[test]
    fn rejects_invalid_states() {
        assert!(ParticleState::new(0.0, [0.0; 3], 1.0).is_err());
        assert!(ParticleState::new(1.0, [0.0; 3], 0.0).is_err());
        assert!(ParticleState::new(1.0, [f64::NAN, 0.0, 0.0], 1.0).is_err());
        assert!(ParticleState::new(-1.0, [0.0; 3], 1.0).is_err());
    }

    #[test]
    fn energy_loss_examples() {
        let z = Vec3::ZERO;
        assert_eq!(energy_loss(1.0, 1.0, z, z), 0.0);
        assert_eq!(energy_loss(1.0, 1.0, Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)), 1.0);
        assert_eq!(energy_loss(2.0, 1.0, Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn energy_gain_examples() {
        let z = Vec3::ZERO;
        let x1 = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(energy_gain(2.0, 1.0, z, x1).unwrap(), 1.0);
        assert_eq!(energy_gain(2.0, 1.0, Vec3::new(2.0, 0.0, 0.0), x1).unwrap(), 0.0);
        let v = energy_gain(2.0, 1.9, z, x1).unwrap();
        assert!(close(v, 4.0 / 0.76, 1e-14), "{v}");
        assert!(matches!(energy_gain(2.0, 2.0, z, x1), Err(StateError::SplitMass { .. })));
        assert!(energy_gain(2.0, 3.0, z, x1).is_err());
    }

    #[test]
    fn coalesce_examples() {
        let a = coalesce(&st(1.0, [1.0, 0.0, 0.0], 1.0), &st(1.0, [-1.0, 0.0, 0.0], 1.0));
        assert_eq!(a, st(2.0, [0.0; 3], 3.0));
        let b = coalesce(&st(1.0, [0.0; 3], 1.0), &st(1.0, [0.0; 3], 1.0));
        assert_eq!(b, st(2.0, [0.0; 3], 2.0));
        let c = coalesce(&st(2.0, [2.0, 0.0, 0.0], 1.0), &st(1.0, [1.0, 0.0, 0.0], 1.0));
        assert_eq!(c, st(3.0, [3.0, 0.0, 0.0], 2.0));
    }

    #[test]
    fn admissible_examples() {
        let mother = st(2.0, [0.0; 3], 3.0);
        assert!(admissible(&st(1.0, [1.0, 0.0, 0.0], 1.0), &mother));
        assert!(!admissible(&st(1.0, [1.0, 0.0, 0.0], 2.5), &mother));
        assert!(!admissible(&st(3.0, [0.0; 3], 0.1), &mother));
        // boundary cases
        assert!(!admissible(&st(2.0, [0.0; 3], 0.1), &mother));
        assert!(!admissible(&st(1.0, [1.0, 0.0, 0.0], 2.0), &mother));
    }

    #[test]
    fn split_examples() {
        let y = split(&st(2.0, [0.0; 3], 3.0), &st(1.0, [1.0, 0.0, 0.0], 1.0)).unwrap();
        assert_eq!(y, st(1.0, [-1.0, 0.0, 0.0], 1.0));
        let y = split(&st(2.0, [0.0; 3], 2.0), &st(1.0, [0.0; 3], 1.0)).unwrap();
        assert_eq!(y, st(1.0, [0.0; 3], 1.0));
        let y = split(&st(3.0, [3.0, 0.0, 0.0], 2.0), &st(2.0, [2.0, 0.0, 0.0], 1.0)).unwrap();
        assert_eq!(y, st(1.0, [1.0, 0.0, 0.0], 1.0));
        let err = split(&st(2.0, [0.0; 3], 3.0), &st(1.0, [1.0, 0.0, 0.0], 2.5));
        assert!(matches!(err, Err(StateError::Inadmissible { .. })));
    }

    #[test]
    fn admissible_bounds_examples() {
        let b = admissible_bounds(&st(2.0, [0.0; 3], 3.0));
        assert_eq!(b.m_max, 2.0);
        assert!(close(b.p_radius, 12.0_f64.sqrt(), 1e-15));
        assert_eq!(b.e_max, 3.0);
        let b = admissible_bounds(&st(1.0, [0.0; 3], 1.0));
        assert!(close(b.p_radius, 2.0_f64.sqrt(), 1e-15));
    }

    #[test]
    fn mothers_in_box_have_daughters_in_wider_box() {
        let r = 1.5;
        let bx = StateBox::new(r).unwrap();
        let env = bx.daughter_envelope();
        for &(m, pn, e) in &[(1.49, 1.49, 1.49), (0.1, 1.4, 0.2), (1.4, 0.0, 0.01)] {
            let y = st(m, [pn / 3f64.sqrt(); 3], e);
            assert!(bx.contains(&y));
            assert!(admissible_bounds(&y).is_within(&env));
        }
        assert!(env.m_max < 2.0 * r && env.p_radius < 2.0 * r && env.e_max < 2.0 * r);
    }

    #[test]
    fn advect_examples() {
        let pt = PhasePoint { x: Vec3::ZERO, state: st(2.0, [2.0, 0.0, 0.0], 1.0) };
        assert_eq!(advect(&pt, 1.0).x, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(advect(&pt, 0.0), pt);
        let ab = advect(&advect(&pt, 0.25), 0.5);
        let direct = advect(&pt, 0.75);
        assert_eq!(ab.state, pt.state);
        assert!((ab.x - direct.x).norm() < 1e-15);
    }

    #[test]
    fn max_norm() {
        assert_eq!(st(1.0, [0.0, 3.0, 4.0], 2.0).norm(), 5.0);
        assert_eq!(st(7.0, [0.0, 3.0, 4.0], 2.0).norm(), 7.0);
    }


    use proptest::prelude::*;

    fn state() -> impl Strategy<Value = ParticleState> {
        (-4.0..4.0f64, prop::array::uniform3(-10.0..10.0f64), -4.0..4.0f64)
            .prop_map(|(lm, p, le)| ParticleState::new(lm.exp(), p, le.exp()).unwrap())
    }

    proptest! {
        #[test]
        fn coalescence_conserves(y in state(), ys in state()) {
            let c = coalesce(&y, &ys);
            let e_tot = y.total_energy() + ys.total_energy();
            prop_assert!(close(c.m, y.m + ys.m, 1e-14));
            prop_assert!((c.p - (y.p + ys.p)).max_abs() <= 1e-14 * (1.0 + y.p.max_abs() + ys.p.max_abs()));
            prop_assert!(close(c.total_energy(), e_tot, 1e-12));
            prop_assert!(c.e >= y.e + ys.e);
            prop_assert!(energy_loss(y.m, ys.m, y.p, ys.p) >= 0.0);
        }

        #[test]
        fn coalescence_is_symmetric(y in state(), ys in state()) {
            let (a, b) = (coalesce(&y, &ys), coalesce(&ys, &y));
            prop_assert_eq!(a.m, b.m);
            prop_assert!(close(a.e, b.e, 1e-12));
        }

        #[test]
        fn split_inverts_coalescence(y in state(), ys in state()) {
            let c = coalesce(&y, &ys);
            prop_assert!(admissible(&y, &c));
            let back = split(&c, &y).unwrap();
            let scale = y.total_energy() + ys.total_energy();
            prop_assert!(close(back.m, ys.m, 1e-12));
            prop_assert!((back.e - ys.e).abs() <= 1e-12 * scale);
        }

        #[test]
        fn change_of_variables_is_an_involution(y in state(), ys in state()) {
            let c = coalesce(&y, &ys);
            let x = [c.m, y.m, c.p.0[0], c.p.0[1], c.p.0[2], y.p.0[0], y.p.0[1], y.p.0[2], c.e, y.e];
            let twice = split_change_of_variables(&split_change_of_variables(&x));
            let scale = 1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (a, b) in twice.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-10 * scale, "{} vs {}", a, b);
            }
        }

        #[test]
        fn admissible_daughters_lie_in_the_envelope(y in state(), ys in state()) {
            let c = coalesce(&y, &ys);
            prop_assert!(admissible_bounds(&c).contains(&y));
        }
    }
}
