//! Keyed random streams, Monte-Carlo quadrature and admissible-region samplers.
//!
//! Every random draw in the crate comes from a [`StreamKey`]: a seed plus lane
//! identifiers `(phase, step, cell, counter)`. The key is hashed into a
//! ChaCha8 seed, so a stream depends only on its key and never on how work is
//! scheduled across threads.

use crate::kernels::FragKernel;
use crate::state_space::{admissible, admissible_bounds, ParticleState};
use crate::vec3::Vec3;
use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("Monte-Carlo estimate needs at least 2 samples, got {0}")]
    TooFewSamples(u64),
    #[error("degenerate sampling region: {accepted} of {attempts} proposals accepted (floor {floor:e})")]
    Degenerate {
        attempts: u64,
        accepted: u64,
        floor: f64,
    },
    #[error("fragmentation kernel vanishes on the admissible set of {0:?}")]
    NothingToSample(ParticleState),
    #[error("kernel exceeded its declared bound: B({y_prime:?}, {y:?}) = {value} > {bound}")]
    SupBoundViolated {
        y_prime: ParticleState,
        y: ParticleState,
        value: f64,
        bound: f64,
    },
}

/// Lane tags separating the random streams of different algorithm phases.
pub mod phase {
    pub const INIT: u32 = 1;
    pub const COAGULATION: u32 = 2;
    pub const FRAGMENTATION: u32 = 3;
    pub const QUADRATURE: u32 = 4;
    pub const B1_CACHE: u32 = 5;
    pub const AUDIT: u32 = 6;
    pub const VERIFY: u32 = 7;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub phase: u32,
    pub step: u64,
    pub cell: u64,
    pub counter: u64,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey { seed, phase: 0, step: 0, cell: 0, counter: 0 }
    }

    pub fn with_phase(self, phase: u32) -> Self {
        StreamKey { phase, ..self }
    }

    pub fn with_step(self, step: u64) -> Self {
        StreamKey { step, ..self }
    }

    pub fn with_cell(self, cell: u64) -> Self {
        StreamKey { cell, ..self }
    }

    pub fn with_counter(self, counter: u64) -> Self {
        StreamKey { counter, ..self }
    }

    /// The generator for this key.
    pub fn rng(&self) -> ChaCha8Rng {
        self.substream(u64::MAX)
    }

    /// An independent generator for block `index` below this key.
    pub fn substream(&self, index: u64) -> ChaCha8Rng {
        let mut h = self.seed;
        for word in [self.phase as u64, self.step, self.cell, self.counter, index] {
            h = splitmix64(&mut h) ^ word;
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut h).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// Monte-Carlo estimate with its sample standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
}

impl McEstimate {
    pub fn relative_error(&self) -> f64 {
        if self.value == 0.0 {
            0.0
        } else {
            self.std_error / self.value.abs()
        }
    }
}

/// Streaming mean/variance (Welford), mergeable in a fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct McAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl McAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &McAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Estimate of `scale * E[X]`.
    pub fn estimate(&self, scale: f64) -> McEstimate {
        let var = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        McEstimate {
            value: scale * self.mean,
            std_error: scale.abs() * (var / self.n.max(1) as f64).sqrt(),
            samples: self.n,
        }
    }
}

/// Samples per independent block in parallel quadrature.
pub const BLOCK: u64 = 8192;

/// Runs `n` evaluations of `draw` split into fixed blocks, each with its own
/// substream of `key`; blocks are merged in index order so the result is
/// independent of the thread count.
pub fn mc_blocks<F>(n: u64, key: StreamKey, draw: F) -> McAccumulator
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let blocks = n.div_ceil(BLOCK);
    let partial: Vec<McAccumulator> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = key.substream(b);
            let len = BLOCK.min(n - b * BLOCK);
            let mut acc = McAccumulator::default();
            for _ in 0..len {
                acc.push(draw(&mut rng));
            }
            acc
        })
        .collect();
    partial.iter().fold(McAccumulator::default(), |mut acc, p| {
        acc.merge(p);
        acc
    })
}

/// Uniform draw from the ball of the given radius.
#[inline]
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vec3 {
    let r = radius * rng.random::<f64>().cbrt();
    unit_vector(rng) * r
}

#[inline]
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z = 2.0 * rng.random::<f64>() - 1.0;
    let phi = 2.0 * PI * rng.random::<f64>();
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

/// Open-interval uniform `(0, 1)`.
#[inline]
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

#[inline]
pub fn uniform_in_state_box<R: Rng + ?Sized>(rng: &mut R, r: f64) -> ParticleState {
    let m = r * open01(rng);
    let p = uniform_in_ball(rng, r);
    let e = r * open01(rng);
    ParticleState::new_unchecked(m, p, e)
}

fn require_samples(n: u64) -> Result<(), SampleError> {
    if n < 2 {
        Err(SampleError::TooFewSamples(n))
    } else {
        Ok(())
    }
}

/// Unbiased estimate of `int_{Y_R} g(y) dy`.
pub fn integrate_box(
    g: &(dyn Fn(&ParticleState) -> f64 + Sync),
    r: f64,
    n: u64,
    key: StreamKey,
) -> Result<McEstimate, SampleError> {
    require_samples(n)?;
    let volume = r * (4.0 * PI / 3.0) * r.powi(3) * r;
    let acc = mc_blocks(n, key, |rng| g(&uniform_in_state_box(rng, r)));
    Ok(acc.estimate(volume))
}

/// Unbiased estimate of `int_{Y_R x Y_R} g(y, y*) dy dy*`.
pub fn integrate_box_pair(
    g: &(dyn Fn(&ParticleState, &ParticleState) -> f64 + Sync),
    r: f64,
    n: u64,
    key: StreamKey,
) -> Result<McEstimate, SampleError> {
    require_samples(n)?;
    let volume = (r * (4.0 * PI / 3.0) * r.powi(3) * r).powi(2);
    let acc = mc_blocks(n, key, |rng| {
        let y = uniform_in_state_box(rng, r);
        let ys = uniform_in_state_box(rng, r);
        g(&y, &ys)
    });
    Ok(acc.estimate(volume))
}

/// Uniform proposal from the admissible envelope of `y'`.
#[inline]
pub fn envelope_proposal<R: Rng + ?Sized>(rng: &mut R, y_prime: &ParticleState) -> ParticleState {
    let env = admissible_bounds(y_prime);
    let m = env.m_max * open01(rng);
    let p = uniform_in_ball(rng, env.p_radius);
    let e = env.e_max * open01(rng);
    ParticleState::new_unchecked(m, p, e)
}

/// Unbiased estimate of `int g(y) 1{y < y'} dy`, sampling the envelope
/// uniformly and discarding inadmissible proposals.
pub fn integrate_admissible(
    g: &(dyn Fn(&ParticleState) -> f64 + Sync),
    y_prime: &ParticleState,
    n: u64,
    key: StreamKey,
) -> Result<McEstimate, SampleError> {
    require_samples(n)?;
    let volume = admissible_bounds(y_prime).volume();
    let acc = mc_blocks(n, key, |rng| {
        let y = envelope_proposal(rng, y_prime);
        if admissible(&y, y_prime) {
            g(&y)
        } else {
            0.0
        }
    });
    Ok(acc.estimate(volume))
}

/// Failure thresholds for rejection samplers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerLimits {
    pub acceptance_floor: f64,
    /// Proposals allowed for one draw before the region is declared degenerate.
    pub attempt_cap: u64,
}

impl SamplerLimits {
    pub fn with_floor(acceptance_floor: f64) -> Self {
        SamplerLimits {
            acceptance_floor,
            attempt_cap: (10.0 / acceptance_floor).ceil().min(1e12) as u64,
        }
    }
}

impl Default for SamplerLimits {
    fn default() -> Self {
        SamplerLimits::with_floor(1e-6)
    }
}

/// Running acceptance statistics of a rejection sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub attempts: u64,
    pub accepted: u64,
}

impl AcceptanceStats {
    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }

    pub fn merge(&mut self, other: &AcceptanceStats) {
        self.attempts += other.attempts;
        self.accepted += other.accepted;
    }
}

/// Uniform draw from `{y : y < y'}` by envelope rejection.
pub fn sample_admissible_with<R: Rng + ?Sized>(
    y_prime: &ParticleState,
    rng: &mut R,
    limits: &SamplerLimits,
    stats: &mut AcceptanceStats,
) -> Result<ParticleState, SampleError> {
    for _ in 0..limits.attempt_cap {
        stats.attempts += 1;
        let y = envelope_proposal(rng, y_prime);
        if admissible(&y, y_prime) {
            stats.accepted += 1;
            return Ok(y);
        }
    }
    Err(SampleError::Degenerate {
        attempts: stats.attempts,
        accepted: stats.accepted,
        floor: limits.acceptance_floor,
    })
}

/// Exact uniform draw from `{y : y < y'}` without envelope rejection.
///
/// The mass fraction `u = m/m'` has density proportional to `(u(1-u))^{3/2}`;
/// given `m`, the pair `(q, e)` with `q = p - u p'` is uniform under the
/// paraboloid `e + a |q|^2 < e'`, `a = m' / (2 m (m' - m))`.
pub fn sample_admissible_direct<R: Rng + ?Sized>(y_prime: &ParticleState, rng: &mut R) -> ParticleState {
    let beta = Beta::new(2.5, 2.5).expect("valid beta parameters");
    loop {
        let u: f64 = beta.sample(rng);
        let m = u * y_prime.m;
        let a = y_prime.m / (2.0 * m * (y_prime.m - m));
        let rq = (y_prime.e / a).sqrt();
        let q = loop {
            let q = uniform_in_ball(rng, rq);
            if rng.random::<f64>() * rq * rq < rq * rq - q.norm_sq() {
                break q;
            }
        };
        let e = (y_prime.e - a * q.norm_sq()) * open01(rng);
        let y = ParticleState::new_unchecked(m, y_prime.p * u + q, e);
        if admissible(&y, y_prime) {
            return y;
        }
    }
}

/// Keyed single draw from `{y : y < y'}` with its acceptance statistics.
pub fn sample_admissible(
    y_prime: &ParticleState,
    key: StreamKey,
) -> Result<(ParticleState, AcceptanceStats), SampleError> {
    let mut stats = AcceptanceStats::default();
    let mut rng = key.rng();
    let y = sample_admissible_with(y_prime, &mut rng, &SamplerLimits::default(), &mut stats)?;
    Ok((y, stats))
}

/// Draw `y` with density `B(y', .) / B1(y')` on the admissible set: exact
/// uniform admissible proposals thinned with probability `B / sup B`.
pub fn sample_fragment_with<R: Rng + ?Sized>(
    y_prime: &ParticleState,
    kernel: &dyn FragKernel,
    rng: &mut R,
    limits: &SamplerLimits,
    stats: &mut AcceptanceStats,
) -> Result<ParticleState, SampleError> {
    let bound = kernel.local_sup(y_prime);
    if !(bound > 0.0) || kernel.b1_closed_form(y_prime) == Some(0.0) {
        return Err(SampleError::NothingToSample(*y_prime));
    }
    let mut thinning = AcceptanceStats::default();
    while thinning.attempts < limits.attempt_cap {
        let y = sample_admissible_direct(y_prime, rng);
        thinning.attempts += 1;
        stats.attempts += 1;
        let b = kernel.eval(y_prime, &y);
        if b > bound {
            return Err(SampleError::SupBoundViolated {
                y_prime: *y_prime,
                y,
                value: b,
                bound,
            });
        }
        if b > 0.0 && rng.random::<f64>() * bound < b {
            stats.accepted += 1;
            return Ok(y);
        }
    }
    Err(SampleError::Degenerate {
        attempts: thinning.attempts,
        accepted: 0,
        floor: limits.acceptance_floor,
    })
}

/// Keyed single draw from `B(y', .) / B1(y')`.
pub fn sample_density_on_admissible(
    y_prime: &ParticleState,
    kernel: &dyn FragKernel,
    key: StreamKey,
) -> Result<ParticleState, SampleError> {
    let mut stats = AcceptanceStats::default();
    sample_fragment_with(y_prime, kernel, &mut key.rng(), &SamplerLimits::default(), &mut stats)
}
