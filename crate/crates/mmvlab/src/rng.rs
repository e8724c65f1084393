//! Counter-based random number generation.
//!
//! Every variate is a pure function of `(seed, stream, path, counter)`, so a
//! value can be regenerated at any time without touching generator state.
//! This is what makes path-parallel simulation deterministic: no matter how
//! paths are partitioned across workers, path `p` always sees the same draws.
//!
//! The word function chains three splitmix64 finalizers, folding one key part
//! in per round. Statistical quality is validated downstream by the ensemble
//! sanity gates (per-step increment moments, stochastic-exponential
//! martingale checks, Poisson count checks).

/// Logical sub-streams. Keeping Gaussian and jump draws on separate streams
/// means attaching a jump model never perturbs the Brownian increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Brownian,
    JumpCount,
    JumpTime,
    JumpSize,
    Probe,
    Nested,
}

impl Stream {
    #[inline]
    fn tag(self) -> u64 {
        match self {
            Stream::Brownian => 0x1,
            Stream::JumpCount => 0x2,
            Stream::JumpTime => 0x3,
            Stream::JumpSize => 0x4,
            Stream::Probe => 0x5,
            Stream::Nested => 0x6,
        }
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The raw 64-bit word at a counter position.
#[inline]
pub fn word(seed: u64, stream: Stream, path: u64, counter: u64) -> u64 {
    let k1 = mix(seed ^ GOLDEN.wrapping_mul(stream.tag().wrapping_add(1)));
    let k2 = mix(k1 ^ GOLDEN.wrapping_mul(path.wrapping_add(0x765d_f3b2)));
    mix(k2 ^ GOLDEN.wrapping_mul(counter.wrapping_add(0x1d8e_4e27)))
}

/// Uniform on (0, 1]: never returns 0, safe under a logarithm.
#[inline]
pub fn uniform_oc(seed: u64, stream: Stream, path: u64, counter: u64) -> f64 {
    (((word(seed, stream, path, counter) >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform on [0, 1).
#[inline]
pub fn uniform_co(seed: u64, stream: Stream, path: u64, counter: u64) -> f64 {
    ((word(seed, stream, path, counter) >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0)
}

#[inline]
fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let mag = (-2.0 * u1.ln()).sqrt();
    let ang = 2.0 * std::f64::consts::PI * u2;
    (mag * ang.cos(), mag * ang.sin())
}

/// The `index`-th standard normal of a (seed, stream, path) lane.
///
/// Normals come in Box-Muller pairs addressed by `index / 2`, so random access
/// by index is exact: no draw ever depends on how many were generated before.
#[inline]
pub fn standard_normal(seed: u64, stream: Stream, path: u64, index: u64) -> f64 {
    let pair = index >> 1;
    let u1 = uniform_oc(seed, stream, path, 2 * pair);
    let u2 = uniform_co(seed, stream, path, 2 * pair + 1);
    let (z0, z1) = box_muller(u1, u2);
    if index & 1 == 0 {
        z0
    } else {
        z1
    }
}

/// Poisson variate by CDF inversion of a single uniform. Suitable for the
/// moderate means used here (validation caps lambda * T).
pub fn poisson(mean: f64, u: f64) -> u64 {
    debug_assert!((0.0..700.0).contains(&mean));
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        if k > 100_000 {
            break; // numerically saturated tail
        }
    }
    k
}

/// A sequential cursor over one (seed, stream, path) lane, for samplers whose
/// draw count is data-dependent (e.g. rejection sampling). Still deterministic
/// per path because the cursor starts at zero for every regeneration.
pub struct LaneCursor {
    seed: u64,
    stream: Stream,
    path: u64,
    next: u64,
}

impl LaneCursor {
    pub fn new(seed: u64, stream: Stream, path: u64) -> Self {
        LaneCursor {
            seed,
            stream,
            path,
            next: 0,
        }
    }

    #[inline]
    pub fn uniform_oc(&mut self) -> f64 {
        let u = uniform_oc(self.seed, self.stream, self.path, self.next);
        self.next += 1;
        u
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        // consume a full pair per call so the cursor stays word-aligned
        let u1 = uniform_oc(self.seed, self.stream, self.path, self.next);
        let u2 = uniform_co(self.seed, self.stream, self.path, self.next + 1);
        self.next += 2;
        box_muller(u1, u2).0
    }
}
