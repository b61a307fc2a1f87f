//! Forward model: elutriation kernels, bag masses and mass balance.
//!
//! A particle of size `s` that has travelled `d` beyond the channel entrance
//! leaves the bed at rate `k` per metre travelled, so the fraction of the
//! feed of size `s` that has exited by time `t` is `1 - e^{-k(d_s(t) - l)}`
//! once `d_s(t) > l`. Bag `i` collects what exits during `[t_i, t_{i+1}]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feed::FeedDistribution;
use crate::physics::{channel_reynolds, FlowRamp, Settling, SizeMotion};
use crate::quadrature::{integrate_pieces, QuadratureOptions};

/// Default upper limit for the elutriation-time search, s.
pub const DEFAULT_HORIZON: f64 = 1e9;

const KINK_SAMPLES: usize = 400;

/// Kernel value from the distances travelled at the two bag boundaries.
///
/// Exact telescoping: `K(a, b) + K(b, c) = K(a, c)` whenever `a <= b <= c`.
pub fn kernel_from_distances(rate: f64, length: f64, d_prev: f64, d_next: f64) -> f64 {
    if d_next <= length {
        0.0
    } else if d_prev <= length {
        -(-rate * (d_next - length)).exp_m1()
    } else {
        (-rate * (d_prev - length)).exp() * -(-rate * (d_next - d_prev)).exp_m1()
    }
}

/// Physics, flow ramp and elutriation rate constant of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElutriationModel {
    settling: Settling,
    ramp: FlowRamp,
    rate_constant: f64,
}

impl ElutriationModel {
    pub fn new(settling: Settling, ramp: FlowRamp, rate_constant: f64) -> Result<Self> {
        if !(rate_constant.is_finite() && rate_constant > 0.0) {
            return Err(Error::invalid("rate_constant", format!("must be finite and > 0, got {rate_constant}")));
        }
        Ok(Self { settling, ramp, rate_constant })
    }

    pub fn settling(&self) -> &Settling {
        &self.settling
    }

    pub fn ramp(&self) -> &FlowRamp {
        &self.ramp
    }

    pub fn rate_constant(&self) -> f64 {
        self.rate_constant
    }

    pub fn length(&self) -> f64 {
        self.settling.geometry().length
    }

    pub fn spacing(&self) -> f64 {
        self.settling.geometry().spacing
    }

    pub fn channel_reynolds(&self, t: f64) -> f64 {
        channel_reynolds(&self.ramp, t, self.settling.fluid(), self.settling.geometry())
    }

    /// Motion of size `s`, or `None` for sizes that never move (outside `(0, z)`).
    fn motion(&self, s: f64) -> Option<SizeMotion> {
        self.settling.motion(s, &self.ramp).ok()
    }

    fn distance(&self, s: f64, t: f64) -> f64 {
        self.motion(s).map_or(0.0, |m| m.distance(t))
    }

    /// Time at which size `s` first reaches the channel exit.
    pub fn onset_time(&self, s: f64) -> f64 {
        self.motion(s).map_or(f64::INFINITY, |m| m.inverse_distance(self.length()))
    }

    /// `L(s)` for the interval `[t_prev, t_next]`.
    pub fn kernel(&self, t_prev: f64, t_next: f64, s: f64) -> Result<f64> {
        if !(t_prev >= 0.0 && t_next > t_prev && t_next.is_finite()) {
            return Err(Error::InvalidSchedule(format!("need 0 <= t_prev < t_next, got [{t_prev}, {t_next}]")));
        }
        let m = self.settling.motion(s, &self.ramp)?;
        Ok(kernel_from_distances(self.rate_constant, self.length(), m.distance(t_prev), m.distance(t_next)))
    }

    fn kernel_unchecked(&self, t_prev: f64, t_next: f64, s: f64) -> f64 {
        match self.motion(s) {
            Some(m) => kernel_from_distances(self.rate_constant, self.length(), m.distance(t_prev), m.distance(t_next)),
            None => 0.0,
        }
    }

    /// Sizes in `[lo, hi]` whose onset time equals `t`; the kernels are not
    /// smooth there.
    pub fn onset_sizes(&self, t: f64, lo: f64, hi: f64) -> Vec<f64> {
        self.level_sizes(self.length(), t, lo, hi)
    }

    /// Sizes in `[lo, hi]` that have travelled exactly `x` at time `t`.
    fn level_sizes(&self, x: f64, t: f64, lo: f64, hi: f64) -> Vec<f64> {
        let lo = lo.max(f64::MIN_POSITIVE);
        let hi = hi.min(self.spacing() * (1.0 - 1e-12));
        if !(hi > lo) || !t.is_finite() {
            return Vec::new();
        }
        let g = |s: f64| self.motion(s).map_or(f64::INFINITY, |m| m.inverse_distance(x)) - t;
        let ratio = (hi / lo).powf(1.0 / (KINK_SAMPLES - 1) as f64);
        let mut out = Vec::new();
        let mut a = lo;
        let mut ga = g(a);
        for i in 1..KINK_SAMPLES {
            let b = if i + 1 == KINK_SAMPLES { hi } else { lo * ratio.powi(i as i32) };
            let gb = g(b);
            if (ga <= 0.0) != (gb <= 0.0) {
                let (mut x0, mut x1, mut g0) = (a, b, ga);
                while x1 - x0 > 1e-15 * x1 {
                    let mid = 0.5 * (x0 + x1);
                    if mid <= x0 || mid >= x1 {
                        break;
                    }
                    let gm = g(mid);
                    if (g0 <= 0.0) == (gm <= 0.0) {
                        x0 = mid;
                        g0 = gm;
                    } else {
                        x1 = mid;
                    }
                }
                out.push(0.5 * (x0 + x1));
            }
            a = b;
            ga = gb;
        }
        out
    }

    /// Kinks of the integrands at time `t`, plus the edges of the steep
    /// region where `e^{-k d}` decays, so adaptive quadrature cannot miss
    /// narrow features.
    fn features(&self, t: f64, lo: f64, hi: f64) -> Vec<f64> {
        let decay = 1.0 / self.rate_constant;
        let length = self.length();
        [0.0, decay, length, length + decay, length + 10.0 * decay]
            .iter()
            .flat_map(|&x| self.level_sizes(x, t, lo, hi))
            .collect()
    }

    fn size_points(&self, feed: &FeedDistribution, times: &[f64]) -> Vec<f64> {
        let mut pts = feed.breakpoints();
        let lo = pts.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
        let hi = pts.iter().copied().fold(0.0, f64::max).min(self.spacing());
        for &t in times {
            pts.extend(self.features(t, lo, hi));
        }
        pts.push(lo);
        pts.push(hi);
        pts.retain(|p| *p >= lo && *p <= hi);
        pts
    }

    fn options(&self, feed: &FeedDistribution) -> QuadratureOptions {
        QuadratureOptions::default()
            .with_abs_tol(1e-12 * feed.total_mass())
            .with_rel_tol(1e-12)
    }

    /// `m_b(t)`: mass still in the bed.
    pub fn mass_in_bed(&self, feed: &FeedDistribution, t: f64) -> f64 {
        let rate = self.rate_constant;
        let pts = self.size_points(feed, &[t]);
        integrate_pieces(|s| feed.density(s) * (-rate * self.distance(s, t)).exp(), &pts, self.options(feed)).value
    }

    /// `m_e(t)`: mass that has left through the channel exit.
    pub fn mass_elutriated(&self, feed: &FeedDistribution, t: f64) -> f64 {
        let (rate, length) = (self.rate_constant, self.length());
        let pts = self.size_points(feed, &[t]);
        integrate_pieces(
            |s| feed.density(s) * kernel_from_distances(rate, length, 0.0, self.distance(s, t)),
            &pts,
            self.options(feed),
        )
        .value
    }

    /// Mass inside the channels, `m_total - m_b - m_e`, integrated directly.
    pub fn mass_in_channels(&self, feed: &FeedDistribution, t: f64) -> f64 {
        let (rate, length) = (self.rate_constant, self.length());
        let pts = self.size_points(feed, &[t]);
        let fraction = |d: f64| {
            if d <= length {
                -(-rate * d).exp_m1()
            } else {
                (-rate * (d - length)).exp() * -(-rate * length).exp_m1()
            }
        };
        integrate_pieces(|s| feed.density(s) * fraction(self.distance(s, t)), &pts, self.options(feed)).value
    }

    /// Time at which a fraction `f` of the feed mass has elutriated.
    pub fn elutriation_time(&self, feed: &FeedDistribution, fraction: f64) -> Result<f64> {
        self.elutriation_time_within(feed, fraction, DEFAULT_HORIZON)
    }

    pub fn elutriation_time_within(&self, feed: &FeedDistribution, fraction: f64, horizon: f64) -> Result<f64> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid("fraction", format!("must lie in (0, 1), got {fraction}")));
        }
        let target = fraction * feed.total_mass();
        let residual = |t: f64| self.mass_elutriated(feed, t) - target;
        let (mut a, mut fa) = (0.0, -target);
        let mut b = 1.0;
        let mut fb = residual(b);
        while fb < 0.0 {
            a = b;
            fa = fb;
            b *= 2.0;
            if b > horizon {
                return Err(Error::NoBracket { fraction, horizon });
            }
            fb = residual(b);
        }
        Ok(illinois(residual, a, fa, b, fb, 1e-13))
    }

    /// `(T_low, T_high)` for the given elutriated fractions.
    pub fn runtime_bounds(&self, feed: &FeedDistribution, low: f64, high: f64) -> Result<(f64, f64)> {
        Ok((self.elutriation_time(feed, low)?, self.elutriation_time(feed, high)?))
    }
}

/// Root of an increasing function on a sign-changing bracket, Illinois
/// variant of regula falsi with a bisection fallback.
fn illinois<F: Fn(f64) -> f64>(f: F, mut a: f64, mut fa: f64, mut b: f64, mut fb: f64, rel_tol: f64) -> f64 {
    let mut side = 0i8;
    for _ in 0..300 {
        if b - a <= rel_tol * b.abs() {
            break;
        }
        let mut x = (a * fb - b * fa) / (fb - fa);
        if !(x > a && x < b) || side.abs() > 2 {
            x = 0.5 * (a + b);
            side = 0;
        }
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            a = x;
            fa = fx;
            if side < 0 {
                fb *= 0.5;
            }
            side = if side < 0 { side - 1 } else { -1 };
        } else {
            b = x;
            fb = fx;
            if side > 0 {
                fa *= 0.5;
            }
            side = if side > 0 { side + 1 } else { 1 };
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Uniform boundaries between the times at which the given fractions
    /// of the feed have elutriated.
    FractionSpan { low: f64, high: f64 },
    /// Uniform boundaries on `[0, end_s]`.
    UniformFromZero { end_s: f64 },
    Explicit,
}

/// Bag boundary times `t_0 < t_1 < ... < t_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagSchedule {
    times: Vec<f64>,
    mode: ScheduleMode,
}

impl BagSchedule {
    pub fn explicit(times: Vec<f64>) -> Result<Self> {
        Self::with_mode(times, ScheduleMode::Explicit)
    }

    fn with_mode(times: Vec<f64>, mode: ScheduleMode) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two boundary times".into()));
        }
        if !times.iter().all(|t| t.is_finite()) || times[0] < 0.0 {
            return Err(Error::InvalidSchedule("times must be finite and start at t >= 0".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule("times must be strictly increasing".into()));
        }
        Ok(Self { times, mode })
    }

    fn uniform(start: f64, end: f64, bags: usize, mode: ScheduleMode) -> Result<Self> {
        if bags == 0 {
            return Err(Error::InvalidSchedule("need at least one bag".into()));
        }
        let step = (end - start) / bags as f64;
        let mut times: Vec<f64> = (0..=bags).map(|i| start + step * i as f64).collect();
        times[bags] = end;
        Self::with_mode(times, mode)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn bags(&self) -> usize {
        self.times.len() - 1
    }

    pub fn interval(&self, bag: usize) -> (f64, f64) {
        (self.times[bag], self.times[bag + 1])
    }
}

/// Schedule of `bags` uniformly spaced bags. `Explicit` is rejected here;
/// use [`BagSchedule::explicit`].
pub fn build_schedule(
    model: &ElutriationModel,
    feed: &FeedDistribution,
    bags: usize,
    mode: ScheduleMode,
) -> Result<BagSchedule> {
    match mode {
        ScheduleMode::FractionSpan { low, high } => {
            if !(low < high) {
                return Err(Error::InvalidSchedule(format!("fraction span [{low}, {high}] is empty")));
            }
            let (start, end) = model.runtime_bounds(feed, low, high)?;
            BagSchedule::uniform(start, end, bags, mode)
        }
        ScheduleMode::UniformFromZero { end_s } => {
            if !(end_s > 0.0 && end_s.is_finite()) {
                return Err(Error::InvalidSchedule(format!("end time must be positive, got {end_s}")));
            }
            BagSchedule::uniform(0.0, end_s, bags, mode)
        }
        ScheduleMode::Explicit => Err(Error::InvalidSchedule("explicit schedules need their times".into())),
    }
}

/// The kernels `L_i` of one run's bag schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    model: ElutriationModel,
    schedule: BagSchedule,
}

impl KernelSet {
    pub fn new(model: ElutriationModel, schedule: BagSchedule) -> Self {
        Self { model, schedule }
    }

    pub fn model(&self) -> &ElutriationModel {
        &self.model
    }

    pub fn schedule(&self) -> &BagSchedule {
        &self.schedule
    }

    pub fn len(&self) -> usize {
        self.schedule.bags()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `L_i(s)`; zero outside `(0, z)`.
    pub fn eval(&self, bag: usize, s: f64) -> f64 {
        let (a, b) = self.schedule.interval(bag);
        self.model.kernel_unchecked(a, b, s)
    }

    /// Sizes in `[lo, hi]` where `L_i` has kinks.
    pub fn kinks(&self, bag: usize, lo: f64, hi: f64) -> Vec<f64> {
        let (a, b) = self.schedule.interval(bag);
        let mut k = self.model.features(a, lo, hi);
        k.extend(self.model.features(b, lo, hi));
        k
    }

    /// `integral of w(s) L_i(s)` over `[lo, hi]`, split at `points` (where `w`
    /// is not smooth) and at the kernel's kinks.
    pub fn integrate_weighted<W: Fn(f64) -> f64>(
        &self,
        bag: usize,
        weight: W,
        lo: f64,
        hi: f64,
        points: &[f64],
        opts: QuadratureOptions,
    ) -> f64 {
        let hi = hi.min(self.model.spacing());
        if !(hi > lo) {
            return 0.0;
        }
        let mut pts = self.kinks(bag, lo, hi);
        pts.extend_from_slice(points);
        pts.push(lo);
        pts.push(hi);
        pts.retain(|p| *p >= lo && *p <= hi);
        let (a, b) = self.schedule.interval(bag);
        integrate_pieces(|s| weight(s) * self.model.kernel_unchecked(a, b, s), &pts, opts).value
    }

    /// Mass collected in bag `i` from `feed`.
    pub fn bag_mass(&self, feed: &FeedDistribution, bag: usize) -> f64 {
        let pts = feed.breakpoints();
        let lo = pts.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
        let hi = pts.iter().copied().fold(0.0, f64::max);
        let opts = self.model.options(feed);
        self.integrate_weighted(bag, |s| feed.density(s), lo, hi, &pts, opts).max(0.0)
    }

    pub fn bag_masses(&self, feed: &FeedDistribution) -> BagMasses {
        BagMasses {
            masses: (0..self.len()).map(|i| self.bag_mass(feed, i)).collect(),
            provenance: Provenance::Model,
        }
    }

    /// Mean cosine similarity of adjacent kernels over `[lo, hi]`; smaller
    /// values mean better separated kernels.
    pub fn adjacent_overlap(&self, lo: f64, hi: f64) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        let opts = QuadratureOptions::default().with_abs_tol(1e-18).with_rel_tol(1e-8);
        let mut kinks: Vec<f64> = (0..self.len()).flat_map(|i| self.kinks(i, lo, hi)).collect();
        kinks.push(lo);
        kinks.push(hi);
        let norms: Vec<f64> = (0..self.len())
            .map(|i| integrate_pieces(|s| self.eval(i, s).powi(2), &kinks, opts).value.sqrt())
            .collect();
        let mut total = 0.0;
        for i in 0..self.len() - 1 {
            let dot = integrate_pieces(|s| self.eval(i, s) * self.eval(i + 1, s), &kinks, opts).value;
            let denom = norms[i] * norms[i + 1];
            total += if denom > 0.0 { dot / denom } else { 0.0 };
        }
        total / (self.len() - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Model,
    Noisy { sigma: f64, seed: u64, replicate: u64 },
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagMasses {
    pub masses: Vec<f64>,
    pub provenance: Provenance,
}

impl BagMasses {
    pub fn measured(masses: Vec<f64>) -> Result<Self> {
        if let Some(bad) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(Error::invalid("bag mass", format!("must be finite and >= 0, found {bad}")));
        }
        Ok(Self { masses, provenance: Provenance::Measured })
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the generator for one bag of one replicate.
pub fn noise_seed(seed: u64, replicate: u64, bag: u64) -> u64 {
    mix(mix(mix(seed) ^ replicate) ^ bag)
}

/// `max(m_i + N(0, sigma m_i), 0)` per bag. Draws depend only on
/// `(seed, replicate, bag)`, so replicates can run in any order and share
/// their normal deviates across noise levels.
pub fn add_noise(masses: &BagMasses, sigma: f64, seed: u64, replicate: u64) -> Result<BagMasses> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(masses.clone());
    }
    let noisy = masses
        .masses
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, replicate, i as u64));
            let z: f64 = StandardNormal.sample(&mut rng);
            (m + sigma * m * z).max(0.0)
        })
        .collect();
    Ok(BagMasses { masses: noisy, provenance: Provenance::Noisy { sigma, seed, replicate } })
}
