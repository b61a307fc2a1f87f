//! Single-particle hydrodynamics in an inclined laminar channel.
//!
//! A sphere of radius `s` resting on the lower wall feels the parabolic
//! streamline velocity at height `s`, `C1(s) v(t)`, and slides back down at
//! its tangential terminal settling velocity `C2(s)` (Zigrang–Sylvester
//! correlation with gravity reduced to `g sin(theta)`). The superficial
//! velocity ramps linearly, so the net velocity is affine in time and the
//! distance travelled has a closed form.
//!
//! All quantities are SI; angles are radians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STANDARD_GRAVITY: f64 = 9.81;

/// Channel Reynolds number below which the flow is taken as laminar.
pub const LAMINAR_REYNOLDS_LIMIT: f64 = 2000.0;

fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(Error::invalid(name, format!("must be finite and > 0, got {value}")))
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(Error::invalid(name, format!("must be finite and >= 0, got {value}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidProperties {
    /// Dynamic viscosity, Pa s.
    pub viscosity: f64,
    /// Density, kg/m^3.
    pub density: f64,
}

impl FluidProperties {
    pub const WATER: FluidProperties = FluidProperties { viscosity: 0.001, density: 1000.0 };
    /// Aqueous lithium heteropolytungstate solution.
    pub const LST: FluidProperties = FluidProperties { viscosity: 0.0035, density: 2200.0 };

    pub fn new(viscosity: f64, density: f64) -> Result<Self> {
        Ok(Self {
            viscosity: positive("viscosity", viscosity)?,
            density: positive("fluid density", density)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelGeometry {
    /// Gap between the channel plates, m.
    pub spacing: f64,
    /// Inclination from the horizontal, rad.
    pub angle: f64,
    /// Channel length, m.
    pub length: f64,
}

impl ChannelGeometry {
    pub fn new(spacing: f64, angle: f64, length: f64) -> Result<Self> {
        if !(angle > 0.0 && angle < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid("angle", format!("must lie in (0, pi/2) rad, got {angle}")));
        }
        Ok(Self {
            spacing: positive("spacing", spacing)?,
            angle,
            length: positive("length", length)?,
        })
    }

    pub fn from_degrees(spacing: f64, angle_deg: f64, length: f64) -> Result<Self> {
        Self::new(spacing, angle_deg.to_radians(), length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleProperties {
    /// Particle density, kg/m^3.
    pub density: f64,
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
}

impl ParticleProperties {
    pub fn new(density: f64, gravity: f64) -> Result<Self> {
        Ok(Self {
            density: positive("particle density", density)?,
            gravity: positive("gravity", gravity)?,
        })
    }

    pub fn with_standard_gravity(density: f64) -> Result<Self> {
        Self::new(density, STANDARD_GRAVITY)
    }
}

/// Superficial velocity `v(t) = v0` for `t < t0`, then `v0 + lambda (t - t0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRamp {
    pub v0: f64,
    pub t0: f64,
    /// Velocity scaling factor, m/s^2.
    pub lambda: f64,
}

impl FlowRamp {
    pub fn new(v0: f64, t0: f64, lambda: f64) -> Result<Self> {
        Ok(Self {
            v0: non_negative("v0", v0)?,
            t0: non_negative("t0", t0)?,
            lambda: positive("lambda", lambda)?,
        })
    }

    pub fn velocity(&self, t: f64) -> f64 {
        self.v0 + self.lambda * (t - self.t0).max(0.0)
    }
}

/// Channel Reynolds number `2 rho_F v(t) z / mu` (hydraulic diameter `2z`).
pub fn channel_reynolds(ramp: &FlowRamp, t: f64, fluid: &FluidProperties, geom: &ChannelGeometry) -> f64 {
    2.0 * fluid.density * ramp.velocity(t) * geom.spacing / fluid.viscosity
}

pub fn is_laminar(reynolds: f64) -> bool {
    reynolds < LAMINAR_REYNOLDS_LIMIT
}

/// A particle species paired with a fluid and a channel.
///
/// Construction rejects neutrally or negatively buoyant pairings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settling {
    fluid: FluidProperties,
    particle: ParticleProperties,
    geometry: ChannelGeometry,
}

impl Settling {
    pub fn new(fluid: FluidProperties, particle: ParticleProperties, geometry: ChannelGeometry) -> Result<Self> {
        if particle.density <= fluid.density {
            return Err(Error::NeutralBuoyancy { particle: particle.density, fluid: fluid.density });
        }
        Ok(Self { fluid, particle, geometry })
    }

    pub fn fluid(&self) -> &FluidProperties {
        &self.fluid
    }

    pub fn particle(&self) -> &ParticleProperties {
        &self.particle
    }

    pub fn geometry(&self) -> &ChannelGeometry {
        &self.geometry
    }

    fn check_radius(&self, s: f64) -> Result<()> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid("radius", format!("must be finite and > 0, got {s}")));
        }
        if s >= self.geometry.spacing {
            return Err(Error::SizeOutOfChannel { radius: s, spacing: self.geometry.spacing });
        }
        Ok(())
    }

    fn reynolds_unchecked(&self, s: f64) -> f64 {
        let FluidProperties { viscosity, density } = self.fluid;
        let buoyant = (self.particle.density - density) * self.particle.gravity * self.geometry.angle.sin() * density;
        let x = buoyant.sqrt() * 1.83 * (2.0 * s).powf(1.5) / viscosity;
        let root = (14.51 + x).sqrt() - 3.81;
        root * root
    }

    /// Tangential terminal settling Reynolds number `Re_tT(s)`.
    pub fn tangential_reynolds(&self, s: f64) -> Result<f64> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid("radius", format!("must be finite and > 0, got {s}")));
        }
        Ok(self.reynolds_unchecked(s))
    }

    /// Tangential terminal settling velocity `v_tT = Re_tT mu / (2 rho_F s)`.
    pub fn settling_velocity(&self, s: f64) -> Result<f64> {
        Ok(self.tangential_reynolds(s)? * self.fluid.viscosity / (2.0 * self.fluid.density * s))
    }

    /// `C1(s) = (6s/z)(1 - s/z)`: streamline velocity at height `s` per unit mean velocity.
    pub fn profile_factor(&self, s: f64) -> Result<f64> {
        self.check_radius(s)?;
        let r = s / self.geometry.spacing;
        Ok(6.0 * r * (1.0 - r))
    }

    /// `C2(s)`, identical to [`Settling::settling_velocity`].
    pub fn drag_term(&self, s: f64) -> Result<f64> {
        self.settling_velocity(s)
    }

    /// Precompute the size-dependent coefficients for repeated time queries.
    pub fn motion(&self, s: f64, ramp: &FlowRamp) -> Result<SizeMotion> {
        let c1 = self.profile_factor(s)?;
        let c2 = self.drag_term(s)?;
        Ok(SizeMotion::new(c1, c2, *ramp))
    }

    /// `v_net(s, t) = C1(s) v(t) - C2(s)`; may be negative.
    pub fn net_velocity(&self, s: f64, t: f64, ramp: &FlowRamp) -> Result<f64> {
        Ok(self.motion(s, ramp)?.net_velocity(t))
    }

    /// Transport speed `c(s, t) = max(v_net, 0)`.
    pub fn transport_speed(&self, s: f64, t: f64, ramp: &FlowRamp) -> Result<f64> {
        Ok(self.motion(s, ramp)?.speed(t))
    }

    /// First time at which size `s` moves up the channel.
    pub fn critical_time(&self, s: f64, ramp: &FlowRamp) -> Result<f64> {
        Ok(self.motion(s, ramp)?.critical_time())
    }

    /// `d_s(t)`, distance travelled by size `s` over `[0, t]`.
    pub fn distance_traveled(&self, s: f64, t: f64, ramp: &FlowRamp) -> Result<f64> {
        Ok(self.motion(s, ramp)?.distance(t))
    }

    /// Smallest `t >= t*(s)` with `d_s(t) = x`.
    pub fn inverse_distance(&self, s: f64, x: f64, ramp: &FlowRamp) -> Result<f64> {
        Ok(self.motion(s, ramp)?.inverse_distance(x))
    }
}

/// Closed-form motion of one particle size under a linear ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeMotion {
    c1: f64,
    c2: f64,
    ramp: FlowRamp,
    /// Initial net velocity `D(s) = C1 v0 - C2`.
    initial_net: f64,
    critical_time: f64,
}

impl SizeMotion {
    pub fn new(c1: f64, c2: f64, ramp: FlowRamp) -> Self {
        let initial_net = c1 * ramp.v0 - c2;
        let critical_time = if initial_net > 0.0 {
            0.0
        } else {
            ramp.t0 - initial_net / (ramp.lambda * c1)
        };
        Self { c1, c2, ramp, initial_net, critical_time }
    }

    pub fn profile_factor(&self) -> f64 {
        self.c1
    }

    pub fn drag_term(&self) -> f64 {
        self.c2
    }

    pub fn initial_net_velocity(&self) -> f64 {
        self.initial_net
    }

    pub fn critical_time(&self) -> f64 {
        self.critical_time
    }

    pub fn net_velocity(&self, t: f64) -> f64 {
        self.c1 * self.ramp.velocity(t) - self.c2
    }

    pub fn speed(&self, t: f64) -> f64 {
        if t > self.critical_time {
            self.net_velocity(t).max(0.0)
        } else {
            0.0
        }
    }

    pub fn distance(&self, t: f64) -> f64 {
        let half_accel = 0.5 * self.ramp.lambda * self.c1;
        if self.initial_net > 0.0 {
            let after = (t - self.ramp.t0).max(0.0);
            self.initial_net * t.max(0.0) + half_accel * after * after
        } else {
            let after = (t - self.critical_time).max(0.0);
            half_accel * after * after
        }
    }

    pub fn inverse_distance(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return self.critical_time;
        }
        let accel = self.ramp.lambda * self.c1;
        if self.initial_net > 0.0 {
            let d = self.initial_net;
            let before_ramp = d * self.ramp.t0;
            if x <= before_ramp {
                return x / d;
            }
            let rest = x - before_ramp;
            // Root of (accel/2) tau^2 + d tau - rest = 0 without cancellation.
            self.ramp.t0 + 2.0 * rest / (d + (d * d + 2.0 * accel * rest).sqrt())
        } else {
            self.critical_time + (2.0 * x / accel).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn water() -> Settling {
        Settling::new(
            FluidProperties::WATER,
            ParticleProperties::with_standard_gravity(2650.0).unwrap(),
            ChannelGeometry::from_degrees(1.8e-3, 70.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn lst() -> Settling {
        Settling::new(
            FluidProperties::LST,
            ParticleProperties::with_standard_gravity(2650.0).unwrap(),
            ChannelGeometry::from_degrees(1.8e-3, 70.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn ramp() -> FlowRamp {
        FlowRamp::new(0.0, 0.0, 1e-5).unwrap()
    }

    #[test]
    fn channel_reynolds_values() {
        let geom = ChannelGeometry::from_degrees(1.8e-3, 70.0, 1.0).unwrap();
        let still = FlowRamp::new(0.0, 0.0, 1e-5).unwrap();
        assert_eq!(channel_reynolds(&still, 0.0, &FluidProperties::WATER, &geom), 0.0);
        let steady = FlowRamp::new(0.1, 10.0, 1e-5).unwrap();
        let re = channel_reynolds(&steady, 0.0, &FluidProperties::WATER, &geom);
        assert!((re - 360.0).abs() < 1e-9);
        assert!(is_laminar(re));
        assert!(!is_laminar(2000.0));
    }

    #[test]
    fn reynolds_small_size_limit() {
        let limit = (14.51f64.sqrt() - 3.81).powi(2);
        let re = water().tangential_reynolds(1e-18).unwrap();
        assert!((re - limit).abs() < 1e-12);
        assert!((limit - 6.4e-7).abs() < 1e-8);
    }

    #[test]
    fn reynolds_hand_evaluation() {
        // s = 100 um, water, rho_p = 2650, 70 degrees.
        let buoyant: f64 = 1650.0 * 9.81 * 70f64.to_radians().sin() * 1000.0;
        let x = buoyant.sqrt() * 1.83 * (200e-6f64).powf(1.5) / 1e-3;
        let expected = ((14.51 + x).sqrt() - 3.81).powi(2);
        let re = water().tangential_reynolds(100e-6).unwrap();
        assert!((re - expected).abs() < 1e-12 * expected);
        assert!((re - 4.3280).abs() < 1e-3, "{re}");
    }

    #[test]
    fn reynolds_monotone_spot_checks() {
        let w = water();
        for s in [10e-6, 50e-6, 200e-6] {
            assert!(w.tangential_reynolds(2.0 * s).unwrap() > w.tangential_reynolds(s).unwrap());
        }
    }

    #[test]
    fn velocity_matches_reynolds_definition() {
        let w = water();
        for s in [5e-6, 60e-6, 400e-6] {
            let v = w.settling_velocity(s).unwrap();
            let re = 2.0 * 1000.0 * v * s / 1e-3;
            assert!((re / w.tangential_reynolds(s).unwrap() - 1.0).abs() < 1e-12);
            assert!(v > 0.0);
            assert!(lst().settling_velocity(s).unwrap() < v);
        }
    }

    #[test]
    fn profile_factor_shape() {
        let w = water();
        assert!((w.profile_factor(0.9e-3).unwrap() - 1.5).abs() < 1e-12);
        assert!(w.profile_factor(1e-12).unwrap() < 1e-8);
        assert!(w.profile_factor(1.8e-3 * (1.0 - 1e-12)).unwrap() < 1e-8);
        assert!(matches!(w.profile_factor(1.8e-3), Err(Error::SizeOutOfChannel { .. })));
        assert_eq!(w.drag_term(70e-6).unwrap(), w.settling_velocity(70e-6).unwrap());
    }

    #[test]
    fn neutral_buoyancy_rejected() {
        let err = Settling::new(
            FluidProperties::new(1e-3, 2650.0).unwrap(),
            ParticleProperties::with_standard_gravity(2650.0).unwrap(),
            ChannelGeometry::from_degrees(1.8e-3, 70.0, 1.0).unwrap(),
        );
        assert!(matches!(err, Err(Error::NeutralBuoyancy { .. })));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(ChannelGeometry::from_degrees(1.8e-3, 90.0, 1.0).is_err());
        assert!(ChannelGeometry::new(0.0, 1.0, 1.0).is_err());
        assert!(FlowRamp::new(-1.0, 0.0, 1e-5).is_err());
        assert!(FlowRamp::new(0.0, 0.0, 0.0).is_err());
        assert!(FluidProperties::new(f64::NAN, 1000.0).is_err());
        assert!(water().tangential_reynolds(0.0).is_err());
    }

    #[test]
    fn no_flow_means_no_motion() {
        let w = water();
        let s = 80e-6;
        let v = w.net_velocity(s, 0.0, &ramp()).unwrap();
        assert!((v + w.drag_term(s).unwrap()).abs() < 1e-15);
        assert_eq!(w.transport_speed(s, 0.0, &ramp()).unwrap(), 0.0);
    }

    #[test]
    fn critical_time_cases() {
        let w = water();
        let s = 80e-6;
        let (c1, c2) = (w.profile_factor(s).unwrap(), w.drag_term(s).unwrap());
        let tstar = w.critical_time(s, &ramp()).unwrap();
        assert!((tstar - c2 / (1e-5 * c1)).abs() < 1e-9 * tstar);
        assert!(w.net_velocity(s, tstar, &ramp()).unwrap().abs() < 1e-15);
        let fast = FlowRamp::new(1.0, 100.0, 1e-5).unwrap();
        assert_eq!(w.critical_time(s, &fast).unwrap(), 0.0);
        // Slope of v_net after onset is lambda * C1.
        let slope = (w.net_velocity(s, tstar + 200.0, &ramp()).unwrap()
            - w.net_velocity(s, tstar + 100.0, &ramp()).unwrap())
            / 100.0;
        assert!((slope / (1e-5 * c1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn critical_time_diverges_for_vanishing_size() {
        let w = water();
        let r = ramp();
        let t1 = w.critical_time(1e-8, &r).unwrap();
        let t2 = w.critical_time(1e-9, &r).unwrap();
        let t3 = w.critical_time(1e-10, &r).unwrap();
        assert!(t1 < t2 && t2 < t3);
        assert!(t3 > 1e5 * w.critical_time(50e-6, &r).unwrap());
    }

    #[test]
    fn distance_quadratic_branch() {
        let w = water();
        let s = 120e-6;
        let m = w.motion(s, &ramp()).unwrap();
        let tstar = m.critical_time();
        assert_eq!(m.distance(tstar * 0.5), 0.0);
        assert_eq!(m.distance(tstar), 0.0);
        let t = tstar + 3000.0;
        let expected = 0.5 * 1e-5 * m.profile_factor() * 3000.0 * 3000.0;
        assert!((m.distance(t) - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn inverse_distance_cases() {
        let w = water();
        let s = 120e-6;
        let m = w.motion(s, &ramp()).unwrap();
        assert_eq!(m.inverse_distance(0.0), m.critical_time());
        let x = 7.5;
        let expected = m.critical_time() + (2.0 * x / (1e-5 * m.profile_factor())).sqrt();
        assert!((m.inverse_distance(x) - expected).abs() < 1e-12 * expected);

        let moving = FlowRamp::new(0.2, 50.0, 1e-4).unwrap();
        let m = w.motion(s, &moving).unwrap();
        assert!(m.initial_net_velocity() > 0.0);
        for t in [10.0, 50.0, 51.0, 5000.0] {
            let back = m.inverse_distance(m.distance(t));
            assert!((back - t).abs() < 1e-10 * t, "{t} -> {back}");
        }
    }
}
