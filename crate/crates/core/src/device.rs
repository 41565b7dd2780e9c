//! Stochastic memristor neuron device model.
//!
//! Filament formation is a Poisson process whose characteristic time falls
//! exponentially with the applied voltage, `tau(V) = tau0 * exp(-V / v0)`.
//! A constant pulse of width `t` therefore switches the device with
//! probability `1 - exp(-t / tau(V))`.
//!
//! Units: all quantities are SI. `tau0` is in **seconds**; the published fit
//! gives no unit and seconds reproduce the nanosecond-to-millisecond pulse
//! trade-off of the fitted device.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fitted memristor parameters. `r_off` is derived from `r_on * on_off_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceParams {
    /// Characteristic-time prefactor, seconds.
    pub tau0: f64,
    /// Voltage scale of the switching-time exponent, volts.
    pub v0: f64,
    /// ON-state resistance, ohms.
    pub r_on: f64,
    pub on_off_ratio: f64,
    /// Write pulse width, seconds.
    pub t_write: f64,
    /// Reset pulse amplitude. Reset is modeled as ideal, so this only feeds
    /// reporting.
    pub v_reset: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            tau0: 2.85e5,
            v0: 0.22,
            r_on: 500e3,
            on_off_ratio: 1e3,
            t_write: 10e-9,
            v_reset: -2.0,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let checks = [
            (pos(self.tau0), "tau0 must be > 0"),
            (pos(self.v0), "v0 must be > 0"),
            (pos(self.r_on), "r_on must be > 0"),
            (self.on_off_ratio.is_finite() && self.on_off_ratio > 1.0, "on_off_ratio must be > 1"),
            (pos(self.t_write), "t_write must be > 0"),
            (self.v_reset.is_finite(), "v_reset must be finite"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidParam(msg.into()));
            }
        }
        Ok(())
    }

    pub fn r_off(&self) -> f64 {
        self.r_on * self.on_off_ratio
    }

    pub fn g_on(&self) -> f64 {
        1.0 / self.r_on
    }

    pub fn g_off(&self) -> f64 {
        1.0 / self.r_off()
    }

    pub fn with_t_write(mut self, t_write: f64) -> Self {
        self.t_write = t_write;
        self
    }
}

/// Binary neuron state: `true` once a full filament has formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NeuronState {
    pub conducting: bool,
}

impl NeuronState {
    pub fn reset(&mut self) {
        self.conducting = false;
    }
}

/// Characteristic switching time at voltage `v`.
pub fn char_time(v: f64, p: &DeviceParams) -> f64 {
    p.tau0 * (-v / p.v0).exp()
}

/// Cumulative probability that a pulse of amplitude `v` and width `t` switches the device.
pub fn switch_probability(v: f64, t: f64, p: &DeviceParams) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    // t / tau computed in log space so huge voltages saturate cleanly instead
    // of going through inf/inf.
    let hazard = (t / p.tau0).ln() + v / p.v0;
    -(-hazard.exp()).exp_m1()
}

/// Pulse amplitude that switches with probability `prob` for pulse width `t`.
pub fn voltage_for_probability(prob: f64, t: f64, p: &DeviceParams) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Domain(format!(
            "switching probability {prob} outside (0, 1)"
        )));
    }
    if !(t > 0.0) {
        return Err(Error::Domain(format!("pulse width {t} must be > 0")));
    }
    let hazard = -(-prob).ln_1p();
    Ok(p.v0 * (hazard.ln() + (p.tau0 / t).ln()))
}

/// One write pulse of width `p.t_write`: a single Bernoulli draw of the cumulative switching probability.
pub fn sample_switch<R: Rng + ?Sized>(v: f64, p: &DeviceParams, rng: &mut R) -> bool {
    let prob = switch_probability(v, p.t_write, p);
    rng.random::<f64>() < prob
}

/// Resistor-divider read circuit followed by an inverter with trip point `v_trip`.
///
/// The neuron memristor sits in the lower leg; the divider output
/// `v_read * r_ref / (r_ref + r)` is high when the device is ON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadCircuit {
    pub v_read: f64,
    pub r_ref: f64,
    pub v_trip: f64,
    /// Relative standard deviation of the ON and OFF resistances.
    pub sigma_r: f64,
}

impl ReadCircuit {
    /// Reference at the geometric mean of `r_on` and `r_off`, trip point at
    /// the divider voltage produced by that same resistance.
    pub fn for_device(p: &DeviceParams, v_read: f64, sigma_r: f64) -> Self {
        let r_ref = (p.r_on * p.r_off()).sqrt();
        let v_trip = v_read * r_ref / (r_ref + r_ref);
        Self {
            v_read,
            r_ref,
            v_trip,
            sigma_r,
        }
    }

    pub fn validate(&self, p: &DeviceParams) -> Result<()> {
        if !(p.r_on < self.r_ref && self.r_ref < p.r_off()) {
            return Err(Error::InvalidParam("read circuit needs r_on < r_ref < r_off".into()));
        }
        if !(0.0 < self.v_trip && self.v_trip < self.v_read) {
            return Err(Error::InvalidParam("read circuit needs 0 < v_trip < v_read".into()));
        }
        if !(self.sigma_r >= 0.0) {
            return Err(Error::InvalidParam("sigma_r must be >= 0".into()));
        }
        Ok(())
    }

    pub fn divider_voltage(&self, r: f64) -> f64 {
        self.v_read * self.r_ref / (self.r_ref + r)
    }

    /// Largest device resistance still reported as a spike.
    pub fn threshold_resistance(&self) -> f64 {
        self.r_ref * (self.v_read / self.v_trip - 1.0)
    }

    /// Probability that a read reports the wrong state, under the same
    /// truncated-Gaussian resistance model `read_detect` samples from.
    pub fn misread_probability(&self, conducting: bool, p: &DeviceParams) -> f64 {
        if self.sigma_r == 0.0 {
            let r = if conducting { p.r_on } else { p.r_off() };
            let detected = self.divider_voltage(r) >= self.v_trip;
            return if detected == conducting { 0.0 } else { 1.0 };
        }
        let mean = if conducting { p.r_on } else { p.r_off() };
        let sd = self.sigma_r * mean;
        let lower = TRUNCATION * mean;
        let r_star = self.threshold_resistance();
        // P(r > x) for the Gaussian restricted to r >= lower.
        let upper_tail = |x: f64| 0.5 * libm::erfc((x - mean) / (sd * std::f64::consts::SQRT_2));
        let mass = upper_tail(lower);
        let above = if r_star <= lower { 1.0 } else { upper_tail(r_star) / mass };
        if conducting {
            above
        } else {
            1.0 - above
        }
    }
}

/// Resistance samples below this fraction of the mean are redrawn.
const TRUNCATION: f64 = 0.1;

fn truncated_gaussian<R: Rng + ?Sized>(mean: f64, rel_sd: f64, rng: &mut R) -> f64 {
    if rel_sd == 0.0 {
        return mean;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let r = mean * (1.0 + rel_sd * z);
        if r >= TRUNCATION * mean {
            return r;
        }
    }
}

/// Read phase: sample the actual device resistance and report whether the inverter sees a spike.
pub fn read_detect<R: Rng + ?Sized>(
    state: NeuronState,
    rc: &ReadCircuit,
    p: &DeviceParams,
    rng: &mut R,
) -> bool {
    let mean = if state.conducting { p.r_on } else { p.r_off() };
    let r = truncated_gaussian(mean, rc.sigma_r, rng);
    rc.divider_voltage(r) >= rc.v_trip
}

pub(crate) fn positive_gaussian_factor<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let f = 1.0 + sigma * z;
        if f > 0.0 {
            return f;
        }
    }
}

/// Device-to-device variation: `tau0` and `v0` scaled by independent
/// `N(1, sigma)` factors, redrawn until positive.
pub fn perturb_device<R: Rng + ?Sized>(
    p: &DeviceParams,
    sigma_tau0: f64,
    sigma_v0: f64,
    rng: &mut R,
) -> DeviceParams {
    let mut out = *p;
    out.tau0 *= positive_gaussian_factor(sigma_tau0, rng);
    out.v0 *= positive_gaussian_factor(sigma_v0, rng);
    out
}
