//! Physical parameter set, derived coefficients, and the order-of-magnitude
//! calculators (characteristic times, uncertainty products, noise-amplitude
//! estimate).
//!
//! Two unit conventions are supported by the same struct:
//! - natural units m = hbar = omega = 1 with L = sqrt(2), chi_d = 1, p = 2,
//!   where D = theta/2 and beta = 4 Gamma; every oscillator experiment runs
//!   in this mode,
//! - SI inputs for the dimensionful calculators (de Broglie length, kinetic
//!   windows, uncertainty products).

use crate::error::{QhError, Result};
use serde::{Deserialize, Serialize};

/// Reduced Planck constant, J s.
pub const HBAR_SI: f64 = 1.0546e-34;
/// Boltzmann constant, J/K.
pub const KB_SI: f64 = 1.381e-23;
/// Speed of light, m/s.
pub const C_SI: f64 = 2.998e8;

/// Default accuracy fraction for the drift-resolution time window.
pub const KINETICS_EPSILON: f64 = 0.1;

/// Model parameters. `theta` is the dimensionless temperature kT/(hbar
/// omega); `gamma` the dimensionless dissipation strength. The last three
/// fields are derived and are populated by [`PhysicalParams::derive`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub mass: f64,
    pub hbar: f64,
    pub omega: f64,
    pub theta: f64,
    pub gamma: f64,
    pub physical_length: f64,
    pub chi_d: f64,
    pub exponent: f64,
    pub speed_of_light: f64,
    #[serde(default)]
    pub lambda_c: f64,
    #[serde(default)]
    pub diffusion: f64,
    #[serde(default)]
    pub beta: f64,
}

impl Default for PhysicalParams {
    /// Natural units, zero noise: the deterministic oscillator.
    fn default() -> Self {
        PhysicalParams {
            mass: 1.0,
            hbar: 1.0,
            omega: 1.0,
            theta: 0.0,
            gamma: 0.0,
            physical_length: std::f64::consts::SQRT_2,
            chi_d: 1.0,
            exponent: 2.0,
            speed_of_light: 1.0,
            lambda_c: 0.0,
            diffusion: 0.0,
            beta: 0.0,
        }
    }
}

impl PhysicalParams {
    /// Natural-unit parameter set: m = hbar = omega = 1, L = sqrt(2),
    /// chi_d = 1, p = 2, so that D = theta/2 and beta = 4 gamma.
    pub fn natural(theta: f64, gamma: f64) -> Result<Self> {
        PhysicalParams { theta, gamma, ..Default::default() }.derive()
    }

    /// Dimensionful parameter set in SI units; `temperature` in kelvin.
    pub fn si(
        mass: f64,
        omega: f64,
        temperature: f64,
        gamma: f64,
        physical_length: f64,
        chi_d: f64,
        exponent: f64,
    ) -> Result<Self> {
        if !(temperature >= 0.0) {
            return Err(QhError::InvalidParams(format!("temperature {temperature} < 0")));
        }
        if !(omega > 0.0) {
            return Err(QhError::InvalidParams(format!("omega {omega} must be > 0")));
        }
        PhysicalParams {
            mass,
            hbar: HBAR_SI,
            omega,
            theta: KB_SI * temperature / (HBAR_SI * omega),
            gamma,
            physical_length,
            chi_d,
            exponent,
            speed_of_light: C_SI,
            lambda_c: 0.0,
            diffusion: 0.0,
            beta: 0.0,
        }
        .derive()
    }

    /// Thermal energy kT = theta * hbar * omega.
    pub fn kt(&self) -> f64 {
        self.theta * self.hbar * self.omega
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("hbar", self.hbar),
            ("omega", self.omega),
            ("physical_length", self.physical_length),
            ("chi_d", self.chi_d),
            ("speed_of_light", self.speed_of_light),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(QhError::InvalidParams(format!("{name} = {v}, must be > 0")));
            }
        }
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return Err(QhError::InvalidParams(format!("theta = {}, must be >= 0", self.theta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(QhError::InvalidParams(format!(
                "gamma = {}, must be in [0, 1)",
                self.gamma
            )));
        }
        if !self.exponent.is_finite() || self.exponent <= 0.0 {
            return Err(QhError::InvalidParams(format!(
                "exponent = {}, must be > 0",
                self.exponent
            )));
        }
        if 2.0 * self.gamma * self.theta >= 1.0 {
            return Err(QhError::InvalidParams(format!(
                "2*gamma*theta = {} >= 1: stationary width is not positive",
                2.0 * self.gamma * self.theta
            )));
        }
        Ok(())
    }

    /// Populate `lambda_c`, `diffusion`, `beta` from the raw fields.
    /// theta = 0 is the deterministic limit: D = 0, beta = 0 and gamma is
    /// coerced to 0 (lambda_c diverges there and is stored as +inf).
    /// Idempotent: recomputes the derived fields from the raw ones.
    pub fn derive(mut self) -> Result<Self> {
        self.validate()?;
        if self.theta == 0.0 {
            self.gamma = 0.0;
            self.lambda_c = f64::INFINITY;
            self.diffusion = 0.0;
            self.beta = 0.0;
            return Ok(self);
        }
        let kt = self.kt();
        self.lambda_c = std::f64::consts::SQRT_2 * self.hbar / (self.mass * kt).sqrt();
        let ratio = self.physical_length / self.lambda_c;
        self.diffusion = self.chi_d * ratio.powf(self.exponent) * self.hbar / (2.0 * self.mass);
        self.beta = 4.0 * self.gamma * (kt / (self.chi_d * self.hbar))
            * (1.0 / ratio).powf(self.exponent);
        Ok(self)
    }

    /// Key/value pairs of every field, for output-file header blocks.
    pub fn metadata_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("mass".into(), self.mass.to_string()),
            ("hbar".into(), self.hbar.to_string()),
            ("omega".into(), self.omega.to_string()),
            ("theta".into(), self.theta.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("physical_length".into(), self.physical_length.to_string()),
            ("chi_d".into(), self.chi_d.to_string()),
            ("exponent".into(), self.exponent.to_string()),
            ("speed_of_light".into(), self.speed_of_light.to_string()),
            ("lambda_c".into(), self.lambda_c.to_string()),
            ("diffusion".into(), self.diffusion.to_string()),
            ("beta".into(), self.beta.to_string()),
        ]
    }

    /// Set a raw field by name; derived fields are not assignable.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|e| QhError::Config(format!("value for {key}: {e}")))?;
        match key.trim() {
            "mass" => self.mass = v,
            "hbar" => self.hbar = v,
            "omega" => self.omega = v,
            "theta" => self.theta = v,
            "gamma" => self.gamma = v,
            "physical_length" => self.physical_length = v,
            "chi_d" => self.chi_d = v,
            "exponent" => self.exponent = v,
            "speed_of_light" => self.speed_of_light = v,
            other => return Err(QhError::Config(format!("unknown parameter key: {other}"))),
        }
        Ok(())
    }

    /// Parse a config text: either a JSON object or `key = value` lines
    /// (`#` starts a comment). Missing keys keep natural-unit defaults.
    /// The result is derived.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let raw: serde_json::Value = serde_json::from_str(trimmed)
                .map_err(|e| QhError::Config(format!("json config: {e}")))?;
            let obj = raw
                .as_object()
                .ok_or_else(|| QhError::Config("json config must be an object".into()))?;
            let mut p = PhysicalParams::default();
            for (k, v) in obj {
                if matches!(k.as_str(), "lambda_c" | "diffusion" | "beta") {
                    continue; // derived fields in a round-tripped file are recomputed
                }
                let num = v
                    .as_f64()
                    .ok_or_else(|| QhError::Config(format!("key {k}: expected a number")))?;
                p.apply_kv(k, &num.to_string())?;
            }
            return p.derive();
        }
        let mut p = PhysicalParams::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                QhError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            p.apply_kv(k, v)?;
        }
        p.derive()
    }
}

/// Time-step bounds for resolving drift against noise at accuracy `epsilon`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KineticsReport {
    /// Characteristic relaxation time 1/beta.
    pub t_min: f64,
    /// Drift scale the window was evaluated for.
    pub drift_scale: f64,
    pub epsilon: f64,
    /// Lower bound D/(epsilon^2 K^2): below it noise swamps the drift step.
    pub dt_noise_floor: f64,
    /// Lower bound 10/beta: below it velocities are not yet relaxed.
    pub dt_relax_floor: f64,
    /// Usable steps satisfy dt >= dt_lower (max of the two floors).
    pub dt_lower: f64,
    /// Drift scale is zero and noise is present: no step resolves the drift.
    pub drift_free: bool,
    /// beta = 0: the deterministic limit, window unbounded below.
    pub deterministic: bool,
}

impl KineticsReport {
    pub fn summary(&self) -> String {
        if self.drift_free {
            return "drift-free region: kernel invalid".into();
        }
        if self.deterministic {
            return "deterministic limit: any dt > 0 admissible".into();
        }
        format!(
            "t_min = {} (1/beta); dt >= {} (noise floor {}, relaxation floor {})",
            self.t_min, self.dt_lower, self.dt_noise_floor, self.dt_relax_floor
        )
    }
}

/// Characteristic-time window for a given drift magnitude scale, with the
/// default accuracy fraction. Returns (1/beta, report).
pub fn kinetics_window(p: &PhysicalParams, drift_scale: f64) -> (f64, KineticsReport) {
    kinetics_window_with(p, drift_scale, KINETICS_EPSILON)
}

pub fn kinetics_window_with(
    p: &PhysicalParams,
    drift_scale: f64,
    epsilon: f64,
) -> (f64, KineticsReport) {
    let deterministic = p.beta == 0.0;
    let t_min = if deterministic { f64::INFINITY } else { 1.0 / p.beta };
    let k = drift_scale.abs();
    let drift_free = k == 0.0 && p.diffusion > 0.0;
    let dt_noise_floor = if p.diffusion == 0.0 {
        0.0
    } else if k == 0.0 {
        f64::INFINITY
    } else {
        p.diffusion / (epsilon * epsilon * k * k)
    };
    let dt_relax_floor = if deterministic { 0.0 } else { 10.0 / p.beta };
    let report = KineticsReport {
        t_min,
        drift_scale: k,
        epsilon,
        dt_noise_floor,
        dt_relax_floor,
        dt_lower: dt_noise_floor.max(dt_relax_floor),
        drift_free,
        deterministic,
    };
    (t_min, report)
}

/// Thermal uncertainty products for a particle of mass m at temperature T.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct UncertaintyBounds {
    pub lambda_c: f64,
    /// Minimum duration of a measurement, lambda_c / c.
    pub dt_min: f64,
    /// Thermal energy spread sqrt(2 m c^2 kT).
    pub de: f64,
    /// de * dt_min; equals 2 hbar for every m and T.
    pub de_dt_product: f64,
    /// Thermal momentum spread sqrt(2 m kT).
    pub dp: f64,
    /// lambda_c * dp; equals 2 hbar for every m and T.
    pub dl_dp_product: f64,
}

/// SI-unit thermal uncertainty bounds; temperature in kelvin.
pub fn uncertainty_bounds(mass: f64, temperature: f64) -> Result<UncertaintyBounds> {
    if !(mass > 0.0) || !(temperature > 0.0) {
        return Err(QhError::InvalidParams(format!(
            "uncertainty bounds need mass > 0 and temperature > 0, got ({mass}, {temperature})"
        )));
    }
    let kt = KB_SI * temperature;
    let lambda_c = std::f64::consts::SQRT_2 * HBAR_SI / (mass * kt).sqrt();
    let dt_min = lambda_c / C_SI;
    let de = (2.0 * mass * kt).sqrt() * C_SI;
    let dp = (2.0 * mass * kt).sqrt();
    Ok(UncertaintyBounds {
        lambda_c,
        dt_min,
        de,
        de_dt_product: de * dt_min,
        dp,
        dl_dp_product: lambda_c * dp,
    })
}

/// Noise-amplitude factor from background density fluctuations:
/// chi_d = 2^8 (L/a)^2 gamma^2 (mean_density^2 / fluct_var) sqrt(m/kT),
/// with the last factor taken as an SI numeric value. `fluct_var` is the
/// variance of the density fluctuations, same units as `mean_density`
/// squared.
pub fn chi_d_estimate(
    gamma: f64,
    fluct_var: f64,
    mean_density: f64,
    interaction_length: f64,
    physical_length: f64,
    mass: f64,
    temperature: f64,
) -> Result<f64> {
    for (name, v) in [
        ("mean_density", mean_density),
        ("interaction_length", interaction_length),
        ("physical_length", physical_length),
        ("mass", mass),
        ("temperature", temperature),
    ] {
        if !(v > 0.0) {
            return Err(QhError::InvalidParams(format!("{name} = {v}, must be > 0")));
        }
    }
    if !(gamma >= 0.0) {
        return Err(QhError::InvalidParams(format!("gamma = {gamma}, must be >= 0")));
    }
    if !(fluct_var > 0.0) {
        return Err(QhError::InvalidParams(
            "zero density-fluctuation variance: chi_d undefined".into(),
        ));
    }
    let ratio = physical_length / interaction_length;
    let rel = mean_density * mean_density / fluct_var;
    Ok(256.0 * ratio * ratio * gamma * gamma * rel * (mass / (KB_SI * temperature)).sqrt())
}
