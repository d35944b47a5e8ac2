//! The density-dependent quantum potential and the fields built from it:
//! overdamped drift, the Fokker-Planck stationarity residual, and the
//! classical-limit criterion.
//!
//! Two evaluation routes for V_qu = -(hbar^2/2m) (d^2 sqrt(n)/dq^2)/sqrt(n):
//! - [`vqu`], the canonical sqrt(n) stencil, masked (NaN) at density nodes;
//! - [`vqu_log_form`], the equivalent -(hbar^2/4m)(L'' + L'^2/2) with
//!   L = ln n, floored so it is defined everywhere. For log-quadratic
//!   densities (Gaussians) the second form is exact on the grid, because
//!   the difference stencils are exact on quadratics; [`drift`] and
//!   [`stationarity_residual`] therefore use it internally.
//!
//! Flux convention: the diffusion coefficient D multiplies the full second
//! derivative in the transport equation, dn/dt = -d(K n)/dq + D d^2n/dq^2,
//! so a stationary density balances drift against D dln(n)/dq (not D/2);
//! noise increments carry variance 2 D dt.

use crate::error::{QhError, Result};
use crate::numerics::{derivative, DensityField, Grid1D, ScalarField};
use crate::params::PhysicalParams;

/// Nodes with sqrt(n) below this fraction of max sqrt(n) are masked in
/// [`vqu`]: the ratio form is numerically meaningless at density zeros.
pub const NODE_TOL: f64 = 1e-8;
/// Stationarity residuals are evaluated where n exceeds this fraction of
/// max n; below it the state has no appreciable support.
pub const RESIDUAL_SUPPORT_TOL: f64 = 1e-6;
/// Solver drift fields evaluate the quantum force where n exceeds this
/// fraction of max n and hold it constant outside (the outer region is
/// controlled by the external force anyway).
pub const RING_TOL: f64 = 1e-12;
/// Classical-limit verdict threshold on the force ratio.
pub const CLASSICAL_LIMIT_THRESHOLD: f64 = 0.01;
/// Acceptable leftover grid error in the quantum force next to an exact
/// density zero. Around such a zero the log derivatives behave like
/// ln(q^2), and finite differences of the (analytically cancelling)
/// singular terms leave an error ~ hbar^2 dq^2 / (m q^5), so the force is
/// bridged linearly across the cells where that bound exceeds this
/// tolerance. Exact zeros only occur for idealized states (the quantum
/// force is linear through their nodes, which the bridge reproduces);
/// noisy states fill their nodes far above RING_TOL and are untouched.
pub const NODE_BRIDGE_TOL: f64 = 1e-2;

/// External potential.
#[derive(Debug, Clone)]
pub enum PotentialSpec {
    /// V = (1/2) m omega^2 q^2.
    Harmonic { omega: f64 },
    /// V = 0.
    Free,
    /// Arbitrary sampled potential.
    Custom(ScalarField),
}

impl PotentialSpec {
    pub fn harmonic(omega: f64) -> Self {
        PotentialSpec::Harmonic { omega }
    }

    pub fn evaluate(&self, grid: Grid1D, params: &PhysicalParams) -> Result<ScalarField> {
        match self {
            PotentialSpec::Harmonic { omega } => {
                let m = params.mass;
                let w2 = omega * omega;
                Ok(ScalarField::from_fn(grid, |q| 0.5 * m * w2 * q * q))
            }
            PotentialSpec::Free => Ok(ScalarField::zeros(grid)),
            PotentialSpec::Custom(f) => {
                if f.grid != grid {
                    return Err(QhError::GridMismatch(
                        "custom potential sampled on a different grid".into(),
                    ));
                }
                Ok(f.clone())
            }
        }
    }

    /// dV/dq; analytic for harmonic and free, stencil for custom.
    pub fn gradient(&self, grid: Grid1D, params: &PhysicalParams) -> Result<ScalarField> {
        match self {
            PotentialSpec::Harmonic { omega } => {
                let c = params.mass * omega * omega;
                Ok(ScalarField::from_fn(grid, |q| c * q))
            }
            PotentialSpec::Free => Ok(ScalarField::zeros(grid)),
            PotentialSpec::Custom(_) => derivative(&self.evaluate(grid, params)?, 1),
        }
    }
}

/// Quantum potential in the sqrt(n) form. Output is masked (NaN) where
/// sqrt(n) < NODE_TOL * max sqrt(n). The density is rescaled by its
/// maximum first, so the result is scale-invariant.
pub fn vqu(n: &DensityField, params: &PhysicalParams) -> ScalarField {
    let grid = n.grid();
    let max = n.max_value();
    let s: Vec<f64> = n.values().iter().map(|&v| (v / max).max(0.0).sqrt()).collect();
    let s_field = ScalarField { grid, values: s };
    let d2 = derivative(&s_field, 2).expect("order 2 is valid");
    let pref = -params.hbar * params.hbar / (2.0 * params.mass);
    let cutoff = NODE_TOL; // max of s is 1 after rescaling
    let values = (0..grid.n_points)
        .map(|i| {
            let si = s_field.values[i];
            if si < cutoff {
                f64::NAN
            } else {
                pref * d2.values[i] / si
            }
        })
        .collect();
    ScalarField { grid, values }
}

/// Quantum potential in the logarithmic form,
/// -(hbar^2/4m)(d^2 ln n/dq^2 + (d ln n/dq)^2 / 2), with the density
/// floored at EPS_LOG * max n. Defined on every node.
pub fn vqu_log_form(n: &DensityField, params: &PhysicalParams) -> ScalarField {
    let grid = n.grid();
    let max = n.max_value();
    let logn: Vec<f64> = n
        .values()
        .iter()
        .map(|&v| (v / max).max(crate::numerics::EPS_LOG).ln())
        .collect();
    let l = ScalarField { grid, values: logn };
    let l1 = derivative(&l, 1).expect("order 1 is valid");
    let l2 = derivative(&l, 2).expect("order 2 is valid");
    let pref = -params.hbar * params.hbar / (4.0 * params.mass);
    let values = (0..grid.n_points)
        .map(|i| pref * (l2.values[i] + 0.5 * l1.values[i] * l1.values[i]))
        .collect();
    ScalarField { grid, values }
}

fn require_friction(params: &PhysicalParams) -> Result<()> {
    if params.beta <= 0.0 {
        return Err(QhError::DeterministicLimit(
            "deterministic limit has no overdamped drift (beta = 0)".into(),
        ));
    }
    Ok(())
}

/// Overdamped drift field <qdot>(q) = -(1/(m beta)) d(V + V_qu)/dq, with
/// V_qu from the logarithmic form.
pub fn drift(
    n: &DensityField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<ScalarField> {
    let v_qu = vqu_log_form(n, params);
    drift_from_vqu(&v_qu, potential, params)
}

/// Overdamped drift from a precomputed quantum potential field (e.g. the
/// closed-form eigenstate expression). NaN-masked nodes propagate.
pub fn drift_from_vqu(
    v_qu: &ScalarField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<ScalarField> {
    require_friction(params)?;
    let grid = v_qu.grid;
    let dv = potential.gradient(grid, params)?;
    let dvqu = derivative(v_qu, 1)?;
    let pref = -1.0 / (params.mass * params.beta);
    let values = (0..grid.n_points)
        .map(|i| pref * (dv.values[i] + dvqu.values[i]))
        .collect();
    ScalarField::new(grid, values)
}

/// Transport-equation stationarity residual
///   R(q) = (1/(m beta)) d(V + V_qu)/dq + D dln(n)/dq,
/// zero for a stationary density. Masked (NaN) where
/// n < RESIDUAL_SUPPORT_TOL * max n. V_qu from the logarithmic form.
pub fn stationarity_residual(
    n: &DensityField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<ScalarField> {
    let v_qu = vqu_log_form(n, params);
    residual_from_vqu(n, &v_qu, potential, params)
}

/// Stationarity residual from a precomputed quantum potential field.
pub fn residual_from_vqu(
    n: &DensityField,
    v_qu: &ScalarField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<ScalarField> {
    require_friction(params)?;
    let grid = n.grid();
    if v_qu.grid != grid {
        return Err(QhError::GridMismatch("V_qu grid differs from density grid".into()));
    }
    let dv = potential.gradient(grid, params)?;
    let dvqu = derivative(v_qu, 1)?;
    let dlogn = derivative(&n.log_floored(), 1)?;
    let pref = 1.0 / (params.mass * params.beta);
    let d = params.diffusion;
    let cutoff = RESIDUAL_SUPPORT_TOL * n.max_value();
    let values = (0..grid.n_points)
        .map(|i| {
            if n.values()[i] <= cutoff {
                f64::NAN
            } else {
                pref * (dv.values[i] + dvqu.values[i]) + d * dlogn.values[i]
            }
        })
        .collect();
    ScalarField::new(grid, values)
}

/// Full-grid force field -d(V + V_qu)/dq for the propagators: quantum
/// force from the logarithmic form on the region n > RING_TOL * max n,
/// held constant outside it; external force added analytically everywhere.
/// No friction division, so it also serves the inertial integrator.
pub fn solver_force(
    n: &DensityField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<ScalarField> {
    let grid = n.grid();
    let v_qu = vqu_log_form(n, params);
    let mut dvqu = derivative(&v_qu, 1)?;
    let cutoff = RING_TOL * n.max_value();
    let above: Vec<usize> =
        (0..grid.n_points).filter(|&i| n.values()[i] > cutoff).collect();
    let (lo, hi) = match (above.first(), above.last()) {
        (Some(&lo), Some(&hi)) if lo < hi => (lo, hi),
        _ => return Err(QhError::BadDensity("no support above the ring floor".into())),
    };
    bridge_node_bands(&mut dvqu.values, n, lo, hi, params)?;
    let dv = potential.gradient(grid, params)?;
    let values = (0..grid.n_points)
        .map(|i| {
            let j = i.clamp(lo, hi);
            -(dv.values[i] + dvqu.values[j])
        })
        .collect();
    ScalarField::new(grid, values)
}

/// Replace the quantum force across every node band by linear
/// interpolation between the band's edges. A band is where the measured
/// log-curvature exceeds that of a density zero at distance q_star, the
/// radius inside which the finite-difference junk terms are larger than
/// NODE_BRIDGE_TOL. The criterion is local, so it catches zeros that fall
/// between grid points as well as sub-cell node fills, and leaves
/// resolved structure (|ln n|'' of order one) alone.
fn bridge_node_bands(
    dvqu: &mut [f64],
    n: &DensityField,
    lo: usize,
    hi: usize,
    params: &PhysicalParams,
) -> Result<()> {
    let dq = n.grid().dq();
    let q_star =
        (2.3 * params.hbar * params.hbar / params.mass * dq * dq / NODE_BRIDGE_TOL).powf(0.2);
    let curv_max = 2.0 / (q_star * q_star);
    let l2 = derivative(&n.log_floored(), 2)?;
    // a flagged cell contaminates the force two cells out through the
    // nested difference stencils
    let pad = 2usize;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut i = lo + 1;
    while i < hi {
        if l2.values[i].abs() > curv_max {
            let start = i;
            while i < hi && l2.values[i].abs() > curv_max {
                i += 1;
            }
            let a = start.saturating_sub(pad).max(lo);
            let b = (i - 1 + pad).min(hi);
            match spans.last_mut() {
                Some(last) if a <= last.1 => last.1 = b,
                _ => spans.push((a, b)),
            }
        } else {
            i += 1;
        }
    }
    for (a, b) in spans {
        if b <= a + 1 {
            continue;
        }
        let fa = dvqu[a];
        let fb = dvqu[b];
        let width = (b - a) as f64;
        for j in (a + 1)..b {
            let t = (j - a) as f64 / width;
            dvqu[j] = fa + t * (fb - fa);
        }
    }
    Ok(())
}

/// Overdamped drift field force/(m beta) on the full grid, ring-clamped as
/// in `solver_force`.
pub fn solver_drift(
    n: &DensityField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<ScalarField> {
    require_friction(params)?;
    let force = solver_force(n, potential, params)?;
    let pref = 1.0 / (params.mass * params.beta);
    let values = force.values.iter().map(|f| pref * f).collect();
    ScalarField::new(force.grid, values)
}

/// Classical-limit criterion: the peak quantum force per unit mass against
/// the thermal noise force scale beta (L/2) sqrt(kT / 2 hbar).
#[derive(Debug, Clone, Copy)]
pub struct ClassicalLimitReport {
    pub ratio: f64,
    pub admissible: bool,
    pub threshold: f64,
}

/// Evaluates the quantum force on the region n > RESIDUAL_SUPPORT_TOL * max.
/// Errors at theta = 0 (no noise scale to compare against).
pub fn classical_limit_check(
    n: &DensityField,
    params: &PhysicalParams,
) -> Result<ClassicalLimitReport> {
    if params.theta == 0.0 || params.beta == 0.0 {
        return Err(QhError::DeterministicLimit(
            "classical-limit criterion undefined at zero noise".into(),
        ));
    }
    let v_qu = vqu_log_form(n, params);
    let dvqu = derivative(&v_qu, 1)?;
    let cutoff = RESIDUAL_SUPPORT_TOL * n.max_value();
    let mut peak: f64 = 0.0;
    for i in 0..n.grid().n_points {
        if n.values()[i] > cutoff {
            peak = peak.max((dvqu.values[i] / params.mass).abs());
        }
    }
    let noise_force = params.beta * (params.physical_length / 2.0)
        * (params.kt() / (2.0 * params.hbar)).sqrt();
    let ratio = peak / noise_force;
    Ok(ClassicalLimitReport {
        ratio,
        admissible: ratio < CLASSICAL_LIMIT_THRESHOLD,
        threshold: CLASSICAL_LIMIT_THRESHOLD,
    })
}
