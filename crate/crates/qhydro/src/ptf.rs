//! Density propagation by a short-time transition kernel. One step of the
//! overdamped flow is written as a Markov kernel on the grid, a Gaussian in
//! the jump q_k - q_{k-1} with mean drift*dt and variance 2 D dt. The drift
//! entering the kernel can be refined within a step by a midpoint rule,
//! averaging the field at the step's start with the field of the predicted
//! end density, until the prediction stops moving.
//!
//! Columns are renormalized on the grid with the same trapezoid weights the
//! propagation uses, which absorbs the Jacobian of the drift map and makes
//! mass conservation exact in floating point. The time step stays finite by
//! construction; there is no continuous-time object here.

use crate::error::{QhError, Result};
use crate::numerics::{derivative, l1_distance, write_csv, DensityField, Grid1D, ScalarField};
use crate::params::PhysicalParams;
use crate::qpotential::{solver_drift, PotentialSpec};
use std::io::Write;
use std::path::Path;

/// Default target for the drift self-consistency iteration, in velocity
/// units: the step stops refining when the predicted drift field moves
/// less than this between iterations.
pub const PTF_DEFAULT_TOL: f64 = 1e-8;

/// Kernel builds allowed per step (the frozen-drift build counts as one).
pub const PTF_DEFAULT_MAX_REFINE: usize = 8;

/// Default stationarity threshold for `evolve`: L1 change per unit time.
pub const PTF_DEFAULT_STATIONARY_EPS: f64 = 1e-6;

/// Columns carry the Gaussian out to this many standard deviations. The
/// clipped tail is exp(-81/2) ~ 2.6e-18 relative, far below the density
/// ring floor, so propagation never imprints a truncation cliff on the
/// log-derivatives that feed the next drift evaluation.
pub const PTF_BAND_SIGMAS: f64 = 9.0;

/// Support floor for the refinement's convergence norm: the drift change
/// is measured where the step's input density exceeds this fraction of its
/// maximum. Below it the drift field is regularization, not physics.
pub const PTF_SUPPORT_TOL: f64 = 1e-8;

/// Largest grid for which a kernel may be dumped as a dense CSV.
pub const PTF_AUDIT_GRID_MAX: usize = 512;

/// Allowed per-step gain of drift-feedback modes in the transport itself:
/// 2 is the explicit-stepping stability bound for damping modes.
pub const PTF_STEP_GAIN: f64 = 2.0;

/// Target contraction ratio of the midpoint refinement's Picard iteration.
pub const PTF_REFINE_GAIN: f64 = 0.1;

/// Density perturbations feed back into the transport through the quantum
/// force. Written on the log-density, a drift change dK at wavenumber k
/// deposits -dt (dK' + s dK) in one step (s the local log-slope), and the
/// quantum force echoes the deposit's curvature back into the drift. Per
/// step the loop gain is
///     G(k) = nu (k^4 + s^2 k^2) dt T(k),  nu = hbar^2/(4 m^2 beta),
/// with T the transfer of whatever filter sits in the path. G crosses 1 at
/// moderate k for any finite dt (steep tails make the s^2 k^2 channel
/// brutal: s ~ 8 at the edge of a Gaussian's support), so raw drift fields
/// cannot be iterated explicitly. Kernels therefore low-pass their drift
/// with the window in `lowpass`, whose transfer (1+x)exp(-x), x = h^2k^2/2,
/// obeys sup_k k^4 T = 7.25/h^4 and sup_k k^2 T = 1.677/h^2. Solving
/// G <= allow for each channel separately gives the width below. The
/// window has a vanishing second moment, so smooth fields are altered only
/// at O(h^4 K'''').
fn filter_width(params: &PhysicalParams, dt: f64, slope: f64, allow: f64, grid: &Grid1D) -> f64 {
    let nu = params.hbar * params.hbar / (4.0 * params.mass * params.mass * params.beta);
    let h4 = (7.25 * nu * dt / allow).powf(0.25);
    let hs = slope * (1.677 * nu * dt / allow).sqrt();
    h4.max(hs).min(0.5 * (grid.q_max - grid.q_min))
}

/// Steepest log-density slope at the edges of the trusted support, the
/// amplification factor of the drift-feedback advection channel.
fn fringe_slope(n: &DensityField) -> f64 {
    let grid = n.grid();
    let np = grid.n_points;
    let cutoff = PTF_SUPPORT_TOL * n.max_value();
    let lo = n.values().iter().position(|&v| v > cutoff).unwrap_or(0);
    let hi = n.values().iter().rposition(|&v| v > cutoff).unwrap_or(np - 1);
    let logs = n.log_floored();
    let slope_at = |i: usize| {
        let a = i.saturating_sub(1);
        let b = (i + 1).min(np - 1);
        ((logs.values[b] - logs.values[a]) / ((b - a) as f64 * grid.dq())).abs()
    };
    slope_at(lo).max(slope_at(hi))
}

/// Convolve with the fourth-order window (3 - u^2)/2 phi(u), u = x/h,
/// replicating edge values. Constants and linear ramps pass through
/// unchanged away from the walls.
fn lowpass(field: &ScalarField, h: f64) -> ScalarField {
    let grid = field.grid;
    let n = grid.n_points;
    let dq = grid.dq();
    let radius = ((5.0 * h / dq).ceil() as usize).max(1).min(n - 1);
    let mut weights = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for j in -(radius as isize)..=(radius as isize) {
        let u = j as f64 * dq / h;
        let w = 0.5 * (3.0 - u * u) * (-0.5 * u * u).exp();
        weights.push(w);
        sum += w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    // odd reflection beyond the walls keeps linear fields exact there;
    // drift tails are linearly continued, so this pads with the truth
    let last = n as isize - 1;
    let at = |k: isize| -> f64 {
        if k < 0 {
            2.0 * field.values[0] - field.values[(-k).min(last) as usize]
        } else if k > last {
            2.0 * field.values[last as usize] - field.values[(2 * last - k).max(0) as usize]
        } else {
            field.values[k as usize]
        }
    };
    let mut out = vec![0.0f64; n];
    for i in 0..n {
        let mut acc = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            acc += w * at(i as isize + j as isize - radius as isize);
        }
        out[i] = acc;
    }
    ScalarField { grid, values: out }
}

/// How the kernel columns are built.
#[derive(Debug, Clone, Copy, Default)]
pub struct KernelOptions {
    /// Add the (1/2) K K' dt^2 term to the column means. Off by default:
    /// the midpoint refinement already supplies the second-order accuracy
    /// without differentiating the drift field.
    pub second_order_mean: bool,
}

/// Discretized one-step transition kernel K[dest][src], a probability
/// density per unit length in the destination coordinate. Storage is
/// banded: each source column holds a window of `width` destination cells
/// around its drifted center.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub grid: Grid1D,
    pub dt: f64,
    /// Midpoint refinements applied to the drift; 0 means the drift was
    /// frozen at the step's start.
    pub order: usize,
    width: usize,
    starts: Vec<usize>,
    values: Vec<f64>,
    base_drift: ScalarField,
    /// The drift handed to the builder, before the stability filter.
    /// Refinements relax toward their target in this space so the filter
    /// is never applied twice to the same field.
    mid_drift: ScalarField,
    used_drift: ScalarField,
    second_order: bool,
}

fn trap_w(grid: &Grid1D, i: usize) -> f64 {
    if i == 0 || i == grid.n_points - 1 {
        0.5 * grid.dq()
    } else {
        grid.dq()
    }
}

impl TransitionKernel {
    /// K(q_dest | q_src); zero outside the stored band.
    pub fn entry(&self, dest: usize, src: usize) -> f64 {
        let s = self.starts[src];
        if dest < s || dest >= s + self.width {
            0.0
        } else {
            self.values[src * self.width + (dest - s)]
        }
    }

    /// The drift field the columns were built from (midpoint-averaged for
    /// order >= 1).
    pub fn drift(&self) -> &ScalarField {
        &self.used_drift
    }

    /// Trapezoid integral of one column over the grid; 1 after the build.
    pub fn column_integral(&self, src: usize) -> f64 {
        let s = self.starts[src];
        (0..self.width)
            .map(|k| trap_w(&self.grid, s + k) * self.values[src * self.width + k])
            .sum()
    }

    pub fn column_mean(&self, src: usize) -> f64 {
        let s = self.starts[src];
        (0..self.width)
            .map(|k| {
                let i = s + k;
                trap_w(&self.grid, i) * self.values[src * self.width + k] * self.grid.q(i)
            })
            .sum()
    }

    pub fn column_std(&self, src: usize) -> f64 {
        let m = self.column_mean(src);
        let s = self.starts[src];
        let m2: f64 = (0..self.width)
            .map(|k| {
                let i = s + k;
                let q = self.grid.q(i);
                trap_w(&self.grid, i) * self.values[src * self.width + k] * q * q
            })
            .sum();
        (m2 - m * m).max(0.0).sqrt()
    }

    /// Largest entry-wise difference to another kernel on the same grid.
    pub fn sup_distance(&self, other: &TransitionKernel) -> Result<f64> {
        if self.grid != other.grid {
            return Err(QhError::GridMismatch("kernels live on different grids".into()));
        }
        let mut worst = 0.0f64;
        for src in 0..self.grid.n_points {
            let lo = self.starts[src].min(other.starts[src]);
            let hi = (self.starts[src] + self.width).max(other.starts[src] + other.width);
            for dest in lo..hi.min(self.grid.n_points) {
                worst = worst.max((self.entry(dest, src) - other.entry(dest, src)).abs());
            }
        }
        Ok(worst)
    }

    /// Dense CSV dump for audits: header comments, then one row per
    /// destination node holding q_dest and every source column's entry.
    /// Refused above PTF_AUDIT_GRID_MAX points.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.grid.n_points;
        if n > PTF_AUDIT_GRID_MAX {
            return Err(QhError::InvalidGrid(format!(
                "kernel dump is limited to {PTF_AUDIT_GRID_MAX} grid points, got {n}"
            )));
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# dt: {}", self.dt)?;
        writeln!(out, "# order: {}", self.order)?;
        writeln!(out, "# points: {n}")?;
        writeln!(out, "# columns: q_dest, then K(q_dest | q_src) for each source node")?;
        for dest in 0..n {
            write!(out, "{}", self.grid.q(dest))?;
            for src in 0..n {
                write!(out, ",{}", self.entry(dest, src))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Cells used for the edge fits that extend a field beyond its trusted
/// region.
const FIT_CELLS: usize = 16;

/// Replace the density far below the trust floor by the quadratic
/// log-extrapolation of the trusted edge, so the outer fringe never
/// accumulates transport deformations whose log-curvature would echo back
/// into the drift field. Exact for Gaussian tails. The splice sits two
/// decades below the convergence-norm floor: the cells the norm reads
/// never have a rebuilt cell inside their difference stencils.
fn rebuild_fringe(n: &DensityField) -> Result<DensityField> {
    let grid = n.grid();
    let np = grid.n_points;
    let cutoff = 1e-2 * PTF_SUPPORT_TOL * n.max_value();
    let lo = n.values().iter().position(|&v| v > cutoff).unwrap_or(0);
    let hi = n.values().iter().rposition(|&v| v > cutoff).unwrap_or(np - 1);
    if hi - lo < 4 * FIT_CELLS {
        return Ok(n.clone());
    }
    let logs = n.log_floored();
    let mut out = n.values().to_vec();
    // least-squares quadratic in (i - edge) through the first FIT_CELLS
    // in-ring log values, evaluated outward
    let mut extend = |edge: usize, dir: isize, span: usize| {
        let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
        let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
        for j in 0..FIT_CELLS {
            let x = j as f64;
            let y = logs.values[(edge as isize + dir * j as isize) as usize];
            s1 += x;
            s2 += x * x;
            s3 += x * x * x;
            s4 += x * x * x * x;
            b0 += y;
            b1 += x * y;
            b2 += x * x * y;
        }
        let m = FIT_CELLS as f64;
        // solve the 3x3 normal equations by elimination
        let det = m * (s2 * s4 - s3 * s3) - s1 * (s1 * s4 - s2 * s3) + s2 * (s1 * s3 - s2 * s2);
        let c0 = (b0 * (s2 * s4 - s3 * s3) - s1 * (b1 * s4 - b2 * s3) + s2 * (b1 * s3 - b2 * s2)) / det;
        let c1 = (m * (b1 * s4 - b2 * s3) - b0 * (s1 * s4 - s2 * s3) + s2 * (s1 * b2 - s2 * b1)) / det;
        let c2 = (m * (s2 * b2 - s3 * b1) - s1 * (s1 * b2 - s2 * b1) + b0 * (s1 * s3 - s2 * s2)) / det;
        for j in 1..=span {
            let x = -(j as f64);
            let idx = edge as isize - dir * j as isize;
            out[idx as usize] = (c0 + c1 * x + c2 * x * x).exp();
        }
    };
    if lo > 0 {
        extend(lo, 1, lo);
    }
    if hi < np - 1 {
        extend(hi, -1, np - 1 - hi);
    }
    DensityField::normalize(ScalarField::new(grid, out)?).map(|(d, _)| d)
}

/// Continue a drift field linearly past the edges of the density's ring
/// (the region where the quantum force is genuine), from a straight-line
/// fit of the last trusted cells. The held-force regularization outside
/// the ring grows with the external potential and would leak into the
/// trusted region through the stability filter's window; a linear
/// continuation is smooth, bounded, and exact for the Gaussian-family
/// states whose drift is linear.
fn continue_tail(drift: &ScalarField, n: &DensityField) -> ScalarField {
    let grid = drift.grid;
    let np = grid.n_points;
    let cutoff = crate::qpotential::RING_TOL * n.max_value();
    let lo = n.values().iter().position(|&v| v > cutoff).unwrap_or(0);
    let hi = n.values().iter().rposition(|&v| v > cutoff).unwrap_or(np - 1);
    if hi - lo < 4 * FIT_CELLS {
        return drift.clone();
    }
    let mut out = drift.values.clone();
    let mut extend = |edge: usize, dir: isize, span: usize| {
        let (mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..FIT_CELLS {
            let x = j as f64;
            let y = drift.values[(edge as isize + dir * j as isize) as usize];
            sx += x;
            sxx += x * x;
            sy += y;
            sxy += x * y;
        }
        let m = FIT_CELLS as f64;
        let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        let icept = (sy - slope * sx) / m;
        for j in 1..=span {
            let idx = edge as isize - dir * j as isize;
            out[idx as usize] = icept - slope * j as f64;
        }
    };
    if lo > 0 {
        extend(lo, 1, lo);
    }
    if hi < np - 1 {
        extend(hi, -1, np - 1 - hi);
    }
    ScalarField { grid, values: out }
}

/// Gaussian columns exp[-(q - c_src)^2 / (4 D dt)] with c_src the drifted
/// source position, renormalized column-by-column with the grid's
/// trapezoid weights. Sub-cell columns collapse onto the nearest node.
/// The drift is low-passed at the given stability width before use.
fn build_kernel(
    grid: Grid1D,
    dt: f64,
    drift: &ScalarField,
    base_drift: ScalarField,
    filter: f64,
    order: usize,
    second_order: bool,
    params: &PhysicalParams,
) -> Result<TransitionKernel> {
    let d = params.diffusion;
    let n = grid.n_points;
    let dq = grid.dq();
    let used = lowpass(drift, filter);
    let sigma = (2.0 * d * dt).sqrt();
    let band = ((PTF_BAND_SIGMAS * sigma / dq).ceil() as usize).max(1).min((n - 1) / 2);
    let width = 2 * band + 1;
    let inv_var = 1.0 / (4.0 * d * dt);
    let ddrift = if second_order { Some(derivative(&used, 1)?) } else { None };

    let mut starts = vec![0usize; n];
    let mut values = vec![0.0f64; n * width];
    for src in 0..n {
        let mut c = grid.q(src) + used.values[src] * dt;
        if let Some(dd) = &ddrift {
            c += 0.5 * used.values[src] * dd.values[src] * dt * dt;
        }
        let ic = grid.nearest_index(c);
        let s = ic.saturating_sub(band).min(n - width);
        let col = &mut values[src * width..(src + 1) * width];
        let mut sum = 0.0;
        for (k, v) in col.iter_mut().enumerate() {
            let x = grid.q(s + k) - c;
            *v = (-x * x * inv_var).exp();
            sum += trap_w(&grid, s + k) * *v;
        }
        if !(sum > 0.0) {
            // the whole window underflowed (sigma far below the cell
            // size); the column degenerates to a point mass
            col.fill(0.0);
            let k = ic.clamp(s, s + width - 1) - s;
            col[k] = 1.0;
            sum = trap_w(&grid, s + k);
        }
        for v in col.iter_mut() {
            *v /= sum;
        }
        starts[src] = s;
    }
    Ok(TransitionKernel {
        grid,
        dt,
        order,
        width,
        starts,
        values,
        base_drift,
        mid_drift: drift.clone(),
        used_drift: used,
        second_order,
    })
}

/// Kernel with the drift frozen at the current density (zeroth order in
/// the refinement). Needs diffusion: at D = 0 the columns are delta
/// functions and the caller should use the deterministic-limit kernel.
pub fn kernel_zero(
    n: &DensityField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
    dt: f64,
    opts: &KernelOptions,
) -> Result<TransitionKernel> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(QhError::InvalidParams(format!("time step {dt}, must be > 0")));
    }
    if params.diffusion <= 0.0 {
        return Err(QhError::DeterministicLimit(
            "no diffusion: use the deterministic-limit kernel".into(),
        ));
    }
    let drift = continue_tail(&solver_drift(n, potential, params)?, n);
    let h = filter_width(params, dt, fringe_slope(n), PTF_STEP_GAIN, &n.grid());
    build_kernel(n.grid(), dt, &drift, drift.clone(), h, 0, opts.second_order_mean, params)
}

/// n'(q) = integral of K(q|z) n(z) dz by the trapezoid rule, renormalized.
pub fn propagate(n: &DensityField, kernel: &TransitionKernel) -> Result<DensityField> {
    let grid = n.grid();
    if grid != kernel.grid {
        return Err(QhError::GridMismatch("density grid differs from kernel grid".into()));
    }
    let mut acc = vec![0.0f64; grid.n_points];
    for src in 0..grid.n_points {
        let w = trap_w(&grid, src) * n.values()[src];
        if w == 0.0 {
            continue;
        }
        let s = kernel.starts[src];
        let col = &kernel.values[src * kernel.width..(src + 1) * kernel.width];
        for (k, &kv) in col.iter().enumerate() {
            acc[s + k] += kv * w;
        }
    }
    let (out, _) = DensityField::normalize(ScalarField::new(grid, acc)?)?;
    Ok(out)
}

/// Rebuild the kernel with the midpoint drift, the average of the field at
/// the step's start and the field of the newly propagated density. The
/// refinement order goes up by one; the start field is kept so repeated
/// refines keep averaging against the same anchor.
///
/// The correction (half the drift change) is low-passed far more heavily
/// than the kernel itself: the Picard iteration the step runs amplifies
/// fringe modes by nu s^2 k^2 dt per pass and diverges unless the feedback
/// path contracts. The change vanishes at the self-consistent fixed point,
/// so the wide filter costs nothing there; it only slows the correction of
/// fine drift structure, which the outer steps pick up anyway.
pub fn refine(
    prev: &TransitionKernel,
    n_now: &DensityField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
) -> Result<TransitionKernel> {
    if n_now.grid() != prev.grid {
        return Err(QhError::GridMismatch("density grid differs from kernel grid".into()));
    }
    let now = continue_tail(&solver_drift(n_now, potential, params)?, n_now);
    let slope = fringe_slope(n_now);
    let change = ScalarField::new(
        prev.grid,
        now.values.iter().zip(&prev.base_drift.values).map(|(b, a)| b - a).collect(),
    )?;
    let h_fb = filter_width(params, prev.dt, slope, 2.0 * PTF_REFINE_GAIN, &prev.grid);
    let smooth = lowpass(&change, h_fb);
    let mid = ScalarField::new(
        prev.grid,
        prev.base_drift
            .values
            .iter()
            .zip(&smooth.values)
            .map(|(a, c)| a + 0.5 * c)
            .collect(),
    )?;
    let h = filter_width(params, prev.dt, slope, PTF_STEP_GAIN, &prev.grid);
    build_kernel(
        prev.grid,
        prev.dt,
        &mid,
        prev.base_drift.clone(),
        h,
        prev.order + 1,
        prev.second_order,
        params,
    )
}

/// One propagated step with its refinement bookkeeping.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub density: DensityField,
    /// Kernel builds spent on the step; 1 means the frozen-drift kernel
    /// was accepted as-is.
    pub iterations: usize,
    /// False when the drift prediction was still moving more than tol
    /// after max_refine builds. The density is still usable.
    pub converged: bool,
    /// Sup-norm change of the predicted drift at each iteration, measured
    /// on the support of the step's input density.
    pub drift_norms: Vec<f64>,
}

fn sup_diff_on_support(a: &ScalarField, b: &ScalarField, n: &DensityField, cutoff: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n.grid().n_points {
        if n.values()[i] > cutoff {
            worst = worst.max((a.values[i] - b.values[i]).abs());
        }
    }
    worst
}

/// Advance the density by one time step, alternating propagation and
/// midpoint refinement of the kernel drift until the predicted drift field
/// changes by at most `tol` between iterations, or `max_refine` kernel
/// builds are spent. A refinement that stops contracting (the change norm
/// no longer decreases) ends the loop early and the best prediction seen
/// is kept. Non-convergence is reported in the outcome, not an error.
/// Each prediction's sub-ring fringe is rebuilt before its drift is
/// evaluated; see `rebuild_fringe`.
pub fn step(
    n: &DensityField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
    dt: f64,
    tol: f64,
    max_refine: usize,
    opts: &KernelOptions,
) -> Result<StepOutcome> {
    if max_refine == 0 {
        return Err(QhError::InvalidParams("max_refine must be at least 1".into()));
    }
    let mut kernel = kernel_zero(n, potential, params, dt, opts)?;
    let cutoff = PTF_SUPPORT_TOL * n.max_value();
    let mut reference = kernel.base_drift.clone();
    let mut norms = Vec::new();
    let mut builds = 1usize;
    let mut best: Option<(f64, DensityField)> = None;
    loop {
        let pred = rebuild_fringe(&propagate(n, &kernel)?)?;
        let pred_drift = solver_drift(&pred, potential, params)?;
        let norm = sup_diff_on_support(&pred_drift, &reference, n, cutoff);
        norms.push(norm);
        if norm <= tol {
            return Ok(StepOutcome {
                density: pred,
                iterations: builds,
                converged: true,
                drift_norms: norms,
            });
        }
        let stalled = best.as_ref().is_some_and(|(b, _)| norm >= *b);
        if !stalled {
            best = Some((norm, pred.clone()));
        }
        if builds >= max_refine || stalled {
            return Ok(StepOutcome {
                density: best.expect("at least one prediction").1,
                iterations: builds,
                converged: false,
                drift_norms: norms,
            });
        }
        kernel = refine(&kernel, &pred, potential, params)?;
        builds += 1;
        reference = pred_drift;
    }
}

/// Knobs for a full evolution run.
#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    pub tol: f64,
    pub max_refine: usize,
    /// Steps between recorded snapshots (the initial and final states are
    /// always recorded).
    pub save_every: usize,
    pub kernel: KernelOptions,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            tol: PTF_DEFAULT_TOL,
            max_refine: PTF_DEFAULT_MAX_REFINE,
            save_every: 10,
            kernel: KernelOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PtfSnapshot {
    pub time: f64,
    pub density: DensityField,
}

/// Full history of an `evolve` run.
#[derive(Debug, Clone)]
pub struct EvolutionRecord {
    pub snapshots: Vec<PtfSnapshot>,
    /// Kernel builds per step.
    pub iterations: Vec<usize>,
    /// Per step, the drift-change norm at each refinement iteration.
    pub drift_norms: Vec<Vec<f64>>,
    pub step_converged: Vec<bool>,
    /// The L1 change rate dropped below the stationarity threshold.
    pub stationary: bool,
    pub stationary_time: Option<f64>,
    pub final_density: DensityField,
    pub dt: f64,
    pub steps: usize,
}

/// Propagate n0 until t_end, or earlier if the density stops changing:
/// the run ends as stationary when L1(n_{k+1}, n_k)/dt falls below
/// `stationarity_eps`. With no friction the overdamped drift is undefined
/// and nothing moves; the input is returned unchanged.
pub fn evolve(
    n0: &DensityField,
    potential: &PotentialSpec,
    params: &PhysicalParams,
    dt: f64,
    t_end: f64,
    stationarity_eps: f64,
    opts: &EvolveOptions,
) -> Result<EvolutionRecord> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(QhError::InvalidParams(format!("time step {dt}, must be > 0")));
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(QhError::InvalidParams(format!("t_end {t_end}, must be >= 0")));
    }
    if !(stationarity_eps >= 0.0) {
        return Err(QhError::InvalidParams(format!(
            "stationarity_eps {stationarity_eps}, must be >= 0"
        )));
    }
    let save_every = opts.save_every.max(1);
    let wanted = if t_end == 0.0 || params.beta == 0.0 {
        0
    } else {
        (t_end / dt - 1e-9).ceil().max(0.0) as usize
    };
    let mut record = EvolutionRecord {
        snapshots: vec![PtfSnapshot { time: 0.0, density: n0.clone() }],
        iterations: Vec::new(),
        drift_norms: Vec::new(),
        step_converged: Vec::new(),
        stationary: false,
        stationary_time: None,
        final_density: n0.clone(),
        dt,
        steps: 0,
    };
    let mut current = n0.clone();
    for k in 0..wanted {
        let out = step(&current, potential, params, dt, opts.tol, opts.max_refine, &opts.kernel)?;
        let rate = l1_distance(&out.density, &current)? / dt;
        let time = (k + 1) as f64 * dt;
        record.iterations.push(out.iterations);
        record.drift_norms.push(out.drift_norms);
        record.step_converged.push(out.converged);
        record.steps = k + 1;
        current = out.density;
        let went_stationary = rate < stationarity_eps;
        if (k + 1) % save_every == 0 || k + 1 == wanted || went_stationary {
            record.snapshots.push(PtfSnapshot { time, density: current.clone() });
        }
        if went_stationary {
            record.stationary = true;
            record.stationary_time = Some(time);
            break;
        }
    }
    record.final_density = current;
    Ok(record)
}

impl EvolutionRecord {
    /// Serialize the run into a directory: `manifest.json` with the step
    /// bookkeeping, plus one CSV per recorded snapshot. `extra` metadata
    /// pairs are prepended to every snapshot header.
    pub fn write_dir(&self, dir: &Path, extra: &[(String, String)]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.snapshots.len());
        for (idx, snap) in self.snapshots.iter().enumerate() {
            let name = format!("snapshot_{idx:04}.csv");
            let mut meta = vec![("time".to_string(), snap.time.to_string())];
            meta.extend_from_slice(extra);
            write_csv(&dir.join(&name), snap.density.as_field(), &meta)?;
            files.push(serde_json::json!({ "time": snap.time, "file": name }));
        }
        let grid = self.final_density.grid();
        let manifest = serde_json::json!({
            "dt": self.dt,
            "steps": self.steps,
            "stationary": self.stationary,
            "stationary_time": self.stationary_time,
            "iterations": self.iterations,
            "step_converged": self.step_converged,
            "drift_norms": self.drift_norms,
            "grid": { "q_min": grid.q_min, "q_max": grid.q_max, "n_points": grid.n_points },
            "snapshots": files,
        });
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| QhError::Config(format!("manifest: {e}")))?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::integrate;
    use crate::oscillator::quasi_eigenstate;
    use crate::qpotential::vqu_log_form;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn natural(theta: f64, gamma: f64) -> PhysicalParams {
        PhysicalParams::natural(theta, gamma).unwrap()
    }

    fn harmonic() -> PotentialSpec {
        PotentialSpec::harmonic(1.0)
    }

    /// Stationary Gaussian width: v - 1/(4v) = beta D.
    fn v_star(p: &PhysicalParams) -> f64 {
        let c = p.beta * p.diffusion;
        0.5 * (c + (c * c + 1.0).sqrt())
    }

    fn gaussian(grid: Grid1D, mu: f64, var: f64) -> DensityField {
        DensityField::from_fn_normalized(grid, |q| (-(q - mu) * (q - mu) / (2.0 * var)).exp())
            .unwrap()
    }

    #[test]
    fn driftless_kernel_columns_are_gaussian() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let flat = DensityField::from_fn_normalized(grid, |_| 1.0).unwrap();
        let dt = 0.1;
        let k = kernel_zero(&flat, &PotentialSpec::Free, &p, dt, &KernelOptions::default())
            .unwrap();
        assert_eq!(k.order, 0);
        let var_want = 2.0 * p.diffusion * dt;
        for &q in &[-4.0, -1.3, 0.0, 0.7, 3.9] {
            let src = grid.nearest_index(q);
            assert!((k.column_mean(src) - grid.q(src)).abs() < 1e-9);
            let v = k.column_std(src).powi(2);
            assert!((v / var_want - 1.0).abs() < 1e-6, "variance {v} vs {var_want}");
        }
        let worst = (0..grid.n_points)
            .map(|s| (k.column_integral(s) - 1.0).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-12, "column integral off by {worst}");
    }

    #[test]
    fn kernel_needs_diffusion() {
        let p = natural(0.0, 0.0);
        let grid = Grid1D::default_grid();
        let flat = DensityField::from_fn_normalized(grid, |_| 1.0).unwrap();
        let err = kernel_zero(&flat, &harmonic(), &p, 0.1, &KernelOptions::default())
            .unwrap_err();
        match err {
            QhError::DeterministicLimit(msg) => {
                assert!(msg.contains("deterministic-limit kernel"))
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn quasi_ground_columns_track_the_drift() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n = quasi_eigenstate(0, &p, grid).unwrap().density;
        let dt = 0.1;
        let tol = 1e-3 * (2.0 * p.diffusion * dt).sqrt();

        let k = kernel_zero(&n, &harmonic(), &p, dt, &KernelOptions::default()).unwrap();
        let drift = k.drift().clone();
        for &q in &[-3.0, -1.0, 0.0, 0.5, 2.25] {
            let src = grid.nearest_index(q);
            let want = grid.q(src) + drift.values[src] * dt;
            assert!((k.column_mean(src) - want).abs() < tol);
        }

        let k2 = kernel_zero(&n, &harmonic(), &p, dt, &KernelOptions { second_order_mean: true })
            .unwrap();
        let ddrift = derivative(&drift, 1).unwrap();
        for &q in &[-1.0, 0.5, 2.25] {
            let src = grid.nearest_index(q);
            let want = grid.q(src)
                + drift.values[src] * dt
                + 0.5 * drift.values[src] * ddrift.values[src] * dt * dt;
            assert!((k2.column_mean(src) - want).abs() < tol);
        }
    }

    #[test]
    fn one_hot_density_maps_to_its_column() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n = quasi_eigenstate(0, &p, grid).unwrap().density;
        let k = kernel_zero(&n, &harmonic(), &p, 0.1, &KernelOptions::default()).unwrap();

        let src = grid.nearest_index(0.5);
        let mut v = vec![0.0; grid.n_points];
        v[src] = 1.0 / grid.dq();
        let (hot, _) = DensityField::normalize(ScalarField::new(grid, v).unwrap()).unwrap();
        let out = propagate(&hot, &k).unwrap();
        let peak = out.max_value();
        for i in 0..grid.n_points {
            assert!((out.values()[i] - k.entry(i, src)).abs() <= 1e-12 * peak);
        }
    }

    #[test]
    fn short_time_propagation_obeys_the_heat_bound() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n = gaussian(grid, 0.0, 2.25);
        // cancel the quantum force exactly so the kernel is pure diffusion
        let mut counter = vqu_log_form(&n, &p);
        for v in counter.values.iter_mut() {
            *v = -*v;
        }
        let pot = PotentialSpec::Custom(counter);
        let dt = 0.1;
        let k = kernel_zero(&n, &pot, &p, dt, &KernelOptions::default()).unwrap();
        let drift_sup = k.drift().max_abs();
        assert!(drift_sup < 1e-10, "leftover drift {drift_sup}");

        let out = propagate(&n, &k).unwrap();
        let l1 = l1_distance(&out, &n).unwrap();
        let n2 = derivative(n.as_field(), 2).unwrap();
        let curvature_mass = integrate(&ScalarField::new(
            grid,
            n2.values.iter().map(|v| v.abs()).collect(),
        )
        .unwrap());
        let bound = 2.0 * p.diffusion * dt * curvature_mass;
        assert!(l1 <= bound, "L1 {l1} above heat bound {bound}");
        assert!(l1 >= bound / 8.0, "L1 {l1} suspiciously small vs {bound}");
    }

    #[test]
    fn stationary_state_is_a_propagate_fixed_point() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n = quasi_eigenstate(0, &p, grid).unwrap().density;
        let k = kernel_zero(&n, &harmonic(), &p, 0.1, &KernelOptions::default()).unwrap();
        let out = propagate(&n, &k).unwrap();
        let l1 = l1_distance(&out, &n).unwrap();
        assert!(l1 < 1e-4, "stationary state moved by {l1}");
    }

    #[test]
    fn refine_of_an_unmoved_density_is_identity() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n = quasi_eigenstate(0, &p, grid).unwrap().density;
        let k0 = kernel_zero(&n, &harmonic(), &p, 0.1, &KernelOptions::default()).unwrap();
        let k1 = refine(&k0, &n, &harmonic(), &p).unwrap();
        assert_eq!(k1.order, 1);
        assert!(k0.sup_distance(&k1).unwrap() <= 1e-6);
    }

    #[test]
    fn refine_contracts_the_self_consistency_residual() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n0 = gaussian(grid, 1.0, v_star(&p));
        let dt = 0.5;
        let cutoff = PTF_SUPPORT_TOL * n0.max_value();

        let k0 = kernel_zero(&n0, &harmonic(), &p, dt, &KernelOptions::default()).unwrap();
        let pred0 = propagate(&n0, &k0).unwrap();
        let d0 = solver_drift(&pred0, &harmonic(), &p).unwrap();
        let r0 = sup_diff_on_support(&d0, k0.drift(), &n0, cutoff);

        let k1 = refine(&k0, &pred0, &harmonic(), &p).unwrap();
        let pred1 = propagate(&n0, &k1).unwrap();
        let d1 = solver_drift(&pred1, &harmonic(), &p).unwrap();
        let r1 = sup_diff_on_support(&d1, k1.drift(), &n0, cutoff);

        assert!(r1 <= 0.5 * r0, "residual {r0} -> {r1}, less than 2x reduction");
    }

    #[test]
    fn step_converges_on_the_stationary_state() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n = quasi_eigenstate(0, &p, grid).unwrap().density;
        let out = step(
            &n,
            &harmonic(),
            &p,
            0.1,
            PTF_DEFAULT_TOL,
            PTF_DEFAULT_MAX_REFINE,
            &KernelOptions::default(),
        )
        .unwrap();
        let l1 = l1_distance(&out.density, &n).unwrap();
        assert!(l1 < 1e-4, "step moved the stationary state by {l1}");
        assert!(out.converged, "drift norms: {:?}", out.drift_norms);
        assert!(out.iterations <= 4, "took {} kernel builds", out.iterations);
        // norms fall monotonically once the refinement starts
        for w in out.drift_norms.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn infinite_tolerance_is_the_zero_order_scheme() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n = gaussian(grid, 1.0, v_star(&p));
        let opts = KernelOptions::default();
        let out =
            step(&n, &harmonic(), &p, 0.1, f64::INFINITY, PTF_DEFAULT_MAX_REFINE, &opts)
                .unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert_eq!(out.drift_norms.len(), 1);
        let k = kernel_zero(&n, &harmonic(), &p, 0.1, &opts).unwrap();
        let zero_order = propagate(&n, &k).unwrap();
        assert_eq!(out.density.values(), zero_order.values());
    }

    #[test]
    fn small_diffusion_step_is_immediate() {
        // D = theta/2 = 1e-6; the state is indistinguishable from the pure
        // ground state and the long kernel step barely moves it
        let p = natural(2e-6, 0.1);
        let grid = Grid1D::default_grid();
        let n = gaussian(grid, 0.0, v_star(&p));
        let out = step(
            &n,
            &harmonic(),
            &p,
            1200.0,
            PTF_DEFAULT_TOL,
            PTF_DEFAULT_MAX_REFINE,
            &KernelOptions::default(),
        )
        .unwrap();
        assert!(out.converged, "drift norms: {:?}", out.drift_norms);
        assert!(out.iterations <= 2, "took {} kernel builds", out.iterations);
        let l1 = l1_distance(&out.density, &n).unwrap();
        assert!(l1 < 1e-3, "near-deterministic step moved the state by {l1}");
    }

    #[test]
    fn evolve_keeps_the_first_excited_quasi_state() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n1 = quasi_eigenstate(1, &p, grid).unwrap().density;
        let t_end = 20.0 / p.beta;
        let opts = EvolveOptions { tol: 1e-6, save_every: 100, ..Default::default() };
        let rec = evolve(&n1, &harmonic(), &p, 0.1, t_end, PTF_DEFAULT_STATIONARY_EPS, &opts)
            .unwrap();
        let drift = (rec.final_density.variance() / n1.variance() - 1.0).abs();
        assert!(drift < 0.01, "variance drifted by {drift}");
    }

    #[test]
    fn evolve_relaxes_a_displaced_gaussian() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n0 = gaussian(grid, 1.0, v_star(&p));
        let target = quasi_eigenstate(0, &p, grid).unwrap().density;
        let opts = EvolveOptions { tol: 1e-6, save_every: 50, ..Default::default() };
        let rec = evolve(&n0, &harmonic(), &p, 0.1, 20.0, PTF_DEFAULT_STATIONARY_EPS, &opts)
            .unwrap();
        let l1 = l1_distance(&rec.final_density, &target).unwrap();
        assert!(l1 <= 0.02, "relaxed state is {l1} from the stationary one");
        assert!(rec.iterations.iter().all(|&it| it <= opts.max_refine));
        // within a step the refinement norms should almost always decrease
        let monotone = rec
            .drift_norms
            .iter()
            .filter(|ns| ns.windows(2).all(|w| w[1] <= w[0]))
            .count();
        assert!(
            monotone * 10 >= rec.drift_norms.len() * 9,
            "{monotone} of {} steps monotone",
            rec.drift_norms.len()
        );
    }

    #[test]
    fn zero_time_or_zero_friction_returns_the_input() {
        let grid = Grid1D::default_grid();
        let p = natural(0.05, 0.1);
        let n0 = gaussian(grid, 1.0, 0.5);
        let rec = evolve(
            &n0,
            &harmonic(),
            &p,
            0.1,
            0.0,
            PTF_DEFAULT_STATIONARY_EPS,
            &EvolveOptions::default(),
        )
        .unwrap();
        assert_eq!(rec.steps, 0);
        assert_eq!(rec.snapshots.len(), 1);
        assert_eq!(rec.final_density.values(), n0.values());

        // theta > 0 with gamma = 0 leaves diffusion but no friction: the
        // overdamped flow is undefined and the state is frozen
        let frictionless = natural(0.05, 0.0);
        assert_eq!(frictionless.beta, 0.0);
        let rec = evolve(
            &n0,
            &harmonic(),
            &frictionless,
            0.1,
            5.0,
            PTF_DEFAULT_STATIONARY_EPS,
            &EvolveOptions::default(),
        )
        .unwrap();
        assert_eq!(rec.steps, 0);
        assert_eq!(rec.final_density.values(), n0.values());
        assert!(!rec.stationary);
    }

    #[test]
    fn propagate_conserves_mass_and_positivity() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::new(-8.0, 8.0, 512).unwrap();
        let n = quasi_eigenstate(0, &p, grid).unwrap().density;
        let k = kernel_zero(&n, &harmonic(), &p, 0.1, &KernelOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a1: f64 = rng.gen_range(0.0..1.0);
            let a2: f64 = rng.gen_range(0.0..1.0);
            let k1: f64 = rng.gen_range(0.5..2.0);
            let k2: f64 = rng.gen_range(0.5..2.0);
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let smooth = DensityField::from_fn_normalized(grid, |q| {
                (a1 * (k1 * q + ph).sin() + a2 * (k2 * q).cos() - q * q / 8.0).exp()
            })
            .unwrap();
            let out = propagate(&smooth, &k).unwrap();
            assert!((out.integral() - 1.0).abs() < 1e-9);
            assert!(out.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn deterministic_limit_concentrates_the_columns() {
        let grid = Grid1D::new(-8.0, 8.0, 8192).unwrap();
        let dt = 0.5;
        let mut last_std = f64::INFINITY;
        for &theta in &[2e-2, 2e-3, 2e-4] {
            let p = natural(theta, 0.1);
            let n = gaussian(grid, 0.0, v_star(&p));
            let k = kernel_zero(&n, &harmonic(), &p, dt, &KernelOptions::default()).unwrap();
            let sigma = (2.0 * p.diffusion * dt).sqrt();
            let mut worst_std = 0.0f64;
            for &q in &[-2.0, -0.5, 1.0, 1.75] {
                let src = grid.nearest_index(q);
                let want = grid.q(src) + k.drift().values[src] * dt;
                assert!((k.column_mean(src) - want).abs() < 1e-3 * sigma);
                worst_std = worst_std.max((k.column_std(src) / sigma - 1.0).abs());
            }
            assert!(worst_std < 0.01, "column std off by {worst_std} at theta {theta}");
            let this_std = k.column_std(grid.nearest_index(0.0));
            assert!(this_std < last_std);
            last_std = this_std;
        }
    }

    #[test]
    fn halving_the_step_keeps_the_stationary_density() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n0 = gaussian(grid, 1.0, v_star(&p));
        let opts = EvolveOptions { tol: 1e-6, save_every: 1000, ..Default::default() };
        let coarse =
            evolve(&n0, &harmonic(), &p, 0.2, 12.0, PTF_DEFAULT_STATIONARY_EPS, &opts).unwrap();
        let fine =
            evolve(&n0, &harmonic(), &p, 0.1, 12.0, PTF_DEFAULT_STATIONARY_EPS, &opts).unwrap();
        let l1 = l1_distance(&coarse.final_density, &fine.final_density).unwrap();
        assert!(l1 <= 1e-3, "dt halving moved the final state by {l1}");
    }

    #[test]
    fn kernel_and_langevin_relaxations_agree() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::default_grid();
        let n0 = gaussian(grid, 1.0, v_star(&p));
        let t_end = 10.0;

        let opts = EvolveOptions { tol: 1e-6, save_every: 100, ..Default::default() };
        let rec = evolve(&n0, &harmonic(), &p, 0.1, t_end, 0.0, &opts).unwrap();

        let sde_opts = crate::sde::SimOptions::default();
        let run = crate::sde::simulate_mean_field(
            &n0,
            &harmonic(),
            &p,
            100_000,
            t_end,
            0.01,
            41,
            &sde_opts,
        )
        .unwrap();

        let l1 = l1_distance(&rec.final_density, &run.final_state.density).unwrap();
        assert!(l1 <= 0.05, "kernel vs ensemble distance {l1}");
    }

    #[test]
    fn record_round_trips_through_a_directory() {
        let p = natural(0.05, 0.1);
        let grid = Grid1D::new(-8.0, 8.0, 512).unwrap();
        let n0 = gaussian(grid, 0.5, v_star(&p));
        let opts = EvolveOptions { tol: 1e-6, save_every: 5, ..Default::default() };
        let rec =
            evolve(&n0, &harmonic(), &p, 0.1, 1.0, PTF_DEFAULT_STATIONARY_EPS, &opts).unwrap();

        let dir = tempfile::tempdir().unwrap();
        rec.write_dir(dir.path(), &[("theta".into(), p.theta.to_string())]).unwrap();

        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["steps"].as_u64().unwrap() as usize, rec.steps);
        let files = manifest["snapshots"].as_array().unwrap();
        assert_eq!(files.len(), rec.snapshots.len());

        let first = files[0]["file"].as_str().unwrap();
        let (field, meta) = crate::numerics::read_csv(&dir.path().join(first)).unwrap();
        assert_eq!(field.grid.n_points, grid.n_points);
        let peak_cell = grid.nearest_index(0.5);
        assert!((field.values[peak_cell] - rec.snapshots[0].density.values()[peak_cell]).abs()
            < 1e-12);
        assert!(meta.iter().any(|(k, v)| k == "theta" && v == &p.theta.to_string()));

        // audit dump: allowed at 512 points, refused on the default grid
        let k = kernel_zero(&n0, &harmonic(), &p, 0.1, &KernelOptions::default()).unwrap();
        let path = dir.path().join("kernel.csv");
        k.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows = text.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 512);

        let big = quasi_eigenstate(0, &p, Grid1D::default_grid()).unwrap().density;
        let kb =
            kernel_zero(&big, &harmonic(), &p, 0.1, &KernelOptions::default()).unwrap();
        assert!(matches!(kb.write_csv(&path), Err(QhError::InvalidGrid(_))));
    }
}
