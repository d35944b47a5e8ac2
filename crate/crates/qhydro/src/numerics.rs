//! Uniform 1-D grids, sampled fields and the small calculus kit the rest of
//! the crate is built on: trapezoid quadrature, second-order finite
//! differences, density normalization, and a plain CSV exchange format.

use crate::error::{QhError, Result};
use std::io::{BufRead, Write};
use std::path::Path;

/// Relative floor applied before taking logarithms of a density.
pub const EPS_LOG: f64 = 1e-30;

/// Uniform grid on [q_min, q_max].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub q_min: f64,
    pub q_max: f64,
    pub n_points: usize,
}

impl Grid1D {
    pub fn new(q_min: f64, q_max: f64, n_points: usize) -> Result<Self> {
        if !(q_min.is_finite() && q_max.is_finite()) || q_min >= q_max {
            return Err(QhError::InvalidGrid(format!(
                "need finite q_min < q_max, got [{q_min}, {q_max}]"
            )));
        }
        if n_points < 8 {
            return Err(QhError::InvalidGrid(format!(
                "need at least 8 points, got {n_points}"
            )));
        }
        Ok(Grid1D { q_min, q_max, n_points })
    }

    /// Default working grid: [-8, 8] with 2048 nodes.
    pub fn default_grid() -> Self {
        Grid1D { q_min: -8.0, q_max: 8.0, n_points: 2048 }
    }

    pub fn dq(&self) -> f64 {
        (self.q_max - self.q_min) / (self.n_points - 1) as f64
    }

    /// Node position. Written as a convex combination so that symmetric
    /// grids (q_min = -q_max) are exactly antisymmetric in floating point.
    pub fn q(&self, i: usize) -> f64 {
        let n1 = (self.n_points - 1) as f64;
        (self.q_min * (n1 - i as f64) + self.q_max * i as f64) / n1
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.q(i)).collect()
    }

    /// Index of the node nearest to x, clamped to the grid.
    pub fn nearest_index(&self, x: f64) -> usize {
        let t = (x - self.q_min) / self.dq();
        let i = t.round();
        if i <= 0.0 {
            0
        } else if i >= (self.n_points - 1) as f64 {
            self.n_points - 1
        } else {
            i as usize
        }
    }

    fn check_same(&self, other: &Grid1D) -> Result<()> {
        if self != other {
            return Err(QhError::GridMismatch(format!(
                "[{}, {}] x {} vs [{}, {}] x {}",
                self.q_min, self.q_max, self.n_points, other.q_min, other.q_max, other.n_points
            )));
        }
        Ok(())
    }
}

/// Real-valued field sampled on a grid. Masked nodes are carried as NaN.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Grid1D,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points {
            return Err(QhError::InvalidGrid(format!(
                "field length {} does not match grid with {} points",
                values.len(),
                grid.n_points
            )));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n_points).map(|i| f(grid.q(i))).collect();
        ScalarField { grid, values }
    }

    pub fn zeros(grid: Grid1D) -> Self {
        ScalarField { grid, values: vec![0.0; grid.n_points] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest |value| over non-NaN nodes (masked nodes are NaN).
    pub fn max_abs_finite(&self) -> f64 {
        self.values.iter().filter(|v| !v.is_nan()).fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn count_masked(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Linear interpolation at x; clamps outside the grid to the edge values.
    pub fn interp(&self, x: f64) -> f64 {
        let n = self.grid.n_points;
        let dq = self.grid.dq();
        let t = (x - self.grid.q_min) / dq;
        if t <= 0.0 {
            return self.values[0];
        }
        if t >= (n - 1) as f64 {
            return self.values[n - 1];
        }
        let i = t.floor() as usize;
        let w = t - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

/// Central differences in the interior, one-sided second-order stencils at
/// the boundaries. `order` is 1 or 2.
pub fn derivative(field: &ScalarField, order: u32) -> Result<ScalarField> {
    let n = field.grid.n_points;
    let dq = field.grid.dq();
    let f = &field.values;
    let mut out = vec![0.0; n];
    match order {
        1 => {
            out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dq);
            for i in 1..n - 1 {
                out[i] = (f[i + 1] - f[i - 1]) / (2.0 * dq);
            }
            out[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * dq);
        }
        2 => {
            let dq2 = dq * dq;
            out[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / dq2;
            for i in 1..n - 1 {
                out[i] = (f[i + 1] - 2.0 * f[i] + f[i - 1]) / dq2;
            }
            out[n - 1] = (2.0 * f[n - 1] - 5.0 * f[n - 2] + 4.0 * f[n - 3] - f[n - 4]) / dq2;
        }
        _ => {
            return Err(QhError::InvalidParams(format!(
                "derivative order must be 1 or 2, got {order}"
            )))
        }
    }
    ScalarField::new(field.grid, out)
}

/// Trapezoid rule over the whole grid.
pub fn integrate(field: &ScalarField) -> f64 {
    trapezoid(&field.values, field.grid.dq())
}

pub fn trapezoid(values: &[f64], dq: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..n - 1].iter().sum();
    dq * (inner + 0.5 * (values[0] + values[n - 1]))
}

/// Cumulative trapezoid integral from the left edge; out[0] = 0.
pub fn cumulative_trapezoid(values: &[f64], dq: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for i in 1..values.len() {
        out[i] = out[i - 1] + 0.5 * dq * (values[i] + values[i - 1]);
    }
    out
}

/// Normalized probability density on a grid.
#[derive(Debug, Clone)]
pub struct DensityField {
    field: ScalarField,
}

/// What `normalize` saw before rescaling.
#[derive(Debug, Clone, Copy)]
pub struct NormalizeReport {
    pub raw_integral: f64,
    /// Raw integral below 0.999: the grid is clipping real mass.
    pub truncated: bool,
}

impl DensityField {
    /// Rescale a nonnegative field to unit integral. Values more negative
    /// than rounding noise are rejected; tiny negatives are clamped to 0.
    pub fn normalize(mut field: ScalarField) -> Result<(Self, NormalizeReport)> {
        let max = field.max_abs();
        if !max.is_finite() {
            return Err(QhError::BadDensity("non-finite values".into()));
        }
        let neg_tol = -1e-12 * max;
        for v in field.values.iter_mut() {
            if *v < neg_tol {
                return Err(QhError::BadDensity(format!("negative value {v}")));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let raw = integrate(&field);
        if !(raw > 0.0) {
            return Err(QhError::BadDensity(format!("integral {raw}")));
        }
        for v in field.values.iter_mut() {
            *v /= raw;
        }
        let report = NormalizeReport { raw_integral: raw, truncated: raw < 0.999 };
        Ok((DensityField { field }, report))
    }

    pub fn from_fn_normalized(grid: Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        let (d, _) = Self::normalize(ScalarField::from_fn(grid, f))?;
        Ok(d)
    }

    pub fn grid(&self) -> Grid1D {
        self.field.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.field.values
    }

    pub fn as_field(&self) -> &ScalarField {
        &self.field
    }

    pub fn integral(&self) -> f64 {
        integrate(&self.field)
    }

    pub fn max_value(&self) -> f64 {
        self.field.max_value()
    }

    pub fn mean(&self) -> f64 {
        let g = self.grid();
        let weighted: Vec<f64> =
            (0..g.n_points).map(|i| g.q(i) * self.field.values[i]).collect();
        trapezoid(&weighted, g.dq())
    }

    /// Raw second moment <q^2>.
    pub fn second_moment(&self) -> f64 {
        let g = self.grid();
        let weighted: Vec<f64> =
            (0..g.n_points).map(|i| g.q(i) * g.q(i) * self.field.values[i]).collect();
        trapezoid(&weighted, g.dq())
    }

    /// Statistical variance <q^2> - <q>^2.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.second_moment() - m * m
    }

    /// ln n with the relative floor EPS_LOG (tails never reach -inf).
    pub fn log_floored(&self) -> ScalarField {
        let floor = EPS_LOG * self.max_value();
        let values = self.field.values.iter().map(|&v| v.max(floor).ln()).collect();
        ScalarField { grid: self.grid(), values }
    }
}

pub fn l1_distance(a: &DensityField, b: &DensityField) -> Result<f64> {
    a.grid().check_same(&b.grid())?;
    let diff: Vec<f64> =
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).collect();
    Ok(trapezoid(&diff, a.grid().dq()))
}

/// Bhattacharyya overlap, 1 for identical densities.
pub fn bhattacharyya(a: &DensityField, b: &DensityField) -> Result<f64> {
    a.grid().check_same(&b.grid())?;
    let prod: Vec<f64> =
        a.values().iter().zip(b.values()).map(|(x, y)| (x * y).max(0.0).sqrt()).collect();
    Ok(trapezoid(&prod, a.grid().dq()))
}

/// Write a field as CSV: `# key: value` header lines, then `q,value` rows.
/// Floats are printed with Rust's shortest round-trip formatting.
pub fn write_csv(
    path: &Path,
    field: &ScalarField,
    metadata: &[(String, String)],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in metadata {
        writeln!(out, "# {k}: {v}")?;
    }
    writeln!(out, "q,value")?;
    for i in 0..field.grid.n_points {
        writeln!(out, "{},{}", field.grid.q(i), field.values[i])?;
    }
    Ok(())
}

/// Read a `q,value` CSV written by `write_csv`. The grid is reconstructed
/// from the first/last q and the row count.
pub fn read_csv(path: &Path) -> Result<(ScalarField, Vec<(String, String)>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut metadata = Vec::new();
    let mut qs: Vec<f64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for line in file.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                metadata.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        if line.starts_with("q,") {
            continue; // column header
        }
        let (qs_str, vs_str) = line
            .split_once(',')
            .ok_or_else(|| QhError::Parse(format!("bad csv row: {line}")))?;
        qs.push(
            qs_str.trim().parse::<f64>().map_err(|e| QhError::Parse(format!("{e}: {line}")))?,
        );
        values.push(
            vs_str.trim().parse::<f64>().map_err(|e| QhError::Parse(format!("{e}: {line}")))?,
        );
    }
    if qs.len() < 8 {
        return Err(QhError::Parse(format!("only {} data rows", qs.len())));
    }
    let grid = Grid1D::new(qs[0], *qs.last().unwrap(), qs.len())?;
    Ok((ScalarField::new(grid, values)?, metadata))
}
