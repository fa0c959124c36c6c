//! Uniform symmetric grids and the sampled functions that live on them.
//!
//! Every field in the laboratory (the physical solution `u`, the rescaled
//! solution `v`, its gauge `w`, the fluctuation `xi`) is a [`GridFunction`] on
//! a [`Grid`] whose nodes are symmetric about the origin. Nodes are generated as
//! `k * h` for signed integers `k`, so mirrored nodes are exact negations of each
//! other and even functions can be stored bit-exactly even.

use std::io::{BufRead, Write};

use crate::error::{invalid, QuenchError, Result};
use crate::par::{map_range, Execution};

/// Uniform grid on `[-L, L]` with an odd number of nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    half_width: f64,
    n_points: usize,
}

impl Grid {
    pub fn new(half_width: f64, n_points: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(invalid("half_width", format!("must be positive, got {half_width}")));
        }
        if n_points < 3 || n_points % 2 == 0 {
            return Err(invalid(
                "n_points",
                format!("must be odd and at least 3, got {n_points}"),
            ));
        }
        Ok(Self {
            half_width,
            n_points,
        })
    }

    /// Grid with spacing as close as possible to `h` (rounded to an odd node count).
    pub fn with_spacing(half_width: f64, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(invalid("h", format!("must be positive, got {h}")));
        }
        let cells_half = (half_width / h).round().max(1.0) as usize;
        Self::new(half_width, 2 * cells_half + 1)
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.n_points - 1) as f64
    }

    /// Index of the node at the origin.
    pub fn center(&self) -> usize {
        (self.n_points - 1) / 2
    }

    pub fn node(&self, i: usize) -> f64 {
        self.signed_node(i as isize - self.center() as isize)
    }

    /// Position of the lattice point `k * h` (may lie outside the grid).
    pub fn signed_node(&self, k: isize) -> f64 {
        k as f64 * self.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.node(i)).collect()
    }

    /// Same node count on `[-factor L, factor L]`.
    pub fn dilate(&self, factor: f64) -> Result<Self> {
        Self::new(self.half_width * factor, self.n_points)
    }

    pub fn contains(&self, x: f64) -> bool {
        x.abs() <= self.half_width * (1.0 + 1e-12)
    }
}

/// Japanese bracket `<y> = (1 + y^2)^{1/2}`.
#[inline]
pub fn bracket(y: f64) -> f64 {
    (1.0 + y * y).sqrt()
}

/// How a function is continued beyond the ends of its grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Extension {
    /// Continue by the boundary value.
    #[default]
    Constant,
    /// Continue by the straight line through the two outermost nodes.
    Linear,
}

/// Values sampled on every node of a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(QuenchError::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.node(i))).collect();
        Self { grid, values }
    }

    /// Samples `f` on the nonnegative half and mirrors, so the result is exactly even.
    pub fn from_even_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let c = grid.center();
        let mut values = vec![0.0; grid.len()];
        for k in 0..=c {
            let v = f(grid.node(c + k));
            values[c + k] = v;
            values[c - k] = v;
        }
        Self { grid, values }
    }

    /// Builds an exactly even function from its values on nodes `0, h, ..., L`.
    pub fn from_half(grid: Grid, half: &[f64]) -> Result<Self> {
        let c = grid.center();
        if half.len() != c + 1 {
            return Err(QuenchError::GridMismatch(format!(
                "{} half values for a grid with {} nonnegative nodes",
                half.len(),
                c + 1
            )));
        }
        let mut values = vec![0.0; grid.len()];
        for (k, &v) in half.iter().enumerate() {
            values[c + k] = v;
            values[c - k] = v;
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Values on nodes `0, h, ..., L`.
    pub fn half(&self) -> &[f64] {
        &self.values[self.grid.center()..]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise `f(y, value)`.
    pub fn map_with_node(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(self.grid.node(i), v))
            .collect();
        Self {
            grid: self.grid,
            values,
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            grid: self.grid,
            values,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            return Err(QuenchError::GridMismatch(format!(
                "{:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(QuenchError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn check_positive(&self) -> Result<()> {
        match self.values.iter().position(|&v| !(v > 0.0)) {
            Some(index) => Err(QuenchError::NonPositive {
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }

    /// First node where `f(x) != f(-x)` exactly, if any.
    pub fn even_defect(&self) -> Option<usize> {
        let n = self.len();
        (0..n / 2).find(|&i| self.values[i] != self.values[n - 1 - i])
    }

    pub fn is_even(&self) -> bool {
        self.even_defect().is_none()
    }

    pub fn check_even(&self) -> Result<()> {
        match self.even_defect() {
            Some(index) => Err(QuenchError::NotEven { index }),
            None => Ok(()),
        }
    }

    /// Odd part `(f(x) - f(-x)) / 2`.
    pub fn odd_part(&self) -> Self {
        let n = self.len();
        let values = (0..n)
            .map(|i| 0.5 * (self.values[i] - self.values[n - 1 - i]))
            .collect();
        Self {
            grid: self.grid,
            values,
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `sup_y <y>^{-n} e^{a y^2/4} |f(y)|`, evaluated in log space.
    pub fn weighted_sup_norm(&self, n: f64, gauge: f64) -> Result<f64> {
        if !(n >= 0.0 && n.is_finite()) {
            return Err(invalid("n", format!("weight exponent must be nonnegative, got {n}")));
        }
        if !(gauge >= 0.0 && gauge.is_finite()) {
            return Err(invalid("gauge", format!("must be nonnegative, got {gauge}")));
        }
        self.check_finite()?;
        let mut sup: f64 = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let y = self.grid.node(i);
            let log_w = -0.5 * n * (1.0 + y * y).ln() + 0.25 * gauge * y * y + v.abs().ln();
            sup = sup.max(log_w.exp());
        }
        Ok(sup)
    }

    /// Composite trapezoid approximation of `∫ f g dy`.
    pub fn inner_product(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(trapezoid_dot(&self.values, &other.values, self.grid.spacing()))
    }

    /// Composite trapezoid approximation of `∫ f dy`.
    pub fn integral(&self) -> f64 {
        let n = self.values.len();
        let h = self.grid.spacing();
        let inner: f64 = self.values[1..n - 1].iter().sum();
        h * (inner + 0.5 * (self.values[0] + self.values[n - 1]))
    }

    pub fn l2_norm(&self) -> f64 {
        trapezoid_dot(&self.values, &self.values, self.grid.spacing()).sqrt()
    }

    /// Second-order central difference; one-sided four-point stencils at the ends.
    pub fn laplacian(&self) -> Result<Self> {
        let n = self.len();
        if n < 4 {
            return Err(invalid("grid", "laplacian needs at least 4 nodes"));
        }
        let h2 = self.grid.spacing().powi(2);
        let f = &self.values;
        let mut out = vec![0.0; n];
        for i in 1..n - 1 {
            out[i] = (f[i - 1] - 2.0 * f[i] + f[i + 1]) / h2;
        }
        out[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h2;
        out[n - 1] = (2.0 * f[n - 1] - 5.0 * f[n - 2] + 4.0 * f[n - 3] - f[n - 4]) / h2;
        Ok(Self {
            grid: self.grid,
            values: out,
        })
    }

    /// Value at lattice index `k` (signed, relative to the origin), continued
    /// past the ends according to `ext`.
    pub fn extended_value(&self, k: isize, ext: Extension) -> f64 {
        let c = self.grid.center() as isize;
        let n = self.len() as isize;
        let i = k + c;
        if (0..n).contains(&i) {
            return self.values[i as usize];
        }
        let (end, inner, steps) = if i < 0 {
            (self.values[0], self.values[1], -i)
        } else {
            (
                self.values[(n - 1) as usize],
                self.values[(n - 2) as usize],
                i - (n - 1),
            )
        };
        match ext {
            Extension::Constant => end,
            Extension::Linear => end + steps as f64 * (end - inner),
        }
    }

    /// Four-point Lagrange interpolation at `x`; the stencil is shifted inward
    /// near the ends. Points outside the grid are rejected.
    pub fn interpolate(&self, x: f64) -> Result<f64> {
        if !self.grid.contains(x) {
            return Err(QuenchError::OutOfRange(format!(
                "x = {x} outside [-{L}, {L}]",
                L = self.grid.half_width()
            )));
        }
        let h = self.grid.spacing();
        let n = self.len();
        let s = (x + self.grid.half_width()) / h;
        let j = (s.floor() as isize).clamp(0, n as isize - 2) as usize;
        let start = j.saturating_sub(1).min(n - 4);
        let t = s - start as f64;
        let f = &self.values[start..start + 4];
        // Lagrange basis on local nodes 0, 1, 2, 3.
        let l0 = -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0;
        let l1 = t * (t - 2.0) * (t - 3.0) / 2.0;
        let l2 = -t * (t - 1.0) * (t - 3.0) / 2.0;
        let l3 = t * (t - 1.0) * (t - 2.0) / 6.0;
        Ok(l0 * f[0] + l1 * f[1] + l2 * f[2] + l3 * f[3])
    }

    /// `e^{t ∂²} f` with the standard kernel `(4πt)^{-1/2} e^{-(x-y)^2/(4t)}`;
    /// `f` is continued past the grid by its boundary value.
    pub fn heat_convolve(&self, t: f64) -> Result<Self> {
        self.heat_convolve_with(t, Extension::Constant, Execution::default())
    }

    pub fn heat_convolve_with(&self, t: f64, ext: Extension, exec: Execution) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid("t", format!("heat time must be positive, got {t}")));
        }
        Ok(gaussian_average(self, 1.0, 2.0 * t, ext, exec))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "y,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", self.grid.node(i), v)?;
        }
        Ok(())
    }

    /// Reads the `y,value` format written by [`GridFunction::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut ys = Vec::new();
        let mut vals = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| QuenchError::GridMismatch(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (lineno == 0 && line == "y,value") {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| {
                    QuenchError::GridMismatch(format!("malformed csv line {}", lineno + 1))
                })
            };
            ys.push(parse(parts.next())?);
            vals.push(parse(parts.next())?);
        }
        if ys.len() < 3 {
            return Err(QuenchError::GridMismatch("too few rows".into()));
        }
        let grid = Grid::new(*ys.last().unwrap(), ys.len())?;
        for (i, &y) in ys.iter().enumerate() {
            if (y - grid.node(i)).abs() > 1e-9 * (1.0 + y.abs()) {
                return Err(QuenchError::GridMismatch(format!(
                    "row {i}: node {y} is not on a uniform symmetric grid"
                )));
            }
        }
        GridFunction::new(grid, vals)
    }
}

/// Thomas algorithm for `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
/// `lower[0]` and `upper[n-1]` are ignored. Returns `None` on a zero pivot.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot == 0.0 {
        return None;
    }
    c[0] = upper[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return None;
        }
        c[i] = if i + 1 < n { upper[i] / pivot } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

pub(crate) fn trapezoid_dot(a: &[f64], b: &[f64], h: f64) -> f64 {
    let n = a.len();
    let mut s = 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1]);
    for i in 1..n - 1 {
        s += a[i] * b[i];
    }
    h * s
}

/// Standard normal CDF.
#[inline]
fn phi_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(z)` without cancellation.
#[inline]
fn phi_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

#[inline]
fn phi_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Half-width of the kernel window in standard deviations.
const KERNEL_CLIP: f64 = 8.0;

/// Below this ratio of kernel width to grid spacing the lattice sum is replaced
/// by exact integration against the piecewise-linear interpolant.
const RESOLVED_WIDTH: f64 = 1.5;

/// `out(x_i) = ∫ N(y; scale x_i, variance) F(y) dy`, where `F` is `f` continued
/// past the grid by `ext`.
///
/// Covers both the free heat semigroup (`scale = 1`, `variance = 2t`) and the
/// Ornstein-Uhlenbeck transition kernel used by the Mehler propagator.
pub fn gaussian_average(
    f: &GridFunction,
    scale: f64,
    variance: f64,
    ext: Extension,
    exec: Execution,
) -> GridFunction {
    let grid = *f.grid();
    let h = grid.spacing();
    let s = variance.max(0.0).sqrt();
    let values = if s >= RESOLVED_WIDTH * h {
        let norm = h / (2.0 * std::f64::consts::PI * variance).sqrt();
        map_range(grid.len(), exec, |i| {
            let m = scale * grid.node(i);
            let lo = ((m - KERNEL_CLIP * s) / h).floor() as isize;
            let hi = ((m + KERNEL_CLIP * s) / h).ceil() as isize;
            let mut acc = 0.0;
            for k in lo..=hi {
                let d = grid.signed_node(k) - m;
                acc += (-0.5 * d * d / variance).exp() * f.extended_value(k, ext);
            }
            norm * acc
        })
    } else {
        map_range(grid.len(), exec, |i| {
            piecewise_linear_average(f, scale * grid.node(i), s, ext)
        })
    };
    GridFunction { grid, values }
}

/// Exact Gaussian average of the piecewise-linear interpolant of `f`.
fn piecewise_linear_average(f: &GridFunction, m: f64, s: f64, ext: Extension) -> f64 {
    let grid = f.grid();
    let h = grid.spacing();
    let c = grid.center() as isize;
    let n = f.len() as isize;
    let l = grid.half_width();
    if s == 0.0 {
        return if m.abs() <= l {
            linear_interp(f, m)
        } else {
            tail_value(f, m, ext)
        };
    }
    let lo_x = (m - KERNEL_CLIP * s).max(-l);
    let hi_x = (m + KERNEL_CLIP * s).min(l);
    let mut acc = 0.0;
    if lo_x < hi_x {
        let k_lo = ((lo_x / h).floor() as isize).max(-c);
        let k_hi = ((hi_x / h).ceil() as isize).min(c);
        for k in k_lo..k_hi {
            let y0 = grid.signed_node(k);
            let f0 = f.values[(k + c) as usize];
            let f1 = f.values[(k + 1 + c) as usize];
            let z0 = (y0 - m) / s;
            let z1 = (y0 + h - m) / s;
            let mass = if z0 > 0.0 {
                phi_tail(z0) - phi_tail(z1)
            } else {
                phi_cdf(z1) - phi_cdf(z0)
            };
            // ∫ N(y) (y - y0) dy over the cell.
            let first = s * (phi_pdf(z0) - phi_pdf(z1)) + (m - y0) * mass;
            acc += f0 * mass + (f1 - f0) / h * first;
        }
    }
    // Tails beyond ±L, integrated against the continuation.
    let right_end = f.values[(n - 1) as usize];
    let right_slope = match ext {
        Extension::Constant => 0.0,
        Extension::Linear => (right_end - f.values[(n - 2) as usize]) / h,
    };
    let zr = (l - m) / s;
    acc += right_end * phi_tail(zr) + right_slope * (s * phi_pdf(zr) + (m - l) * phi_tail(zr));
    let left_end = f.values[0];
    let left_slope = match ext {
        Extension::Constant => 0.0,
        Extension::Linear => (f.values[1] - left_end) / h,
    };
    let zl = (-l - m) / s;
    // ∫_{-∞}^{-L} N(y) (left_end + left_slope (y + L)) dy
    let mass_l = phi_cdf(zl);
    let first_l = -s * phi_pdf(zl) + (m + l) * mass_l;
    acc += left_end * mass_l + left_slope * first_l;
    acc
}

fn linear_interp(f: &GridFunction, x: f64) -> f64 {
    let grid = f.grid();
    let h = grid.spacing();
    let s = (x + grid.half_width()) / h;
    let j = (s.floor() as usize).min(f.len() - 2);
    let t = s - j as f64;
    f.values[j] * (1.0 - t) + f.values[j + 1] * t
}

fn tail_value(f: &GridFunction, x: f64, ext: Extension) -> f64 {
    let grid = f.grid();
    let h = grid.spacing();
    let n = f.len();
    let l = grid.half_width();
    let (end, inner, dist) = if x > 0.0 {
        (f.values[n - 1], f.values[n - 2], x - l)
    } else {
        (f.values[0], f.values[1], -x - l)
    };
    match ext {
        Extension::Constant => end,
        Extension::Linear => end + (end - inner) / h * dist,
    }
}
