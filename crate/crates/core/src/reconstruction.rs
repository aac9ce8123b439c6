//! Guided depth super-resolution and inpainting.
//!
//! The high-resolution depth map `s` minimizes
//!
//! ```text
//! lambda * sum_j log(1 + nu (c_j^2 + (Omega_D^F s)_j^2)) + d_E(A s, y)
//! ```
//!
//! where `c = Omega_I^F s_I` is the fixed analysis of the intensity image, `A`
//! blurs, decimates and drops unmeasured entries, and `d_E` is either the
//! squared Euclidean distance or a diagonal Mahalanobis distance. `lambda` is
//! decreased over a few stages, each solved by warm-started nonlinear CG.

use std::cell::Cell;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use crate::error::{check_len, Error, Result};
use crate::imaging::{interpolate, DepthMap, GrayImage, Interpolation, GRAY_LEVELS};
use crate::manifold::{cg_minimize_line, CgConfig, LineObjective};
use crate::operator::{apply_global, apply_global_adjoint, CoefficientStack, OperatorPair};
use crate::plane::{reflect, Plane};
use crate::scalar::Real;
use rayon::prelude::*;

/// Blur + decimation + validity mask, i.e. the sampling operator `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel<T> {
    factor: usize,
    kernel: Vec<T>,
    hr_width: usize,
    hr_height: usize,
    lr_width: usize,
    lr_height: usize,
    valid: Vec<bool>,
    measured: Vec<usize>,
}

/// Normalized 1-D Gaussian with `2d - 1` taps and `sigma = d / 3`.
pub fn gaussian_kernel<T: Real>(d: usize) -> Vec<T> {
    let sigma = d as f64 / 3.0;
    let half = d as isize - 1;
    let raw: Vec<f64> = (-half..=half)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::of(v / sum)).collect()
}

impl<T: Real> MeasurementModel<T> {
    /// `mask` lives on the low-resolution grid; `None` measures everything.
    pub fn new(factor: usize, hr_width: usize, hr_height: usize, mask: Option<Vec<bool>>) -> Result<Self> {
        if factor < 1 {
            return Err(Error::InvalidArgument("sampling factor must be >= 1".into()));
        }
        if hr_width == 0 || hr_height == 0 {
            return Err(Error::InvalidArgument("high-resolution grid is empty".into()));
        }
        let lr_width = hr_width.div_ceil(factor);
        let lr_height = hr_height.div_ceil(factor);
        let valid = match mask {
            Some(m) => {
                check_len("low-resolution mask", lr_width * lr_height, m.len())?;
                m
            }
            None => vec![true; lr_width * lr_height],
        };
        let measured = valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        Ok(Self {
            factor,
            kernel: gaussian_kernel(factor),
            hr_width,
            hr_height,
            lr_width,
            lr_height,
            valid,
            measured,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn kernel(&self) -> &[T] {
        &self.kernel
    }

    pub fn hr_width(&self) -> usize {
        self.hr_width
    }

    pub fn hr_height(&self) -> usize {
        self.hr_height
    }

    pub fn lr_width(&self) -> usize {
        self.lr_width
    }

    pub fn lr_height(&self) -> usize {
        self.lr_height
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Number of rows of `A` (measured low-resolution entries).
    pub fn measurement_count(&self) -> usize {
        self.measured.len()
    }

    /// Low-resolution grid indices of the measured entries, in row-major order.
    pub fn measured_indices(&self) -> &[usize] {
        &self.measured
    }

    fn check_hr(&self, s: &Plane<T>) -> Result<()> {
        if s.width() != self.hr_width || s.height() != self.hr_height {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}, measurement model expects {}x{}",
                s.width(),
                s.height(),
                self.hr_width,
                self.hr_height
            )));
        }
        Ok(())
    }

    fn tap(&self, lr_index: usize, t: usize, len: usize) -> usize {
        let offset = self.factor as isize - 1;
        reflect((self.factor * lr_index) as isize + t as isize - offset, len)
    }

    /// Blurred and decimated values on the whole low-resolution grid.
    fn sample_grid(&self, s: &Plane<T>) -> Vec<T> {
        let (hw, lw, lh) = (self.hr_width, self.lr_width, self.lr_height);
        let img = s.as_slice();
        // horizontal blur at the sampled columns, for every HR row
        let mut tmp = vec![T::zero(); self.hr_height * lw];
        for r in 0..self.hr_height {
            let row = &img[r * hw..(r + 1) * hw];
            for j in 0..lw {
                let mut acc = T::zero();
                for (t, &kv) in self.kernel.iter().enumerate() {
                    acc += kv * row[self.tap(j, t, hw)];
                }
                tmp[r * lw + j] = acc;
            }
        }
        let mut out = vec![T::zero(); lw * lh];
        for i in 0..lh {
            for (t, &kv) in self.kernel.iter().enumerate() {
                let src = self.tap(i, t, self.hr_height);
                let row = &tmp[src * lw..(src + 1) * lw];
                for (o, &v) in out[i * lw..(i + 1) * lw].iter_mut().zip(row) {
                    *o += kv * v;
                }
            }
        }
        out
    }

    /// Low-resolution entries whose whole blur footprint is valid in `hr_valid`.
    pub fn footprint_valid(&self, hr_valid: &[bool]) -> Result<Vec<bool>> {
        check_len("high-resolution mask", self.hr_width * self.hr_height, hr_valid.len())?;
        let taps = self.kernel.len();
        let mut out = Vec::with_capacity(self.lr_width * self.lr_height);
        for i in 0..self.lr_height {
            for j in 0..self.lr_width {
                let ok = (0..taps).all(|a| {
                    let r = self.tap(i, a, self.hr_height);
                    (0..taps).all(|b| hr_valid[r * self.hr_width + self.tap(j, b, self.hr_width)])
                });
                out.push(ok);
            }
        }
        Ok(out)
    }

    /// `A s`: one value per measured entry, in row-major order.
    pub fn apply(&self, s: &Plane<T>) -> Result<Vec<T>> {
        self.check_hr(s)?;
        let grid = self.sample_grid(s);
        Ok(self.measured.iter().map(|&i| grid[i]).collect())
    }

    /// `A^T y` for `y` indexed like [`MeasurementModel::apply`]'s output.
    pub fn adjoint(&self, y: &[T]) -> Result<Plane<T>> {
        check_len("measurement adjoint", self.measured.len(), y.len())?;
        let (hw, lw, lh) = (self.hr_width, self.lr_width, self.lr_height);
        let mut grid = vec![T::zero(); lw * lh];
        for (&i, &v) in self.measured.iter().zip(y) {
            grid[i] = v;
        }
        let mut tmp = vec![T::zero(); self.hr_height * lw];
        for i in 0..lh {
            for (t, &kv) in self.kernel.iter().enumerate() {
                let dst = self.tap(i, t, self.hr_height);
                let src = &grid[i * lw..(i + 1) * lw];
                for (o, &v) in tmp[dst * lw..(dst + 1) * lw].iter_mut().zip(src) {
                    *o += kv * v;
                }
            }
        }
        let mut out = vec![T::zero(); hw * self.hr_height];
        for r in 0..self.hr_height {
            let row = &mut out[r * hw..(r + 1) * hw];
            for j in 0..lw {
                let v = tmp[r * lw + j];
                for (t, &kv) in self.kernel.iter().enumerate() {
                    row[self.tap(j, t, hw)] += kv * v;
                }
            }
        }
        Plane::new(hw, self.hr_height, out)
    }
}

/// Data-fidelity term `d_E(A s, y)`.
#[derive(Debug, Clone, PartialEq)]
pub enum FidelityTerm<T> {
    /// `||A s - y||^2`
    IidGaussian,
    /// `(A s - y)^T W (A s - y)` with diagonal `W`, one weight per measurement.
    DiagonalMahalanobis { weights: Vec<T> },
}

impl<T: Real> FidelityTerm<T> {
    pub fn mahalanobis(weights: Vec<T>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w > T::zero()) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Mahalanobis weights must be positive and finite, found {w}"
            )));
        }
        Ok(Self::DiagonalMahalanobis { weights })
    }

    /// Inverse-variance weights for a sensor whose noise standard deviation grows
    /// with the square of depth: `w_i ~ 1 / y_i^2`, rescaled to unit mean.
    /// The rescaling makes the weights independent of the depth units.
    pub fn depth_squared_noise(measurements: &[T]) -> Result<Self> {
        if measurements.is_empty() {
            return Err(Error::NoValidMeasurements);
        }
        let raw: Vec<T> = measurements.iter().map(|&y| T::one() / (y * y)).collect();
        if raw.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "zero-valued measurements must be masked out before weighting".into(),
            ));
        }
        let mean = raw.iter().copied().sum::<T>() / T::of_usize(raw.len());
        Self::mahalanobis(raw.into_iter().map(|w| w / mean).collect())
    }

    fn check(&self, m: usize) -> Result<()> {
        match self {
            Self::IidGaussian => Ok(()),
            Self::DiagonalMahalanobis { weights } => check_len("Mahalanobis weights", m, weights.len()),
        }
    }

    #[inline]
    fn weight(&self, i: usize) -> T {
        match self {
            Self::IidGaussian => T::one(),
            Self::DiagonalMahalanobis { weights } => weights[i],
        }
    }

    /// Value and the weighted residual `W r`.
    fn evaluate(&self, residual: &[T]) -> (T, Vec<T>) {
        let weighted: Vec<T> = residual.iter().enumerate().map(|(i, &r)| self.weight(i) * r).collect();
        let value = residual.iter().zip(&weighted).map(|(&r, &wr)| r * wr).sum();
        (value, weighted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FidelityKind {
    IidGaussian,
    DiagonalMahalanobis,
}

impl std::str::FromStr for FidelityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" | "iid_gaussian" => Ok(Self::IidGaussian),
            "mahalanobis" | "diagonal_mahalanobis" => Ok(Self::DiagonalMahalanobis),
            other => Err(Error::InvalidArgument(format!(
                "unknown fidelity '{other}' (expected iid or mahalanobis)"
            ))),
        }
    }
}

/// `stages` values decreasing geometrically from `start` to `end`.
pub fn geometric_schedule<T: Real>(start: T, end: T, stages: usize) -> Vec<T> {
    match stages {
        0 => Vec::new(),
        1 => vec![end],
        _ => {
            let ratio = (end / start).ln() / T::of_usize(stages - 1);
            (0..stages)
                .map(|i| (start.ln() + ratio * T::of_usize(i)).exp())
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveConfig<T> {
    pub lambda_schedule: Vec<T>,
    pub iterations_per_stage: usize,
    pub trace_enabled: bool,
    /// Analyze mean-free patches, as seen during learning. When false, the
    /// operators act on raw patches.
    pub remove_patch_mean: bool,
    /// Inputs in `[0, 1]` are multiplied by this before solving (and the result
    /// divided by it), so `lambda` and `nu` refer to that value range.
    pub value_scale: T,
    /// Line-search and CG parameters; `max_iterations` is replaced by
    /// `iterations_per_stage`.
    pub cg: CgConfig<T>,
}

impl<T: Real> Default for SolveConfig<T> {
    /// Five stages from `lambda = 1` down to `1e-2`, 100 iterations each.
    fn default() -> Self {
        Self {
            lambda_schedule: geometric_schedule(T::one(), T::of(1e-2), 5),
            iterations_per_stage: 100,
            trace_enabled: true,
            remove_patch_mean: true,
            value_scale: T::of(GRAY_LEVELS),
            cg: CgConfig {
                gradient_tolerance: T::of(1e-9),
                ..CgConfig::default()
            },
        }
    }
}

impl<T: Real> SolveConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_schedule.is_empty() {
            return Err(Error::InvalidArgument("lambda schedule is empty".into()));
        }
        if self.lambda_schedule.iter().any(|l| !(*l > T::zero()) || !l.is_finite()) {
            return Err(Error::InvalidArgument("lambda values must be positive".into()));
        }
        if self.lambda_schedule.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("lambda schedule must be non-increasing".into()));
        }
        if !(self.value_scale > T::zero()) || !self.value_scale.is_finite() {
            return Err(Error::InvalidArgument("value scale must be positive".into()));
        }
        self.cg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    /// One-based stage index.
    pub stage: usize,
    /// Iteration count across all stages; 0 is the initial estimate.
    pub iteration: usize,
    pub objective: f64,
    pub fidelity: f64,
    /// Unweighted coupled sparsity `g(c, Omega_D^F s)`.
    pub sparsity: f64,
    /// `||s - gt|| / ||gt||` over valid ground-truth pixels.
    pub rel_rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructionTrace {
    pub records: Vec<TraceRecord>,
}

impl ReconstructionTrace {
    pub fn to_csv(&self) -> String {
        let with_rmse = self.records.iter().any(|r| r.rel_rmse.is_some());
        let mut out = String::from("stage,iter,objective,fidelity,sparsity");
        out.push_str(if with_rmse { ",rel_rmse\n" } else { "\n" });
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{:.17e},{:.17e},{:.17e}",
                r.stage, r.iteration, r.objective, r.fidelity, r.sparsity
            );
            if with_rmse {
                let _ = write!(out, ",{:.17e}", r.rel_rmse.unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Records belonging to one stage.
    pub fn stage(&self, stage: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

/// `c = Omega_I^F s_I`, the fixed analysis of the intensity image.
pub fn intensity_code<T: Real>(pair: &OperatorPair<T>, intensity: &Plane<T>) -> Result<CoefficientStack<T>> {
    apply_global(&pair.intensity, intensity)
}

/// Objective pieces at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts<T> {
    pub sparsity: T,
    pub fidelity: T,
    pub total: T,
}

/// The depth-only reconstruction objective with its data bound in.
pub struct DepthObjective<'a, T> {
    pub code: &'a CoefficientStack<T>,
    pub pair: &'a OperatorPair<T>,
    pub model: &'a MeasurementModel<T>,
    pub fidelity: &'a FidelityTerm<T>,
    pub measurements: &'a [T],
    pub lambda: T,
}

impl<'a, T: Real> DepthObjective<'a, T> {
    fn check(&self) -> Result<()> {
        let m = self.model.measurement_count();
        check_len("measurements", m, self.measurements.len())?;
        self.fidelity.check(m)?;
        if self.code.width() != self.model.hr_width || self.code.height() != self.model.hr_height {
            return Err(Error::InvalidArgument(
                "intensity code and measurement model disagree on the HR grid".into(),
            ));
        }
        check_len("intensity code rows", self.pair.k(), self.code.k())?;
        if !(self.lambda > T::zero()) {
            return Err(Error::InvalidArgument("lambda must be positive".into()));
        }
        Ok(())
    }

    fn sparsity_of(&self, z: &CoefficientStack<T>) -> T {
        let nu = self.pair.nu;
        self.code
            .as_slice()
            .iter()
            .zip(z.as_slice())
            .map(|(&c, &v)| (T::one() + nu * (c * c + v * v)).ln())
            .sum()
    }

    fn residual(&self, s: &Plane<T>) -> Result<Vec<T>> {
        let mut r = self.model.apply(s)?;
        r.iter_mut().zip(self.measurements).for_each(|(a, &y)| *a -= y);
        Ok(r)
    }

    fn parts_from(&self, z: &CoefficientStack<T>, s: &Plane<T>) -> Result<(ObjectiveParts<T>, Vec<T>)> {
        let sparsity = self.sparsity_of(z);
        let (fidelity, weighted) = self.fidelity.evaluate(&self.residual(s)?);
        Ok((
            ObjectiveParts {
                sparsity,
                fidelity,
                total: self.lambda * sparsity + fidelity,
            },
            weighted,
        ))
    }

    pub fn parts(&self, s: &Plane<T>) -> Result<ObjectiveParts<T>> {
        self.check()?;
        let z = apply_global(&self.pair.depth, s)?;
        Ok(self.parts_from(&z, s)?.0)
    }

    fn gradient_from(&self, z: CoefficientStack<T>, s: &Plane<T>) -> Result<(ObjectiveParts<T>, Plane<T>)> {
        let (parts, weighted) = self.parts_from(&z, s)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                what: "reconstruction objective",
                iteration: 0,
            });
        }
        let nu = self.pair.nu;
        let two_nu = T::of(2.0) * nu;
        let mut u = z;
        for (v, &c) in u.as_mut_slice().iter_mut().zip(self.code.as_slice()) {
            *v = self.lambda * two_nu * *v / (T::one() + nu * (c * c + *v * *v));
        }
        let mut grad = apply_global_adjoint(&self.pair.depth, &u)?;
        let data = self.model.adjoint(&weighted)?;
        for (g, &a) in grad.as_mut_slice().iter_mut().zip(data.as_slice()) {
            *g += T::of(2.0) * a;
        }
        Ok((parts, grad))
    }

    pub fn value_and_gradient(&self, s: &Plane<T>) -> Result<(ObjectiveParts<T>, Plane<T>)> {
        self.check()?;
        let z = apply_global(&self.pair.depth, s)?;
        self.gradient_from(z, s)
    }
}

/// One lambda stage as seen by the CG driver. `Omega_D^F x` and `A x` are kept
/// for the current iterate and advanced along the search direction, which
/// makes every line-search trial a pointwise evaluation.
struct StageObjective<'o, 'a, T> {
    obj: &'o DepthObjective<'a, T>,
    z: CoefficientStack<T>,
    ax: Vec<T>,
    z_dir: CoefficientStack<T>,
    a_dir: Vec<T>,
    pending: Option<T>,
    last_parts: Rc<Cell<Option<ObjectiveParts<T>>>>,
}

impl<'o, 'a, T: Real> StageObjective<'o, 'a, T> {
    fn new(obj: &'o DepthObjective<'a, T>) -> Self {
        let (w, h, k) = (obj.code.width(), obj.code.height(), obj.code.k());
        Self {
            obj,
            z: CoefficientStack::zeros(w, h, k),
            ax: Vec::new(),
            z_dir: CoefficientStack::zeros(w, h, k),
            a_dir: Vec::new(),
            pending: None,
            last_parts: Rc::new(Cell::new(None)),
        }
    }

    fn plane(&self, x: &[T]) -> Result<Plane<T>> {
        Plane::new(self.z.width(), self.z.height(), x.to_vec())
    }

    /// Objective parts at `z + t z_dir`, `ax + t a_dir`.
    fn parts_at(&self, t: T) -> ObjectiveParts<T> {
        let nu = self.obj.pair.nu;
        let c = self.obj.code.as_slice();
        let (z, zd) = (self.z.as_slice(), self.z_dir.as_slice());
        let sparsity = sum_chunks(c.len(), |range| {
            let mut acc = T::zero();
            for i in range {
                let v = z[i] + t * zd[i];
                acc += (T::one() + nu * (c[i] * c[i] + v * v)).ln();
            }
            acc
        });
        let mut fidelity = T::zero();
        for (i, (&a, &y)) in self.ax.iter().zip(self.obj.measurements).enumerate() {
            let r = a + t * self.a_dir[i] - y;
            fidelity += self.obj.fidelity.weight(i) * r * r;
        }
        ObjectiveParts {
            sparsity,
            fidelity,
            total: self.obj.lambda * sparsity + fidelity,
        }
    }

    fn commit(&mut self) {
        if let Some(t) = self.pending.take() {
            let dir = self.z_dir.as_slice();
            for (v, &d) in self.z.as_mut_slice().iter_mut().zip(dir) {
                *v += t * d;
            }
            for (v, &d) in self.ax.iter_mut().zip(&self.a_dir) {
                *v += t * d;
            }
        }
    }
}

/// Sum of `f` over fixed chunks of `0..len`, computed in parallel and added in
/// chunk order.
fn sum_chunks<T: Real>(len: usize, f: impl Fn(std::ops::Range<usize>) -> T + Sync) -> T {
    const CHUNK: usize = 1 << 14;
    let parts: Vec<T> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|i| f(i * CHUNK..((i + 1) * CHUNK).min(len)))
        .collect();
    parts.into_iter().sum()
}

impl<T: Real> LineObjective<T> for StageObjective<'_, '_, T> {
    fn value(&mut self, x: &[T]) -> T {
        let Ok(s) = self.plane(x) else {
            return T::infinity();
        };
        match (apply_global(&self.obj.pair.depth, &s), self.obj.model.apply(&s)) {
            (Ok(z), Ok(ax)) => {
                self.z = z;
                self.ax = ax;
                self.a_dir = vec![T::zero(); self.ax.len()];
                self.pending = None;
                self.parts_at(T::zero()).total
            }
            _ => T::infinity(),
        }
    }

    fn begin_line(&mut self, _x: &[T], direction: &[T]) -> Result<()> {
        self.commit();
        let d = self.plane(direction)?;
        self.z_dir = apply_global(&self.obj.pair.depth, &d)?;
        self.a_dir = self.obj.model.apply(&d)?;
        Ok(())
    }

    fn line_value(&mut self, _trial: &[T], t: T) -> T {
        self.pending = Some(t);
        self.parts_at(t).total
    }

    fn gradient(&mut self, _x: &[T]) -> Result<Vec<T>> {
        self.commit();
        let parts = self.parts_at(T::zero());
        if !parts.total.is_finite() {
            return Err(Error::NonFinite {
                what: "reconstruction objective",
                iteration: 0,
            });
        }
        self.last_parts.set(Some(parts));
        let obj = self.obj;
        let nu = obj.pair.nu;
        let scale = obj.lambda * T::of(2.0) * nu;
        let mut u = self.z_dir.clone();
        for ((v, &z), &c) in u
            .as_mut_slice()
            .iter_mut()
            .zip(self.z.as_slice())
            .zip(obj.code.as_slice())
        {
            *v = scale * z / (T::one() + nu * (c * c + z * z));
        }
        let mut grad = apply_global_adjoint(&obj.pair.depth, &u)?;
        let weighted: Vec<T> = self
            .ax
            .iter()
            .zip(obj.measurements)
            .enumerate()
            .map(|(i, (&a, &y))| obj.fidelity.weight(i) * (a - y))
            .collect();
        let data = obj.model.adjoint(&weighted)?;
        for (g, &a) in grad.as_mut_slice().iter_mut().zip(data.as_slice()) {
            *g += T::of(2.0) * a;
        }
        Ok(grad.into_vec())
    }
}

/// Objective value and Euclidean gradient with respect to the HR depth map.
#[allow(clippy::too_many_arguments)]
pub fn objective_and_gradient<T: Real>(
    depth: &Plane<T>,
    code: &CoefficientStack<T>,
    pair: &OperatorPair<T>,
    model: &MeasurementModel<T>,
    fidelity: &FidelityTerm<T>,
    lambda: T,
    measurements: &[T],
) -> Result<(T, Plane<T>)> {
    let obj = DepthObjective {
        code,
        pair,
        model,
        fidelity,
        measurements,
        lambda,
    };
    let (parts, grad) = obj.value_and_gradient(depth)?;
    Ok((parts.total, grad))
}

/// Fills unmeasured LR entries with their nearest measured neighbor (Euclidean
/// distance, ties to the earliest in row-major order), then upsamples bicubically.
pub fn initialize_hr<T: Real>(
    lr: &Plane<T>,
    valid: &[bool],
    d: usize,
    hr_width: usize,
    hr_height: usize,
) -> Result<Plane<T>> {
    let filled = fill_nearest(lr, valid)?;
    interpolate(&filled, d, Interpolation::Bicubic, hr_width, hr_height)
}

pub(crate) fn fill_nearest<T: Real>(lr: &Plane<T>, valid: &[bool]) -> Result<Plane<T>> {
    check_len("validity mask", lr.len(), valid.len())?;
    if !valid.iter().any(|&v| v) {
        return Err(Error::NoValidMeasurements);
    }
    let (w, h) = (lr.width() as isize, lr.height() as isize);
    let mut out = lr.clone();
    for r in 0..h {
        for c in 0..w {
            if valid[(r * w + c) as usize] {
                continue;
            }
            // Rings of growing Chebyshev radius; stop once no farther ring can
            // hold an equal or closer pixel.
            let mut best: Option<(isize, isize)> = None; // (dist^2, scan index)
            let mut radius = 1;
            loop {
                for rr in (r - radius).max(0)..=(r + radius).min(h - 1) {
                    for cc in (c - radius).max(0)..=(c + radius).min(w - 1) {
                        if (rr - r).abs().max((cc - c).abs()) != radius {
                            continue;
                        }
                        let idx = rr * w + cc;
                        if !valid[idx as usize] {
                            continue;
                        }
                        let d2 = (rr - r).pow(2) + (cc - c).pow(2);
                        if best.is_none_or(|b| (d2, idx) < b) {
                            best = Some((d2, idx));
                        }
                    }
                }
                if let Some((d2, _)) = best {
                    if d2 < (radius + 1).pow(2) {
                        break;
                    }
                }
                radius += 1;
            }
            let (_, idx) = best.expect("at least one valid pixel");
            out.as_mut_slice()[(r * w + c) as usize] = lr.as_slice()[idx as usize];
        }
    }
    Ok(out)
}

fn relative_error<T: Real>(s: &[T], scale: T, gt: &[f64], mask: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    let scale = scale.as_f64();
    for ((&a, &b), &ok) in s.iter().zip(gt).zip(mask) {
        if ok {
            let e = a.as_f64() / scale - b;
            num += e * e;
            den += b * b;
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Ground truth for diagnostics: HR values with a validity mask.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub values: &'a [f64],
    pub valid: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct SuperResolved<T> {
    /// Clamped to `[0, 1]`.
    pub depth: Plane<T>,
    pub trace: ReconstructionTrace,
}

/// Reconstructs the HR depth map from LR measurements `lr` (on the LR grid of
/// `model`, entries outside the model's mask are ignored) guided by `intensity`.
#[allow(clippy::too_many_arguments)]
pub fn super_resolve<T: Real>(
    lr: &Plane<T>,
    intensity: &Plane<T>,
    pair: &OperatorPair<T>,
    model: &MeasurementModel<T>,
    fidelity: &FidelityTerm<T>,
    cfg: &SolveConfig<T>,
    gt: Option<GroundTruth<'_>>,
) -> Result<SuperResolved<T>> {
    cfg.validate()?;
    if intensity.width() != model.hr_width || intensity.height() != model.hr_height {
        return Err(Error::SizeMismatch(format!(
            "intensity image is {}x{}, expected {}x{}",
            intensity.width(),
            intensity.height(),
            model.hr_width,
            model.hr_height
        )));
    }
    if lr.width() != model.lr_width || lr.height() != model.lr_height {
        return Err(Error::SizeMismatch(format!(
            "depth input is {}x{}, expected {}x{} for factor {} and a {}x{} intensity image",
            lr.width(),
            lr.height(),
            model.lr_width,
            model.lr_height,
            model.factor,
            model.hr_width,
            model.hr_height
        )));
    }
    if let Some(gt) = gt {
        check_len("ground truth", intensity.len(), gt.values.len())?;
        check_len("ground truth mask", intensity.len(), gt.valid.len())?;
    }
    let scale = cfg.value_scale;
    let lr = &lr.map(|v| v * scale);
    let intensity = &intensity.map(|v| v * scale);
    let measurements: Vec<T> = model.measured.iter().map(|&i| lr.as_slice()[i]).collect();
    let centered;
    let pair = if cfg.remove_patch_mean {
        centered = pair.centered();
        &centered
    } else {
        pair
    };
    let code = intensity_code(pair, intensity)?;
    let (w, h) = (model.hr_width, model.hr_height);
    let mut current = initialize_hr(lr, &model.valid, model.factor, w, h)?;

    let mut trace = ReconstructionTrace::default();
    let mut offset = 0;
    for (si, &lambda) in cfg.lambda_schedule.iter().enumerate() {
        let objective = DepthObjective {
            code: &code,
            pair,
            model,
            fidelity,
            measurements: &measurements,
            lambda,
        };
        objective.check()?;
        let mut stage = StageObjective::new(&objective);
        let stage_cfg = CgConfig {
            max_iterations: cfg.iterations_per_stage,
            ..cfg.cg.clone()
        };
        let first_stage = si == 0;
        let last_parts = stage.last_parts.clone();
        let out = cg_minimize_line(&mut stage, current.into_vec(), &stage_cfg, |rec, x| {
            if !cfg.trace_enabled || (rec.iteration == 0 && !first_stage) {
                return;
            }
            let parts = last_parts.get().expect("gradient evaluated before observation");
            trace.records.push(TraceRecord {
                stage: si + 1,
                iteration: offset + rec.iteration,
                objective: parts.total.as_f64(),
                fidelity: parts.fidelity.as_f64(),
                sparsity: parts.sparsity.as_f64(),
                rel_rmse: gt.map(|g| relative_error(x, scale, g.values, g.valid)),
            });
        })
        .map_err(|e| match e {
            Error::NonFinite { what, iteration } => Error::NonFinite {
                what,
                iteration: offset + iteration,
            },
            other => other,
        })?;
        offset += out.iterations();
        current = Plane::new(w, h, out.point)?;
    }
    let depth = current.map(|v| (v / scale).max(T::zero()).min(T::one()));
    Ok(SuperResolved { depth, trace })
}

/// Convenience front-end over images: `lr` is the measured depth map on the LR
/// grid (invalid pixels are inpainted), `intensity` the registered HR image.
pub fn super_resolve_depth_map(
    lr: &DepthMap,
    intensity: &GrayImage,
    pair: &OperatorPair<f64>,
    factor: usize,
    fidelity: FidelityKind,
    cfg: &SolveConfig<f64>,
    gt: Option<&DepthMap>,
) -> Result<(GrayImage, ReconstructionTrace)> {
    let model = MeasurementModel::<f64>::new(factor, intensity.width(), intensity.height(), None)?;
    if lr.width() != model.lr_width || lr.height() != model.lr_height {
        return Err(Error::SizeMismatch(format!(
            "depth input is {}x{}, expected {}x{} for factor {factor} and a {}x{} intensity image",
            lr.width(),
            lr.height(),
            model.lr_width,
            model.lr_height,
            intensity.width(),
            intensity.height()
        )));
    }
    let model = MeasurementModel::new(factor, intensity.width(), intensity.height(), Some(lr.valid.clone()))?;
    let fid = match fidelity {
        FidelityKind::IidGaussian => FidelityTerm::IidGaussian,
        FidelityKind::DiagonalMahalanobis => {
            let y: Vec<f64> = model
                .measured_indices()
                .iter()
                .map(|&i| lr.image.plane().as_slice()[i])
                .collect();
            FidelityTerm::depth_squared_noise(&y)?
        }
    };
    let gt = gt.map(|g| GroundTruth {
        values: g.image.plane().as_slice(),
        valid: &g.valid,
    });
    let out = super_resolve(lr.image.plane(), intensity.plane(), pair, &model, &fid, cfg, gt)?;
    Ok((GrayImage::new(out.depth, lr.image.bit_depth())?, out.trace))
}
