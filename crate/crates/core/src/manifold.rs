//! Nonlinear conjugate gradient on the oblique manifold `OB(n, k)`.
//!
//! A point is an `n x k` matrix whose columns lie on the unit sphere of `R^n`.
//! Storage is column-contiguous, so column `i` is `data[i * n..(i + 1) * n]`.
//! That layout coincides with the row-major storage of the `k x n` analysis
//! operator whose transpose the point represents.
//!
//! The product `OB(n, k) x OB(n, k)` is handled by packing both factors into a
//! single `n x 2k` matrix: every column is treated independently, which is the
//! product geometry.
//!
//! The same driver also runs in flat space (identity projection, additive
//! retraction); the reconstruction solver uses that mode.

use std::sync::Arc;

use crate::error::{check_len, Error, Result};
use crate::scalar::{axpy, dot, norm_sq, Real};

fn unit_tolerance<T: Real>() -> T {
    T::of(1e-12).max(T::epsilon() * T::of(64.0))
}

/// A point on `OB(n, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObliquePoint<T> {
    n: usize,
    k: usize,
    data: Vec<T>,
}

impl<T: Real> ObliquePoint<T> {
    /// Wraps column-contiguous data, checking that every column is unit norm.
    pub fn new(n: usize, k: usize, data: Vec<T>) -> Result<Self> {
        Self::check_shape(n, k, data.len())?;
        let tol = unit_tolerance::<T>();
        for (i, col) in data.chunks_exact(n).enumerate() {
            let norm = norm_sq(col).sqrt();
            if !((norm - T::one()).abs() <= tol) {
                return Err(Error::InvalidArgument(format!(
                    "column {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { n, k, data })
    }

    /// Normalizes every column of `data` onto the sphere.
    pub fn from_unnormalized(n: usize, k: usize, mut data: Vec<T>) -> Result<Self> {
        Self::check_shape(n, k, data.len())?;
        for (i, col) in data.chunks_exact_mut(n).enumerate() {
            let norm = norm_sq(col).sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::ZeroColumn { column: i });
            }
            col.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self { n, k, data })
    }

    fn check_shape(n: usize, k: usize, len: usize) -> Result<()> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "oblique manifold needs n >= 1 and k >= 1, got n={n}, k={k}"
            )));
        }
        check_len("oblique point", n * k, len)
    }

    pub(crate) fn from_raw_unchecked(n: usize, k: usize, data: Vec<T>) -> Self {
        Self { n, k, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn column(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn columns(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.n)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Largest `| ||x_i|| - 1 |` over all columns.
    pub fn max_norm_deviation(&self) -> T {
        self.columns()
            .map(|c| (norm_sq(c).sqrt() - T::one()).abs())
            .fold(T::zero(), T::max)
    }
}

/// A tangent vector at `base`.
#[derive(Debug, Clone)]
pub struct TangentVector<T> {
    base: Arc<ObliquePoint<T>>,
    data: Vec<T>,
}

impl<T: Real> TangentVector<T> {
    pub fn base(&self) -> &Arc<ObliquePoint<T>> {
        &self.base
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn column(&self, i: usize) -> &[T] {
        let n = self.base.n;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn norm(&self) -> T {
        norm_sq(&self.data).sqrt()
    }

    /// Largest `|<x_i, xi_i>|` over all columns.
    pub fn max_normal_component(&self) -> T {
        self.base
            .columns()
            .zip(self.data.chunks_exact(self.base.n))
            .map(|(x, v)| dot(x, v).abs())
            .fold(T::zero(), T::max)
    }
}

/// Orthogonal projection of the ambient matrix `g` onto the tangent space at `x`:
/// column `i` becomes `g_i - (x_i^T g_i) x_i`.
pub fn project_tangent<T: Real>(x: &Arc<ObliquePoint<T>>, g: &[T]) -> Result<TangentVector<T>> {
    check_len("project_tangent", x.data.len(), g.len())?;
    let mut data = g.to_vec();
    Oblique { n: x.n }.project(&x.data, &mut data);
    Ok(TangentVector {
        base: Arc::clone(x),
        data,
    })
}

/// Column-normalization retraction: column `i` becomes
/// `(x_i + t xi_i) / ||x_i + t xi_i||`.
pub fn retract<T: Real>(x: &ObliquePoint<T>, v: &TangentVector<T>, t: T) -> Result<ObliquePoint<T>> {
    check_len("retract", x.data.len(), v.data.len())?;
    if t == T::zero() {
        return Ok(x.clone());
    }
    let mut out = vec![T::zero(); x.data.len()];
    Oblique { n: x.n }.retract(&x.data, &v.data, t, &mut out)?;
    Ok(ObliquePoint::from_raw_unchecked(x.n, x.k, out))
}

/// Vector transport by projection onto the tangent space at `x_new`.
pub fn transport<T: Real>(x_new: &Arc<ObliquePoint<T>>, v: &TangentVector<T>) -> Result<TangentVector<T>> {
    project_tangent(x_new, &v.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaRule {
    FletcherReeves,
    HestenesStiefel,
}

#[derive(Debug, Clone)]
pub struct CgConfig<T> {
    pub max_iterations: usize,
    /// Stop once the Riemannian gradient norm drops below this fraction of its
    /// initial value.
    pub gradient_tolerance: T,
    /// Trial step of the first line search. Later searches start from twice
    /// the previously accepted step.
    pub armijo_initial_step: T,
    pub armijo_shrink: T,
    pub armijo_slope: T,
    /// Backtracking budget per iteration; exhausting it ends the run.
    pub max_backtracks: usize,
    pub beta_rule: BetaRule,
}

impl<T: Real> Default for CgConfig<T> {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tolerance: T::of(1e-6),
            armijo_initial_step: T::one(),
            armijo_shrink: T::of(0.5),
            armijo_slope: T::of(1e-4),
            max_backtracks: 50,
            beta_rule: BetaRule::HestenesStiefel,
        }
    }
}

impl<T: Real> CgConfig<T> {
    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: T| v > T::zero() && v < T::one();
        if !(self.gradient_tolerance >= T::zero()) {
            return Err(Error::InvalidArgument("gradient_tolerance must be non-negative".into()));
        }
        if !(self.armijo_initial_step > T::zero()) || !self.armijo_initial_step.is_finite() {
            return Err(Error::InvalidArgument("armijo_initial_step must be positive".into()));
        }
        if !open_unit(self.armijo_shrink) || !open_unit(self.armijo_slope) {
            return Err(Error::InvalidArgument(
                "armijo_shrink and armijo_slope must lie in (0, 1)".into(),
            ));
        }
        if self.max_backtracks == 0 {
            return Err(Error::InvalidArgument("max_backtracks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    /// No step satisfied the Armijo condition within the backtracking budget.
    LineSearchExhausted,
}

/// Diagnostics of one accepted iterate. Iteration 0 is the starting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    pub cost: T,
    pub grad_norm: T,
    pub step: T,
}

#[derive(Debug, Clone)]
pub struct CgOutcome<P, T> {
    pub point: P,
    /// Cost at the start point followed by the cost after every accepted step.
    pub cost_trace: Vec<T>,
    pub records: Vec<IterationRecord<T>>,
    pub stop: StopReason,
}

impl<P, T: Copy> CgOutcome<P, T> {
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn final_cost(&self) -> T {
        *self.cost_trace.last().expect("trace holds the start cost")
    }
}

pub(crate) trait Geometry<T: Real> {
    fn project(&self, x: &[T], v: &mut [T]);
    fn retract(&self, x: &[T], d: &[T], t: T, out: &mut [T]) -> Result<()>;
}

pub(crate) struct Oblique {
    pub n: usize,
}

impl<T: Real> Geometry<T> for Oblique {
    fn project(&self, x: &[T], v: &mut [T]) {
        for (xc, vc) in x.chunks_exact(self.n).zip(v.chunks_exact_mut(self.n)) {
            let c = dot(xc, vc);
            for (vi, &xi) in vc.iter_mut().zip(xc) {
                *vi -= c * xi;
            }
        }
    }

    fn retract(&self, x: &[T], d: &[T], t: T, out: &mut [T]) -> Result<()> {
        let n = self.n;
        for (i, ((xc, dc), oc)) in x
            .chunks_exact(n)
            .zip(d.chunks_exact(n))
            .zip(out.chunks_exact_mut(n))
            .enumerate()
        {
            for ((o, &xi), &di) in oc.iter_mut().zip(xc).zip(dc) {
                *o = xi + t * di;
            }
            let norm = norm_sq(oc).sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::ZeroColumn { column: i });
            }
            oc.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(())
    }
}

pub(crate) struct Flat;

impl<T: Real> Geometry<T> for Flat {
    fn project(&self, _x: &[T], _v: &mut [T]) {}

    fn retract(&self, x: &[T], d: &[T], t: T, out: &mut [T]) -> Result<()> {
        for ((o, &xi), &di) in out.iter_mut().zip(x).zip(d) {
            *o = xi + t * di;
        }
        Ok(())
    }
}

/// Cost and gradient as seen by the CG driver.
///
/// Per iteration the driver calls [`begin_line`](Self::begin_line) once with the
/// current point and search direction, then [`line_value`](Self::line_value) for
/// each trial step `t` until one is accepted, then [`gradient`](Self::gradient) at
/// the accepted trial point. Objectives that are cheap to evaluate along a line
/// can precompute in `begin_line`.
pub trait LineObjective<T> {
    fn value(&mut self, x: &[T]) -> T;

    /// Euclidean gradient at `x`.
    fn gradient(&mut self, x: &[T]) -> Result<Vec<T>>;

    fn begin_line(&mut self, _x: &[T], _direction: &[T]) -> Result<()> {
        Ok(())
    }

    /// Cost at `trial`, the retraction of the current point by `t * direction`.
    fn line_value(&mut self, trial: &[T], _t: T) -> T {
        self.value(trial)
    }
}

/// Adapts a cost closure and a gradient closure.
pub(crate) struct Closures<C, D>(pub C, pub D);

impl<T, C, D> LineObjective<T> for Closures<C, D>
where
    C: FnMut(&[T]) -> T,
    D: FnMut(&[T]) -> Result<Vec<T>>,
{
    fn value(&mut self, x: &[T]) -> T {
        (self.0)(x)
    }

    fn gradient(&mut self, x: &[T]) -> Result<Vec<T>> {
        (self.1)(x)
    }
}

/// Geometric nonlinear CG with Armijo backtracking. Cost evaluations that are
/// not finite are treated as failed Armijo trials.
pub(crate) fn nonlinear_cg<T, G, F, O>(
    geom: &G,
    x0: Vec<T>,
    obj: &mut F,
    cfg: &CgConfig<T>,
    mut observe: O,
) -> Result<CgOutcome<Vec<T>, T>>
where
    T: Real,
    G: Geometry<T>,
    F: LineObjective<T> + ?Sized,
    O: FnMut(&IterationRecord<T>, &[T]),
{
    cfg.validate()?;
    let len = x0.len();
    let restart_period = len.max(1);

    let mut x = x0;
    let mut f = obj.value(&x);
    if !f.is_finite() {
        return Err(Error::NonFinite {
            what: "cost",
            iteration: 0,
        });
    }
    let mut g = riemannian_gradient(geom, &x, obj, 0)?;
    let mut g_norm = norm_sq(&g).sqrt();
    let g0_norm = g_norm;

    let mut records = vec![IterationRecord {
        iteration: 0,
        cost: f,
        grad_norm: g_norm,
        step: T::zero(),
    }];
    observe(&records[0], &x);
    let mut cost_trace = vec![f];

    let mut d: Vec<T> = g.iter().map(|&v| -v).collect();
    let mut x_new = vec![T::zero(); len];
    let mut prev_step: Option<T> = None;
    let mut stop = StopReason::MaxIterations;

    for it in 0..cfg.max_iterations {
        if g_norm <= cfg.gradient_tolerance * g0_norm {
            stop = StopReason::GradientTolerance;
            break;
        }

        let mut slope = dot(&g, &d);
        if !(slope < T::zero()) {
            d.iter_mut().zip(&g).for_each(|(di, &gi)| *di = -gi);
            slope = -g_norm * g_norm;
        }

        obj.begin_line(&x, &d)?;
        // First trial: twice the previous accepted step, so the step can grow again.
        let mut t = prev_step.map_or(cfg.armijo_initial_step, |p| p / cfg.armijo_shrink);
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            if geom.retract(&x, &d, t, &mut x_new).is_ok() {
                let f_try = obj.line_value(&x_new, t);
                if f_try.is_finite() && f_try <= f + cfg.armijo_slope * t * slope {
                    accepted = Some(f_try);
                    break;
                }
            }
            t *= cfg.armijo_shrink;
        }
        let Some(f_new) = accepted else {
            stop = StopReason::LineSearchExhausted;
            break;
        };
        prev_step = Some(t);

        let g_new = riemannian_gradient(geom, &x_new, obj, it + 1)?;

        // Transport the previous direction and gradient to the new point.
        geom.project(&x_new, &mut d);
        let mut g_old = g;
        geom.project(&x_new, &mut g_old);

        let g_new_sq = norm_sq(&g_new);
        let beta = match cfg.beta_rule {
            BetaRule::FletcherReeves => g_new_sq / (g_norm * g_norm),
            BetaRule::HestenesStiefel => {
                let mut num = T::zero();
                let mut den = T::zero();
                for ((&gn, &go), &di) in g_new.iter().zip(&g_old).zip(&d) {
                    let y = gn - go;
                    num += gn * y;
                    den += di * y;
                }
                num / den
            }
        };
        let restart = !beta.is_finite() || (it + 1) % restart_period == 0;
        if restart {
            d.iter_mut().zip(&g_new).for_each(|(di, &gi)| *di = -gi);
        } else {
            d.iter_mut().for_each(|di| *di *= beta);
            axpy(-T::one(), &g_new, &mut d);
        }

        std::mem::swap(&mut x, &mut x_new);
        f = f_new;
        g = g_new;
        g_norm = g_new_sq.sqrt();
        cost_trace.push(f);
        let record = IterationRecord {
            iteration: it + 1,
            cost: f,
            grad_norm: g_norm,
            step: t,
        };
        observe(&record, &x);
        records.push(record);
    }
    if stop == StopReason::MaxIterations && g_norm <= cfg.gradient_tolerance * g0_norm {
        stop = StopReason::GradientTolerance;
    }

    Ok(CgOutcome {
        point: x,
        cost_trace,
        records,
        stop,
    })
}

fn riemannian_gradient<T, G, F>(geom: &G, x: &[T], obj: &mut F, iteration: usize) -> Result<Vec<T>>
where
    T: Real,
    G: Geometry<T>,
    F: LineObjective<T> + ?Sized,
{
    let mut g = obj.gradient(x)?;
    check_len("euclidean gradient", x.len(), g.len())?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            iteration,
        });
    }
    geom.project(x, &mut g);
    Ok(g)
}

/// Minimizes `cost` over `OB(n, k)` starting at `x0`.
///
/// `euclid_grad` returns the Euclidean gradient as an `n x k` column-contiguous
/// matrix; the driver projects it onto the tangent space.
pub fn cg_minimize<T, C, D>(
    cost: C,
    euclid_grad: D,
    x0: ObliquePoint<T>,
    cfg: &CgConfig<T>,
) -> Result<CgOutcome<ObliquePoint<T>, T>>
where
    T: Real,
    C: FnMut(&ObliquePoint<T>) -> T,
    D: FnMut(&ObliquePoint<T>) -> Result<Vec<T>>,
{
    cg_minimize_observed(cost, euclid_grad, x0, cfg, |_, _| {})
}

/// Like [`cg_minimize`], calling `observe` after every accepted iterate.
pub fn cg_minimize_observed<T, C, D, O>(
    mut cost: C,
    mut euclid_grad: D,
    x0: ObliquePoint<T>,
    cfg: &CgConfig<T>,
    mut observe: O,
) -> Result<CgOutcome<ObliquePoint<T>, T>>
where
    T: Real,
    C: FnMut(&ObliquePoint<T>) -> T,
    D: FnMut(&ObliquePoint<T>) -> Result<Vec<T>>,
    O: FnMut(&IterationRecord<T>, &ObliquePoint<T>),
{
    let (n, k) = (x0.n, x0.k);
    let wrap = |x: &[T]| ObliquePoint::from_raw_unchecked(n, k, x.to_vec());
    let mut obj = Closures(|x: &[T]| cost(&wrap(x)), |x: &[T]| euclid_grad(&wrap(x)));
    let out = nonlinear_cg(&Oblique { n }, x0.data, &mut obj, cfg, |r, x| observe(r, &wrap(x)))?;
    Ok(CgOutcome {
        point: ObliquePoint::from_raw_unchecked(n, k, out.point),
        cost_trace: out.cost_trace,
        records: out.records,
        stop: out.stop,
    })
}

/// Flat-space variant of the same driver: identity projection and additive
/// retraction.
pub fn cg_minimize_euclidean<T, C, D, O>(
    cost: C,
    grad: D,
    x0: Vec<T>,
    cfg: &CgConfig<T>,
    observe: O,
) -> Result<CgOutcome<Vec<T>, T>>
where
    T: Real,
    C: FnMut(&[T]) -> T,
    D: FnMut(&[T]) -> Result<Vec<T>>,
    O: FnMut(&IterationRecord<T>, &[T]),
{
    nonlinear_cg(&Flat, x0, &mut Closures(cost, grad), cfg, observe)
}

/// Flat-space driver over a [`LineObjective`]; trial points are `x + t d`.
pub fn cg_minimize_line<T, F, O>(obj: &mut F, x0: Vec<T>, cfg: &CgConfig<T>, observe: O) -> Result<CgOutcome<Vec<T>, T>>
where
    T: Real,
    F: LineObjective<T> + ?Sized,
    O: FnMut(&IterationRecord<T>, &[T]),
{
    nonlinear_cg(&Flat, x0, obj, cfg, observe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(n: usize, k: usize, seed: u64) -> Arc<ObliquePoint<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        Arc::new(ObliquePoint::from_unnormalized(n, k, data).unwrap())
    }

    fn random_matrix(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn projecting_the_base_point_vanishes() {
        let x = random_point(4, 6, 1);
        let t = project_tangent(&x, x.as_slice()).unwrap();
        assert!(t.norm() < 1e-14);
    }

    #[test]
    fn orthogonal_input_is_unchanged() {
        let x = Arc::new(ObliquePoint::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let g = [0.0, 1.0, 1.0, 0.0];
        let t = project_tangent(&x, &g).unwrap();
        assert_eq!(t.as_slice(), &g);
    }

    #[test]
    fn projection_is_orthogonal_to_base_columns() {
        let x = random_point(5, 9, 2);
        let g = random_matrix(45, 3);
        let t = project_tangent(&x, &g).unwrap();
        // independent column-by-column evaluation of g_i - (x_i . g_i) x_i
        for i in 0..9 {
            let xi = x.column(i);
            let gi = &g[i * 5..(i + 1) * 5];
            let c: f64 = xi.iter().zip(gi).map(|(a, b)| a * b).sum();
            for r in 0..5 {
                assert!((t.column(i)[r] - (gi[r] - c * xi[r])).abs() < 1e-15);
            }
        }
        assert!(t.max_normal_component() < 1e-10);
    }

    #[test]
    fn projection_rejects_shape_mismatch() {
        let x = random_point(3, 4, 4);
        assert!(matches!(
            project_tangent(&x, &[0.0; 11]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn retraction_with_zero_step_is_identity() {
        let x = random_point(3, 4, 5);
        let t = project_tangent(&x, &random_matrix(12, 6)).unwrap();
        assert_eq!(retract(&x, &t, 0.0).unwrap(), *x);
    }

    #[test]
    fn retraction_of_unit_orthogonal_step() {
        let x = Arc::new(ObliquePoint::new(2, 1, vec![1.0, 0.0]).unwrap());
        let t = project_tangent(&x, &[0.0, 1.0]).unwrap();
        let y = retract(&x, &t, 1.0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((y.column(0)[0] - s).abs() < 1e-15);
        assert!((y.column(0)[1] - s).abs() < 1e-15);
    }

    #[test]
    fn retraction_reports_zero_column() {
        let x = Arc::new(ObliquePoint::new(2, 1, vec![1.0, 0.0]).unwrap());
        // not tangent, but exercises the degenerate case x + t v = 0
        let v = TangentVector {
            base: Arc::clone(&x),
            data: vec![-1.0, 0.0],
        };
        assert!(matches!(retract(&x, &v, 1.0), Err(Error::ZeroColumn { column: 0 })));
    }

    #[test]
    fn transport_keeps_tangent_vectors_and_kills_normal_ones() {
        let x = random_point(4, 3, 7);
        let t = project_tangent(&x, &random_matrix(12, 8)).unwrap();
        let moved = transport(&x, &t).unwrap();
        for (a, b) in moved.as_slice().iter().zip(t.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        let normal = TangentVector {
            base: Arc::clone(&x),
            data: x.as_slice().iter().map(|v| 3.0 * v).collect(),
        };
        assert!(transport(&x, &normal).unwrap().norm() < 1e-14);

        let y = random_point(4, 3, 9);
        assert!(transport(&y, &t).unwrap().max_normal_component() < 1e-10);
    }

    #[test]
    fn new_rejects_non_unit_columns() {
        assert!(ObliquePoint::new(2, 1, vec![1.0, 1.0]).is_err());
        assert!(ObliquePoint::<f64>::from_unnormalized(2, 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn distance_cost_is_already_optimal_at_start() {
        let x0 = random_point(3, 5, 10);
        let anchor = x0.as_slice().to_vec();
        let a2 = anchor.clone();
        let out = cg_minimize(
            |x: &ObliquePoint<f64>| x.as_slice().iter().zip(&anchor).map(|(a, b)| (a - b).powi(2)).sum(),
            |x: &ObliquePoint<f64>| Ok(x.as_slice().iter().zip(&a2).map(|(a, b)| 2.0 * (a - b)).collect()),
            (*x0).clone(),
            &CgConfig::default(),
        )
        .unwrap();
        assert_eq!(out.iterations(), 0);
        assert_eq!(out.stop, StopReason::GradientTolerance);
        assert_eq!(out.point, *x0);
    }

    #[test]
    fn linear_functional_is_maximized_on_the_sphere() {
        let v = [0.0, 0.0, 2.0];
        let x0 = ObliquePoint::from_unnormalized(3, 1, vec![1.0, 0.5, -0.2]).unwrap();
        let cfg = CgConfig {
            gradient_tolerance: 1e-10,
            ..CgConfig::default()
        };
        let out = cg_minimize(
            |x: &ObliquePoint<f64>| -dot(&v, x.as_slice()),
            |_: &ObliquePoint<f64>| Ok(v.iter().map(|a| -a).collect()),
            x0,
            &cfg,
        )
        .unwrap();
        let col = out.point.column(0);
        assert!((col[2] - 1.0).abs() < 1e-9, "{col:?}");
        assert!(col[0].abs() < 1e-4 && col[1].abs() < 1e-4);

        // grid search over the sphere for the best attainable value
        let mut best = f64::INFINITY;
        for i in 0..=200 {
            let theta = std::f64::consts::PI * i as f64 / 200.0;
            for j in 0..400 {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / 400.0;
                let p = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                best = best.min(-dot(&v, &p));
            }
        }
        assert!(out.final_cost() <= best + 1e-12);
    }

    #[test]
    fn iterates_stay_on_the_manifold_for_many_iterations() {
        // Rayleigh-quotient sum on OB(4, 3) keeps making progress for a while
        let a: Vec<f64> = vec![
            4.0, 1.0, 0.5, 0.0, 1.0, 3.0, 0.2, 0.1, 0.5, 0.2, 2.0, 0.3, 0.0, 0.1, 0.3, 1.0,
        ];
        let av = |x: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for (xc, oc) in x.chunks_exact(4).zip(out.chunks_exact_mut(4)) {
                for r in 0..4 {
                    oc[r] = (0..4).map(|c| a[r * 4 + c] * xc[c]).sum();
                }
            }
            out
        };
        let x0 = random_point(4, 3, 11);
        let cfg = CgConfig {
            max_iterations: 1000,
            gradient_tolerance: 0.0,
            ..CgConfig::default()
        };
        let mut worst: f64 = 0.0;
        let out = cg_minimize_observed(
            |x: &ObliquePoint<f64>| dot(x.as_slice(), &av(x.as_slice())),
            |x: &ObliquePoint<f64>| Ok(av(x.as_slice()).iter().map(|v| 2.0 * v).collect()),
            (*x0).clone(),
            &cfg,
            |_, x| worst = worst.max(x.max_norm_deviation()),
        )
        .unwrap();
        assert!(worst < 1e-10);
        assert!(out.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_start_cost_is_reported() {
        let x0 = (*random_point(2, 2, 12)).clone();
        let err = cg_minimize(
            |_: &ObliquePoint<f64>| f64::NAN,
            |x: &ObliquePoint<f64>| Ok(vec![0.0; x.as_slice().len()]),
            x0,
            &CgConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 0, .. }));
    }

    #[test]
    fn non_finite_gradient_carries_iteration() {
        let x0 = (*random_point(2, 2, 13)).clone();
        let mut calls = 0;
        let err = cg_minimize(
            |x: &ObliquePoint<f64>| x.as_slice()[0],
            |_: &ObliquePoint<f64>| {
                calls += 1;
                if calls > 2 {
                    Ok(vec![f64::INFINITY; 4])
                } else {
                    Ok(vec![1.0, 0.0, 0.0, 0.0])
                }
            },
            x0,
            &CgConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                what: "gradient",
                iteration: 2
            }
        ));
    }

    #[test]
    fn config_validation() {
        let bad = CgConfig::<f64> {
            armijo_shrink: 1.0,
            ..CgConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = CgConfig::<f64> {
            armijo_initial_step: 0.0,
            ..CgConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(CgConfig::<f64>::default().validate().is_ok());
    }

    #[test]
    fn flat_driver_solves_a_quadratic() {
        let out = cg_minimize_euclidean(
            |x: &[f64]| x[0] * x[0] + 10.0 * x[1] * x[1],
            |x: &[f64]| Ok(vec![2.0 * x[0], 20.0 * x[1]]),
            vec![1.0, 1.0],
            &CgConfig {
                gradient_tolerance: 1e-10,
                ..CgConfig::default()
            },
            |_, _| {},
        )
        .unwrap();
        assert!(out.point.iter().all(|v| v.abs() < 1e-8), "{:?}", out.point);
        assert!(out.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fletcher_reeves_also_descends() {
        let out = cg_minimize_euclidean(
            |x: &[f64]| (x[0] - 1.0).powi(2) + 5.0 * (x[1] + 2.0).powi(2),
            |x: &[f64]| Ok(vec![2.0 * (x[0] - 1.0), 10.0 * (x[1] + 2.0)]),
            vec![0.0, 0.0],
            &CgConfig {
                beta_rule: BetaRule::FletcherReeves,
                gradient_tolerance: 1e-9,
                max_iterations: 500,
                ..CgConfig::default()
            },
            |_, _| {},
        )
        .unwrap();
        assert!((out.point[0] - 1.0).abs() < 1e-6 && (out.point[1] + 2.0).abs() < 1e-6);
    }
}
