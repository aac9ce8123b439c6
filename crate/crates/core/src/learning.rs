//! Training-set extraction and joint learning of the intensity/depth operator pair.
//!
//! The learning objective for a pair `(Omega_I, Omega_D)` of `k x n` operators is
//!
//! ```text
//! G + kappa h(Omega_I) + mu r(Omega_I) + kappa h(Omega_D) + mu r(Omega_D)
//!
//! G = 1/M sum_i g_i^2,   g_i = sum_j log(1 + nu ((Omega_I s_I)_j^2 + (Omega_D s_D)_j^2))
//! h = -1/(n log n) log det(Omega^T Omega / k)
//! r = -sum_{i<l} log(1 - (w_i . w_l)^2)
//! ```
//!
//! and is minimized over the product of two oblique manifolds, where the
//! variables are the transposed operators.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::imaging::{DepthMap, GrayImage, GRAY_LEVELS};
use crate::manifold::{cg_minimize_observed, CgConfig, IterationRecord, ObliquePoint, StopReason};
use crate::operator::{cosupport, AnalysisOperator, OperatorPair};
use crate::scalar::{dot, Real};

/// Samples per parallel work item. Partial sums are combined in chunk order,
/// so results do not depend on the thread count.
const SAMPLE_CHUNK: usize = 256;

/// A registered intensity image and depth map of the same scene.
#[derive(Debug, Clone)]
pub struct RegisteredPair {
    pub id: String,
    pub intensity: GrayImage,
    pub depth: DepthMap,
}

/// Where a training patch came from: source pair index and top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub pair: usize,
    pub row: usize,
    pub col: usize,
}

/// `M` zero-mean intensity/depth patch pairs, each stored as a row of an `M x n`
/// matrix (patches vectorized column-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet<T> {
    pub intensity_patches: Vec<T>,
    pub depth_patches: Vec<T>,
    pub patch_side: usize,
    pub sources: Vec<String>,
    pub manifest: Vec<PatchOrigin>,
}

impl<T: Real> TrainingSet<T> {
    /// Builds a set from raw patch rows; the rows are mean-centered here.
    pub fn from_patches(patch_side: usize, mut intensity: Vec<T>, mut depth: Vec<T>) -> Result<Self> {
        let n = patch_side * patch_side;
        if n == 0 || !intensity.len().is_multiple_of(n) {
            return Err(Error::InvalidArgument(format!(
                "patch data length {} is not a multiple of n={n}",
                intensity.len()
            )));
        }
        check_len("depth patches", intensity.len(), depth.len())?;
        intensity.chunks_exact_mut(n).for_each(remove_mean);
        depth.chunks_exact_mut(n).for_each(remove_mean);
        let m = intensity.len() / n;
        Ok(Self {
            intensity_patches: intensity,
            depth_patches: depth,
            patch_side,
            sources: Vec::new(),
            manifest: (0..m)
                .map(|i| PatchOrigin {
                    pair: 0,
                    row: i,
                    col: 0,
                })
                .collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn len(&self) -> usize {
        self.intensity_patches.len() / self.n()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity_patches.is_empty()
    }

    pub fn intensity_patch(&self, i: usize) -> &[T] {
        let n = self.n();
        &self.intensity_patches[i * n..(i + 1) * n]
    }

    pub fn depth_patch(&self, i: usize) -> &[T] {
        let n = self.n();
        &self.depth_patches[i * n..(i + 1) * n]
    }

    /// Splits into the first `train` samples and the rest.
    pub fn split(mut self, train: usize) -> (Self, Self) {
        let n = self.n();
        let train = train.min(self.len());
        let held = Self {
            intensity_patches: self.intensity_patches.split_off(train * n),
            depth_patches: self.depth_patches.split_off(train * n),
            patch_side: self.patch_side,
            sources: self.sources.clone(),
            manifest: self.manifest.split_off(train),
        };
        (self, held)
    }

    /// CSV listing of the patch origins: `index,source,row,col`.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("index,source,row,col\n");
        for (i, o) in self.manifest.iter().enumerate() {
            let src = self.sources.get(o.pair).map(String::as_str).unwrap_or("");
            let _ = writeln!(out, "{i},{src},{},{}", o.row, o.col);
        }
        out
    }
}

fn remove_mean<T: Real>(patch: &mut [T]) {
    let mean = patch.iter().copied().sum::<T>() / T::of_usize(patch.len());
    patch.iter_mut().for_each(|v| *v -= mean);
}

/// Top-left corners of all `p x p` windows of `mask` that contain only valid pixels.
fn valid_windows(width: usize, height: usize, mask: &[bool], p: usize) -> Vec<(usize, usize)> {
    if width < p || height < p {
        return Vec::new();
    }
    // summed-area table of invalid pixels
    let w1 = width + 1;
    let mut sat = vec![0u32; w1 * (height + 1)];
    for r in 0..height {
        for c in 0..width {
            let bad = u32::from(!mask[r * width + c]);
            sat[(r + 1) * w1 + c + 1] = bad + sat[r * w1 + c + 1] + sat[(r + 1) * w1 + c] - sat[r * w1 + c];
        }
    }
    let mut out = Vec::new();
    for r in 0..=height - p {
        for c in 0..=width - p {
            let bad = sat[(r + p) * w1 + c + p] + sat[r * w1 + c] - sat[r * w1 + c + p] - sat[(r + p) * w1 + c];
            if bad == 0 {
                out.push((r, c));
            }
        }
    }
    out
}

/// Samples `samples` patch pairs uniformly without replacement, split as evenly as
/// possible across `pairs`. Windows touching an invalid depth pixel are never drawn.
/// Patch values are expressed in gray levels ([`GRAY_LEVELS`] per unit).
pub fn extract_training_pairs<T: Real>(
    pairs: &[RegisteredPair],
    samples: usize,
    patch_side: usize,
    seed: u64,
) -> Result<TrainingSet<T>> {
    if pairs.is_empty() || samples == 0 || patch_side == 0 {
        return Err(Error::InvalidArgument(
            "need at least one image pair, one sample and a positive patch side".into(),
        ));
    }
    for pair in pairs {
        let (i, d) = (pair.intensity.plane(), pair.depth.image.plane());
        if !i.same_size(d) {
            return Err(Error::SizeMismatch(format!(
                "pair '{}' is not registered: intensity {}x{}, depth {}x{}",
                pair.id,
                i.width(),
                i.height(),
                d.width(),
                d.height()
            )));
        }
    }

    let p = patch_side;
    let n = p * p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = samples / pairs.len();
    let extra = samples % pairs.len();

    let mut intensity = Vec::with_capacity(samples * n);
    let mut depth = Vec::with_capacity(samples * n);
    let mut manifest = Vec::with_capacity(samples);
    for (pi, pair) in pairs.iter().enumerate() {
        let quota = base + usize::from(pi < extra);
        let img = pair.intensity.plane();
        let dep = pair.depth.image.plane();
        let w = img.width();
        let windows = valid_windows(w, img.height(), &pair.depth.valid, p);
        if windows.len() < quota {
            return Err(Error::InsufficientSamples {
                requested: quota,
                available: windows.len(),
            });
        }
        for idx in index::sample(&mut rng, windows.len(), quota) {
            let (r, c) = windows[idx];
            for dc in 0..p {
                for dr in 0..p {
                    let at = (r + dr) * w + c + dc;
                    intensity.push(T::of(GRAY_LEVELS * img.as_slice()[at]));
                    depth.push(T::of(GRAY_LEVELS * dep.as_slice()[at]));
                }
            }
            manifest.push(PatchOrigin {
                pair: pi,
                row: r,
                col: c,
            });
        }
    }
    intensity.chunks_exact_mut(n).for_each(remove_mean);
    depth.chunks_exact_mut(n).for_each(remove_mean);
    Ok(TrainingSet {
        intensity_patches: intensity,
        depth_patches: depth,
        patch_side: p,
        sources: pairs.iter().map(|p| p.id.clone()).collect(),
        manifest,
    })
}

/// `sum_j log(1 + nu (a_j^2 + b_j^2))`
pub fn coupled_sparsity<T: Real>(a: &[T], b: &[T], nu: T) -> Result<T> {
    check_len("coupled_sparsity", a.len(), b.len())?;
    Ok(coupled_sparsity_unchecked(a, b, nu))
}

#[inline]
pub(crate) fn coupled_sparsity_unchecked<T: Real>(a: &[T], b: &[T], nu: T) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (T::one() + nu * (x * x + y * y)).ln())
        .sum()
}

fn check_set<T: Real>(
    omega_i: &AnalysisOperator<T>,
    omega_d: &AnalysisOperator<T>,
    set: &TrainingSet<T>,
) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    check_len("intensity operator patch size", set.n(), omega_i.n())?;
    check_len("depth operator patch size", set.n(), omega_d.n())?;
    check_len("operator row counts", omega_i.k(), omega_d.k())
}

/// `G = 1/M sum_i g_i^2`.
pub fn objective_g<T: Real>(
    omega_i: &AnalysisOperator<T>,
    omega_d: &AnalysisOperator<T>,
    set: &TrainingSet<T>,
    nu: T,
) -> Result<T> {
    check_set(omega_i, omega_d, set)?;
    let (n, k, m) = (set.n(), omega_i.k(), set.len());
    let partials: Vec<T> = set
        .intensity_patches
        .par_chunks(SAMPLE_CHUNK * n)
        .zip(set.depth_patches.par_chunks(SAMPLE_CHUNK * n))
        .map(|(si, sd)| {
            let mut a = vec![T::zero(); k];
            let mut b = vec![T::zero(); k];
            let mut acc = T::zero();
            for (pi, pd) in si.chunks_exact(n).zip(sd.chunks_exact(n)) {
                omega_i.analyze_into(pi, &mut a);
                omega_d.analyze_into(pd, &mut b);
                let g = coupled_sparsity_unchecked(&a, &b, nu);
                acc += g * g;
            }
            acc
        })
        .collect();
    Ok(partials.into_iter().sum::<T>() / T::of_usize(m))
}

/// Euclidean gradient of [`objective_g`] with respect to both operators.
pub fn objective_g_gradient<T: Real>(
    omega_i: &AnalysisOperator<T>,
    omega_d: &AnalysisOperator<T>,
    set: &TrainingSet<T>,
    nu: T,
) -> Result<(T, Vec<T>, Vec<T>)> {
    check_set(omega_i, omega_d, set)?;
    let (n, k, m) = (set.n(), omega_i.k(), set.len());
    let scale = T::of(2.0) / T::of_usize(m);
    let two_nu = T::of(2.0) * nu;
    let partials: Vec<(T, Vec<T>, Vec<T>)> = set
        .intensity_patches
        .par_chunks(SAMPLE_CHUNK * n)
        .zip(set.depth_patches.par_chunks(SAMPLE_CHUNK * n))
        .map(|(si, sd)| {
            let mut a = vec![T::zero(); k];
            let mut b = vec![T::zero(); k];
            let mut gi = vec![T::zero(); k * n];
            let mut gd = vec![T::zero(); k * n];
            let mut value = T::zero();
            for (pi, pd) in si.chunks_exact(n).zip(sd.chunks_exact(n)) {
                omega_i.analyze_into(pi, &mut a);
                omega_d.analyze_into(pd, &mut b);
                let g = coupled_sparsity_unchecked(&a, &b, nu);
                value += g * g;
                let outer = scale * g * two_nu;
                for j in 0..k {
                    let w = outer / (T::one() + nu * (a[j] * a[j] + b[j] * b[j]));
                    let (wa, wb) = (w * a[j], w * b[j]);
                    for ((x, y), (&u, &v)) in gi[j * n..(j + 1) * n]
                        .iter_mut()
                        .zip(&mut gd[j * n..(j + 1) * n])
                        .zip(pi.iter().zip(pd))
                    {
                        *x += wa * u;
                        *y += wb * v;
                    }
                }
            }
            (value, gi, gd)
        })
        .collect();
    let mut value = T::zero();
    let mut gi = vec![T::zero(); k * n];
    let mut gd = vec![T::zero(); k * n];
    for (v, a, b) in partials {
        value += v;
        gi.iter_mut().zip(&a).for_each(|(x, &y)| *x += y);
        gd.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
    }
    Ok((value / T::of_usize(m), gi, gd))
}

/// Determinants below this count as singular in the log-det barrier.
const DET_FLOOR: f64 = 1e-300;

fn gram_f64<T: Real>(omega: &AnalysisOperator<T>) -> (DMatrix<f64>, DMatrix<f64>) {
    let data: Vec<f64> = omega.as_slice().iter().map(|v| v.as_f64()).collect();
    let m = DMatrix::from_row_slice(omega.k(), omega.n(), &data);
    let gram = m.tr_mul(&m);
    (m, gram)
}

fn check_h_dims<T: Real>(omega: &AnalysisOperator<T>) -> Result<()> {
    if omega.n() < 2 {
        return Err(Error::InvalidArgument(
            "log-det penalty needs n >= 2 (log n > 0)".into(),
        ));
    }
    Ok(())
}

/// Log-det rank barrier `-1/(n log n) log det(Omega^T Omega / k)`; `+inf` once
/// the determinant drops below `1e-300`.
pub fn penalty_h<T: Real>(omega: &AnalysisOperator<T>) -> Result<T> {
    check_h_dims(omega)?;
    let (n, k) = (omega.n() as f64, omega.k() as f64);
    let (_, gram) = gram_f64(omega);
    let Some(chol) = (gram / k).cholesky() else {
        return Ok(T::infinity());
    };
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    if !logdet.is_finite() || logdet < DET_FLOOR.ln() {
        return Ok(T::infinity());
    }
    Ok(T::of(-logdet / (n * n.ln())))
}

/// `-2/(n log n) Omega (Omega^T Omega)^{-1}`, row-major `k x n`.
pub fn penalty_h_gradient<T: Real>(omega: &AnalysisOperator<T>) -> Result<Vec<T>> {
    check_h_dims(omega)?;
    if !penalty_h(omega)?.is_finite() {
        return Err(Error::Singular("Omega^T Omega is not positive definite".into()));
    }
    let n = omega.n() as f64;
    let (m, gram) = gram_f64(omega);
    let inv = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("Omega^T Omega is not positive definite".into()))?
        .inverse();
    let g = (m * inv) * (-2.0 / (n * n.ln()));
    let mut out = Vec::with_capacity(omega.k() * omega.n());
    for r in 0..omega.k() {
        for c in 0..omega.n() {
            out.push(T::of(g[(r, c)]));
        }
    }
    Ok(out)
}

fn coherence_limit<T: Real>() -> T {
    T::one() - T::of(1e-12)
}

/// Mutual-coherence barrier `-sum_{i<l} log(1 - (w_i . w_l)^2)`; `+inf` when two
/// rows are (numerically) parallel.
pub fn penalty_r<T: Real>(omega: &AnalysisOperator<T>) -> T {
    let rows: Vec<&[T]> = omega.rows().collect();
    let limit = coherence_limit::<T>();
    let mut acc = T::zero();
    for i in 0..rows.len() {
        for l in i + 1..rows.len() {
            let c = dot(rows[i], rows[l]);
            if c.abs() >= limit {
                return T::infinity();
            }
            acc -= (-(c * c)).ln_1p();
        }
    }
    acc
}

pub fn penalty_r_gradient<T: Real>(omega: &AnalysisOperator<T>) -> Result<Vec<T>> {
    let (k, n) = (omega.k(), omega.n());
    let rows: Vec<&[T]> = omega.rows().collect();
    let limit = coherence_limit::<T>();
    let mut grad = vec![T::zero(); k * n];
    for i in 0..k {
        for l in i + 1..k {
            let c = dot(rows[i], rows[l]);
            if c.abs() >= limit {
                return Err(Error::Singular(format!("rows {i} and {l} are parallel")));
            }
            let w = T::of(2.0) * c / (T::one() - c * c);
            for t in 0..n {
                grad[i * n + t] += w * rows[l][t];
                grad[l * n + t] += w * rows[i][t];
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct LearnConfig<T> {
    pub nu: T,
    pub kappa: T,
    pub mu: T,
    /// Rows per operator.
    pub k: usize,
    pub cg: CgConfig<T>,
    pub rng_seed: u64,
}

impl<T: Real> Default for LearnConfig<T> {
    /// Five-by-five patches with twofold redundancy.
    fn default() -> Self {
        Self::for_patch_side(5)
    }
}

impl<T: Real> LearnConfig<T> {
    /// `nu = 10`, `kappa = 9e4`, `mu = 1e2`, `k = 2 p^2`, 3000 CG iterations.
    pub fn for_patch_side(p: usize) -> Self {
        Self {
            nu: T::of(10.0),
            kappa: T::of(9e4),
            mu: T::of(1e2),
            k: 2 * p * p,
            cg: CgConfig::default().with_max_iterations(3000),
            rng_seed: 0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k < n {
            return Err(Error::InvalidArgument(format!(
                "k must be at least n: k={}, n={n}",
                self.k
            )));
        }
        for (name, v) in [("nu", self.nu), ("kappa", self.kappa), ("mu", self.mu)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        self.cg.validate()
    }
}

/// The value of the penalized learning objective, termwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms<T> {
    pub g: T,
    pub h_intensity: T,
    pub r_intensity: T,
    pub h_depth: T,
    pub r_depth: T,
    pub total: T,
}

pub fn learning_objective_terms<T: Real>(
    omega_i: &AnalysisOperator<T>,
    omega_d: &AnalysisOperator<T>,
    set: &TrainingSet<T>,
    cfg: &LearnConfig<T>,
) -> Result<ObjectiveTerms<T>> {
    let g = objective_g(omega_i, omega_d, set, cfg.nu)?;
    let h_intensity = penalty_h(omega_i)?;
    let r_intensity = penalty_r(omega_i);
    let h_depth = penalty_h(omega_d)?;
    let r_depth = penalty_r(omega_d);
    let total = g + cfg.kappa * h_intensity + cfg.mu * r_intensity + cfg.kappa * h_depth + cfg.mu * r_depth;
    Ok(ObjectiveTerms {
        g,
        h_intensity,
        r_intensity,
        h_depth,
        r_depth,
        total,
    })
}

pub fn learning_objective<T: Real>(
    omega_i: &AnalysisOperator<T>,
    omega_d: &AnalysisOperator<T>,
    set: &TrainingSet<T>,
    cfg: &LearnConfig<T>,
) -> Result<T> {
    Ok(learning_objective_terms(omega_i, omega_d, set, cfg)?.total)
}

/// Euclidean gradient of [`learning_objective`] as two row-major `k x n` matrices.
pub fn learning_gradient<T: Real>(
    omega_i: &AnalysisOperator<T>,
    omega_d: &AnalysisOperator<T>,
    set: &TrainingSet<T>,
    cfg: &LearnConfig<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let (_, mut gi, mut gd) = objective_g_gradient(omega_i, omega_d, set, cfg.nu)?;
    for (grad, omega) in [(&mut gi, omega_i), (&mut gd, omega_d)] {
        let h = penalty_h_gradient(omega)?;
        let r = penalty_r_gradient(omega)?;
        for ((x, &a), &b) in grad.iter_mut().zip(&h).zip(&r) {
            *x += cfg.kappa * a + cfg.mu * b;
        }
    }
    Ok((gi, gd))
}

/// Seeded standard-normal `k x n` matrix with normalized rows.
pub fn random_operator<T: Real>(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<AnalysisOperator<T>> {
    let rows = (0..k * n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect();
    let op = AnalysisOperator::raw(k, n, rows)?;
    let point = ObliquePoint::from_unnormalized(n, k, op.as_slice().to_vec())?;
    AnalysisOperator::raw(k, n, point.into_vec())
}

#[derive(Debug, Clone)]
pub struct LearnOutcome<T> {
    pub pair: OperatorPair<T>,
    pub initial: OperatorPair<T>,
    pub trace: Vec<IterationRecord<T>>,
    pub stop: StopReason,
}

fn split_point<T: Real>(x: &[T], k: usize, n: usize) -> Result<(AnalysisOperator<T>, AnalysisOperator<T>)> {
    Ok((
        AnalysisOperator::raw(k, n, x[..k * n].to_vec())?,
        AnalysisOperator::raw(k, n, x[k * n..].to_vec())?,
    ))
}

/// Minimizes the penalized objective over `OB(n, k) x OB(n, k)`.
pub fn learn_operator_pair<T: Real>(set: &TrainingSet<T>, cfg: &LearnConfig<T>) -> Result<LearnOutcome<T>> {
    learn_operator_pair_observed(set, cfg, |_| {})
}

pub fn learn_operator_pair_observed<T: Real>(
    set: &TrainingSet<T>,
    cfg: &LearnConfig<T>,
    mut observe: impl FnMut(&IterationRecord<T>),
) -> Result<LearnOutcome<T>> {
    if set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n = set.n();
    let k = cfg.k;
    cfg.validate(n)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let init_i = random_operator::<T>(k, n, &mut rng)?;
    let init_d = random_operator::<T>(k, n, &mut rng)?;
    let initial = OperatorPair {
        intensity: init_i.clone(),
        depth: init_d.clone(),
        nu: cfg.nu,
    };

    let mut x0 = init_i.as_slice().to_vec();
    x0.extend_from_slice(init_d.as_slice());
    let x0 = ObliquePoint::from_raw_unchecked(n, 2 * k, x0);

    let cost = |x: &ObliquePoint<T>| -> T {
        split_point(x.as_slice(), k, n)
            .and_then(|(a, b)| learning_objective(&a, &b, set, cfg))
            .unwrap_or(T::infinity())
    };
    let grad = |x: &ObliquePoint<T>| -> Result<Vec<T>> {
        let (a, b) = split_point(x.as_slice(), k, n)?;
        let (mut gi, gd) = learning_gradient(&a, &b, set, cfg)?;
        gi.extend_from_slice(&gd);
        Ok(gi)
    };
    let out = cg_minimize_observed(cost, grad, x0, &cfg.cg, |r, _| observe(r))?;
    let (a, b) = split_point(out.point.as_slice(), k, n)?;
    let pair = OperatorPair::new(a, b, cfg.nu)?;
    Ok(LearnOutcome {
        pair,
        initial,
        trace: out.records,
        stop: out.stop,
    })
}

/// Writes `iteration,objective,grad_norm,step` rows.
pub fn write_learning_trace(path: impl AsRef<Path>, trace: &[IterationRecord<impl Real>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,objective,grad_norm,step\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e}",
            r.iteration,
            r.cost.as_f64(),
            r.grad_norm.as_f64(),
            r.step.as_f64()
        );
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Empirical co-support coupling of a learned pair on a set of patch pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoSupportCoupling {
    pub tolerance_intensity: f64,
    pub tolerance_depth: f64,
    /// `Pr(j in cosupp(Omega_D s_D) | j in cosupp(Omega_I s_I))`
    pub conditional: f64,
    /// `Pr(j in cosupp(Omega_D s_D))`
    pub unconditional: f64,
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Co-support frequencies with each modality thresholded at the `quantile` of its
/// own coefficient magnitudes.
pub fn cosupport_coupling<T: Real>(
    pair: &OperatorPair<T>,
    set: &TrainingSet<T>,
    quantile: f64,
) -> Result<CoSupportCoupling> {
    check_set(&pair.intensity, &pair.depth, set)?;
    let k = pair.k();
    let mut ci = Vec::with_capacity(set.len() * k);
    let mut cd = Vec::with_capacity(set.len() * k);
    for i in 0..set.len() {
        ci.extend(pair.intensity.analyze_patch(set.intensity_patch(i))?);
        cd.extend(pair.depth.analyze_patch(set.depth_patch(i))?);
    }
    let mut mag: Vec<f64> = ci.iter().map(|v| v.abs().as_f64()).collect();
    let tau_i = percentile(&mut mag, quantile);
    let mut mag: Vec<f64> = cd.iter().map(|v| v.abs().as_f64()).collect();
    let tau_d = percentile(&mut mag, quantile);

    let (mut in_i, mut in_d, mut both) = (0usize, 0usize, 0usize);
    for (a, b) in ci.chunks_exact(k).zip(cd.chunks_exact(k)) {
        let si = cosupport(a, T::of(tau_i));
        let sd = cosupport(b, T::of(tau_d));
        in_i += si.len();
        in_d += sd.len();
        both += si.indices.iter().filter(|&&j| sd.contains(j)).count();
    }
    Ok(CoSupportCoupling {
        tolerance_intensity: tau_i,
        tolerance_depth: tau_d,
        conditional: if in_i == 0 { 0.0 } else { both as f64 / in_i as f64 },
        unconditional: in_d as f64 / ci.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::Plane;
    use rand::Rng;

    fn identity_stack(n: usize) -> AnalysisOperator<f64> {
        let mut rows = vec![0.0; 2 * n * n];
        for i in 0..n {
            rows[i * n + i] = 1.0;
            rows[(n + i) * n + i] = 1.0;
        }
        AnalysisOperator::raw(2 * n, n, rows).unwrap()
    }

    fn random_set(m: usize, p: usize, seed: u64) -> TrainingSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p * p;
        let a = (0..m * n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b = (0..m * n).map(|_| rng.random_range(-0.5..0.5)).collect();
        TrainingSet::from_patches(p, a, b).unwrap()
    }

    #[test]
    fn coupled_sparsity_values() {
        assert_eq!(coupled_sparsity(&[0.0; 3], &[0.0; 3], 10.0).unwrap(), 0.0);
        assert!((coupled_sparsity(&[1.0], &[0.0], 10.0).unwrap() - 11f64.ln()).abs() < 1e-15);
        let a: [f64; 3] = [0.3, -1.2, 0.05];
        let b = [0.7, 0.1, -0.4];
        let v = coupled_sparsity(&a, &b, 10.0).unwrap();
        let (ap, bp) = ([a[2], a[0], a[1]], [b[2], b[0], b[1]]);
        assert!((coupled_sparsity(&ap, &bp, 10.0).unwrap() - v).abs() < 1e-14);
        assert!(coupled_sparsity(&a, &b[..2], 10.0).is_err());
    }

    #[test]
    fn g_of_zero_patches_is_zero() {
        let set = TrainingSet::from_patches(2, vec![0.0; 12], vec![0.0; 12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_operator::<f64>(8, 4, &mut rng).unwrap();
        let b = random_operator::<f64>(8, 4, &mut rng).unwrap();
        assert_eq!(objective_g(&a, &b, &set, 10.0).unwrap(), 0.0);
        let (_, gi, gd) = objective_g_gradient(&a, &b, &set, 10.0).unwrap();
        assert!(gi.iter().chain(&gd).all(|&v| v == 0.0));
    }

    #[test]
    fn g_of_single_sample_is_squared_sparsity() {
        let set = random_set(1, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_operator::<f64>(8, 4, &mut rng).unwrap();
        let b = random_operator::<f64>(8, 4, &mut rng).unwrap();
        let g = coupled_sparsity(
            &a.analyze_patch(set.intensity_patch(0)).unwrap(),
            &b.analyze_patch(set.depth_patch(0)).unwrap(),
            10.0,
        )
        .unwrap();
        assert_eq!(objective_g(&a, &b, &set, 10.0).unwrap(), g * g);
    }

    #[test]
    fn g_matches_a_plain_sample_loop() {
        let set = random_set(3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a =
            AnalysisOperator::from_unnormalized(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b =
            AnalysisOperator::from_unnormalized(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut expected = 0.0;
        for i in 0..3 {
            let mut g = 0.0;
            for j in 0..6 {
                let x: f64 = (0..4).map(|t| a.row(j)[t] * set.intensity_patch(i)[t]).sum();
                let y: f64 = (0..4).map(|t| b.row(j)[t] * set.depth_patch(i)[t]).sum();
                g += (1.0 + 10.0 * (x * x + y * y)).ln();
            }
            expected += g * g;
        }
        expected /= 3.0;
        assert!((objective_g(&a, &b, &set, 10.0).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn empty_set_is_rejected() {
        let set = TrainingSet::<f64>::from_patches(2, vec![], vec![]).unwrap();
        let op = identity_stack(4);
        assert!(matches!(
            objective_g(&op, &op, &set, 10.0),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn log_det_penalty_of_stacked_identities_is_one() {
        for n in [3, 5, 10] {
            let h = penalty_h(&identity_stack(n)).unwrap();
            assert!((h - 1.0).abs() < 1e-12, "n={n}: {h}");
        }
    }

    #[test]
    fn log_det_penalty_sentinel_and_symmetry() {
        // rank-deficient: every row equals e_1
        let mut rows = vec![0.0; 8 * 4];
        for j in 0..8 {
            rows[j * 4] = 1.0;
        }
        let op = AnalysisOperator::raw(8, 4, rows).unwrap();
        assert_eq!(penalty_h(&op).unwrap(), f64::INFINITY);
        assert!(penalty_h_gradient(&op).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = random_operator::<f64>(8, 4, &mut rng).unwrap();
        let mut rows: Vec<Vec<f64>> = op.rows().map(<[f64]>::to_vec).collect();
        rows.reverse();
        rows.swap(1, 5);
        let permuted = AnalysisOperator::raw(8, 4, rows.concat()).unwrap();
        assert!((penalty_h(&op).unwrap() - penalty_h(&permuted).unwrap()).abs() < 1e-12);

        let tiny = AnalysisOperator::raw(1, 1, vec![1.0]).unwrap();
        assert!(penalty_h(&tiny).is_err());
    }

    #[test]
    fn coherence_penalty_values() {
        let mut id = vec![0.0; 16];
        (0..4).for_each(|i| id[i * 5] = 1.0);
        assert_eq!(penalty_r(&AnalysisOperator::raw(4, 4, id).unwrap()), 0.0);

        let dup = AnalysisOperator::raw(2, 2, vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        assert_eq!(penalty_r(&dup), f64::INFINITY);
        assert!(penalty_r_gradient(&dup).is_err());

        let (s, c) = (60f64.to_radians().sin(), 60f64.to_radians().cos());
        let sixty = AnalysisOperator::raw(2, 2, vec![1.0, 0.0, c, s]).unwrap();
        assert!((penalty_r(&sixty) - (-(0.75f64).ln())).abs() < 1e-14);
    }

    #[test]
    fn gradient_of_zero_set_is_penalty_gradient() {
        let set = TrainingSet::from_patches(2, vec![0.0; 20], vec![0.0; 20]).unwrap();
        let cfg = LearnConfig::<f64>::for_patch_side(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_operator::<f64>(8, 4, &mut rng).unwrap();
        let b = random_operator::<f64>(8, 4, &mut rng).unwrap();
        let (gi, _) = learning_gradient(&a, &b, &set, &cfg).unwrap();
        let h = penalty_h_gradient(&a).unwrap();
        let r = penalty_r_gradient(&a).unwrap();
        for t in 0..gi.len() {
            assert!((gi[t] - (9e4 * h[t] + 100.0 * r[t])).abs() < 1e-9 * gi[t].abs().max(1.0));
        }
    }

    #[test]
    fn objective_is_the_sum_of_its_terms() {
        let set = random_set(5, 2, 8);
        let cfg = LearnConfig::<f64>::for_patch_side(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_operator::<f64>(8, 4, &mut rng).unwrap();
        let b = random_operator::<f64>(8, 4, &mut rng).unwrap();
        let expected = objective_g(&a, &b, &set, 10.0).unwrap()
            + 9e4 * penalty_h(&a).unwrap()
            + 100.0 * penalty_r(&a)
            + 9e4 * penalty_h(&b).unwrap()
            + 100.0 * penalty_r(&b);
        assert_eq!(learning_objective(&a, &b, &set, &cfg).unwrap(), expected);
    }

    fn pair_from_planes(id: &str, i: Plane<f64>, d: Plane<f64>, valid: Vec<bool>) -> RegisteredPair {
        RegisteredPair {
            id: id.into(),
            intensity: GrayImage::new(i, 8).unwrap(),
            depth: DepthMap::new(GrayImage::new(d, 8).unwrap(), valid).unwrap(),
        }
    }

    #[test]
    fn constant_images_give_zero_patches() {
        let pair = pair_from_planes(
            "c",
            Plane::filled(12, 10, 0.4),
            Plane::filled(12, 10, 0.7),
            vec![true; 120],
        );
        let set = extract_training_pairs::<f64>(&[pair], 20, 5, 1).unwrap();
        assert_eq!(set.len(), 20);
        assert!(set
            .intensity_patches
            .iter()
            .chain(&set.depth_patches)
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn extraction_is_seeded_and_apportioned() {
        let mk = |id: &str, s: f64| {
            pair_from_planes(
                id,
                Plane::from_fn(16, 12, |r, c| ((r * 3 + c) as f64 * s).sin().abs()),
                Plane::from_fn(16, 12, |r, c| ((r + 2 * c) as f64 * s).cos().abs()),
                vec![true; 192],
            )
        };
        let pairs = [mk("a", 0.3), mk("b", 0.7), mk("c", 0.1)];
        let s1 = extract_training_pairs::<f64>(&pairs, 10, 5, 42).unwrap();
        let s2 = extract_training_pairs::<f64>(&pairs, 10, 5, 42).unwrap();
        assert_eq!(s1, s2);
        let counts: Vec<usize> = (0..3)
            .map(|p| s1.manifest.iter().filter(|o| o.pair == p).count())
            .collect();
        assert_eq!(counts, vec![4, 3, 3]);
        for i in 0..s1.len() {
            let m: f64 = s1.intensity_patch(i).iter().sum::<f64>() / 25.0;
            assert!(m.abs() < 1e-10);
        }
        assert!(s1.manifest_csv().starts_with("index,source,row,col\n0,a,"));
    }

    #[test]
    fn masked_stripe_is_never_sampled() {
        let (w, h) = (20, 14);
        let valid: Vec<bool> = (0..w * h).map(|i| !(8..11).contains(&(i % w))).collect();
        let pair = pair_from_planes(
            "s",
            Plane::from_fn(w, h, |r, c| ((r * c) % 7) as f64 / 7.0),
            Plane::from_fn(w, h, |r, c| ((r + c) % 5) as f64 / 5.0),
            valid.clone(),
        );
        let set = extract_training_pairs::<f64>(std::slice::from_ref(&pair), 40, 3, 3).unwrap();
        for o in &set.manifest {
            for dr in 0..3 {
                for dc in 0..3 {
                    assert!(valid[(o.row + dr) * w + o.col + dc], "{o:?}");
                }
            }
        }
        // only columns 0..=5 and 11..=17 can host a 3-wide window: 13 * 12 positions
        assert!(matches!(
            extract_training_pairs::<f64>(&[pair], 157, 3, 3),
            Err(Error::InsufficientSamples { available: 156, .. })
        ));
    }

    #[test]
    fn unregistered_pair_is_rejected() {
        let pair = pair_from_planes(
            "bad",
            Plane::filled(10, 10, 0.1),
            Plane::filled(10, 10, 0.1),
            vec![true; 100],
        );
        let mut pair = pair;
        pair.depth = DepthMap::new(GrayImage::new(Plane::filled(9, 10, 0.2), 8).unwrap(), vec![true; 90]).unwrap();
        let err = extract_training_pairs::<f64>(&[pair], 5, 3, 0).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn percentile_uses_nearest_rank() {
        let mut v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&mut v, 0.1), 2.0);
        assert_eq!(percentile(&mut v, 1.0), 20.0);
    }
}
