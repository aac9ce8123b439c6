//! Analysis operators, their image-global application and its adjoint.
//!
//! Patches are `p x p` windows vectorized column-major: entry `(dr, dc)` of the
//! window sits at index `dc * p + dr`. The window "centered" at pixel `(r, c)`
//! covers rows `r - p/2 ..= r - p/2 + p - 1` (integer division), and likewise for
//! columns. Pixels outside the image are mirrored without repeating the edge.

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::manifold::ObliquePoint;
use crate::plane::{reflect, Plane};
use crate::scalar::{dot, norm_sq, Real};

fn row_tolerance<T: Real>() -> T {
    T::of(1e-10).max(T::epsilon() * T::of(64.0))
}

fn perfect_square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// A `k x n` analysis operator, stored row-major.
///
/// [`AnalysisOperator::new`] enforces the model invariants (`k >= n`, unit rows,
/// square patches). [`AnalysisOperator::raw`] accepts any shape-consistent matrix,
/// which is convenient for hand-made filters such as finite-difference stencils.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOperator<T> {
    k: usize,
    n: usize,
    rows: Vec<T>,
}

impl<T: Real> AnalysisOperator<T> {
    pub fn new(k: usize, n: usize, rows: Vec<T>) -> Result<Self> {
        let op = Self::raw(k, n, rows)?;
        op.validate()?;
        Ok(op)
    }

    pub fn raw(k: usize, n: usize, rows: Vec<T>) -> Result<Self> {
        if k == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "operator dimensions must be positive, got {k}x{n}"
            )));
        }
        check_len("analysis operator", k * n, rows.len())?;
        Ok(Self { k, n, rows })
    }

    /// Normalizes every row to unit length and then validates.
    pub fn from_unnormalized(k: usize, n: usize, mut rows: Vec<T>) -> Result<Self> {
        check_len("analysis operator", k * n, rows.len())?;
        for (j, row) in rows.chunks_exact_mut(n.max(1)).enumerate() {
            let norm = norm_sq(row).sqrt();
            if !(norm > T::zero()) {
                return Err(Error::RowNorm {
                    operator: "analysis",
                    row: j,
                    norm: 0.0,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(k, n, rows)
    }

    /// Operator whose transpose is `point`.
    pub fn from_oblique(point: &ObliquePoint<T>) -> Result<Self> {
        Self::new(point.k(), point.n(), point.as_slice().to_vec())
    }

    pub fn to_oblique(&self) -> Result<ObliquePoint<T>> {
        ObliquePoint::new(self.n, self.k, self.rows.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < self.n {
            return Err(Error::InvalidArgument(format!(
                "operator must have k >= n, got k={}, n={}",
                self.k, self.n
            )));
        }
        if self.side().is_none() {
            return Err(Error::InvalidArgument(format!(
                "patch dimension {} is not a perfect square",
                self.n
            )));
        }
        self.check_row_norms("analysis", row_tolerance())
    }

    pub(crate) fn check_row_norms(&self, name: &'static str, tol: T) -> Result<()> {
        for (j, row) in self.rows().enumerate() {
            let norm = norm_sq(row).sqrt();
            if !((norm - T::one()).abs() <= tol) {
                return Err(Error::RowNorm {
                    operator: name,
                    row: j,
                    norm: norm.as_f64(),
                });
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Patch side `p` with `p * p = n`, if `n` is a perfect square.
    pub fn side(&self) -> Option<usize> {
        perfect_square_side(self.n)
    }

    pub fn row(&self, j: usize) -> &[T] {
        &self.rows[j * self.n..(j + 1) * self.n]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.rows.chunks_exact(self.n)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.rows
    }

    pub fn cast<U: Real>(&self) -> AnalysisOperator<U> {
        AnalysisOperator {
            k: self.k,
            n: self.n,
            rows: self.rows.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Rows with their mean removed, so that `centered().analyze_patch(s)`
    /// equals `analyze_patch(s - mean(s))`. The result is generally not
    /// row-normalized.
    pub fn centered(&self) -> Self {
        let n = T::of_usize(self.n);
        let mut rows = self.rows.clone();
        for row in rows.chunks_exact_mut(self.n) {
            let mean = row.iter().copied().sum::<T>() / n;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        Self {
            k: self.k,
            n: self.n,
            rows,
        }
    }

    /// `Omega s` for a single vectorized patch.
    pub fn analyze_patch(&self, s: &[T]) -> Result<Vec<T>> {
        check_len("analyze_patch", self.n, s.len())?;
        Ok(self.rows().map(|row| dot(row, s)).collect())
    }

    pub(crate) fn analyze_into(&self, s: &[T], out: &mut [T]) {
        for (o, row) in out.iter_mut().zip(self.rows()) {
            *o = dot(row, s);
        }
    }
}

/// The coupled intensity/depth operators together with the sparsity weight
/// they were learned with.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorPair<T> {
    pub intensity: AnalysisOperator<T>,
    pub depth: AnalysisOperator<T>,
    pub nu: T,
}

impl<T: Real> OperatorPair<T> {
    pub fn new(intensity: AnalysisOperator<T>, depth: AnalysisOperator<T>, nu: T) -> Result<Self> {
        let pair = Self { intensity, depth, nu };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        self.intensity.validate()?;
        self.depth.validate()?;
        check_len("operator pair row count", self.intensity.k, self.depth.k)?;
        check_len("operator pair patch size", self.intensity.n, self.depth.n)?;
        if !(self.nu > T::zero()) || !self.nu.is_finite() {
            return Err(Error::InvalidArgument(format!("nu must be positive, got {}", self.nu)));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.depth.k
    }

    pub fn n(&self) -> usize {
        self.depth.n
    }

    /// Both operators with row means removed (see [`AnalysisOperator::centered`]).
    pub fn centered(&self) -> Self {
        Self {
            intensity: self.intensity.centered(),
            depth: self.depth.centered(),
            nu: self.nu,
        }
    }

    pub fn cast<U: Real>(&self) -> OperatorPair<U> {
        OperatorPair {
            intensity: self.intensity.cast(),
            depth: self.depth.cast(),
            nu: U::of(self.nu.as_f64()),
        }
    }
}

/// `k` analysis coefficients for every pixel of a `width x height` image,
/// stored pixel-major: coefficient `j` of pixel `(r, c)` is at
/// `(r * width + c) * k + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientStack<T> {
    width: usize,
    height: usize,
    k: usize,
    values: Vec<T>,
}

impl<T: Real> CoefficientStack<T> {
    pub fn new(width: usize, height: usize, k: usize, values: Vec<T>) -> Result<Self> {
        check_len("coefficient stack", width * height * k, values.len())?;
        Ok(Self {
            width,
            height,
            k,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, k: usize) -> Self {
        Self {
            width,
            height,
            k,
            values: vec![T::zero(); width * height * k],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, j: usize) -> T {
        self.values[(row * self.width + col) * self.k + j]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.k;
        &self.values[start..start + self.k]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }
}

/// Indices `j` with `|coeffs_j| <= tolerance` (zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct CoSupport<T> {
    pub indices: Vec<usize>,
    pub tolerance: T,
}

impl<T: Real> CoSupport<T> {
    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn cosupport<T: Real>(coeffs: &[T], tolerance: T) -> CoSupport<T> {
    CoSupport {
        indices: coeffs
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() <= tolerance)
            .map(|(j, _)| j)
            .collect(),
        tolerance,
    }
}

/// Mirrored source indices for every patch tap along one axis:
/// `table[i * p + t]` is the image index feeding tap `t` of the window at `i`.
fn tap_table(len: usize, p: usize) -> Vec<usize> {
    let half = (p / 2) as isize;
    let mut table = Vec::with_capacity(len * p);
    for i in 0..len as isize {
        for t in 0..p as isize {
            table.push(reflect(i - half + t, len));
        }
    }
    table
}

fn global_geometry<T: Real>(op: &AnalysisOperator<T>, width: usize, height: usize) -> Result<usize> {
    let p = op
        .side()
        .ok_or_else(|| Error::InvalidArgument(format!("patch dimension {} is not a perfect square", op.n)))?;
    if width < p || height < p {
        return Err(Error::InvalidArgument(format!(
            "image {width}x{height} is smaller than the {p}x{p} patch"
        )));
    }
    Ok(p)
}

/// Applies `op` to the patch around every pixel of `image`.
pub fn apply_global<T: Real>(op: &AnalysisOperator<T>, image: &Plane<T>) -> Result<CoefficientStack<T>> {
    let (w, h) = (image.width(), image.height());
    let p = global_geometry(op, w, h)?;
    let (k, n) = (op.k, op.n);
    let rows_tab = tap_table(h, p);
    let cols_tab = tap_table(w, p);
    let img = image.as_slice();

    let mut values = vec![T::zero(); w * h * k];
    values.par_chunks_mut(w * k).enumerate().for_each(|(r, out_row)| {
        let src_rows = &rows_tab[r * p..(r + 1) * p];
        let mut patch = vec![T::zero(); n];
        for c in 0..w {
            let src_cols = &cols_tab[c * p..(c + 1) * p];
            for (dc, &sc) in src_cols.iter().enumerate() {
                for (dr, &sr) in src_rows.iter().enumerate() {
                    patch[dc * p + dr] = img[sr * w + sc];
                }
            }
            op.analyze_into(&patch, &mut out_row[c * k..(c + 1) * k]);
        }
    });
    Ok(CoefficientStack {
        width: w,
        height: h,
        k,
        values,
    })
}

/// Exact transpose of [`apply_global`], mirrored taps included.
pub fn apply_global_adjoint<T: Real>(op: &AnalysisOperator<T>, stack: &CoefficientStack<T>) -> Result<Plane<T>> {
    check_len("adjoint coefficient count", op.k, stack.k)?;
    let (w, h) = (stack.width, stack.height);
    let p = global_geometry(op, w, h)?;
    let (k, n) = (op.k, op.n);
    let rows_tab = tap_table(h, p);
    let cols_tab = tap_table(w, p);

    let mut out = vec![T::zero(); w * h];
    // Back-projected patches are computed in parallel per band of rows, then
    // scattered sequentially so the accumulation order is fixed.
    const BAND: usize = 32;
    let mut patches = vec![T::zero(); BAND.min(h) * w * n];
    for band_start in (0..h).step_by(BAND) {
        let band_rows = BAND.min(h - band_start);
        let band = &mut patches[..band_rows * w * n];
        band.par_chunks_mut(w * n).enumerate().for_each(|(i, prow)| {
            let r = band_start + i;
            let coeffs = &stack.values[r * w * k..(r + 1) * w * k];
            for (c, patch) in prow.chunks_exact_mut(n).enumerate() {
                patch.iter_mut().for_each(|v| *v = T::zero());
                for (row, &a) in op.rows().zip(&coeffs[c * k..(c + 1) * k]) {
                    for (pv, &o) in patch.iter_mut().zip(row) {
                        *pv += a * o;
                    }
                }
            }
        });
        for (i, prow) in band.chunks_exact(w * n).enumerate() {
            let r = band_start + i;
            let src_rows = &rows_tab[r * p..(r + 1) * p];
            for (c, patch) in prow.chunks_exact(n).enumerate() {
                let src_cols = &cols_tab[c * p..(c + 1) * p];
                for (dc, &sc) in src_cols.iter().enumerate() {
                    for (dr, &sr) in src_rows.iter().enumerate() {
                        out[sr * w + sc] += patch[dc * p + dr];
                    }
                }
            }
        }
    }
    Plane::new(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Plane<f64> {
        Plane::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_op(k: usize, n: usize, rng: &mut ChaCha8Rng) -> AnalysisOperator<f64> {
        let rows = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        AnalysisOperator::from_unnormalized(k, n, rows).unwrap()
    }

    #[test]
    fn analyze_patch_basics() {
        let op = random_op(6, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(op.analyze_patch(&[0.0; 4]).unwrap(), vec![0.0; 6]);

        let id = AnalysisOperator::new(4, 4, {
            let mut v = vec![0.0; 16];
            (0..4).for_each(|i| v[i * 5] = 1.0);
            v
        })
        .unwrap();
        assert_eq!(
            id.analyze_patch(&[1.0, -2.0, 3.0, 0.5]).unwrap(),
            vec![1.0, -2.0, 3.0, 0.5]
        );

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let diff = AnalysisOperator::raw(1, 2, vec![s, -s]).unwrap();
        assert_eq!(diff.analyze_patch(&[3.0, 3.0]).unwrap(), vec![0.0]);
        assert!(diff.analyze_patch(&[1.0]).is_err());
    }

    #[test]
    fn cosupport_thresholds() {
        assert_eq!(cosupport(&[0.0, 1.0, 0.0], 0.0).indices, vec![0, 2]);
        let c = [0.3, -0.7, 0.1];
        assert_eq!(cosupport(&c, 0.7).indices, vec![0, 1, 2]);
        let cs = cosupport(&[0.01, 0.5, 0.009], 0.01);
        assert_eq!(cs.indices, vec![0, 2]);
        assert!(cs.contains(2) && !cs.contains(1));
    }

    #[test]
    fn validation_catches_invariant_violations() {
        assert!(AnalysisOperator::new(2, 4, vec![0.5; 8]).is_err()); // k < n
        assert!(AnalysisOperator::new(3, 2, vec![0.5; 6]).is_err()); // not square
        assert!(matches!(
            AnalysisOperator::new(4, 4, vec![0.25; 16]),
            Err(Error::RowNorm { .. })
        ));
    }

    #[test]
    fn zero_sum_rows_annihilate_constants() {
        // rows: horizontal and vertical differences on 2x2 patches
        let rows = vec![
            1.0, 1.0, -1.0, -1.0, //
            1.0, -1.0, 1.0, -1.0, //
            1.0, -1.0, -1.0, 1.0, //
            0.0, 1.0, -1.0, 0.0,
        ];
        let op = AnalysisOperator::from_unnormalized(4, 4, rows).unwrap();
        let img = Plane::filled(7, 5, 0.37f64);
        let stack = apply_global(&op, &img).unwrap();
        assert!(stack.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unit_patch_scales_the_image() {
        let op = AnalysisOperator::raw(1, 1, vec![2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_plane(4, 3, &mut rng);
        let stack = apply_global(&op, &img).unwrap();
        let expected: Vec<f64> = img.as_slice().iter().map(|v| 2.0 * v).collect();
        assert_eq!(stack.as_slice(), expected.as_slice());

        let back = apply_global_adjoint(&op, &stack).unwrap();
        let expected: Vec<f64> = stack.as_slice().iter().map(|v| 2.0 * v).collect();
        assert_eq!(back.as_slice(), expected.as_slice());
    }

    #[test]
    fn laplacian_matches_direct_stencil_with_mirrored_borders() {
        // 3x3 Laplacian, column-major (symmetric so order is immaterial here)
        let lap = vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let op = AnalysisOperator::raw(1, 9, lap).unwrap();
        let img = Plane::from_fn(5, 5, |r, c| ((r * 7 + c * 3) % 5) as f64 + 0.1 * (r * c) as f64);
        let stack = apply_global(&op, &img).unwrap();
        let at = |r: isize, c: isize| img.get(reflect(r, 5), reflect(c, 5));
        for r in 0..5isize {
            for c in 0..5isize {
                let expected = at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c);
                let got = stack.get(r as usize, c as usize, 0);
                assert!((got - expected).abs() < 1e-12, "({r},{c}): {got} vs {expected}");
            }
        }
    }

    #[test]
    fn patch_vectorization_is_column_major() {
        // a single tap at column-major index 1 => (dr=1, dc=0) => pixel (r, c-1) for p=3
        let mut row = vec![0.0; 9];
        row[1] = 1.0;
        let op = AnalysisOperator::raw(1, 9, row).unwrap();
        let img = Plane::from_fn(4, 4, |r, c| (10 * r + c) as f64);
        let stack = apply_global(&op, &img).unwrap();
        assert_eq!(stack.get(2, 2, 0), img.get(2, 1));
        // an even patch side puts the window at offsets -1..=0
        let mut row = vec![0.0; 4];
        row[0] = 1.0;
        let op = AnalysisOperator::raw(1, 4, row).unwrap();
        let stack = apply_global(&op, &img).unwrap();
        assert_eq!(stack.get(2, 2, 0), img.get(1, 1));
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(w, h, k, n) in &[(6, 5, 10, 9), (7, 7, 8, 4), (9, 6, 50, 25)] {
            let op = random_op(k, n, &mut rng);
            let x = random_plane(w, h, &mut rng);
            let y =
                CoefficientStack::new(w, h, k, (0..w * h * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let lhs = dot(apply_global(&op, &x).unwrap().as_slice(), y.as_slice());
            let rhs = dot(x.as_slice(), apply_global_adjoint(&op, &y).unwrap().as_slice());
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_stack_maps_to_zero_image() {
        let op = random_op(8, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let back = apply_global_adjoint(&op, &CoefficientStack::zeros(5, 4, 8)).unwrap();
        assert!(back.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_application_rejects_small_images() {
        let op = random_op(50, 25, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(apply_global(&op, &Plane::zeros(4, 9)).is_err());
        assert!(apply_global_adjoint(&op, &CoefficientStack::zeros(9, 4, 50)).is_err());
        assert!(apply_global_adjoint(&op, &CoefficientStack::zeros(9, 9, 49)).is_err());
    }

    #[test]
    fn interior_coefficients_follow_translations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = random_op(18, 9, &mut rng);
        let img = random_plane(12, 10, &mut rng);
        let shifted = Plane::from_fn(12, 10, |r, c| img.get(r, (c + 11) % 12));
        let a = apply_global(&op, &img).unwrap();
        let b = apply_global(&op, &shifted).unwrap();
        for r in 3..7 {
            for c in 4..8 {
                for j in 0..18 {
                    assert_eq!(b.get(r, c + 1, j), a.get(r, c, j));
                }
            }
        }
    }

    #[test]
    fn pair_requires_matching_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_op(8, 4, &mut rng);
        let b = random_op(10, 4, &mut rng);
        assert!(OperatorPair::new(a.clone(), b, 10.0).is_err());
        assert!(OperatorPair::new(a.clone(), a.clone(), -1.0).is_err());
        assert!(OperatorPair::new(a.clone(), a, 10.0).is_ok());
    }
}
