//! Small dense numerical kernel.
//!
//! Everything here is deterministic given a [`Rng`] seed. Vectors are plain
//! `[f64]` slices; matrices are row-major [`Mat`]s. The cut-layer width `d`
//! is small, so covariance work is done on explicit `d x d` matrices.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Seeded generator: ChaCha with 8 rounds, keyed by the 64-bit seed.
///
/// ChaCha is a counter-based stream cipher, so a seed fully determines the
/// stream on every platform. There is no global generator anywhere in the
/// crate; every random operation takes one of these explicitly.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream. Children with different `stream` ids never
    /// overlap with each other or with the parent.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::arg(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::arg(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// New matrix made of the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Append one column on the right.
    pub fn with_column(&self, col: &[f64]) -> Result<Self> {
        if col.len() != self.rows {
            return Err(Error::arg("column length does not match row count"));
        }
        let mut data = Vec::with_capacity(self.rows * (self.cols + 1));
        for (r, &c) in self.row_iter().zip(col) {
            data.extend_from_slice(r);
            data.push(c);
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols + 1,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::arg(format!(
                "matmul shape mismatch {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `y = self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::arg("matvec length mismatch"));
        }
        Ok(self.row_iter().map(|r| dot_unchecked(r, x)).collect())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2_unchecked(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

pub fn add(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

pub fn sub(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(dot_unchecked(a, b))
}

pub fn norm2(a: &[f64]) -> f64 {
    norm2_unchecked(a)
}

/// Column-wise mean of the rows.
pub fn mean_rows(x: &Mat) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(Error::arg("mean of zero rows"));
    }
    let mut m = vec![0.0; x.cols()];
    for r in x.row_iter() {
        for (mi, ri) in m.iter_mut().zip(r) {
            *mi += ri;
        }
    }
    let n = x.rows() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    Ok(m)
}

/// Trace of the (1/n) empirical covariance, i.e. mean squared distance to the mean.
pub fn centered_cov_trace(x: &Mat) -> Result<f64> {
    let mu = mean_rows(x)?;
    let total: f64 = x
        .row_iter()
        .map(|r| r.iter().zip(&mu).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum();
    Ok(total / x.rows() as f64)
}

/// `d x d` empirical covariance with the 1/n normalisation.
pub fn covariance(x: &Mat) -> Result<Mat> {
    let mu = mean_rows(x)?;
    let d = x.cols();
    let mut c = Mat::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in x.row_iter() {
        for ((c0, a), m) in centered.iter_mut().zip(r).zip(&mu) {
            *c0 = a - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                c[(i, j)] += ci * centered[j];
            }
        }
    }
    let n = x.rows() as f64;
    for i in 0..d {
        for j in i..d {
            let v = c[(i, j)] / n;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Covariance `(lam_along - lam_iso) dir dir^T + lam_iso I`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredCov {
    pub lam_along: f64,
    pub lam_iso: f64,
    pub dir: Vec<f64>,
}

impl StructuredCov {
    pub fn new(lam_along: f64, lam_iso: f64, dir: Vec<f64>) -> Result<Self> {
        let cov = Self {
            lam_along,
            lam_iso,
            dir,
        };
        cov.validate()?;
        Ok(cov)
    }

    pub fn isotropic(lam: f64, d: usize) -> Self {
        let mut dir = vec![0.0; d];
        if d > 0 {
            dir[0] = 1.0;
        }
        Self {
            lam_along: lam,
            lam_iso: lam,
            dir,
        }
    }

    pub fn dim(&self) -> usize {
        self.dir.len()
    }

    pub fn trace(&self) -> f64 {
        self.lam_along + (self.dim() as f64 - 1.0) * self.lam_iso
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lam_along >= 0.0 && self.lam_iso >= 0.0)
            || !self.lam_along.is_finite()
            || !self.lam_iso.is_finite()
        {
            return Err(Error::arg(format!(
                "variances must be finite and >= 0 (along {}, iso {})",
                self.lam_along, self.lam_iso
            )));
        }
        let n = norm2(&self.dir);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("direction is not unit norm (|dir| = {n})")));
        }
        Ok(())
    }
}

/// Draw `n` rows from `N(mean, cov)`.
///
/// Each row is `mean + sqrt(iso) z + (sqrt(along) - sqrt(iso)) (dir.z) dir`
/// with `z ~ N(0, I)`.
pub fn sample_structured_gaussian(
    mean: &[f64],
    cov: &StructuredCov,
    n: usize,
    rng: &mut Rng,
) -> Result<Mat> {
    cov.validate()?;
    if n == 0 {
        return Err(Error::arg("n must be >= 1"));
    }
    check_len(mean, &cov.dir)?;
    let d = mean.len();
    let s_iso = cov.lam_iso.sqrt();
    let s_extra = cov.lam_along.sqrt() - s_iso;
    let mut out = Mat::zeros(n, d);
    let mut z = vec![0.0; d];
    for i in 0..n {
        z.iter_mut().for_each(|zi| *zi = rng.normal());
        let proj = dot_unchecked(&cov.dir, &z) * s_extra;
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = mean[j] + s_iso * z[j] + proj * cov.dir[j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct PowerIterConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-9,
        }
    }
}

/// Unit vector maximising `v^T Cov(x) v`, by power iteration on the
/// covariance. Sign is fixed so the largest-magnitude coordinate is positive.
pub fn top_singular_direction(x: &Mat, max_iters: usize, tol: f64) -> Result<Vec<f64>> {
    top_singular_direction_traced(x, max_iters, tol).map(|(v, _)| v)
}

/// Same as [`top_singular_direction`] but also returns the Rayleigh quotient
/// after every iteration. Iteration stops once successive unit iterates are
/// within `tol` of each other.
pub fn top_singular_direction_traced(
    x: &Mat,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rows() < 2 {
        return Err(Error::arg("need at least two rows"));
    }
    let cov = covariance(x)?;
    top_eigenvector(&cov, max_iters, tol)
}

pub(crate) fn top_eigenvector(
    cov: &Mat,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = cov.rows();
    let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    if !(trace > 0.0) || d == 0 {
        return Err(Error::DegenerateData("covariance is zero".into()));
    }
    // A generic start vector pushed once through the operator, so it lies in
    // the covariance range.
    let seed: Vec<f64> = (0..d).map(|j| 1.0 + 0.5 * ((j as f64) * 1.618_034).sin()).collect();
    let mut v = cov.matvec(&seed)?;
    let mut n = norm2(&v);
    if n == 0.0 {
        // seed orthogonal to the range; fall back to the heaviest column
        let j = (0..d)
            .max_by(|&a, &b| cov[(a, a)].total_cmp(&cov[(b, b)]))
            .unwrap();
        v = (0..d).map(|i| cov[(i, j)]).collect();
        n = norm2(&v);
    }
    v.iter_mut().for_each(|x| *x /= n);
    let mut trace_rq = Vec::new();
    for _ in 0..max_iters {
        let w = cov.matvec(&v)?;
        let rq = dot_unchecked(&v, &w);
        trace_rq.push(rq);
        let wn = norm2(&w);
        if wn == 0.0 {
            break;
        }
        let next: Vec<f64> = w.iter().map(|x| x / wn).collect();
        // the operator is PSD, so successive iterates share orientation
        let step = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if step < tol {
            break;
        }
    }
    canonicalize_sign(&mut v);
    Ok((v, trace_rq))
}

fn canonicalize_sign(v: &mut [f64]) {
    if let Some(big) = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_linalg_examples() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(norm2(&[3.0, 4.0]), 5.0);
        let m = Mat::from_rows(&[[0.0, 0.0], [2.0, 4.0]]).unwrap();
        assert_eq!(mean_rows(&m).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(dot(&[1.0], &[1.0, 2.0]), Err(Error::Argument(_))));
        assert!(add(&[1.0], &[]).is_err());
        assert_eq!(scale(&[1.0, -2.0], 3.0), vec![3.0, -6.0]);
    }

    #[test]
    fn centered_trace_matches_cov() {
        let m = Mat::from_rows(&[[1.0, 2.0], [3.0, 0.0], [-1.0, 1.0]]).unwrap();
        let c = covariance(&m).unwrap();
        assert!((centered_cov_trace(&m).unwrap() - (c[(0, 0)] + c[(1, 1)])).abs() < 1e-12);
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let mut rng = Rng::new(1);
        let cov = StructuredCov::new(0.0, 0.0, vec![0.0, 1.0, 0.0]).unwrap();
        let s = sample_structured_gaussian(&[1.0, -2.0, 3.5], &cov, 20, &mut rng).unwrap();
        for r in s.row_iter() {
            assert_eq!(r, &[1.0, -2.0, 3.5]);
        }
    }

    #[test]
    fn rejects_bad_cov() {
        assert!(StructuredCov::new(1.0, 1.0, vec![1.0, 1.0]).is_err());
        assert!(StructuredCov::new(-1.0, 0.0, vec![1.0, 0.0]).is_err());
        let bad = StructuredCov {
            lam_along: 1.0,
            lam_iso: -0.5,
            dir: vec![1.0],
        };
        assert!(sample_structured_gaussian(&[0.0], &bad, 3, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn equal_variances_reduce_to_isotropic() {
        let dir = vec![0.6, 0.8];
        let a = sample_structured_gaussian(
            &[0.0, 0.0],
            &StructuredCov::new(2.0, 2.0, dir).unwrap(),
            50,
            &mut Rng::new(5),
        )
        .unwrap();
        let mut rng = Rng::new(5);
        let s = 2.0f64.sqrt();
        for r in a.row_iter() {
            let z0 = rng.normal();
            let z1 = rng.normal();
            assert_eq!(r, &[s * z0, s * z1]);
        }
    }

    #[test]
    fn monte_carlo_isotropic_trace() {
        let mut rng = Rng::new(7);
        let cov = StructuredCov::isotropic(1.0, 4);
        let s = sample_structured_gaussian(&[0.0; 4], &cov, 100_000, &mut rng).unwrap();
        let tr = centered_cov_trace(&s).unwrap();
        assert!((tr - 4.0).abs() < 0.05 * 4.0, "trace {tr}");
    }

    #[test]
    fn monte_carlo_along_direction() {
        let mut rng = Rng::new(8);
        let cov = StructuredCov::new(4.0, 1.0, vec![1.0, 0.0, 0.0]).unwrap();
        let s = sample_structured_gaussian(&[0.0; 3], &cov, 100_000, &mut rng).unwrap();
        let c = covariance(&s).unwrap();
        assert!((c[(0, 0)] - 4.0).abs() < 0.2, "{}", c[(0, 0)]);
        assert!((c[(1, 1)] - 1.0).abs() < 0.05, "{}", c[(1, 1)]);
    }

    #[test]
    fn seeded_determinism() {
        let cov = StructuredCov::new(3.0, 0.5, vec![0.0, 1.0]).unwrap();
        let a = sample_structured_gaussian(&[1.0, 1.0], &cov, 100, &mut Rng::new(42)).unwrap();
        let b = sample_structured_gaussian(&[1.0, 1.0], &cov, 100, &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);
        let mut p = Rng::new(3);
        let (mut f1, mut f2) = (p.fork(1), p.fork(2));
        assert_ne!(f1.next_u64(), f2.next_u64());
        assert_ne!(p.next_u64(), Rng::new(3).fork(1).next_u64());
    }

    #[test]
    fn diagonal_covariance_direction() {
        let x = Mat::from_rows(&[[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let v = top_singular_direction(&x, 1000, 1e-9).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-9 && v[1].abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let x = Mat::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!(matches!(
            top_singular_direction(&x, 100, 1e-9),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn rayleigh_quotient_monotone_and_unit() {
        let mut rng = Rng::new(11);
        let data: Vec<f64> = (0..200 * 6).map(|_| rng.normal()).collect();
        let mut x = Mat::from_vec(200, 6, data).unwrap();
        for i in 0..200 {
            x.row_mut(i)[2] *= 1.3;
        }
        let (v, rq) = top_singular_direction_traced(&x, 1000, 1e-12).unwrap();
        assert!((norm2(&v) - 1.0).abs() < 1e-9);
        for w in rq.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{rq:?}");
        }
        let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
        assert!(big > 0.0);
    }
}
