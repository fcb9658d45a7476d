//! Dense row-major matrices and the handful of kernels the rest of the crate
//! leans on: softmax, dominant singular direction, cosine similarity and rank
//! correlation. Everything is `f64`; narrowing to `f32` only happens in file
//! formats.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Default relative residual tolerance for power iteration.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default iteration cap for power iteration.
pub const DEFAULT_MAX_ITERS: usize = 10_000;
/// Second/first Rayleigh ratio above which a spectrum is flagged as near-degenerate.
pub const GAP_RATIO_THRESHOLD: f64 = 0.999;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(invalid!("matrix entry {i} is not finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An empty matrix with a fixed column count, to be grown with [`Matrix::push_row`].
    pub fn with_cols(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(invalid!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(invalid!(
                "pushed row has {} columns, expected {}",
                row.len(),
                self.cols
            ));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Keeps the rows for which `keep(i)` is true, preserving order.
    pub fn retain_rows(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let cols = self.cols;
        let mut write = 0;
        for read in 0..self.rows {
            if keep(read) {
                if write != read {
                    self.data
                        .copy_within(read * cols..(read + 1) * cols, write * cols);
                }
                write += 1;
            }
        }
        self.rows = write;
        self.data.truncate(write * cols);
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width` of every row.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        Matrix::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(invalid!(
                "cannot multiply {}x{} by {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(rhs.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `x · self` for a row vector `x`.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(invalid!(
                "vector of length {} cannot left-multiply {}x{}",
                x.len(),
                self.rows,
                self.cols
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (k, &xk) in x.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(k)) {
                *o += xk * m;
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(invalid!(
                "{}x{} cannot multiply a vector of length {}",
                self.rows,
                self.cols,
                x.len()
            ));
        }
        Ok(self.row_iter().map(|r| dot(r, x)).collect())
    }

    /// The Gram matrix `selfᵀ · self`.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in self.row_iter() {
            for i in 0..n {
                let ri = r[i];
                if ri == 0.0 {
                    continue;
                }
                let gi = &mut g.data[i * n..(i + 1) * n];
                for j in i..n {
                    gi[j] += ri * r[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        if self.rows == 0 {
            return m;
        }
        for r in self.row_iter() {
            for (a, &b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.rows as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// A vector of Euclidean norm one.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Normalizes `v`. Fails on empty, zero or non-finite input.
    pub fn normalize(mut v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(invalid!("cannot normalize an empty vector"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid!("cannot normalize a non-finite vector"));
        }
        let n = norm(&v);
        if n == 0.0 {
            return Err(invalid!("cannot normalize the zero vector"));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Self(v))
    }

    /// Wraps `v` without rescaling, checking its norm is within 1e-9 of one.
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        Self::from_unit_with_tolerance(v, UNIT_TOL)
    }

    pub fn from_unit_with_tolerance(v: Vec<f64>, tol: f64) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(invalid!("unit vector must be non-empty and finite"));
        }
        let n = norm(&v);
        if (n - 1.0).abs() > tol {
            return Err(invalid!("vector norm {n} is not within {tol:e} of 1"));
        }
        Ok(Self(v))
    }

    /// The `i`-th standard basis vector of dimension `dim`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Self(v)
    }

    /// A direction drawn uniformly from the sphere.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x005E_EDD1]);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            if let Ok(u) = Self::normalize(v) {
                return u;
            }
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|x| -x).collect())
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid!("softmax of an empty vector"));
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(invalid!("softmax input contains NaN"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax without validation; callers guarantee non-empty finite input.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    x.iter_mut().for_each(|v| *v /= sum);
}

/// Result of a power iteration on a symmetric matrix.
#[derive(Debug, Clone)]
pub(crate) struct PowerOutcome {
    pub vector: Vec<f64>,
    pub eigenvalue: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project_out(v: &mut [f64], basis: &[&[f64]]) {
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= c * y);
    }
}

/// Power iteration on the symmetric matrix `g`, restricted to the orthogonal
/// complement of `deflate`. Stops when `‖g v − λ v‖ ≤ tol · λ`.
pub(crate) fn power_iterate_sym(
    g: &Matrix,
    start: Vec<f64>,
    tol: f64,
    max_iters: usize,
    deflate: &[&[f64]],
) -> PowerOutcome {
    let mut v = start;
    project_out(&mut v, deflate);
    let n0 = norm(&v);
    if n0 == 0.0 {
        return PowerOutcome {
            vector: v,
            eigenvalue: 0.0,
            residual: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    v.iter_mut().for_each(|x| *x /= n0);

    let mut w = vec![0.0; v.len()];
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = dot(g.row(i), &v);
        }
        project_out(&mut w, deflate);
        lambda = dot(&v, &w);
        residual = libm::sqrt(
            w.iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b) * (a - lambda * b))
                .sum(),
        );
        if residual <= tol * lambda.abs() {
            return PowerOutcome {
                vector: v,
                eigenvalue: lambda,
                residual,
                iterations: it,
                converged: true,
            };
        }
        let nw = norm(&w);
        if nw == 0.0 {
            // v lies in the null space of the deflated operator.
            return PowerOutcome {
                vector: v,
                eigenvalue: 0.0,
                residual: 0.0,
                iterations: it,
                converged: true,
            };
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
    }
    PowerOutcome {
        vector: v,
        eigenvalue: lambda,
        residual,
        iterations: max_iters,
        converged: false,
    }
}

pub(crate) fn gaussian_start(dim: usize, seed: u64, tag: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[0x9_0E7, tag]);
    (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Flips `v` so that its largest-magnitude entry (first one on ties) is positive.
pub(crate) fn canonicalize_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant right singular direction of a matrix, with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DominantDirection {
    pub direction: UnitVector,
    /// Largest eigenvalue of `MᵀM`, i.e. the squared top singular value.
    pub eigenvalue: f64,
    /// Rayleigh estimate of the second eigenvalue of `MᵀM`.
    pub second_eigenvalue: f64,
    pub gap_flag: bool,
    pub iterations: usize,
}

/// Power iteration on `MᵀM` for the first right singular vector of `m`.
///
/// The start vector is a Gaussian draw keyed by `seed`. The returned vector is
/// sign-canonicalized (largest-magnitude entry positive). `gap_flag` is raised
/// when the second Rayleigh estimate exceeds 0.999 of the first.
pub fn dominant_direction(
    m: &Matrix,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<DominantDirection> {
    if m.is_empty() {
        return Err(invalid!("top singular direction of an empty matrix"));
    }
    if !(tol > 0.0) {
        return Err(invalid!("tolerance must be positive, got {tol}"));
    }
    let g = m.gram();
    let first = power_iterate_sym(&g, gaussian_start(m.cols(), seed, 1), tol, max_iters, &[]);
    if !first.converged {
        let mut iterate = first.vector;
        canonicalize_sign(&mut iterate);
        return Err(Error::Convergence {
            iterations: first.iterations,
            residual: first.residual,
            iterate,
        });
    }
    let mut v = first.vector;
    canonicalize_sign(&mut v);

    let second = if m.cols() > 1 {
        power_iterate_sym(
            &g,
            gaussian_start(m.cols(), seed, 2),
            tol,
            max_iters,
            &[&v],
        )
        .eigenvalue
    } else {
        0.0
    };
    let gap_flag = first.eigenvalue <= 0.0 || second / first.eigenvalue > GAP_RATIO_THRESHOLD;
    Ok(DominantDirection {
        direction: UnitVector(v),
        eigenvalue: first.eigenvalue,
        second_eigenvalue: second,
        gap_flag,
        iterations: first.iterations,
    })
}

/// First right singular vector of `m` and the near-degeneracy flag.
pub fn top_singular_direction(
    m: &Matrix,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(UnitVector, bool)> {
    dominant_direction(m, tol, max_iters, seed).map(|d| (d.direction, d.gap_flag))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!(
            "cosine similarity of vectors of length {} and {}",
            a.len(),
            b.len()
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(invalid!("cosine similarity with a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        // `==` so that -0.0 and 0.0 tie; total_cmp keeps them adjacent.
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let mean = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = mean;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid!(
            "correlation of vectors of length {} and {}",
            x.len(),
            y.len()
        ));
    }
    if x.len() < 2 {
        return Err(invalid!("correlation needs at least two points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid!("correlation input is not finite"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput(alloc::string::String::from(
            "constant input vector",
        )));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid!(
            "correlation of vectors of length {} and {}",
            x.len(),
            y.len()
        ));
    }
    if x.len() < 2 {
        return Err(invalid!("correlation needs at least two points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid!("correlation input is not finite"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}
