use std::fmt::Debug;

use super::NumError;

/// Scalar types the kernels run on.
///
/// Training uses `f32` storage; finite-difference checks instantiate the same
/// code at `f64`.
pub trait Real: num_traits::Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseMatrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::InvalidArgument(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumError::InvalidArgument("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::of(1.0));
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero-width rows
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column block `[start, start + width)` of every row.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self, NumError> {
        if start + width > self.cols {
            return Err(NumError::InvalidArgument(format!(
                "column block {start}+{width} exceeds {} columns",
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self · otherᵀ`, accumulated in f64.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self, NumError> {
        if self.cols != other.cols {
            return Err(NumError::InvalidArgument(format!(
                "inner dimensions differ: {}x{} · ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = T::of(dot(a, other.row(j)));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, accumulated in f64.
    pub fn transposed_matmul(&self, other: &Self) -> Result<Self, NumError> {
        if self.rows != other.rows {
            return Err(NumError::InvalidArgument(format!(
                "outer dimensions differ: ({}x{})ᵀ · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut acc = vec![0.0f64; self.cols * other.cols];
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                let ai = ai.f64();
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut acc[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj.f64();
                }
            }
        }
        Ok(Self {
            rows: self.cols,
            cols: other.cols,
            data: acc.into_iter().map(T::of).collect(),
        })
    }

    /// `self · other`, accumulated in f64.
    pub fn matmul(&self, other: &Self) -> Result<Self, NumError> {
        if self.cols != other.rows {
            return Err(NumError::InvalidArgument(format!(
                "inner dimensions differ: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        let mut acc = vec![0.0f64; other.cols];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for (k, &a) in self.row(i).iter().enumerate() {
                let a = a.f64();
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in acc.iter_mut().zip(other.row(k)) {
                    *d += a * b.f64();
                }
            }
            for (o, &a) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = T::of(a);
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    // four independent lanes so the compiler can vectorize
    let n = a.len().min(b.len());
    let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k].f64() * y[k].f64();
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(&x, &y)| x.f64() * y.f64()).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    /// Validates entries in `[0, 1]` summing to one.
    pub fn new(p: Vec<f64>) -> Result<Self, NumError> {
        if p.is_empty() {
            return Err(NumError::InvalidArgument("empty probability vector".into()));
        }
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(NumError::InvalidArgument(format!(
                "probability entries outside [0,1]: {p:?}"
            )));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(NumError::InvalidArgument(format!(
                "probabilities sum to {s}"
            )));
        }
        Ok(Self(p))
    }

    pub fn one_hot(classes: usize, label: usize) -> Result<Self, NumError> {
        if label >= classes {
            return Err(NumError::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let mut p = vec![0.0; classes];
        p[label] = 1.0;
        Ok(Self(p))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub(crate) fn from_normalized(p: Vec<f64>) -> Self {
        Self(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

impl std::ops::Index<usize> for ProbVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Lowest index wins ties.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
