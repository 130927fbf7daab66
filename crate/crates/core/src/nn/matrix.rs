use std::fmt;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix payload does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Concatenate columns: `[a | b]`.
    pub fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.rows, b.rows, "hstack row mismatch");
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for i in 0..a.rows {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Matrix { rows: a.rows, cols, data }
    }

    /// Copy of columns `start..end`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Matrix { rows: self.rows, cols: end - start, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a · bᵀ`-style products used by the dense layers. Thin wrappers over
/// `matrixmultiply::dgemm` with explicit strides.
pub(crate) mod gemm {
    /// c[m×n] = a[m×k] · w[n×k]ᵀ   (row-major a, w, c); overwrites c.
    pub fn a_bt(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], c: &mut [f64]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(w.len(), n * k);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: slice lengths checked above; strides describe row-major buffers.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                w.as_ptr(), 1, k as isize,
                0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    /// c[n×k] = g[m×n]ᵀ · a[m×k]; overwrites c.
    pub fn at_b(m: usize, n: usize, k: usize, g: &[f64], a: &[f64], c: &mut [f64]) {
        debug_assert_eq!(g.len(), m * n);
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(c.len(), n * k);
        if n == 0 || k == 0 {
            return;
        }
        // SAFETY: as above.
        unsafe {
            matrixmultiply::dgemm(
                n, m, k, 1.0,
                g.as_ptr(), 1, n as isize,
                a.as_ptr(), k as isize, 1,
                0.0,
                c.as_mut_ptr(), k as isize, 1,
            );
        }
    }

    /// c[m×k] = g[m×n] · w[n×k]; overwrites c.
    pub fn a_b(m: usize, n: usize, k: usize, g: &[f64], w: &[f64], c: &mut [f64]) {
        debug_assert_eq!(g.len(), m * n);
        debug_assert_eq!(w.len(), n * k);
        debug_assert_eq!(c.len(), m * k);
        if m == 0 || k == 0 {
            return;
        }
        // SAFETY: as above.
        unsafe {
            matrixmultiply::dgemm(
                m, n, k, 1.0,
                g.as_ptr(), n as isize, 1,
                w.as_ptr(), k as isize, 1,
                0.0,
                c.as_mut_ptr(), k as isize, 1,
            );
        }
    }
}
