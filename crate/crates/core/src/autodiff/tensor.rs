use std::fmt;

use super::AutodiffError;

/// Dense row-major array of `f64` values.
///
/// Rank is unrestricted for elementwise primitives; matrix primitives
/// interpret rank-1 tensors of length `n` as `n x 1` columns.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AutodiffError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::LengthMismatch {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    /// Builds a `rows x cols` matrix. Panics if the length is wrong; use
    /// [`Tensor::new`] for fallible construction.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], values).expect("matrix dimensions must match value count")
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::matrix(n, 1, values)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            values: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when viewed as a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as a matrix (1 for rank-1 tensors).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() <= 2
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn is_finite(&self) -> bool {
        // x * 0 is NaN exactly for non-finite x; the lane-wise fold vectorizes.
        let mut acc = [0.0f64; 4];
        let chunks = self.values.chunks_exact(4);
        let tail = chunks.remainder();
        for c in chunks {
            for k in 0..4 {
                acc[k] += c[k] * 0.0;
            }
        }
        let rest: f64 = tail.iter().map(|v| v * 0.0).sum();
        (acc[0] + acc[1] + acc[2] + acc[3] + rest) == 0.0
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.values.len(), other.values.len());
        Tensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.values.len() <= SHOWN {
            write!(f, "{:?}", self.values)
        } else {
            write!(f, "{:?}..", &self.values[..SHOWN])
        }
    }
}

/// C = op(A) * op(B), where op transposes when the flag is set.
/// `a` is stored as `a_rows x a_cols` before transposition.
pub(crate) fn gemm(
    a: &Tensor,
    transpose_a: bool,
    b: &Tensor,
    transpose_b: bool,
) -> Vec<f64> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if transpose_a { (ac, ar) } else { (ar, ac) };
    let n = if transpose_b { br } else { bc };
    // row/column strides of op(A) and op(B)
    let (rsa, csa) = if transpose_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if transpose_b { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![0.0; m * n];
    // SAFETY: strides describe in-bounds views of `a` and `b`, and `out`
    // holds exactly m*n elements with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.values.as_ptr(),
            rsa,
            csa,
            b.values.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Hyperbolic tangent via a single `exp`, about 3x faster than `f64::tanh`.
/// Small arguments fall back to the libm routine to avoid cancellation.
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 0.0625 {
        return x.tanh();
    }
    let e = (-2.0 * ax).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}
