use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Almost everything in this crate is a 2-D
/// `[rows, cols]` matrix where a row is one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches
    /// and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for kernels whose output shape is correct by
    /// construction.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: S) -> Self {
        Self::raw(vec![1, 1], vec![v])
    }

    /// A `[1, n]` row.
    pub fn row_vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![1, data.len().max(1)], data)
    }

    /// Stacks equal-length rows into a `[rows.len(), width]` matrix.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            if r.as_ref().len() != width {
                return Err(Error::Shape(format!("row {i} has width {}", r.as_ref().len())));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(vec![rows.len(), width], data)
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a matrix; product of the trailing dimensions otherwise.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<S> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b)
    }

    pub fn norm_sq(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b * b)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::raw(vec![idx.len(), c], data)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `a[n,k] · b[k,m]`. Each output element accumulates in ascending `k`
/// regardless of `n`, so a row's result does not depend on which other rows
/// share the batch.
pub(crate) fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        let ar = a.row(i);
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in ar.iter().enumerate() {
            let br = b.row(kk);
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::raw(vec![n, m], out)
}

/// `aᵀ[k,n] · g[n,m]` without materializing the transpose.
pub(crate) fn matmul_tn<S: Scalar>(a: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let (n, k, m) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![S::zero(); k * m];
    for i in 0..n {
        let ar = a.row(i);
        let gr = g.row(i);
        for (kk, &av) in ar.iter().enumerate() {
            let orow = &mut out[kk * m..(kk + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    Tensor::raw(vec![k, m], out)
}

/// `g[n,m] · bᵀ[m,k]`.
pub(crate) fn matmul_nt<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, m, k) = (g.rows(), g.cols(), b.rows());
    let mut out = vec![S::zero(); n * k];
    for i in 0..n {
        let gr = g.row(i);
        for kk in 0..k {
            let br = b.row(kk);
            let mut acc = S::zero();
            for j in 0..m {
                acc += gr[j] * br[j];
            }
            out[i * k + kk] = acc;
        }
    }
    Tensor::raw(vec![n, k], out)
}
