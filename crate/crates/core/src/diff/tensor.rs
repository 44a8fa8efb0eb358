use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::EngineError;

/// Dense row-major tensor of 64-bit floats.
///
/// Rank 0 (scalar), rank 1 and rank 2 are supported. The primitives in
/// [`super::Prim`] only ever produce rank 0 or rank 2 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, EngineError> {
        if shape.len() > 2 {
            return Err(EngineError::Rank { rank: shape.len() });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(EngineError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-2 tensor from row-major data. Panics if the length is wrong.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self::matrix(1, data.len(), data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EngineError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(EngineError::Ragged);
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows, treating rank 0 and rank 1 as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row_slice(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Rank-2 tensors serialize as nested row arrays, rank 1 as a flat array,
/// rank 0 as a bare number.
impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.shape.len() {
            0 => serializer.serialize_f64(self.data[0]),
            1 => self.data.serialize(serializer),
            _ => self.to_rows().serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Scalar(f64),
            Flat(Vec<f64>),
            Nested(Vec<Vec<f64>>),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Scalar(v) => Ok(Tensor::scalar(v)),
            Repr::Flat(v) => Ok(Tensor {
                shape: vec![v.len()],
                data: v,
            }),
            Repr::Nested(rows) => Tensor::from_rows(&rows).map_err(serde::de::Error::custom),
        }
    }
}

// Output columns are processed in register-sized blocks; each output
// element still accumulates over `p` in ascending order.
#[inline(always)]
fn block_nn<const W: usize>(arow: &[f64], b: &[f64], n: usize, j0: usize, orow: &mut [f64]) {
    let mut acc = [0.0; W];
    acc.copy_from_slice(&orow[j0..j0 + W]);
    for (p, &aip) in arow.iter().enumerate() {
        let bb = &b[p * n + j0..p * n + j0 + W];
        for l in 0..W {
            acc[l] += aip * bb[l];
        }
    }
    orow[j0..j0 + W].copy_from_slice(&acc);
}

#[inline(always)]
fn gemm_nn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 8 <= n {
            block_nn::<8>(arow, b, n, j, orow);
            j += 8;
        }
        if j + 4 <= n {
            block_nn::<4>(arow, b, n, j, orow);
            j += 4;
        }
        while j < n {
            block_nn::<1>(arow, b, n, j, orow);
            j += 1;
        }
    }
}

#[inline(always)]
fn gemm_tn_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, accumulated row by row so every
/// output row depends only on the matching row of `a`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm_nn_kernel(a, b, m, k, n, out)
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    gemm_nn_kernel(g, &bt, m, n, k, out)
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm_tn_kernel(a, g, m, k, n, out)
}
