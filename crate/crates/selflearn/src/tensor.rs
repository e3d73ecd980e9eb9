//! Dense row-major f64 arrays and the plain matrix kernels the tape records.
//!
//! Everything here is single-threaded and deterministic: identical inputs
//! produce bitwise-identical outputs.

use crate::error::{Error, Result};

/// Shape-tagged numeric array. Carries features, embeddings, weights, and
/// gradients throughout the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    /// Build an array, validating that the shape is non-degenerate, matches
    /// the data length, and that all values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::EmptyDimension { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeDataMismatch {
                shape,
                data_len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput { op: "DenseArray::new" });
        }
        Ok(DenseArray { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        debug_assert!(!shape.is_empty() && n > 0);
        DenseArray {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        DenseArray {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        DenseArray::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        DenseArray::new(vec![rows, cols], data)
    }

    /// Stack equal-length rows into a rows x cols matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDimension { shape: vec![0] });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        DenseArray::new(vec![rows.len(), cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as a matrix: rank-1 arrays are a single row.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::NotAMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn as_scalar(&self) -> Option<f64> {
        if self.data.len() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_finite(out: DenseArray, op: &'static str) -> Result<DenseArray> {
    if out.all_finite() {
        Ok(out)
    } else {
        Err(Error::NumericOverflow { op })
    }
}

/// C = A * B for 2-D (or vector-as-row) operands.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    check_finite(
        DenseArray {
            shape: vec![m, n],
            data: out,
        },
        "matmul",
    )
}

pub fn transpose(a: &DenseArray) -> Result<DenseArray> {
    let (m, n) = a.matrix_dims("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(DenseArray {
        shape: vec![n, m],
        data: out,
    })
}

fn zip_elementwise(
    a: &DenseArray,
    b: &DenseArray,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseArray> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    check_finite(
        DenseArray {
            shape: a.shape.clone(),
            data,
        },
        op,
    )
}

pub fn add(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    zip_elementwise(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    zip_elementwise(a, b, "sub", |x, y| x - y)
}

pub fn hadamard(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    zip_elementwise(a, b, "mul", |x, y| x * y)
}

/// Broadcast-add a length-c row vector to every row of an N x c matrix.
pub fn add_row_broadcast(a: &DenseArray, row: &DenseArray) -> Result<DenseArray> {
    let (m, n) = a.matrix_dims("add_row")?;
    if row.len() != n {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            left: a.shape().to_vec(),
            right: row.shape().to_vec(),
        });
    }
    let mut data = a.data.clone();
    for i in 0..m {
        for j in 0..n {
            data[i * n + j] += row.data[j];
        }
    }
    check_finite(
        DenseArray {
            shape: a.shape.clone(),
            data,
        },
        "add_row",
    )
}

fn map_elementwise(
    a: &DenseArray,
    op: &'static str,
    f: impl Fn(f64) -> f64,
) -> Result<DenseArray> {
    let data = a.data.iter().map(|&x| f(x)).collect();
    check_finite(
        DenseArray {
            shape: a.shape.clone(),
            data,
        },
        op,
    )
}

pub fn scale(a: &DenseArray, factor: f64) -> Result<DenseArray> {
    map_elementwise(a, "scale", |x| x * factor)
}

pub fn add_scalar(a: &DenseArray, c: f64) -> Result<DenseArray> {
    map_elementwise(a, "add_scalar", |x| x + c)
}

pub fn relu(a: &DenseArray) -> Result<DenseArray> {
    map_elementwise(a, "relu", |x| if x > 0.0 { x } else { 0.0 })
}

pub fn exp(a: &DenseArray) -> Result<DenseArray> {
    map_elementwise(a, "exp", f64::exp)
}

pub fn ln(a: &DenseArray) -> Result<DenseArray> {
    map_elementwise(a, "log", f64::ln)
}

pub fn sqrt(a: &DenseArray) -> Result<DenseArray> {
    map_elementwise(a, "sqrt", f64::sqrt)
}

pub fn square(a: &DenseArray) -> Result<DenseArray> {
    map_elementwise(a, "square", |x| x * x)
}

pub fn sum(a: &DenseArray) -> f64 {
    a.data.iter().sum()
}

pub fn mean(a: &DenseArray) -> f64 {
    sum(a) / a.data.len() as f64
}

/// Select rows by index, in order. Indices may repeat.
pub fn gather_rows(a: &DenseArray, indices: &[usize]) -> Result<DenseArray> {
    let (m, n) = a.matrix_dims("gather_rows")?;
    let mut data = Vec::with_capacity(indices.len() * n);
    for &idx in indices {
        if idx >= m {
            return Err(Error::RowOutOfBounds { index: idx, rows: m });
        }
        data.extend_from_slice(&a.data[idx * n..(idx + 1) * n]);
    }
    DenseArray::new(vec![indices.len(), n], data)
}

/// Per-row Euclidean distance between two N x d arrays: out[i] = ||a_i - b_i||.
pub fn row_euclidean(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, n) = a.matrix_dims("row_euclidean")?;
    let (m2, n2) = b.matrix_dims("row_euclidean")?;
    if m != m2 || n != n2 {
        return Err(Error::ShapeMismatch {
            op: "row_euclidean",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..n {
            let d = a.data[i * n + j] - b.data[i * n + j];
            acc += d * d;
        }
        data.push(acc.sqrt());
    }
    check_finite(
        DenseArray {
            shape: vec![m],
            data,
        },
        "row_euclidean",
    )
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// All pairwise Euclidean distances: out[i][j] = ||a_i - b_j||.
pub fn pairwise_distances(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, n) = a.matrix_dims("pairwise_distances")?;
    let (m2, n2) = b.matrix_dims("pairwise_distances")?;
    if n != n2 {
        return Err(Error::ShapeMismatch {
            op: "pairwise_distances",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(m * m2);
    for i in 0..m {
        let ra = &a.data[i * n..(i + 1) * n];
        for j in 0..m2 {
            let rb = &b.data[j * n..(j + 1) * n];
            data.push(euclidean(ra, rb));
        }
    }
    DenseArray::new(vec![m, m2], data)
}

/// L2-normalize each row. Zero rows are returned as-is; the flag reports
/// whether any were seen so callers can escalate.
pub fn l2_normalize_rows(a: &DenseArray) -> Result<(DenseArray, bool)> {
    let (m, n) = a.matrix_dims("l2_normalize")?;
    let mut data = a.data.clone();
    let mut had_zero = false;
    for i in 0..m {
        let row = &mut data[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            had_zero = true;
        } else {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok((
        DenseArray {
            shape: a.shape.clone(),
            data,
        },
        had_zero,
    ))
}

/// L2-normalize each column of a 2-D array.
pub fn l2_normalize_cols(a: &DenseArray) -> Result<(DenseArray, bool)> {
    let (m, n) = a.matrix_dims("l2_normalize_cols")?;
    let mut data = a.data.clone();
    let mut had_zero = false;
    for j in 0..n {
        let mut norm = 0.0;
        for i in 0..m {
            let v = data[i * n + j];
            norm += v * v;
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            had_zero = true;
        } else {
            for i in 0..m {
                data[i * n + j] /= norm;
            }
        }
    }
    Ok((
        DenseArray {
            shape: a.shape.clone(),
            data,
        },
        had_zero,
    ))
}

/// Normalize a single vector. Convenience wrapper over the row version.
pub fn l2_normalize(v: &DenseArray) -> Result<(DenseArray, bool)> {
    l2_normalize_rows(v)
}
