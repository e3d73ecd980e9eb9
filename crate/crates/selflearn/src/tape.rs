//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations execute eagerly and record themselves; `backward` replays the
//! tape in reverse. Appending preserves topological order, so a reverse index
//! walk visits every node after all of its consumers.

use crate::error::{Error, Result};
use crate::tensor::{self, DenseArray};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const COS_CLAMP: f64 = 1.0 - 1e-7;

enum Node {
    Leaf,
    Matmul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sqrt { a: Var },
    Square { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    GatherRows { a: Var, indices: Vec<usize> },
    RowEuclidean { a: Var, b: Var },
    L2NormalizeRows { a: Var },
    L2NormalizeCols { a: Var },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: DenseArray,
    },
    CosMargin {
        cos: Var,
        labels: Vec<usize>,
        margin: f64,
    },
}

/// Recorded computation: values plus the operations that produced them.
pub struct Tape {
    values: Vec<DenseArray>,
    nodes: Vec<Node>,
}

/// Per-variable gradients produced by [`Tape::backward`]. Variables the
/// output does not depend on read back as zero arrays.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> DenseArray {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => DenseArray::zeros(self.shapes[v.0].clone()),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseArray, node: Node) -> Var {
        let id = Var(self.values.len());
        self.values.push(value);
        self.nodes.push(node);
        id
    }

    /// Record an input value. Leaves receive gradients in `backward`.
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(value, Node::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Node::Matmul { a, b }))
    }

    /// Broadcast-add a row vector to every row (bias addition).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = tensor::add_row_broadcast(self.value(a), self.value(row))?;
        Ok(self.push(v, Node::AddRow { a, row }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Node::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Node::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(v, Node::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = tensor::scale(self.value(a), factor)?;
        Ok(self.push(v, Node::Scale { a, factor }))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = tensor::add_scalar(self.value(a), c)?;
        Ok(self.push(v, Node::AddScalar { a }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = tensor::relu(self.value(a))?;
        Ok(self.push(v, Node::Relu { a }))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = tensor::exp(self.value(a))?;
        Ok(self.push(v, Node::Exp { a }))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = tensor::ln(self.value(a))?;
        Ok(self.push(v, Node::Log { a }))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = tensor::sqrt(self.value(a))?;
        Ok(self.push(v, Node::Sqrt { a }))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = tensor::square(self.value(a))?;
        Ok(self.push(v, Node::Square { a }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = DenseArray::scalar(tensor::sum(self.value(a)));
        if !v.all_finite() {
            return Err(Error::NumericOverflow { op: "sum" });
        }
        Ok(self.push(v, Node::Sum { a }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = DenseArray::scalar(tensor::mean(self.value(a)));
        if !v.all_finite() {
            return Err(Error::NumericOverflow { op: "mean" });
        }
        Ok(self.push(v, Node::Mean { a }))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = tensor::gather_rows(self.value(a), indices)?;
        Ok(self.push(
            v,
            Node::GatherRows {
                a,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn row_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::row_euclidean(self.value(a), self.value(b))?;
        Ok(self.push(v, Node::RowEuclidean { a, b }))
    }

    /// L2-normalize rows. Zero rows pass through unchanged with zero gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (v, _) = tensor::l2_normalize_rows(self.value(a))?;
        Ok(self.push(v, Node::L2NormalizeRows { a }))
    }

    pub fn l2_normalize_cols(&mut self, a: Var) -> Result<Var> {
        let (v, _) = tensor::l2_normalize_cols(self.value(a))?;
        Ok(self.push(v, Node::L2NormalizeCols { a }))
    }

    /// Mean negative log softmax probability of the target class, computed
    /// with max-subtraction stabilization. One fused node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (n, c) = l.matrix_dims("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: l.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = l.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[i * c + j] /= denom;
            }
            loss -= (row[labels[i]] - max) - denom.ln();
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NumericOverflow {
                op: "softmax_cross_entropy",
            });
        }
        let probs = DenseArray::matrix(n, c, probs)?;
        Ok(self.push(
            DenseArray::scalar(loss),
            Node::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Add an angular margin to each row's target-class cosine: the target
    /// entry cos(theta) becomes cos(theta + m); other entries pass through.
    /// Cosines are clamped away from +-1 before the angle shift.
    pub fn cos_margin(&mut self, cos: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let c_arr = self.value(cos);
        let (n, c) = c_arr.matrix_dims("cos_margin")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cos_margin",
                left: c_arr.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
        }
        let (cos_m, sin_m) = (margin.cos(), margin.sin());
        let mut data = c_arr.data().to_vec();
        for (i, &y) in labels.iter().enumerate() {
            let ct = data[i * c + y].clamp(-COS_CLAMP, COS_CLAMP);
            data[i * c + y] = ct * cos_m - (1.0 - ct * ct).sqrt() * sin_m;
        }
        let v = DenseArray::matrix(n, c, data)?;
        Ok(self.push(
            v,
            Node::CosMargin {
                cos,
                labels: labels.to_vec(),
                margin,
            },
        ))
    }

    /// Backpropagate from `output` seeded with ones.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = {
            let shape = self.value(output).shape().to_vec();
            let n: usize = shape.iter().product();
            DenseArray::new(shape, vec![1.0; n])?
        };
        self.backward_with_seed(output, seed)
    }

    /// Backpropagate from `output` with an explicit seed of the same shape.
    pub fn backward_with_seed(&self, output: Var, seed: DenseArray) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::SeedShapeMismatch {
                expected: self.value(output).shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.values.len()];
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        let accumulate = |grads: &mut [Option<DenseArray>], v: Var, contrib: Vec<f64>| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.iter()) {
                        *e += c;
                    }
                }
                slot @ None => {
                    let shape = self.values[v.0].shape().to_vec();
                    debug_assert_eq!(shape.iter().product::<usize>(), contrib.len());
                    let mut arr = DenseArray::zeros(shape);
                    arr.data_mut().copy_from_slice(&contrib);
                    *slot = Some(arr);
                }
            }
        };

        match &self.nodes[id] {
            Node::Leaf => {}
            Node::Matmul { a, b } => {
                let bt = tensor::transpose(self.value(*b))?;
                let gm = reshape_matrix(g, self.value(*a).rows());
                let da = tensor::matmul(&gm, &bt)?;
                accumulate(grads, *a, da.data().to_vec());
                let at = tensor::transpose(self.value(*a))?;
                let db = tensor::matmul(&at, &gm)?;
                accumulate(grads, *b, db.data().to_vec());
            }
            Node::AddRow { a, row } => {
                accumulate(grads, *a, g.data().to_vec());
                let cols = self.values[row.0].len();
                let mut dr = vec![0.0; cols];
                for (i, v) in g.data().iter().enumerate() {
                    dr[i % cols] += v;
                }
                accumulate(grads, *row, dr);
            }
            Node::Add { a, b } => {
                accumulate(grads, *a, g.data().to_vec());
                accumulate(grads, *b, g.data().to_vec());
            }
            Node::Sub { a, b } => {
                accumulate(grads, *a, g.data().to_vec());
                accumulate(grads, *b, g.data().iter().map(|v| -v).collect());
            }
            Node::Mul { a, b } => {
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                accumulate(
                    grads,
                    *a,
                    g.data().iter().zip(bv).map(|(x, y)| x * y).collect(),
                );
                accumulate(
                    grads,
                    *b,
                    g.data().iter().zip(av).map(|(x, y)| x * y).collect(),
                );
            }
            Node::Scale { a, factor } => {
                accumulate(grads, *a, g.data().iter().map(|v| v * factor).collect());
            }
            Node::AddScalar { a } => {
                accumulate(grads, *a, g.data().to_vec());
            }
            Node::Relu { a } => {
                let x = self.value(*a).data();
                accumulate(
                    grads,
                    *a,
                    g.data()
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Node::Exp { a } => {
                let out = self.values[id].data();
                accumulate(
                    grads,
                    *a,
                    g.data().iter().zip(out).map(|(gv, ov)| gv * ov).collect(),
                );
            }
            Node::Log { a } => {
                let x = self.value(*a).data();
                accumulate(
                    grads,
                    *a,
                    g.data().iter().zip(x).map(|(gv, xv)| gv / xv).collect(),
                );
            }
            Node::Sqrt { a } => {
                let out = self.values[id].data();
                accumulate(
                    grads,
                    *a,
                    g.data()
                        .iter()
                        .zip(out)
                        .map(|(gv, &ov)| if ov == 0.0 { 0.0 } else { gv / (2.0 * ov) })
                        .collect(),
                );
            }
            Node::Square { a } => {
                let x = self.value(*a).data();
                accumulate(
                    grads,
                    *a,
                    g.data()
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| 2.0 * xv * gv)
                        .collect(),
                );
            }
            Node::Sum { a } => {
                let gs = g.data()[0];
                accumulate(grads, *a, vec![gs; self.values[a.0].len()]);
            }
            Node::Mean { a } => {
                let n = self.values[a.0].len();
                let gs = g.data()[0] / n as f64;
                accumulate(grads, *a, vec![gs; n]);
            }
            Node::GatherRows { a, indices } => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut da = vec![0.0; src.len()];
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..cols {
                        da[idx * cols + j] += g.data()[i * cols + j];
                    }
                }
                accumulate(grads, *a, da);
            }
            Node::RowEuclidean { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let dist = self.values[id].data();
                let cols = av.cols();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..av.rows() {
                    if dist[i] == 0.0 {
                        continue;
                    }
                    let gi = g.data()[i] / dist[i];
                    for j in 0..cols {
                        let diff = av.data()[i * cols + j] - bv.data()[i * cols + j];
                        da[i * cols + j] += gi * diff;
                        db[i * cols + j] -= gi * diff;
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Node::L2NormalizeRows { a } => {
                let x = self.value(*a);
                let u = &self.values[id];
                let cols = x.cols();
                let mut da = vec![0.0; x.len()];
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let ur = u.row(i);
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let dot: f64 = gr.iter().zip(ur).map(|(gv, uv)| gv * uv).sum();
                    for j in 0..cols {
                        da[i * cols + j] = (gr[j] - dot * ur[j]) / norm;
                    }
                }
                accumulate(grads, *a, da);
            }
            Node::L2NormalizeCols { a } => {
                let x = self.value(*a);
                let u = &self.values[id];
                let (m, n) = x.matrix_dims("l2_normalize_cols")?;
                let mut da = vec![0.0; x.len()];
                for j in 0..n {
                    let mut norm = 0.0;
                    for i in 0..m {
                        let v = x.data()[i * n + j];
                        norm += v * v;
                    }
                    let norm = norm.sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for i in 0..m {
                        dot += g.data()[i * n + j] * u.data()[i * n + j];
                    }
                    for i in 0..m {
                        da[i * n + j] =
                            (g.data()[i * n + j] - dot * u.data()[i * n + j]) / norm;
                    }
                }
                accumulate(grads, *a, da);
            }
            Node::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.cols();
                let gs = g.data()[0] / n as f64;
                let mut dl = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        dl[i * c + j] = gs * (probs.at(i, j) - onehot);
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Node::CosMargin {
                cos,
                labels,
                margin,
            } => {
                let cv = self.value(*cos);
                let c = cv.cols();
                let (cos_m, sin_m) = (margin.cos(), margin.sin());
                let mut dc = g.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    let raw = cv.data()[i * c + y];
                    let deriv = if raw.abs() < COS_CLAMP {
                        cos_m + raw * sin_m / (1.0 - raw * raw).sqrt()
                    } else {
                        0.0
                    };
                    dc[i * c + y] *= deriv;
                }
                accumulate(grads, *cos, dc);
            }
        }
        Ok(())
    }
}

/// View a gradient (whose data length matches rows*cols of the forward
/// operand) as a 2-D matrix for transposed products.
fn reshape_matrix(g: &DenseArray, rows: usize) -> DenseArray {
    let cols = g.len() / rows;
    let mut m = DenseArray::zeros(vec![rows, cols]);
    m.data_mut().copy_from_slice(g.data());
    m
}
