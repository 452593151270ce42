//! Minimal reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! Every model in the crate (flow, encoders, attention, classifiers) records its
//! computation on a [`Tape`]; inference simply reads the value of the output node
//! and never calls [`Tape::backward`]. Row vectors are `1 × n` matrices and scalars
//! are `1 × 1`.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    SoftClamp(Var, f64),
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<Option<usize>>),
    SoftmaxRows(Var),
    Transpose(Var),
    Diag(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations so gradients can be propagated back to the leaves.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `shape` when the output did not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    /// `bound * tanh(a / bound)`: smooth, monotone, confined to `(-bound, bound)`.
    pub fn soft_clamp(&mut self, a: Var, bound: f64) -> Var {
        let value = self.value(a).mapv(|x| bound * (x / bound).tanh());
        let ng = self.ng(a);
        self.push(value, Op::SoftClamp(a, bound), ng)
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, `T × n` to `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean over empty rows")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts differ in concat_cols");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts differ in concat_rows");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row gather: output row `i` is `a[index[i]]`, or zeros for `None`.
    pub fn gather(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let mut value = Array2::zeros((index.len(), cols));
        for (i, ix) in index.iter().enumerate() {
            if let Some(r) = *ix {
                value.row_mut(i).assign(&src.row(r));
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, index), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// `1 × n` row to an `n × n` diagonal matrix.
    pub fn diag(&mut self, a: Var) -> Var {
        let row = self.value(a);
        debug_assert_eq!(row.nrows(), 1);
        let n = row.ncols();
        let mut value = Array2::zeros((n, n));
        for i in 0..n {
            value[[i, i]] = row[[0, i]];
        }
        let ng = self.ng(a);
        self.push(value, Op::Diag(a), ng)
    }

    /// Mean softmax cross-entropy of `logits` (one row per example) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let probs = softmax_rows(self.value(logits));
        let n = labels.len().max(1) as f64;
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[[i, l]].max(1e-300).ln())
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy(logits, labels),
            ng,
        )
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones(self.shape(output)));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                };
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let ga = &g * self.value(*row);
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, ga);
                    acc(*row, gr);
                }
                Op::Scale(a, c) => acc(*a, &g * *c),
                Op::Tanh(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::SoftClamp(a, bound) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                        let t = y / bound;
                        *d *= 1.0 - t * t;
                    });
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    acc(*a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let scaled = &g / rows as f64;
                    let d = scaled
                        .broadcast((rows, cols))
                        .expect("mean_rows broadcast")
                        .to_owned();
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::Gather(a, index) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(r) = *ix {
                            let mut row = d.row_mut(r);
                            row += &g.row(i);
                        }
                    }
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    let dots = d.sum_axis(Axis(1));
                    for (mut row, (yr, dot)) in d
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows().into_iter().zip(dots.iter()))
                    {
                        row.scaled_add(-dot, &yr);
                    }
                    acc(*a, d);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Diag(a) => {
                    let n = self.shape(*a).1;
                    let mut d = Array2::zeros((1, n));
                    for j in 0..n {
                        d[[0, j]] = g[[j, j]];
                    }
                    acc(*a, d);
                }
                Op::CrossEntropy(logits, labels) => {
                    let mut d = softmax_rows(self.value(*logits));
                    let n = labels.len().max(1) as f64;
                    for (i, &l) in labels.iter().enumerate() {
                        d[[i, l]] -= 1.0;
                    }
                    d *= g[[0, 0]] / n;
                    acc(*logits, d);
                }
            }
        }
        Gradients { grads }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}
