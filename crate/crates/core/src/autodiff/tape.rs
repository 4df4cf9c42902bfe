use std::sync::Arc;

use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Symmetric degree-normalised adjacency `D^-1/2 (A + I) D^-1/2` in sparse
/// row form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    /// Builds the normalised adjacency of an undirected simple graph.
    /// Self-loops are added before normalisation.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self, AutodiffError> {
        let mut neighbors: Vec<Vec<usize>> = (0..nodes).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            if a >= nodes || b >= nodes || a == b {
                return Err(AutodiffError::InvalidArgument(format!(
                    "edge ({a}, {b}) invalid for {nodes} nodes"
                )));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let degree: Vec<f64> = neighbors.iter().map(|n| n.len() as f64).collect();
        let rows = neighbors
            .iter()
            .enumerate()
            .map(|(i, ns)| {
                let mut row: Vec<(usize, f64)> = ns
                    .iter()
                    .map(|&j| (j, 1.0 / (degree[i].sqrt() * degree[j].sqrt())))
                    .collect();
                row.sort_by_key(|&(j, _)| j);
                row
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Dense copy, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.rows.len();
        let mut out = vec![0.0; n * n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[i * n + j] += w;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Conv1d {
        input: Var,
        weight: Var,
        width: usize,
        stride: usize,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
        padding: Option<usize>,
    },
    NeighborAggregate(Var, Arc<NormalizedAdjacency>),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    L2Norm(Var),
    Dot(Var, Var),
    ScalarDivide(Var, Var),
    Sum(Var),
    SumRows(Var),
    RowNormalize(Var, Vec<f64>),
    WeightedBce {
        logits: Var,
        targets: Vec<f64>,
        pos_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in evaluation order. Parents always have
/// lower indices than their children, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `like`'s shape when nothing flowed.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, parents: &[Var]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteValue { op });
        }
        let requires_grad = parents.iter().any(|&p| self.requires(p));
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims();
        let (k2, n) = bv.dims();
        if bv.rank() != 2 || k != k2 {
            return Err(mismatch("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let shape = if av.rank() == 1 { vec![n] } else { vec![m, n] };
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(mismatch("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(mismatch("sub", format!("{:?} - {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `m x n` (or length-`n`) input.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, n) = av.dims();
        if bv.rank() != 1 || bv.len() != n {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let b = bv.data();
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("add_bias", t, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(mismatch("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("scale", t, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("relu", t, Op::Relu(a), &[a])
    }

    /// Concatenation: rank-1 inputs are joined end to end; rank-2 inputs with
    /// equal row counts are joined column-wise.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let rank = self.value(*first).rank();
        let rows = self.value(*first).dims().0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != rank || v.dims().0 != rows {
                return Err(mismatch("concat", format!("incompatible part {:?}", v.shape())));
            }
        }
        let total_cols: usize = parts.iter().map(|&p| self.value(p).dims().1).sum();
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 1 { vec![total_cols] } else { vec![rows, total_cols] };
        let t = Tensor::from_parts(shape, data);
        self.push("concat", t, Op::Concat(parts.to_vec()), parts)
    }

    /// Stacks rows (rank-1 vectors or rank-2 blocks) with equal widths.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("stack_rows", "no inputs".into()))?;
        let cols = self.value(*first).dims().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.dims().1 != cols {
                return Err(mismatch("stack_rows", format!("width {} vs {cols}", v.dims().1)));
            }
            rows += v.dims().0;
            data.extend_from_slice(v.data());
        }
        let t = Tensor::from_parts(vec![rows, cols], data);
        self.push("stack_rows", t, Op::StackRows(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let (m, n) = av.dims();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(mismatch("gather_rows", format!("row {i} of {m}")));
            }
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::from_parts(vec![indices.len(), n], data);
        self.push("gather_rows", t, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(mismatch("transpose", format!("{:?}", av.shape())));
        }
        let (m, n) = av.dims();
        let t = Tensor::from_parts(vec![n, m], transpose_raw(av.data(), m, n));
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    /// Valid-padding 1-D convolution. `input` is `len x channels`, `weight`
    /// is `(width * channels) x filters` with the window flattened
    /// position-major.
    pub fn conv1d(&mut self, input: Var, weight: Var, width: usize, stride: usize) -> Result<Var, AutodiffError> {
        let (xv, wv) = (self.value(input), self.value(weight));
        let (len, ch) = xv.dims();
        let (wrows, filters) = wv.dims();
        if xv.rank() != 2 || wv.rank() != 2 || wrows != width * ch || width == 0 || stride == 0 {
            return Err(mismatch(
                "conv1d",
                format!("input {:?}, weight {:?}, width {width}", xv.shape(), wv.shape()),
            ));
        }
        if len < width {
            return Err(mismatch("conv1d", format!("length {len} shorter than width {width}")));
        }
        let out_len = (len - width) / stride + 1;
        let (x, w) = (xv.data(), wv.data());
        let mut out = vec![0.0; out_len * filters];
        for t in 0..out_len {
            let window = &x[t * stride * ch..(t * stride + width) * ch];
            let dst = &mut out[t * filters..(t + 1) * filters];
            for (q, &xq) in window.iter().enumerate() {
                if xq == 0.0 {
                    continue;
                }
                let wrow = &w[q * filters..(q + 1) * filters];
                for (o, wv) in dst.iter_mut().zip(wrow) {
                    *o += xq * wv;
                }
            }
        }
        let t = Tensor::from_parts(vec![out_len, filters], out);
        self.push(
            "conv1d",
            t,
            Op::Conv1d {
                input,
                weight,
                width,
                stride,
            },
            &[input, weight],
        )
    }

    pub fn max_pool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(input);
        let (len, ch) = xv.dims();
        if xv.rank() != 2 || window == 0 || stride == 0 || len < window {
            return Err(mismatch("max_pool1d", format!("{:?} window {window}", xv.shape())));
        }
        let out_len = (len - window) / stride + 1;
        let x = xv.data();
        let mut out = Vec::with_capacity(out_len * ch);
        let mut argmax = Vec::with_capacity(out_len * ch);
        for t in 0..out_len {
            for c in 0..ch {
                let mut best = t * stride;
                for r in t * stride..t * stride + window {
                    if x[r * ch + c] > x[best * ch + c] {
                        best = r;
                    }
                }
                out.push(x[best * ch + c]);
                argmax.push(best * ch + c);
            }
        }
        let t = Tensor::from_parts(vec![out_len, ch], out);
        self.push("max_pool1d", t, Op::MaxPool1d { input, argmax }, &[input])
    }

    /// Column-wise maximum over all rows; ties resolve to the first row.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(input);
        let (rows, ch) = xv.dims();
        if rows == 0 {
            return Err(mismatch("global_max_pool", "empty input".into()));
        }
        let x = xv.data();
        let mut argmax = vec![0usize; ch];
        for (c, best) in argmax.iter_mut().enumerate() {
            *best = c;
            for r in 1..rows {
                if x[r * ch + c] > x[*best] {
                    *best = r * ch + c;
                }
            }
        }
        let out = argmax.iter().map(|&i| x[i]).collect();
        let t = Tensor::from_parts(vec![ch], out);
        self.push("global_max_pool", t, Op::GlobalMaxPool { input, argmax }, &[input])
    }

    /// Row lookup. Rows equal to `padding` produce zeros and never receive
    /// gradient.
    pub fn embedding(&mut self, table: Var, indices: &[usize], padding: Option<usize>) -> Result<Var, AutodiffError> {
        let tv = self.value(table);
        let (vocab, width) = tv.dims();
        if tv.rank() != 2 {
            return Err(mismatch("embedding", format!("table {:?}", tv.shape())));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= vocab {
                return Err(mismatch("embedding", format!("index {i} of {vocab}")));
            }
            if Some(i) == padding {
                data.extend(std::iter::repeat(0.0).take(width));
            } else {
                data.extend_from_slice(tv.row(i));
            }
        }
        let t = Tensor::from_parts(vec![indices.len(), width], data);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
                padding,
            },
            &[table],
        )
    }

    pub fn neighbor_aggregate(&mut self, input: Var, adj: &Arc<NormalizedAdjacency>) -> Result<Var, AutodiffError> {
        let xv = self.value(input);
        let (n, f) = xv.dims();
        if xv.rank() != 2 || n != adj.nodes() {
            return Err(mismatch(
                "neighbor_aggregate",
                format!("{:?} with {} nodes", xv.shape(), adj.nodes()),
            ));
        }
        let x = xv.data();
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let dst = &mut out[i * f..(i + 1) * f];
            for &(j, w) in adj.row(i) {
                for (o, v) in dst.iter_mut().zip(&x[j * f..(j + 1) * f]) {
                    *o += w * v;
                }
            }
        }
        let t = Tensor::from_parts(vec![n, f], out);
        self.push("neighbor_aggregate", t, Op::NeighborAggregate(input, Arc::clone(adj)), &[input])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let (_, n) = av.dims();
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / total));
        }
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.ln()).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("log", t, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("exp", t, Op::Exp(a), &[a])
    }

    /// Euclidean norm over every entry, as a one-element tensor.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let norm = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(AutodiffError::ZeroNorm { op: "l2_norm" });
        }
        self.push("l2_norm", Tensor::scalar(norm), Op::L2Norm(a), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch("dot", format!("{:?} . {:?}", av.shape(), bv.shape())));
        }
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    /// Divides every entry of `a` by the one-element tensor `s`.
    pub fn scalar_divide(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(mismatch("scalar_divide", format!("divisor {:?}", sv.shape())));
        }
        let d = sv.item();
        let av = self.value(a);
        let data = av.data().iter().map(|x| x / d).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("scalar_divide", t, Op::ScalarDivide(a, s), &[a, s])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums of an `m x n` input, giving a length-`m` vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let (_, n) = av.dims();
        let data = av.data().chunks(n).map(|r| r.iter().sum()).collect::<Vec<f64>>();
        self.push("sum_rows", Tensor::vector(data), Op::SumRows(a), &[a])
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let (_, n) = av.dims();
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AutodiffError::ZeroNorm { op: "row_normalize" });
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("row_normalize", t, Op::RowNormalize(a, norms), &[a])
    }

    /// Mean sigmoid cross-entropy over `logits`, with positive-label terms
    /// multiplied by `pos_weight`.
    pub fn weighted_bce(&mut self, logits: Var, targets: &[f64], pos_weight: f64) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || targets.is_empty() {
            return Err(mismatch(
                "weighted_bce",
                format!("{} logits vs {} targets", lv.len(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| pos_weight * y * softplus(-x) + (1.0 - y) * softplus(x))
            .sum();
        self.push(
            "weighted_bce",
            Tensor::scalar(total / n),
            Op::WeightedBce {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.value(output).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::from_parts(self.value(output).shape().to_vec(), vec![1.0]));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteValue { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let shaped = |v: Var, data: Vec<f64>| Tensor::from_parts(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims();
                let (_, n) = bv.dims();
                if self.requires(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    self.accumulate(grads, *a, shaped(*a, matmul_raw(gd, &bt, m, n, k)));
                }
                if self.requires(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    self.accumulate(grads, *b, shaped(*b, matmul_raw(&at, gd, k, m, n)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, shaped(*b, gd.iter().map(|x| -x).collect()));
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *bias, shaped(*bias, db));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    self.accumulate(grads, *a, shaped(*a, gd.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, shaped(*b, gd.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, shaped(*a, gd.iter().map(|x| x * f).collect()));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(av)
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, shaped(*a, d));
            }
            Op::Concat(parts) => {
                let rows = node.value.dims().0;
                let total = node.value.dims().1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims().1;
                    if self.requires(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, shaped(p, d));
                    }
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires(p) {
                        self.accumulate(grads, p, shaped(p, gd[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let (_, n) = av.dims();
                let mut d = vec![0.0; av.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (dst, x) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *dst += x;
                    }
                }
                self.accumulate(grads, *a, shaped(*a, d));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims();
                self.accumulate(grads, *a, shaped(*a, transpose_raw(gd, n, m)));
            }
            Op::Conv1d {
                input,
                weight,
                width,
                stride,
            } => {
                let (xv, wv) = (self.value(*input), self.value(*weight));
                let ch = xv.dims().1;
                let filters = wv.dims().1;
                let out_len = node.value.dims().0;
                let (x, w) = (xv.data(), wv.data());
                let span = width * ch;
                if self.requires(*input) {
                    let mut dx = vec![0.0; x.len()];
                    for t in 0..out_len {
                        let gt = &gd[t * filters..(t + 1) * filters];
                        let base = t * stride * ch;
                        for q in 0..span {
                            let wrow = &w[q * filters..(q + 1) * filters];
                            dx[base + q] += wrow.iter().zip(gt).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *input, shaped(*input, dx));
                }
                if self.requires(*weight) {
                    let mut dw = vec![0.0; w.len()];
                    for t in 0..out_len {
                        let gt = &gd[t * filters..(t + 1) * filters];
                        let window = &x[t * stride * ch..t * stride * ch + span];
                        for (q, &xq) in window.iter().enumerate() {
                            if xq == 0.0 {
                                continue;
                            }
                            for (d, gv) in dw[q * filters..(q + 1) * filters].iter_mut().zip(gt) {
                                *d += xq * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *weight, shaped(*weight, dw));
                }
            }
            Op::MaxPool1d { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&src, x) in argmax.iter().zip(gd) {
                    d[src] += x;
                }
                self.accumulate(grads, *input, shaped(*input, d));
            }
            Op::Embedding {
                table,
                indices,
                padding,
            } => {
                let tv = self.value(*table);
                let (_, width) = tv.dims();
                let mut d = vec![0.0; tv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    if Some(i) == *padding {
                        continue;
                    }
                    for (dst, x) in d[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&gd[r * width..(r + 1) * width])
                    {
                        *dst += x;
                    }
                }
                self.accumulate(grads, *table, shaped(*table, d));
            }
            Op::NeighborAggregate(input, adj) => {
                let (n, f) = self.value(*input).dims();
                let mut d = vec![0.0; n * f];
                for i in 0..n {
                    let gi = &gd[i * f..(i + 1) * f];
                    for &(j, w) in adj.row(i) {
                        for (dst, x) in d[j * f..(j + 1) * f].iter_mut().zip(gi) {
                            *dst += w * x;
                        }
                    }
                }
                self.accumulate(grads, *input, shaped(*input, d));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (_, n) = node.value.dims();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gd.chunks(n)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - inner)));
                }
                self.accumulate(grads, *a, shaped(*a, d));
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, shaped(*a, gd.iter().zip(av).map(|(x, v)| x / v).collect()));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, shaped(*a, gd.iter().zip(y).map(|(x, v)| x * v).collect()));
            }
            Op::L2Norm(a) => {
                let norm = node.value.item();
                let av = self.value(*a).data();
                let d = av.iter().map(|v| gd[0] * v / norm).collect();
                self.accumulate(grads, *a, shaped(*a, d));
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    self.accumulate(grads, *a, shaped(*a, bv.iter().map(|v| gd[0] * v).collect()));
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, shaped(*b, av.iter().map(|v| gd[0] * v).collect()));
                }
            }
            Op::ScalarDivide(a, s) => {
                let sv = self.value(*s).item();
                if self.requires(*a) {
                    self.accumulate(grads, *a, shaped(*a, gd.iter().map(|x| x / sv).collect()));
                }
                if self.requires(*s) {
                    let y = node.value.data();
                    let ds: f64 = -gd.iter().zip(y).map(|(x, v)| x * v).sum::<f64>() / sv;
                    self.accumulate(grads, *s, shaped(*s, vec![ds]));
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, shaped(*a, vec![gd[0]; n]));
            }
            Op::SumRows(a) => {
                let (_, n) = self.value(*a).dims();
                let d = gd.iter().flat_map(|&x| std::iter::repeat(x).take(n)).collect();
                self.accumulate(grads, *a, shaped(*a, d));
            }
            Op::RowNormalize(a, norms) => {
                let y = node.value.data();
                let (_, n) = node.value.dims();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), norm) in y.chunks(n).zip(gd.chunks(n)).zip(norms) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * inner) / norm));
                }
                self.accumulate(grads, *a, shaped(*a, d));
            }
            Op::WeightedBce {
                logits,
                targets,
                pos_weight,
            } => {
                let lv = self.value(*logits).data();
                let n = targets.len() as f64;
                let d = lv
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| {
                        let p = sigmoid(x);
                        gd[0] * (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / n
                    })
                    .collect();
                self.accumulate(grads, *logits, shaped(*logits, d));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
