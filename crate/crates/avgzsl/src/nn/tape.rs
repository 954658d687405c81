//! Reverse-mode autodiff on a flat tape of dense f64 matrices.
//!
//! Every operation appends a node holding its value, a gradient buffer, and
//! enough information to push gradients back to its inputs. Nodes reference
//! earlier nodes only, so a single reverse sweep from the loss visits children
//! before parents. A fresh tape is built per training step; parameters enter
//! as leaves and their gradients are read back after [`Tape::backward`].
//!
//! The activation-derivative node [`Tape::act_derivative`] is deliberately
//! detached (no backward rule). For piecewise-linear activations the second
//! derivative vanishes almost everywhere, so gradient expressions built from
//! detached slope factors are themselves exactly differentiable. That is what
//! lets the critic's input gradient be expressed as a first-order graph and
//! the gradient penalty trained without second-order support.

use super::mat::Mat;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Activation kinds with piecewise-linear (or smooth) pointwise rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    Identity,
    /// LeakyReLU with the given negative slope; slope 0 is plain ReLU.
    LeakyRelu(f64),
}

enum Op {
    Leaf,
    /// A (n,k) times B^T where B is (m,k); result (n,m).
    MatMulNT(Var, Var),
    /// A (n,k) times B (k,m); result (n,m).
    MatMulNN(Var, Var),
    /// X (n,m) plus a broadcast row vector (1,m).
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// X (n,m) scaled per row by a column vector (n,1).
    MulColVec(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Sqrt(Var),
    /// Pointwise activation slope evaluated at the input; detached from
    /// gradient flow (see module docs).
    ActDerivative,
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var },
    ConcatCols(Var, Var),
    SliceCols { src: Var, start: usize },
    SumCols(Var),
    MeanAll(Var),
    /// Picks value[i, idx[i]] per row; result (n,1).
    GatherCols { src: Var, idx: Vec<usize> },
    /// Mean binary cross-entropy with logits against constant targets.
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Reverse-mode tape. Build the forward graph with the op methods, call
/// [`Tape::backward`] on a scalar node, then read leaf gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { rows, cols, value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter leaf.
    pub fn leaf(&mut self, m: &Mat) -> Var {
        self.push(m.rows, m.cols, m.data.clone(), Op::Leaf)
    }

    pub fn leaf_vec(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf data length mismatch");
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on non-scalar node");
        n.value[0]
    }

    pub fn value_mat(&self, v: Var) -> Mat {
        let n = &self.nodes[v.0];
        Mat::from_vec(n.rows, n.cols, n.value.clone())
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.shape(v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (m, kb) = self.dims(b);
        assert_eq!(k, kb, "matmul_nt inner dim mismatch");
        let mut out = vec![0.0; n * m];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..n {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..m {
                    let brow = &bv[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += arow[t] * brow[t];
                    }
                    out[i * m + j] = acc;
                }
            }
        }
        self.push(n, m, out, Op::MatMulNT(a, b))
    }

    pub fn matmul_nn(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (kb, m) = self.dims(b);
        assert_eq!(k, kb, "matmul_nn inner dim mismatch");
        let mut out = vec![0.0; n * m];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..n {
                for t in 0..k {
                    let aval = av[i * k + t];
                    if aval == 0.0 {
                        continue;
                    }
                    let brow = &bv[t * m..(t + 1) * m];
                    let orow = &mut out[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] += aval * brow[j];
                    }
                }
            }
        }
        self.push(n, m, out, Op::MatMulNN(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (n, m) = self.dims(x);
        assert_eq!(self.dims(row), (1, m), "add_row expects a (1,cols) bias");
        let mut out = self.nodes[x.0].value.clone();
        let rv = self.nodes[row.0].value.clone();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += rv[j];
            }
        }
        self.push(n, m, out, Op::AddRow(x, row))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (n, m) = self.dims(a);
        assert_eq!(self.dims(b), (n, m), "elementwise shape mismatch");
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(n, m, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mul_colvec(&mut self, x: Var, c: Var) -> Var {
        let (n, m) = self.dims(x);
        assert_eq!(self.dims(c), (n, 1), "mul_colvec expects a (rows,1) column");
        let mut out = self.nodes[x.0].value.clone();
        let cv = self.nodes[c.0].value.clone();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] *= cv[i];
            }
        }
        self.push(n, m, out, Op::MulColVec(x, c))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (n, m) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        self.push(n, m, out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let (n, m) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|&v| v + c).collect();
        self.push(n, m, out, Op::AddScalar(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let (n, m) = self.dims(x);
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.push(n, m, out, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|&v| stable_sigmoid(v)).collect();
        self.push(n, m, out, Op::Sigmoid(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|&v| v.sqrt()).collect();
        self.push(n, m, out, Op::Sqrt(x))
    }

    /// Pointwise activation slope at the current input values, emitted as a
    /// constant (detached) node.
    pub fn act_derivative(&mut self, x: Var, kind: ActKind) -> Var {
        let (n, m) = self.dims(x);
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| match kind {
                ActKind::Identity => 1.0,
                ActKind::LeakyRelu(s) => {
                    if v > 0.0 {
                        1.0
                    } else {
                        s
                    }
                }
            })
            .collect();
        self.push(n, m, out, Op::ActDerivative)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &self.nodes[x.0].value[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                out[i * m + j] /= sum;
            }
        }
        self.push(n, m, out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &self.nodes[x.0].value[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for j in 0..m {
                out[i * m + j] = row[j] - lse;
            }
        }
        self.push(n, m, out, Op::LogSoftmaxRows(x))
    }

    /// Per-row layer normalization with learned scale and shift (both (1,m)).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, m) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, m), "layer_norm gamma shape");
        assert_eq!(self.dims(beta), (1, m), "layer_norm beta shape");
        let mut out = vec![0.0; n * m];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gamma.0].value;
            let bv = &self.nodes[beta.0].value;
            for i in 0..n {
                let row = &xv[i * m..(i + 1) * m];
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..m {
                    out[i * m + j] = gv[j] * (row[j] - mean) * inv + bv[j];
                }
            }
        }
        self.push(n, m, out, Op::LayerNormRows { x, gamma, beta })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, ca) = self.dims(a);
        let (nb, cb) = self.dims(b);
        assert_eq!(n, nb, "concat_cols row mismatch");
        let mut out = vec![0.0; n * (ca + cb)];
        for i in 0..n {
            out[i * (ca + cb)..i * (ca + cb) + ca]
                .copy_from_slice(&self.nodes[a.0].value[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&self.nodes[b.0].value[i * cb..(i + 1) * cb]);
        }
        self.push(n, ca + cb, out, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.dims(src);
        assert!(start + len <= m, "slice_cols out of range");
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[src.0].value[i * m + start..i * m + start + len]);
        }
        self.push(n, len, out, Op::SliceCols { src, start })
    }

    /// Row sums; result (n,1).
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.nodes[x.0].value[i * m..(i + 1) * m].iter().sum();
        }
        self.push(n, 1, out, Op::SumCols(x))
    }

    /// Mean over all entries; result (1,1).
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![mean], Op::MeanAll(x))
    }

    /// Per-row column pick; result (n,1).
    pub fn gather_cols(&mut self, src: Var, idx: &[usize]) -> Var {
        let (n, m) = self.dims(src);
        assert_eq!(idx.len(), n, "gather_cols needs one index per row");
        let mut out = vec![0.0; n];
        for i in 0..n {
            assert!(idx[i] < m, "gather_cols index out of range");
            out[i] = self.nodes[src.0].value[i * m + idx[i]];
        }
        self.push(n, 1, out, Op::GatherCols { src, idx: idx.to_vec() })
    }

    /// Mean binary cross-entropy with logits against constant targets,
    /// computed in the numerically stable max(z,0) - z*y + ln(1+e^{-|z|})
    /// form; result (1,1).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let (n, m) = self.dims(logits);
        assert_eq!(n * m, targets.len(), "bce target length mismatch");
        let v = &self.nodes[logits.0].value;
        let total: f64 = v
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let mean = total / targets.len() as f64;
        self.push(1, 1, vec![mean], Op::BceWithLogits { logits, targets: targets.to_vec() })
    }

    // Composite helpers built from the primitive ops.

    /// Euclidean norm of each row; result (n,1).
    pub fn row_norms(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x);
        let s = self.sum_cols(sq);
        self.sqrt(s)
    }

    /// Row norms computed as sqrt(sum + eps), keeping the gradient finite
    /// for exactly-zero rows (the plain norm has an infinite derivative
    /// there). Meant for distance losses where identical rows can occur.
    pub fn row_norms_eps(&mut self, x: Var, eps: f64) -> Var {
        let sq = self.mul(x, x);
        let s = self.sum_cols(sq);
        let shifted = self.add_scalar(s, eps);
        self.sqrt(shifted)
    }

    /// Mean squared error between two equal-shaped nodes; result (1,1).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lsm = self.log_softmax_rows(logits);
        let picked = self.gather_cols(lsm, labels);
        let mean = self.mean_all(picked);
        self.scale(mean, -1.0)
    }

    /// Mean Shannon entropy of row-wise softmax distributions (nats).
    pub fn softmax_entropy(&mut self, logits: Var) -> Var {
        let p = self.softmax_rows(logits);
        let lp = self.log_softmax_rows(logits);
        let plp = self.mul(p, lp);
        let rows = self.sum_cols(plp);
        let mean = self.mean_all(rows);
        self.scale(mean, -1.0)
    }

    /// Runs the reverse sweep from a scalar node. All gradients are zeroed
    /// first, so one tape supports repeated backward calls.
    pub fn backward(&mut self, loss: Var) {
        {
            let n = &self.nodes[loss.0];
            assert_eq!((n.rows, n.cols), (1, 1), "backward expects a scalar loss");
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            backprop_node(node, before);
        }
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pushes `node`'s gradient into its children, all of which live strictly
/// earlier on the tape and are reachable through `before`.
fn backprop_node(node: &Node, before: &mut [Node]) {
    let g = &node.grad;
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf | Op::ActDerivative => {}
        Op::MatMulNT(a, b) => {
            let k = before[a.0].cols;
            let m = cols;
            // dA = dC * B ; dB = dC^T * A, accumulated without aliasing by
            // reading values before touching grads.
            let av = before[a.0].value.clone();
            let bv = before[b.0].value.clone();
            {
                let ga = &mut before[a.0].grad;
                for i in 0..rows {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            ga[i * k + t] += gij * bv[j * k + t];
                        }
                    }
                }
            }
            {
                let gb = &mut before[b.0].grad;
                for i in 0..rows {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            gb[j * k + t] += gij * av[i * k + t];
                        }
                    }
                }
            }
        }
        Op::MatMulNN(a, b) => {
            let k = before[a.0].cols;
            let m = cols;
            let av = before[a.0].value.clone();
            let bv = before[b.0].value.clone();
            {
                let ga = &mut before[a.0].grad;
                for i in 0..rows {
                    for t in 0..k {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[i * m + j] * bv[t * m + j];
                        }
                        ga[i * k + t] += acc;
                    }
                }
            }
            {
                let gb = &mut before[b.0].grad;
                for t in 0..k {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in 0..rows {
                            acc += av[i * k + t] * g[i * m + j];
                        }
                        gb[t * m + j] += acc;
                    }
                }
            }
        }
        Op::AddRow(x, row) => {
            for (gx, &gv) in before[x.0].grad.iter_mut().zip(g) {
                *gx += gv;
            }
            let gr = &mut before[row.0].grad;
            for i in 0..rows {
                for j in 0..cols {
                    gr[j] += g[i * cols + j];
                }
            }
        }
        Op::Add(a, b) => {
            for (ga, &gv) in before[a.0].grad.iter_mut().zip(g) {
                *ga += gv;
            }
            for (gb, &gv) in before[b.0].grad.iter_mut().zip(g) {
                *gb += gv;
            }
        }
        Op::Sub(a, b) => {
            for (ga, &gv) in before[a.0].grad.iter_mut().zip(g) {
                *ga += gv;
            }
            for (gb, &gv) in before[b.0].grad.iter_mut().zip(g) {
                *gb -= gv;
            }
        }
        Op::Mul(a, b) => {
            let av = before[a.0].value.clone();
            let bv = before[b.0].value.clone();
            for ((ga, &bvv), &gv) in before[a.0].grad.iter_mut().zip(&bv).zip(g) {
                *ga += gv * bvv;
            }
            for ((gb, &avv), &gv) in before[b.0].grad.iter_mut().zip(&av).zip(g) {
                *gb += gv * avv;
            }
        }
        Op::MulColVec(x, c) => {
            let xv = before[x.0].value.clone();
            let cv = before[c.0].value.clone();
            {
                let gx = &mut before[x.0].grad;
                for i in 0..rows {
                    for j in 0..cols {
                        gx[i * cols + j] += g[i * cols + j] * cv[i];
                    }
                }
            }
            {
                let gc = &mut before[c.0].grad;
                for i in 0..rows {
                    let mut acc = 0.0;
                    for j in 0..cols {
                        acc += g[i * cols + j] * xv[i * cols + j];
                    }
                    gc[i] += acc;
                }
            }
        }
        Op::Scale(x, c) => {
            for (gx, &gv) in before[x.0].grad.iter_mut().zip(g) {
                *gx += gv * c;
            }
        }
        Op::AddScalar(x) => {
            for (gx, &gv) in before[x.0].grad.iter_mut().zip(g) {
                *gx += gv;
            }
        }
        Op::LeakyRelu(x, slope) => {
            let xv = before[x.0].value.clone();
            for ((gx, &xvv), &gv) in before[x.0].grad.iter_mut().zip(&xv).zip(g) {
                *gx += gv * if xvv > 0.0 { 1.0 } else { *slope };
            }
        }
        Op::Sigmoid(x) => {
            let sv = node.value.clone();
            for ((gx, &s), &gv) in before[x.0].grad.iter_mut().zip(&sv).zip(g) {
                *gx += gv * s * (1.0 - s);
            }
        }
        Op::Sqrt(x) => {
            let sv = node.value.clone();
            for ((gx, &s), &gv) in before[x.0].grad.iter_mut().zip(&sv).zip(g) {
                *gx += gv * 0.5 / s;
            }
        }
        Op::SoftmaxRows(x) => {
            let p = &node.value;
            let gx = &mut before[x.0].grad;
            for i in 0..rows {
                let prow = &p[i * cols..(i + 1) * cols];
                let grow = &g[i * cols..(i + 1) * cols];
                let dot: f64 = prow.iter().zip(grow).map(|(&pp, &gg)| pp * gg).sum();
                for j in 0..cols {
                    gx[i * cols + j] += prow[j] * (grow[j] - dot);
                }
            }
        }
        Op::LogSoftmaxRows(x) => {
            let lp = &node.value;
            let gx = &mut before[x.0].grad;
            for i in 0..rows {
                let grow = &g[i * cols..(i + 1) * cols];
                let gsum: f64 = grow.iter().sum();
                for j in 0..cols {
                    let p = lp[i * cols + j].exp();
                    gx[i * cols + j] += grow[j] - p * gsum;
                }
            }
        }
        Op::LayerNormRows { x, gamma, beta } => {
            let m = cols as f64;
            let xv = before[x.0].value.clone();
            let gv = before[gamma.0].value.clone();
            for i in 0..rows {
                let row = &xv[i * cols..(i + 1) * cols];
                let mean = row.iter().sum::<f64>() / m;
                let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / m;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                let grow = &g[i * cols..(i + 1) * cols];

                for j in 0..cols {
                    before[gamma.0].grad[j] += grow[j] * xhat[j];
                    before[beta.0].grad[j] += grow[j];
                }
                let dxhat: Vec<f64> = (0..cols).map(|j| grow[j] * gv[j]).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / m;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / m;
                let gx = &mut before[x.0].grad;
                for j in 0..cols {
                    gx[i * cols + j] +=
                        inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = before[a.0].cols;
            let cb = before[b.0].cols;
            for i in 0..rows {
                let grow = &g[i * cols..(i + 1) * cols];
                for j in 0..ca {
                    before[a.0].grad[i * ca + j] += grow[j];
                }
                for j in 0..cb {
                    before[b.0].grad[i * cb + j] += grow[ca + j];
                }
            }
        }
        Op::SliceCols { src, start } => {
            let m = before[src.0].cols;
            let gs = &mut before[src.0].grad;
            for i in 0..rows {
                for j in 0..cols {
                    gs[i * m + start + j] += g[i * cols + j];
                }
            }
        }
        Op::SumCols(x) => {
            let m = before[x.0].cols;
            let gx = &mut before[x.0].grad;
            for i in 0..rows {
                for j in 0..m {
                    gx[i * m + j] += g[i];
                }
            }
        }
        Op::MeanAll(x) => {
            let len = before[x.0].value.len() as f64;
            let share = g[0] / len;
            for gx in before[x.0].grad.iter_mut() {
                *gx += share;
            }
        }
        Op::GatherCols { src, idx } => {
            let m = before[src.0].cols;
            let gs = &mut before[src.0].grad;
            for i in 0..rows {
                gs[i * m + idx[i]] += g[i];
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let zv = before[logits.0].value.clone();
            let share = g[0] / targets.len() as f64;
            for ((gz, &z), &y) in before[logits.0].grad.iter_mut().zip(&zv).zip(targets) {
                *gz += share * (stable_sigmoid(z) - y);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd::{finite_diff_grad, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Checks d(scalar graph)/d(leaf) against central finite differences for
    /// every leaf fed to `build`.
    fn check_grads(
        seed: u64,
        leaf_shapes: &[(usize, usize)],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<Vec<f64>> =
            leaf_shapes.iter().map(|&(r, c)| randn(&mut rng, r * c)).collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = leaf_shapes
            .iter()
            .zip(&leaves)
            .map(|(&(r, c), data)| tape.leaf_vec(r, c, data.clone()))
            .collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss);

        for (li, &(r, c)) in leaf_shapes.iter().enumerate() {
            let analytic = tape.grad(vars[li]).to_vec();
            let mut eval = |theta: &[f64]| {
                let mut t = Tape::new();
                let vs: Vec<Var> = leaf_shapes
                    .iter()
                    .enumerate()
                    .map(|(k, &(rr, cc))| {
                        let data = if k == li { theta.to_vec() } else { leaves[k].clone() };
                        t.leaf_vec(rr, cc, data)
                    })
                    .collect();
                let l = build(&mut t, &vs);
                t.scalar(l)
            };
            let numeric = finite_diff_grad(&mut eval, &leaves[li]);
            let err = max_rel_error(&analytic, &numeric, 1e-6);
            assert!(
                err < tol,
                "leaf {li} ({r}x{c}): max rel error {err:.3e} exceeds {tol:.1e}"
            );
        }
    }

    #[test]
    fn matmul_nt_backward_matches_fd() {
        check_grads(
            1,
            &[(3, 4), (5, 4)],
            |t, v| {
                let c = t.matmul_nt(v[0], v[1]);
                let sq = t.mul(c, c);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_nn_backward_matches_fd() {
        check_grads(
            2,
            &[(3, 4), (4, 5)],
            |t, v| {
                let c = t.matmul_nn(v[0], v[1]);
                let sq = t.mul(c, c);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn bias_and_elementwise_backward_match_fd() {
        check_grads(
            3,
            &[(4, 3), (1, 3), (4, 3), (4, 3)],
            |t, v| {
                let x = t.add_row(v[0], v[1]);
                let y = t.mul(x, v[2]);
                let z = t.sub(y, v[3]);
                let a = t.add(z, v[2]);
                let sq = t.mul(a, a);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn activations_backward_match_fd() {
        check_grads(
            4,
            &[(5, 4)],
            |t, v| {
                let a = t.leaky_relu(v[0], 0.2);
                let b = t.sigmoid(a);
                let c = t.scale(b, 3.0);
                let d = t.add_scalar(c, -0.5);
                let sq = t.mul(d, d);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn sqrt_and_norms_backward_match_fd() {
        check_grads(
            5,
            &[(6, 3)],
            |t, v| {
                let n = t.row_norms(v[0]);
                let sq = t.mul(n, n);
                let s = t.add(sq, n);
                t.mean_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_family_backward_matches_fd() {
        check_grads(
            6,
            &[(4, 5)],
            |t, v| {
                let p = t.softmax_rows(v[0]);
                let lp = t.log_softmax_rows(v[0]);
                let m = t.mul(p, lp);
                t.mean_all(m)
            },
            1e-5,
        );
    }

    #[test]
    fn cross_entropy_backward_matches_fd() {
        check_grads(
            7,
            &[(6, 4)],
            |t, v| t.cross_entropy(v[0], &[0, 3, 1, 2, 2, 0]),
            1e-5,
        );
    }

    #[test]
    fn softmax_entropy_backward_matches_fd() {
        check_grads(8, &[(5, 3)], |t, v| t.softmax_entropy(v[0]), 1e-5);
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        check_grads(
            9,
            &[(4, 6), (1, 6), (1, 6)],
            |t, v| {
                let y = t.layer_norm_rows(v[0], v[1], v[2]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn concat_slice_gather_backward_match_fd() {
        check_grads(
            10,
            &[(3, 4), (3, 2)],
            |t, v| {
                let cat = t.concat_cols(v[0], v[1]);
                let left = t.slice_cols(cat, 1, 3);
                let picked = t.gather_cols(left, &[0, 2, 1]);
                let sq = t.mul(picked, picked);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn mul_colvec_backward_matches_fd() {
        check_grads(
            11,
            &[(4, 3), (4, 1)],
            |t, v| {
                let y = t.mul_colvec(v[0], v[1]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn bce_with_logits_backward_matches_fd() {
        check_grads(
            12,
            &[(6, 1)],
            |t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]),
            1e-5,
        );
    }

    #[test]
    fn bce_with_logits_is_stable_on_extreme_logits() {
        let mut t = Tape::new();
        let z = t.leaf_vec(4, 1, vec![500.0, -500.0, 0.0, 30.0]);
        let loss = t.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0]);
        let v = t.scalar(loss);
        assert!(v.is_finite());
        // Entries 0 and 1 contribute ~0, entry 2 contributes ln 2, entry 3
        // contributes ~30; the mean is (ln 2 + 30) / 4.
        let expected = (2.0f64.ln() + 30.0) / 4.0;
        assert!((v - expected).abs() < 1e-9, "got {v}, expected {expected}");
        t.backward(loss);
        assert!(t.grad(z).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn log_softmax_is_stable_on_extreme_logits() {
        let mut t = Tape::new();
        let x = t.leaf_vec(1, 3, vec![1000.0, 0.0, -1000.0]);
        let lsm = t.log_softmax_rows(x);
        let v = t.value(lsm);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 0.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut t = Tape::new();
        let data = randn(&mut rng, 7 * 9);
        let x = t.leaf_vec(7, 9, data);
        let p = t.softmax_rows(x);
        for i in 0..7 {
            let s: f64 = t.value(p)[i * 9..(i + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_accumulates_through_shared_subexpressions() {
        // loss = mean(x*x + x*x) should give twice the gradient of mean(x*x).
        let mut t = Tape::new();
        let x = t.leaf_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let sq = t.mul(x, x);
        let both = t.add(sq, sq);
        let loss = t.mean_all(both);
        t.backward(loss);
        let g = t.grad(x).to_vec();
        for (gv, xv) in g.iter().zip([1.0, -2.0, 3.0, 0.5]) {
            assert!((gv - 4.0 * xv / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn act_derivative_is_detached_and_correct() {
        let mut t = Tape::new();
        let x = t.leaf_vec(1, 4, vec![-2.0, -0.5, 0.5, 2.0]);
        let d = t.act_derivative(x, ActKind::LeakyRelu(0.2));
        assert_eq!(t.value(d), &[0.2, 0.2, 1.0, 1.0]);
        let s = t.mean_all(d);
        t.backward(s);
        // Detached: nothing flows back to x.
        assert!(t.grad(x).iter().all(|&g| g == 0.0));
    }
}
