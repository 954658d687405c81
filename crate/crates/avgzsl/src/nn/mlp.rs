//! Multilayer perceptrons over the tape, with an explicit input-gradient
//! graph for gradient-penalty training.

use rand::Rng;

use super::mat::Mat;
use super::tape::{ActKind, Tape, Var};

/// Hidden-layer activation. The output layer is always linear; downstream
/// losses attach their own nonlinearity (softmax, sigmoid) as needed.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn kind(self) -> ActKind {
        match self {
            Activation::Identity => ActKind::Identity,
            Activation::Relu => ActKind::LeakyRelu(0.0),
            Activation::LeakyRelu(s) => ActKind::LeakyRelu(s),
        }
    }

    fn apply_var(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
        }
    }

    fn apply_scalar(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
        }
    }
}

/// Fully connected network; `sizes` lists layer widths from input to output.
/// Weights are stored (out, in) so the forward pass is x * W^T + b.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Mat>,
    pub biases: Vec<Mat>,
}

impl Mlp {
    /// Builds a network with uniform He/Xavier-style initialization scaled
    /// for the chosen activation, and zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Mlp {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let gain = match activation {
            Activation::Identity => 1.0,
            Activation::Relu => (2.0f64).sqrt(),
            Activation::LeakyRelu(s) => (2.0 / (1.0 + s * s)).sqrt(),
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (inp, out) = (pair[0], pair[1]);
            let bound = gain * (3.0 / inp as f64).sqrt();
            weights.push(Mat::uniform(out, inp, bound, rng));
            biases.push(Mat::zeros(1, out));
        }
        Mlp { sizes: sizes.to_vec(), activation, weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Parameters in a fixed order (w0, b0, w1, b1, ...), shared by Adam
    /// state and checkpoints.
    pub fn params(&self) -> Vec<&Mat> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("w{i}"), w));
            out.push((format!("b{i}"), b));
        }
        out
    }

    /// Registers all parameters as leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.leaf(w)).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b)).collect(),
            activation: self.activation,
        }
    }

    /// Tape-free forward pass for inference.
    pub fn eval(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.input_dim(), "eval input width mismatch");
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut out = Mat::zeros(h.rows, w.rows);
            for r in 0..h.rows {
                let hrow = h.row(r);
                let orow = out.row_mut(r);
                for (j, oj) in orow.iter_mut().enumerate() {
                    let wrow = w.row(j);
                    let mut acc = b.data[j];
                    for t in 0..w.cols {
                        acc += hrow[t] * wrow[t];
                    }
                    *oj = if i < last { self.activation.apply_scalar(acc) } else { acc };
                }
            }
            h = out;
        }
        h
    }
}

/// An [`Mlp`] whose parameters are bound to a tape for one training step.
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    activation: Activation,
}

impl BoundMlp {
    /// Forward pass returning the output node.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        self.forward_parts(tape, x).1
    }

    /// Forward pass that also returns each layer's preactivation node, needed
    /// to assemble the input-gradient graph.
    pub fn forward_parts(&self, tape: &mut Tape, x: Var) -> (Vec<Var>, Var) {
        let last = self.weights.len() - 1;
        let mut preacts = Vec::with_capacity(self.weights.len());
        let mut h = x;
        for (i, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let lin = tape.matmul_nt(h, w);
            let a = tape.add_row(lin, b);
            preacts.push(a);
            h = if i < last { self.activation.apply_var(tape, a) } else { a };
        }
        (preacts, h)
    }

    /// Gradient of the scalar network output with respect to its input,
    /// built as a differentiable graph: grad = W1^T (s1 . W2^T (s2 . ...)),
    /// where the activation slopes s_i enter as detached constants. For the
    /// piecewise-linear activations used here the slopes are locally
    /// constant, so this expression is the exact input gradient almost
    /// everywhere and can itself be differentiated for penalty training.
    ///
    /// Requires a single output unit.
    pub fn input_gradient(&self, tape: &mut Tape, x: Var) -> Var {
        let (preacts, out) = self.forward_parts(tape, x);
        let (n, out_dim) = tape.shape(out);
        assert_eq!(out_dim, 1, "input_gradient requires one output unit");
        let mut r = tape.leaf_vec(n, 1, vec![1.0; n]);
        for i in (0..self.weights.len()).rev() {
            // r holds dD/da_i; push through the linear layer to dD/dh_{i-1}.
            let dh = tape.matmul_nn(r, self.weights[i]);
            if i == 0 {
                return dh;
            }
            let slope = tape.act_derivative(preacts[i - 1], self.activation.kind());
            r = tape.mul(dh, slope);
        }
        unreachable!("loop returns at layer 0");
    }

    /// Gradients of all parameters after a backward pass, in [`Mlp::params`]
    /// order.
    pub fn param_grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [tape.grad(w).to_vec(), tape.grad(b).to_vec()])
            .collect()
    }
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else 1/(1-p).
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Mat {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0,1)");
    let keep = 1.0 - p;
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    Mat::from_vec(rows, cols, data)
}
