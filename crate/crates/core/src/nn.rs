//! Multilayer perceptrons expressed as tape operations.
//!
//! Forward passes run whole batches (rows = instances). Input Jacobians are
//! built as closed-form tape expressions — products of weight transposes and
//! activation-derivative scalings — so structural penalties defined on them
//! backpropagate into the weights through the ordinary reverse sweep.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// Smooth activations only: the graph stage differentiates these networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Tanh,
    Softplus,
}

/// Dense MLP with an optional residual connection (requires in == out).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub act: Act,
    pub residual: bool,
    pub ws: Vec<Array2<f64>>,
    pub bs: Vec<Array2<f64>>,
}

/// Tape handles for one step's bound parameters.
pub struct MlpBound {
    pub ws: Vec<Var>,
    pub bs: Vec<Var>,
}

/// Forward artifacts needed to assemble input Jacobians.
pub struct MlpTrace {
    /// Activation derivative per hidden layer, shape (B, h_l).
    pub dact: Vec<Var>,
    pub out: Var,
}

pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * a)
}

/// Xavier init scaled by `gain`; residual nets start near the identity.
pub fn xavier_scaled(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    xavier(rng, rows, cols).mapv(|v| v * gain)
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, act: Act, residual: bool, rng: &mut ChaCha8Rng) -> Self {
        Self::with_gain(sizes, act, residual, 1.0, rng)
    }

    pub fn with_gain(
        sizes: Vec<usize>,
        act: Act,
        residual: bool,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "MLP needs at least input and output sizes");
        if residual {
            assert_eq!(sizes[0], *sizes.last().unwrap(), "residual MLP needs in == out");
        }
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for w in sizes.windows(2) {
            ws.push(xavier_scaled(rng, w[0], w[1], gain));
            bs.push(Array2::zeros((1, w[1])));
        }
        Self { sizes, act, residual, ws, bs }
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpBound {
        MlpBound {
            ws: self.ws.iter().map(|w| tape.leaf(w.clone())).collect(),
            bs: self.bs.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Forward pass for a (B, in) batch; records activation derivatives.
    pub fn forward_traced(&self, tape: &mut Tape, bound: &MlpBound, x: Var) -> MlpTrace {
        let n_layers = self.ws.len();
        let mut dact = Vec::with_capacity(n_layers - 1);
        let mut h = x;
        for l in 0..n_layers {
            let z = tape.matmul(h, bound.ws[l]);
            let z = tape.add_row_broadcast(z, bound.bs[l]);
            if l + 1 == n_layers {
                h = z;
            } else {
                match self.act {
                    Act::Tanh => {
                        let a = tape.tanh(z);
                        let sq = tape.mul(a, a);
                        let neg = tape.scale(sq, -1.0);
                        let d = tape.add_scalar(neg, 1.0);
                        dact.push(d);
                        h = a;
                    }
                    Act::Softplus => {
                        let a = tape.softplus_op(z);
                        let d = tape.sigmoid_op(z);
                        dact.push(d);
                        h = a;
                    }
                }
            }
        }
        if self.residual {
            h = tape.add(h, x);
        }
        MlpTrace { dact, out: h }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &MlpBound, x: Var) -> Var {
        self.forward_traced(tape, bound, x).out
    }

    /// Per-instance input Jacobians, shape (out, in), one per batch row.
    ///
    /// J_b = W_k^T D_{k-1}(b) W_{k-1}^T ... D_1(b) W_1^T (+ I when residual).
    pub fn input_jacobians(&self, tape: &mut Tape, bound: &MlpBound, trace: &MlpTrace) -> Vec<Var> {
        let batch = tape.value(trace.out).nrows();
        let n_layers = self.ws.len();
        let wts: Vec<Var> = bound.ws.iter().map(|&w| tape.transpose(w)).collect();
        let eye = if self.residual {
            Some(tape.leaf(Array2::eye(self.in_dim())))
        } else {
            None
        };
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut j = wts[n_layers - 1];
            for l in (0..n_layers - 1).rev() {
                let d_row = tape.slice_rows(trace.dact[l], b, b + 1);
                j = tape.mul_row_broadcast(j, d_row);
                j = tape.matmul(j, wts[l]);
            }
            if let Some(eye) = eye {
                j = tape.add(j, eye);
            }
            out.push(j);
        }
        out
    }

    /// Parameters in canonical (checkpoint) order.
    pub fn param_refs(&self) -> Vec<&Array2<f64>> {
        self.ws.iter().chain(self.bs.iter()).collect()
    }

    pub fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.ws.iter_mut().chain(self.bs.iter_mut()).collect()
    }

    pub fn bound_vars(bound: &MlpBound) -> Vec<Var> {
        bound.ws.iter().chain(bound.bs.iter()).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::Array2;

    fn eval_mlp(mlp: &Mlp, x: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let b = mlp.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = mlp.forward(&mut tape, &b, xv);
        tape.value(y).clone()
    }

    #[test]
    fn input_jacobians_match_central_differences() {
        for act in [Act::Tanh, Act::Softplus] {
            for residual in [false, true] {
                let mut rng = stream_rng(3, Stream::ModelInit);
                let mlp = Mlp::new(vec![3, 8, 5, 3], act, residual, &mut rng);
                let x = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);

                let mut tape = Tape::new();
                let bound = mlp.bind(&mut tape);
                let xv = tape.leaf(x.clone());
                let trace = mlp.forward_traced(&mut tape, &bound, xv);
                let jacs = mlp.input_jacobians(&mut tape, &bound, &trace);

                let h = 1e-5;
                for b in 0..4 {
                    let j = tape.value(jacs[b]).clone();
                    for i in 0..3 {
                        for jj in 0..3 {
                            let mut xp = x.clone();
                            xp[[b, jj]] += h;
                            let mut xm = x.clone();
                            xm[[b, jj]] -= h;
                            let fd = (eval_mlp(&mlp, &xp)[[b, i]] - eval_mlp(&mlp, &xm)[[b, i]])
                                / (2.0 * h);
                            let a = j[[i, jj]];
                            let denom = fd.abs().max(a.abs()).max(1e-6);
                            assert!(
                                (fd - a).abs() / denom < 1e-4,
                                "{act:?} residual={residual} row {b} J[{i},{jj}]: fd={fd} analytic={a}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rows_are_independent_across_batch_sizes() {
        let mut rng = stream_rng(5, Stream::ModelInit);
        let mlp = Mlp::new(vec![4, 6, 4], Act::Tanh, false, &mut rng);
        let big = Array2::from_shape_fn((64, 4), |_| rng.random::<f64>() - 0.5);
        let one = big.slice(ndarray::s![7..8, ..]).to_owned();
        let y_big = eval_mlp(&mlp, &big);
        let y_one = eval_mlp(&mlp, &one);
        for c in 0..4 {
            assert_eq!(y_big[[7, c]], y_one[[0, c]]);
        }
    }

    #[test]
    fn residual_with_zero_gain_is_identity() {
        let mut rng = stream_rng(7, Stream::ModelInit);
        let mlp = Mlp::with_gain(vec![3, 5, 3], Act::Tanh, true, 0.0, &mut rng);
        let x = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 0.3);
        assert_eq!(eval_mlp(&mlp, &x), x);
    }
}
