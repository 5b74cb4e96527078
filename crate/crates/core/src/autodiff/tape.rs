//! Wengert-list reverse-mode differentiation over batched tensors.
//!
//! A forward pass appends nodes to a [`TapeBuilder`]; parent ids always
//! precede child ids, so one reverse sweep over the node list computes
//! exact gradients for every input and parameter leaf. Tapes are
//! single-use: [`Tape::backward`] consumes the tape, and attacks that need
//! many gradients rebuild it each iteration.

use super::ops::{self, ActivationKind};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = x . w + b with x [n,din], w [din,dout], b [dout]
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Activation {
        x: NodeId,
        kind: ActivationKind,
    },
    /// y = x * mask, mask entries 0 or 1/(1-rate)
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    /// per-example -sum(q log softmax(z)); saves q and softmax(z)
    SoftmaxXent {
        logits: NodeId,
        q: Tensor,
        p: Tensor,
    },
    /// per-example entropy of softmax(z); saves softmax(z)
    Entropy {
        logits: NodeId,
        p: Tensor,
    },
    /// scalar sum(w_i * x_i)
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    /// scalar sum(x_i^2)
    SumSquares {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records a forward computation node by node.
#[derive(Default)]
pub struct TapeBuilder {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    params: Vec<NodeId>,
}

impl TapeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t);
        self.inputs.push(id);
        id
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t);
        self.params.push(id);
        id
    }

    /// Node ids of the parameter leaves, in registration order.
    pub fn param_node_ids(&self) -> &[NodeId] {
        &self.params
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || bv.shape().len() != 1 {
            return Err(Error::Shape(format!(
                "affine expects x [n,din], w [din,dout], b [dout]; got {:?}, {:?}, {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        if xv.cols() != wv.rows() || wv.cols() != bv.numel() {
            return Err(Error::Shape(format!(
                "affine dims do not conform: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut y = xv.matmul(wv)?;
        let (n, dout) = (y.rows(), y.cols());
        {
            let data = y.data_mut();
            for i in 0..n {
                for (d, &bj) in data[i * dout..(i + 1) * dout].iter_mut().zip(bv.data()) {
                    *d += bj;
                }
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, y))
    }

    pub fn activation(&mut self, x: NodeId, kind: ActivationKind) -> Result<NodeId> {
        kind.validate()?;
        let y = self.value(x).map(|v| kind.apply(v));
        Ok(self.push(Op::Activation { x, kind }, y))
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> Result<NodeId> {
        let xv = self.value(x);
        let mask = ops::dropout_mask(xv.numel(), rate, rng)?;
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, y))
    }

    pub fn softmax_xent(&mut self, logits: NodeId, q: Tensor) -> Result<NodeId> {
        let zv = self.value(logits);
        let losses = ops::softmax_xent_values(zv, &q)?;
        let p = ops::softmax(zv)?;
        let value = Tensor::from_vec(losses);
        Ok(self.push(Op::SoftmaxXent { logits, q, p }, value))
    }

    pub fn entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let zv = self.value(logits);
        let (h, p) = ops::entropy_values(zv)?;
        Ok(self.push(Op::Entropy { logits, p }, Tensor::from_vec(h)))
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(Error::Shape(format!(
                "weighted_sum got {} weights for {} elements",
                weights.len(),
                xv.numel()
            )));
        }
        let s: f64 = xv.data().iter().zip(&weights).map(|(&v, &w)| v * w).sum();
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s)))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Op::SumSquares { x }, Tensor::scalar(s))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&u, &v)| u + v)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, y))
    }

    /// Seal the tape with `root` as its output node.
    pub fn finish(self, root: NodeId) -> Tape {
        assert!(root < self.nodes.len());
        Tape {
            nodes: self.nodes,
            inputs: self.inputs,
            params: self.params,
            root,
        }
    }
}

/// A sealed forward record, sufficient for exactly one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    params: Vec<NodeId>,
    root: NodeId,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        &self.nodes[self.root].value
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Reverse sweep. Consumes the tape (single-use) and returns gradients
    /// for every input and parameter leaf.
    pub fn backward(self, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.output().shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.output().shape()
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[self.root] = Some(seed.data().to_vec());

        fn get_or_zero(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..n).rev() {
            let dy = match adj[id].take() {
                Some(d) => d,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    adj[id] = Some(dy);
                }
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (nrows, din) = (xv.rows(), xv.cols());
                    let dout = wv.cols();
                    let dyt = Tensor::new(vec![nrows, dout], dy)?;
                    // dX = dY . W^T
                    let dx = dyt.matmul(&wv.transposed())?;
                    // dW = X^T . dY
                    let dw = xv.transposed().matmul(&dyt)?;
                    // db = column sums of dY
                    let mut db = vec![0.0; dout];
                    for i in 0..nrows {
                        for (acc, &g) in db.iter_mut().zip(dyt.row(i)) {
                            *acc += g;
                        }
                    }
                    accumulate(get_or_zero(&mut adj[*x], nrows * din), dx.data());
                    accumulate(get_or_zero(&mut adj[*w], din * dout), dw.data());
                    accumulate(get_or_zero(&mut adj[*b], dout), &db);
                }
                Op::Activation { x, kind } => {
                    let xv = &self.nodes[*x].value;
                    let dst = get_or_zero(&mut adj[*x], xv.numel());
                    for ((d, &g), &v) in dst.iter_mut().zip(&dy).zip(xv.data()) {
                        *d += g * kind.derivative(v);
                    }
                }
                Op::Dropout { x, mask } => {
                    let len = self.nodes[*x].value.numel();
                    let dst = get_or_zero(&mut adj[*x], len);
                    for ((d, &g), &m) in dst.iter_mut().zip(&dy).zip(mask) {
                        *d += g * m;
                    }
                }
                Op::SoftmaxXent { logits, q, p } => {
                    let (nrows, c) = (p.rows(), p.cols());
                    let dst = get_or_zero(&mut adj[*logits], nrows * c);
                    for i in 0..nrows {
                        let s = dy[i];
                        let (prow, qrow) = (p.row(i), q.row(i));
                        for j in 0..c {
                            dst[i * c + j] += s * (prow[j] - qrow[j]);
                        }
                    }
                }
                Op::Entropy { logits, p } => {
                    let (nrows, c) = (p.rows(), p.cols());
                    let h = &self.nodes[id].value;
                    let dst = get_or_zero(&mut adj[*logits], nrows * c);
                    for i in 0..nrows {
                        let s = dy[i];
                        let hi = h.data()[i];
                        for (j, &pj) in p.row(i).iter().enumerate() {
                            if pj > 0.0 {
                                dst[i * c + j] += s * (-pj * (pj.ln() + hi));
                            }
                        }
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let dst = get_or_zero(&mut adj[*x], weights.len());
                    for (d, &w) in dst.iter_mut().zip(weights) {
                        *d += dy[0] * w;
                    }
                }
                Op::SumSquares { x } => {
                    let xv = &self.nodes[*x].value;
                    let dst = get_or_zero(&mut adj[*x], xv.numel());
                    for (d, &v) in dst.iter_mut().zip(xv.data()) {
                        *d += 2.0 * dy[0] * v;
                    }
                }
                Op::Scale { x, c } => {
                    let len = self.nodes[*x].value.numel();
                    let dst = get_or_zero(&mut adj[*x], len);
                    for (d, &g) in dst.iter_mut().zip(&dy) {
                        *d += c * g;
                    }
                }
                Op::Add { a, b } => {
                    let len = dy.len();
                    accumulate(get_or_zero(&mut adj[*a], len), &dy);
                    accumulate(get_or_zero(&mut adj[*b], len), &dy);
                }
            }
        }

        let collect = |ids: &[NodeId], adj: &mut [Option<Vec<f64>>]| -> Result<Vec<Tensor>> {
            ids.iter()
                .map(|&id| {
                    let shape = self.nodes[id].value.shape().to_vec();
                    match adj[id].take() {
                        Some(g) => Tensor::new(shape, g),
                        None => Ok(Tensor::zeros(shape)),
                    }
                })
                .collect()
        };
        let inputs = collect(&self.inputs, &mut adj)?;
        let params = collect(&self.params, &mut adj)?;
        Ok(Gradients { inputs, params })
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients keyed by leaf registration order.
#[derive(Debug)]
pub struct Gradients {
    inputs: Vec<Tensor>,
    params: Vec<Tensor>,
}

impl Gradients {
    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_parts(self) -> (Vec<Tensor>, Vec<Tensor>) {
        (self.inputs, self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_function_gradients() {
        // f(x) = x . w, x [1,2], w [2,1]
        let mut tb = TapeBuilder::new();
        let x = tb.input(Tensor::from_rows(1, 2, vec![3.0, 4.0]).unwrap());
        let w = tb.param(Tensor::from_rows(2, 1, vec![1.0, -2.0]).unwrap());
        let b = tb.param(Tensor::from_vec(vec![0.0]));
        let y = tb.affine(x, w, b).unwrap();
        let tape = tb.finish(y);
        assert_relative_eq!(tape.output().item(), 3.0 - 8.0);
        let grads = tape.backward(&Tensor::from_rows(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(grads.input(0).data(), &[1.0, -2.0]);
        assert_eq!(grads.param(0).data(), &[3.0, 4.0]);
        assert_eq!(grads.param(1).data(), &[1.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tb = TapeBuilder::new();
        let x = tb.input(Tensor::from_rows(1, 1, vec![0.0]).unwrap());
        let y = tb.activation(x, ActivationKind::Tanh).unwrap();
        let tape = tb.finish(y);
        let grads = tape.backward(&Tensor::from_rows(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(grads.input(0).data(), &[1.0]);
    }

    #[test]
    fn seed_shape_must_match_output() {
        let mut tb = TapeBuilder::new();
        let x = tb.input(Tensor::from_rows(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tb.activation(x, ActivationKind::Relu).unwrap();
        let tape = tb.finish(y);
        assert!(tape.backward(&Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // f = sum_squares(x) + weighted_sum(x, ones) => df/dx = 2x + 1
        let mut tb = TapeBuilder::new();
        let x = tb.input(Tensor::from_vec(vec![1.0, -2.0]));
        let s1 = tb.sum_squares(x);
        let s2 = tb.weighted_sum(x, vec![1.0, 1.0]).unwrap();
        let y = tb.add(s1, s2).unwrap();
        let tape = tb.finish(y);
        let grads = tape.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.input(0).data(), &[3.0, -3.0]);
    }
}
