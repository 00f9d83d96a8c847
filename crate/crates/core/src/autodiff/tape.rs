// Wengert-list reverse mode over 2-D tensors.
//
// Nodes are appended in evaluation order, so the node list is already a
// topological order; backward walks it once in reverse and accumulates
// adjoints additively at fan-out.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::params::{Gradients, ParamId, ParamStore};
use crate::distributions::softplus;
use crate::tensor::Tensor;
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `[n,m] + [1,m]` broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Sum(Var),
    RowSum(Var),
    /// Row-wise Σ_d KL(N(mq,e^lvq) ‖ N(mp,e^lvp)).
    KlDiag { mq: Var, lvq: Var, mp: Var, lvp: Var },
    /// Row-wise Σ_d KL(N(m,e^lv) ‖ N(0,1)).
    KlStandard { mean: Var, log_var: Var },
    /// Row-wise Gaussian log-density of `x`.
    GaussianLogProb { x: Var, mean: Var, log_var: Var },
    /// Row-wise Bernoulli log-mass of binary `x` under `logits`.
    BernoulliLogProb { x: Var, logits: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    /// Constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.len(), self.value(x).cols(), "bias width");
        let mut value = self.value(x).clone();
        let m = b.len();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += self.nodes[bias.0].value.data()[i % m];
        }
        self.push(value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp(a, lo, hi), &[a])
    }

    /// Sum of all entries as a `[1,1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// `[n,m] → [n,1]` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|i| t.row(i).iter().copied().sum()).collect();
        let value = Tensor::matrix(t.rows(), 1, data).expect("row sums");
        self.push(value, Op::RowSum(a), &[a])
    }

    /// Mean of all entries as a `[1,1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    fn rowwise(&self, vars: &[Var], f: impl Fn(&[T]) -> T) -> Tensor<T> {
        let first = self.value(vars[0]);
        let (n, d) = (first.rows(), first.cols());
        for v in vars {
            assert_eq!(self.value(*v).shape(), first.shape(), "row-wise operand shapes");
        }
        let mut out = Vec::with_capacity(n);
        let mut args = vec![T::zero(); vars.len()];
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..d {
                for (a, v) in args.iter_mut().zip(vars) {
                    *a = self.nodes[v.0].value.data()[i * d + j];
                }
                acc += f(&args);
            }
            out.push(acc);
        }
        Tensor::matrix(n, 1, out).expect("row-wise result")
    }

    pub fn kl_diag(&mut self, mq: Var, lvq: Var, mp: Var, lvp: Var) -> Var {
        let value = self.rowwise(&[mq, lvq, mp, lvp], |a| crate::distributions::kl_gaussian_scalar(a[0], a[1], a[2], a[3]));
        self.push(value, Op::KlDiag { mq, lvq, mp, lvp }, &[mq, lvq, mp, lvp])
    }

    pub fn kl_standard(&mut self, mean: Var, log_var: Var) -> Var {
        let value = self.rowwise(&[mean, log_var], |a| crate::distributions::kl_standard_scalar(a[0], a[1]));
        self.push(value, Op::KlStandard { mean, log_var }, &[mean, log_var])
    }

    pub fn gaussian_log_prob(&mut self, x: Var, mean: Var, log_var: Var) -> Var {
        let half = T::of(0.5);
        let ln_2pi = T::of((2.0 * std::f64::consts::PI).ln());
        let value = self.rowwise(&[x, mean, log_var], |a| {
            let d = a[0] - a[1];
            -half * (ln_2pi + a[2]) - half * d * d * (-a[2]).exp()
        });
        self.push(value, Op::GaussianLogProb { x, mean, log_var }, &[x, mean, log_var])
    }

    pub fn bernoulli_log_prob(&mut self, x: Var, logits: Var) -> Var {
        let value = self.rowwise(&[x, logits], |a| a[0] * a[1] - softplus(a[1]));
        self.push(value, Op::BernoulliLogProb { x, logits }, &[x, logits])
    }

    /// Hash of the active branch of every piecewise op (relu, clamp).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for v in self.value(a).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for v in self.value(a).data() {
                        ((*v < lo) as u8 + 2 * (*v > hi) as u8).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from the one-element node `root`.
    pub fn backward(&self, root: Var, store: &ParamStore<T>) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads = Gradients::zeros_like(store);
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::filled(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, contrib: Tensor<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(id, &g),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        send(a, g.matmul(&val(b).transpose()));
                    }
                    if self.nodes[b.0].requires_grad {
                        send(b, val(a).transpose().matmul(&g));
                    }
                }
                Op::AddBias(x, b) => {
                    let m = val(b).len();
                    let mut db = vec![T::zero(); m];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % m] += *v;
                    }
                    send(b, Tensor::new(val(b).shape().to_vec(), db).expect("bias grad"));
                    send(x, g);
                }
                Op::Add(a, b) => {
                    send(a, g.clone());
                    send(b, g);
                }
                Op::Sub(a, b) => {
                    send(b, g.map(|v| -v));
                    send(a, g);
                }
                Op::Mul(a, b) => {
                    send(a, g.zip_map(val(b), |g, y| g * y));
                    send(b, g.zip_map(val(a), |g, x| g * x));
                }
                Op::Scale(a, c) => send(a, g.map(|v| v * c)),
                Op::Tanh(a) => send(a, g.zip_map(&node.value, |g, y| g * (T::one() - y * y))),
                Op::Relu(a) => send(a, g.zip_map(val(a), |g, x| if x > T::zero() { g } else { T::zero() })),
                Op::Sigmoid(a) => send(a, g.zip_map(&node.value, |g, y| g * y * (T::one() - y))),
                Op::Exp(a) => send(a, g.zip_map(&node.value, |g, y| g * y)),
                Op::Clamp(a, lo, hi) => {
                    send(a, g.zip_map(val(a), |g, x| if x >= lo && x <= hi { g } else { T::zero() }))
                }
                Op::Sum(a) => send(a, Tensor::filled(val(a).shape(), g.item())),
                Op::RowSum(a) => {
                    let t = val(a);
                    let c = t.cols();
                    let data = (0..t.len()).map(|i| g.data()[i / c]).collect();
                    send(a, Tensor::new(t.shape().to_vec(), data).expect("row-sum grad"));
                }
                Op::KlDiag { mq, lvq, mp, lvp } => {
                    let half = T::of(0.5);
                    let d = val(mq).cols();
                    let (mut gmq, mut glvq, mut gmp, mut glvp) =
                        (val(mq).clone(), val(lvq).clone(), val(mp).clone(), val(lvp).clone());
                    for k in 0..val(mq).len() {
                        let up = g.data()[k / d];
                        let (a, b, c, e) = (val(mq).data()[k], val(lvq).data()[k], val(mp).data()[k], val(lvp).data()[k]);
                        let inv_vp = (-e).exp();
                        let diff = a - c;
                        gmq.data_mut()[k] = up * diff * inv_vp;
                        gmp.data_mut()[k] = -up * diff * inv_vp;
                        glvq.data_mut()[k] = up * (half * (b - e).exp() - half);
                        glvp.data_mut()[k] = up * (half - half * (b.exp() + diff * diff) * inv_vp);
                    }
                    send(mq, gmq);
                    send(lvq, glvq);
                    send(mp, gmp);
                    send(lvp, glvp);
                }
                Op::KlStandard { mean, log_var } => {
                    let half = T::of(0.5);
                    let d = val(mean).cols();
                    let gm = Tensor::new(
                        val(mean).shape().to_vec(),
                        val(mean).data().iter().enumerate().map(|(k, &m)| g.data()[k / d] * m).collect(),
                    )
                    .expect("kl grad");
                    let glv = Tensor::new(
                        val(log_var).shape().to_vec(),
                        val(log_var)
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(k, &lv)| g.data()[k / d] * half * (lv.exp() - T::one()))
                            .collect(),
                    )
                    .expect("kl grad");
                    send(mean, gm);
                    send(log_var, glv);
                }
                Op::GaussianLogProb { x, mean, log_var } => {
                    let half = T::of(0.5);
                    let d = val(x).cols();
                    let mut gx = val(x).clone();
                    let mut gm = val(mean).clone();
                    let mut glv = val(log_var).clone();
                    for k in 0..val(x).len() {
                        let up = g.data()[k / d];
                        let diff = val(x).data()[k] - val(mean).data()[k];
                        let inv = (-val(log_var).data()[k]).exp();
                        gm.data_mut()[k] = up * diff * inv;
                        gx.data_mut()[k] = -up * diff * inv;
                        glv.data_mut()[k] = up * (half * diff * diff * inv - half);
                    }
                    send(x, gx);
                    send(mean, gm);
                    send(log_var, glv);
                }
                Op::BernoulliLogProb { x, logits } => {
                    let d = val(x).cols();
                    let gl = Tensor::new(
                        val(logits).shape().to_vec(),
                        val(logits)
                            .data()
                            .iter()
                            .zip(val(x).data())
                            .enumerate()
                            .map(|(k, (&l, &xv))| g.data()[k / d] * (xv - T::one() / (T::one() + (-l).exp())))
                            .collect(),
                    )
                    .expect("bernoulli grad");
                    let gx = Tensor::new(
                        val(x).shape().to_vec(),
                        val(logits).data().iter().enumerate().map(|(k, &l)| g.data()[k / d] * l).collect(),
                    )
                    .expect("bernoulli grad");
                    send(logits, gl);
                    send(x, gx);
                }
            }
        }
        grads
    }
}
