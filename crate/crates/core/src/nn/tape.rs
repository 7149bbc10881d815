//! Reverse-mode automatic differentiation over vector-valued operations.
//!
//! A [`Tape`] records the forward computation; [`Tape::backward`] replays it
//! in reverse and accumulates exact gradients. Values live in one flat arena
//! so a full forward allocates O(1) buffers once warm, and the gradient arena
//! mirrors the value arena index-for-index. Accumulation order is fixed by
//! construction order, so gradients are bit-reproducible.
//!
//! [`Tape::sum_vectors`] sums each coordinate in value order (not argument
//! order), which makes aggregations invariant to how their inputs are listed;
//! model predictions stay bit-identical when scenario entities are relabeled
//! or reordered.

use crate::nn::NnError;

/// Handle to one recorded value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(u32);

impl VarId {
    /// Leaves bound first on a fresh tape get ids 0..n in bind order.
    #[allow(dead_code)] // test-only accessor
    pub(crate) fn from_index(i: usize) -> VarId {
        VarId(i as u32)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = W x, with W a row-major (rows x cols) matrix variable.
    MatVec { w: VarId, x: VarId },
    Add { a: VarId, b: VarId },
    /// Per-coordinate sum of equally sized vectors, in value order.
    SumVecs { xs: Vec<VarId> },
    Mul { a: VarId, b: VarId },
    Sigmoid { x: VarId },
    Tanh { x: VarId },
    Softplus { x: VarId },
    /// y = 1 - x
    OneMinus { x: VarId },
    Concat { a: VarId, b: VarId },
    Ln { x: VarId },
    /// y = x + c with a non-differentiated scalar constant.
    AddConst { x: VarId },
    Scale { x: VarId, k: f64 },
    /// Scalar sum of all coordinates.
    SumElems { x: VarId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    start: usize,
    len: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Drop all recorded nodes but keep the allocations.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        &self.vals[n.start..n.start + n.len]
    }

    pub fn len(&self, v: VarId) -> usize {
        self.nodes[v.0 as usize].len
    }

    fn push(&mut self, op: Op, out: Vec<f64>) -> VarId {
        let start = self.vals.len();
        let len = out.len();
        self.vals.extend_from_slice(&out);
        self.nodes.push(Node { op, start, len });
        VarId((self.nodes.len() - 1) as u32)
    }

    fn push_with(&mut self, op: Op, len: usize, fill: impl FnOnce(&[f64], &mut [f64])) -> VarId {
        let start = self.vals.len();
        self.vals.resize(start + len, 0.0);
        let (src, dst) = self.vals.split_at_mut(start);
        fill(src, dst);
        self.nodes.push(Node { op, start, len });
        VarId((self.nodes.len() - 1) as u32)
    }

    pub fn leaf(&mut self, data: &[f64]) -> VarId {
        self.push(Op::Leaf, data.to_vec())
    }

    pub fn scalar(&mut self, v: f64) -> VarId {
        self.push(Op::Leaf, vec![v])
    }

    pub fn zeros(&mut self, len: usize) -> VarId {
        self.push(Op::Leaf, vec![0.0; len])
    }

    fn span(&self, v: VarId) -> (usize, usize) {
        let n = &self.nodes[v.0 as usize];
        (n.start, n.len)
    }

    /// y = W x: `w` holds `rows * len(x)` entries row-major.
    pub fn matvec(&mut self, w: VarId, x: VarId, rows: usize) -> VarId {
        let (ws, wl) = self.span(w);
        let (xs, xl) = self.span(x);
        assert_eq!(wl, rows * xl, "matvec shape mismatch");
        self.push_with(Op::MatVec { w, x }, rows, |vals, out| {
            let wv = &vals[ws..ws + wl];
            let xv = &vals[xs..xs + xl];
            for (i, o) in out.iter_mut().enumerate() {
                let row = &wv[i * xl..(i + 1) * xl];
                *o = row.iter().zip(xv).map(|(a, b)| a * b).sum();
            }
        })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (as_, al) = self.span(a);
        let (bs, bl) = self.span(b);
        assert_eq!(al, bl, "add length mismatch");
        self.push_with(Op::Add { a, b }, al, |vals, out| {
            for i in 0..al {
                out[i] = vals[as_ + i] + vals[bs + i];
            }
        })
    }

    /// Sum equally sized vectors coordinate-wise; each coordinate's summands
    /// are sorted by value before folding. An empty list yields zeros of
    /// `width`.
    pub fn sum_vectors(&mut self, xs: &[VarId], width: usize) -> VarId {
        let spans: Vec<(usize, usize)> = xs.iter().map(|&x| self.span(x)).collect();
        for &(_, l) in &spans {
            assert_eq!(l, width, "sum_vectors width mismatch");
        }
        let op = Op::SumVecs { xs: xs.to_vec() };
        self.push_with(op, width, |vals, out| {
            let mut col: Vec<f64> = Vec::with_capacity(spans.len());
            for (j, o) in out.iter_mut().enumerate() {
                col.clear();
                col.extend(spans.iter().map(|&(s, _)| vals[s + j]));
                col.sort_unstable_by(f64::total_cmp);
                *o = col.iter().sum();
            }
        })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (as_, al) = self.span(a);
        let (bs, bl) = self.span(b);
        assert_eq!(al, bl, "mul length mismatch");
        self.push_with(Op::Mul { a, b }, al, |vals, out| {
            for i in 0..al {
                out[i] = vals[as_ + i] * vals[bs + i];
            }
        })
    }

    pub fn sigmoid_op(&mut self, x: VarId) -> VarId {
        let (xs, xl) = self.span(x);
        self.push_with(Op::Sigmoid { x }, xl, |vals, out| {
            for i in 0..xl {
                out[i] = sigmoid(vals[xs + i]);
            }
        })
    }

    pub fn tanh_op(&mut self, x: VarId) -> VarId {
        let (xs, xl) = self.span(x);
        self.push_with(Op::Tanh { x }, xl, |vals, out| {
            for i in 0..xl {
                out[i] = vals[xs + i].tanh();
            }
        })
    }

    pub fn softplus_op(&mut self, x: VarId) -> VarId {
        let (xs, xl) = self.span(x);
        self.push_with(Op::Softplus { x }, xl, |vals, out| {
            for i in 0..xl {
                out[i] = softplus(vals[xs + i]);
            }
        })
    }

    pub fn one_minus(&mut self, x: VarId) -> VarId {
        let (xs, xl) = self.span(x);
        self.push_with(Op::OneMinus { x }, xl, |vals, out| {
            for i in 0..xl {
                out[i] = 1.0 - vals[xs + i];
            }
        })
    }

    pub fn concat(&mut self, a: VarId, b: VarId) -> VarId {
        let (as_, al) = self.span(a);
        let (bs, bl) = self.span(b);
        self.push_with(Op::Concat { a, b }, al + bl, |vals, out| {
            out[..al].copy_from_slice(&vals[as_..as_ + al]);
            out[al..].copy_from_slice(&vals[bs..bs + bl]);
        })
    }

    pub fn ln(&mut self, x: VarId) -> VarId {
        let (xs, xl) = self.span(x);
        self.push_with(Op::Ln { x }, xl, |vals, out| {
            for i in 0..xl {
                out[i] = vals[xs + i].ln();
            }
        })
    }

    pub fn add_const(&mut self, x: VarId, c: f64) -> VarId {
        let (xs, xl) = self.span(x);
        self.push_with(Op::AddConst { x }, xl, |vals, out| {
            for i in 0..xl {
                out[i] = vals[xs + i] + c;
            }
        })
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let (xs, xl) = self.span(x);
        self.push_with(Op::Scale { x, k }, xl, |vals, out| {
            for i in 0..xl {
                out[i] = vals[xs + i] * k;
            }
        })
    }

    pub fn sum_elems(&mut self, x: VarId) -> VarId {
        let (xs, xl) = self.span(x);
        self.push_with(Op::SumElems { x }, 1, |vals, out| {
            out[0] = vals[xs..xs + xl].iter().sum();
        })
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// recorded variable. Index the result with [`Tape::grad_of`].
    pub fn backward(&self, loss: VarId) -> Result<Gradients, NnError> {
        let loss_node = &self.nodes[loss.0 as usize];
        if loss_node.len != 1 {
            return Err(NnError::GraphNotScalar(loss_node.len));
        }
        let mut grads = vec![0.0; self.vals.len()];
        grads[loss_node.start] = 1.0;

        for idx in (0..=loss.0 as usize).rev() {
            let node = &self.nodes[idx];
            let (os, ol) = (node.start, node.len);
            match &node.op {
                Op::Leaf => {}
                Op::MatVec { w, x } => {
                    let (ws, _) = self.span(*w);
                    let (xs, xl) = self.span(*x);
                    for i in 0..ol {
                        let go = grads[os + i];
                        if go == 0.0 {
                            continue;
                        }
                        let row = ws + i * xl;
                        for j in 0..xl {
                            grads[row + j] += go * self.vals[xs + j];
                            grads[xs + j] += go * self.vals[row + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (as_, _) = self.span(*a);
                    let (bs, _) = self.span(*b);
                    for i in 0..ol {
                        let go = grads[os + i];
                        grads[as_ + i] += go;
                        grads[bs + i] += go;
                    }
                }
                Op::SumVecs { xs } => {
                    for &x in xs {
                        let (s, _) = self.span(x);
                        for i in 0..ol {
                            grads[s + i] += grads[os + i];
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (as_, _) = self.span(*a);
                    let (bs, _) = self.span(*b);
                    for i in 0..ol {
                        let go = grads[os + i];
                        grads[as_ + i] += go * self.vals[bs + i];
                        grads[bs + i] += go * self.vals[as_ + i];
                    }
                }
                Op::Sigmoid { x } => {
                    let (xs, _) = self.span(*x);
                    for i in 0..ol {
                        let y = self.vals[os + i];
                        grads[xs + i] += grads[os + i] * y * (1.0 - y);
                    }
                }
                Op::Tanh { x } => {
                    let (xs, _) = self.span(*x);
                    for i in 0..ol {
                        let y = self.vals[os + i];
                        grads[xs + i] += grads[os + i] * (1.0 - y * y);
                    }
                }
                Op::Softplus { x } => {
                    let (xs, _) = self.span(*x);
                    for i in 0..ol {
                        grads[xs + i] += grads[os + i] * sigmoid(self.vals[xs + i]);
                    }
                }
                Op::OneMinus { x } => {
                    let (xs, _) = self.span(*x);
                    for i in 0..ol {
                        grads[xs + i] -= grads[os + i];
                    }
                }
                Op::Concat { a, b } => {
                    let (as_, al) = self.span(*a);
                    let (bs, bl) = self.span(*b);
                    for i in 0..al {
                        grads[as_ + i] += grads[os + i];
                    }
                    for i in 0..bl {
                        grads[bs + i] += grads[os + al + i];
                    }
                }
                Op::Ln { x } => {
                    let (xs, _) = self.span(*x);
                    for i in 0..ol {
                        grads[xs + i] += grads[os + i] / self.vals[xs + i];
                    }
                }
                Op::AddConst { x } => {
                    let (xs, _) = self.span(*x);
                    for i in 0..ol {
                        grads[xs + i] += grads[os + i];
                    }
                }
                Op::Scale { x, k } => {
                    let (xs, _) = self.span(*x);
                    for i in 0..ol {
                        grads[xs + i] += grads[os + i] * k;
                    }
                }
                Op::SumElems { x } => {
                    let (xs, xl) = self.span(*x);
                    let go = grads[os];
                    for i in 0..xl {
                        grads[xs + i] += go;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    pub fn grad_of<'a>(&self, grads: &'a Gradients, v: VarId) -> &'a [f64] {
        let (s, l) = self.span(v);
        &grads.grads[s..s + l]
    }
}

/// Gradient arena aligned with the tape's value arena.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0, 3.0]);
        let loss = t.sum_elems(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(t.grad_of(&g, x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0]);
        let y = t.leaf(&[3.0]);
        let loss = t.sum_elems(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(t.grad_of(&g, y), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(NnError::GraphNotScalar(2))));
    }

    #[test]
    fn matvec_forward_and_gradient() {
        let mut t = Tape::new();
        // W = [[1, 2], [3, 4]], x = [5, 6]
        let w = t.leaf(&[1.0, 2.0, 3.0, 4.0]);
        let x = t.leaf(&[5.0, 6.0]);
        let y = t.matvec(w, x, 2);
        assert_eq!(t.value(y), &[17.0, 39.0]);
        let loss = t.sum_elems(y);
        let g = t.backward(loss).unwrap();
        // d(sum)/dW = [x; x], d(sum)/dx = col sums of W
        assert_eq!(t.grad_of(&g, w), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(t.grad_of(&g, x), &[4.0, 6.0]);
    }

    #[test]
    fn mul_product_rule() {
        let mut t = Tape::new();
        let a = t.leaf(&[3.0]);
        let b = t.leaf(&[4.0]);
        let y = t.mul(a, b);
        let loss = t.sum_elems(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(t.grad_of(&g, a), &[4.0]);
        assert_eq!(t.grad_of(&g, b), &[3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = x*x -> dloss/dx = 2x
        let mut t = Tape::new();
        let x = t.leaf(&[3.0]);
        let y = t.mul(x, x);
        let loss = t.sum_elems(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(t.grad_of(&g, x), &[6.0]);
    }

    #[test]
    fn sum_vectors_is_input_order_invariant() {
        let a = [1e16, 1.0, -1e16];
        let b = [3.0, -7.5, 0.25];
        let c = [0.1, 0.2, 0.3];
        let sum_of = |order: &[&[f64]]| {
            let mut t = Tape::new();
            let vars: Vec<VarId> = order.iter().map(|v| t.leaf(v)).collect();
            let s = t.sum_vectors(&vars, 3);
            t.value(s).to_vec()
        };
        let s1 = sum_of(&[&a, &b, &c]);
        let s2 = sum_of(&[&c, &a, &b]);
        let s3 = sum_of(&[&b, &c, &a]);
        for i in 0..3 {
            assert_eq!(s1[i].to_bits(), s2[i].to_bits());
            assert_eq!(s1[i].to_bits(), s3[i].to_bits());
        }
    }

    #[test]
    fn empty_sum_vectors_is_zero() {
        let mut t = Tape::new();
        let s = t.sum_vectors(&[], 4);
        assert_eq!(t.value(s), &[0.0; 4]);
    }

    #[test]
    fn ln_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[2.0]);
        let y = t.ln(x);
        let g = t.backward(y).unwrap();
        assert_eq!(t.grad_of(&g, x), &[0.5]);
    }

    #[test]
    fn softplus_positive_and_smooth() {
        let mut t = Tape::new();
        let x = t.leaf(&[-40.0, -1.0, 0.0, 1.0, 40.0]);
        let y = t.softplus_op(x);
        let v = t.value(y);
        assert!(v.iter().all(|&u| u > 0.0));
        assert!((v[2] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[4] - 40.0).abs() < 1e-12);
    }
}
