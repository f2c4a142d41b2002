//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records a forward computation as an arena of nodes; vectors
//! are rows (`[1, d]`), token sequences are `[L, d]`. [`Tape::backward`]
//! walks the arena in reverse creation order, which is always a valid
//! topological order because operands precede results.
//!
//! Every operation is deterministic and sequential; repeated forward
//! passes over the same inputs are bitwise identical.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Maps an output gradient to one gradient contribution per parent.
type BackFn<F> = Box<dyn Fn(&Array2<F>) -> Vec<Array2<F>>>;

struct BackOp<F: Scalar> {
    parents: Vec<Var>,
    run: BackFn<F>,
}

struct Node<F: Scalar> {
    value: Array2<F>,
    back: Option<BackOp<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    bindings: HashMap<usize, Var>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<F>, back: Option<BackOp<F>>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Records an input with no upstream; gradients are still collected
    /// for it, which is how parameters and probe inputs are handled.
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, None)
    }

    /// Binds an external slot (a parameter) to a leaf at most once per
    /// tape, so repeated use accumulates gradients on a single node.
    pub fn bind(&mut self, key: usize, value: impl FnOnce() -> Array2<F>) -> Var {
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let v = self.leaf(value());
        self.bindings.insert(key, v);
        v
    }

    pub fn bound(&self, key: usize) -> Option<Var> {
        self.bindings.get(&key).copied()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.0].value.dim();
        (d.0, d.1)
    }

    // --- elementwise and affine ops ---

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            Some(BackOp {
                parents: vec![a, b],
                run: Box::new(|g| vec![g.clone(), g.clone()]),
            }),
        )
    }

    /// `a [L,d] + b [1,d]`, broadcasting the row vector over rows.
    pub fn add_rowvec(&mut self, a: Var, b: Var) -> Var {
        let (_, d) = self.shape(a);
        assert_eq!(self.shape(b), (1, d), "add_rowvec: expected [1,{d}]");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            Some(BackOp {
                parents: vec![a, b],
                run: Box::new(|g| {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    vec![g.clone(), gb]
                }),
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            Some(BackOp {
                parents: vec![a, b],
                run: Box::new(|g| vec![g.clone(), g.mapv(|x| -x)]),
            }),
        )
    }

    /// Elementwise product of same-shaped arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = &av * &bv;
        self.push(
            value,
            Some(BackOp {
                parents: vec![a, b],
                run: Box::new(move |g| vec![g * &bv, g * &av]),
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(
            value,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| vec![g.mapv(|x| x * c)]),
            }),
        )
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| F::one() - x);
        self.push(
            value,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(|g| vec![g.mapv(|x| -x)]),
            }),
        )
    }

    // --- matrix products ---

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k1) = self.shape(a);
        let (k2, _) = self.shape(b);
        assert_eq!(k1, k2, "matmul: inner dims {k1} vs {k2}");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = av.dot(&bv);
        self.push(
            value,
            Some(BackOp {
                parents: vec![a, b],
                run: Box::new(move |g| vec![g.dot(&bv.t()), av.t().dot(g)]),
            }),
        )
    }

    /// `a · bᵀ` — the attention-score product.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (_, k1) = self.shape(a);
        let (_, k2) = self.shape(b);
        assert_eq!(k1, k2, "matmul_bt: inner dims {k1} vs {k2}");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = av.dot(&bv.t());
        self.push(
            value,
            Some(BackOp {
                parents: vec![a, b],
                run: Box::new(move |g| vec![g.dot(&bv), g.t().dot(&av)]),
            }),
        )
    }

    /// `w · a` with a constant weight matrix; gradients flow to `a` only.
    pub fn fixed_linear(&mut self, w: Array2<F>, a: Var) -> Var {
        let (k, _) = self.shape(a);
        assert_eq!(w.ncols(), k, "fixed_linear: {} vs {k}", w.ncols());
        let value = w.dot(&self.nodes[a.0].value);
        self.push(
            value,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| vec![w.t().dot(g)]),
            }),
        )
    }

    // --- nonlinearities ---

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.mapv(sigmoid_scalar);
        let yc = y.clone();
        self.push(
            y,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| vec![g * &yc.mapv(|v| v * (F::one() - v))]),
            }),
        )
    }

    /// Gaussian error linear unit (tanh approximation); smooth enough for
    /// central-difference verification.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.nodes[a.0].value.clone();
        let value = x.mapv(gelu_scalar);
        self.push(
            value,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| vec![g * &x.mapv(gelu_grad_scalar)]),
            }),
        )
    }

    /// Row-wise softmax (last axis), numerically stabilized.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = softmax_rows_value(&self.nodes[a.0].value);
        let yc = y.clone();
        self.push(
            y,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| {
                    let mut gx = g * &yc;
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(yc.rows()) {
                        let dot: F = grow.iter().copied().sum();
                        grow.zip_mut_with(&yrow.to_owned(), |gv, &yv| *gv -= dot * yv);
                    }
                    // gx = y∘g − y·rowsum(y∘g): computed as y∘g then subtract y·dot
                    vec![gx]
                }),
            }),
        )
    }

    /// Row-wise layer normalization with learnable gain/bias `[1, d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let (l, d) = self.shape(x);
        assert_eq!(self.shape(gain), (1, d), "layer_norm gain");
        assert_eq!(self.shape(bias), (1, d), "layer_norm bias");
        let xv = &self.nodes[x.0].value;
        let dn = F::from_f64c(d as f64);

        let mut xhat = Array2::zeros((l, d));
        let mut inv_std = Vec::with_capacity(l);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean: F = row.iter().copied().sum::<F>() / dn;
            let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                xhat[(i, j)] = (v - mean) * inv;
            }
        }
        let gv = self.nodes[gain.0].value.clone();
        let value = &xhat * &gv + &self.nodes[bias.0].value;
        let xhat_c = xhat.clone();
        self.push(
            value,
            Some(BackOp {
                parents: vec![x, gain, bias],
                run: Box::new(move |g| {
                    let l = g.nrows();
                    let d = g.ncols();
                    let dn = F::from_f64c(d as f64);
                    let mut gx = Array2::zeros((l, d));
                    let mut ggain = Array2::zeros((1, d));
                    let mut gbias = Array2::zeros((1, d));
                    for i in 0..l {
                        let mut mean_gxhat = F::zero();
                        let mut mean_gxhat_xhat = F::zero();
                        for j in 0..d {
                            let gxh = g[(i, j)] * gv[(0, j)];
                            mean_gxhat += gxh;
                            mean_gxhat_xhat += gxh * xhat_c[(i, j)];
                            ggain[(0, j)] += g[(i, j)] * xhat_c[(i, j)];
                            gbias[(0, j)] += g[(i, j)];
                        }
                        mean_gxhat /= dn;
                        mean_gxhat_xhat /= dn;
                        for j in 0..d {
                            let gxh = g[(i, j)] * gv[(0, j)];
                            gx[(i, j)] =
                                inv_std[i] * (gxh - mean_gxhat - xhat_c[(i, j)] * mean_gxhat_xhat);
                        }
                    }
                    vec![gx, ggain, gbias]
                }),
            }),
        )
    }

    // --- structural ops ---

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows shapes");
        let sizes: Vec<usize> = parts.iter().map(|v| self.shape(*v).0).collect();
        self.push(
            value,
            Some(BackOp {
                parents: parts.to_vec(),
                run: Box::new(move |g| {
                    let mut out = Vec::with_capacity(sizes.len());
                    let mut r = 0;
                    for &n in &sizes {
                        out.push(g.slice(s![r..r + n, ..]).to_owned());
                        r += n;
                    }
                    out
                }),
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols shapes");
        let sizes: Vec<usize> = parts.iter().map(|v| self.shape(*v).1).collect();
        self.push(
            value,
            Some(BackOp {
                parents: parts.to_vec(),
                run: Box::new(move |g| {
                    let mut out = Vec::with_capacity(sizes.len());
                    let mut c = 0;
                    for &n in &sizes {
                        out.push(g.slice(s![.., c..c + n]).to_owned());
                        c += n;
                    }
                    out
                }),
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let (l, d) = self.shape(a);
        assert!(r0 < r1 && r1 <= l, "slice_rows: {r0}..{r1} of {l}");
        let value = self.nodes[a.0].value.slice(s![r0..r1, ..]).to_owned();
        self.push(
            value,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| {
                    let mut full = Array2::zeros((l, d));
                    full.slice_mut(s![r0..r1, ..]).assign(g);
                    vec![full]
                }),
            }),
        )
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, r + 1)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let (l, d) = self.shape(a);
        assert!(c0 < c1 && c1 <= d, "slice_cols: {c0}..{c1} of {d}");
        let value = self.nodes[a.0].value.slice(s![.., c0..c1]).to_owned();
        self.push(
            value,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| {
                    let mut full = Array2::zeros((l, d));
                    full.slice_mut(s![.., c0..c1]).assign(g);
                    vec![full]
                }),
            }),
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (l, _) = self.shape(a);
        let inv = F::one() / F::from_f64c(l as f64);
        let value = self.nodes[a.0].value.sum_axis(Axis(0)).insert_axis(Axis(0)) * inv;
        self.push(
            value,
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| {
                    let grow = g.mapv(|x| x * inv);
                    vec![grow.broadcast((l, g.ncols())).unwrap().to_owned()]
                }),
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let (l, d) = self.shape(a);
        let total: F = self.nodes[a.0].value.iter().copied().sum();
        self.push(
            Array2::from_elem((1, 1), total),
            Some(BackOp {
                parents: vec![a],
                run: Box::new(move |g| vec![Array2::from_elem((l, d), g[(0, 0)])]),
            }),
        )
    }

    /// Gated convex blend `s·a + (1−s)·b` with a scalar gate `s` `[1,1]`.
    pub fn lincomb_gate(&mut self, gate: Var, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(gate), (1, 1), "lincomb_gate: gate must be [1,1]");
        assert_eq!(self.shape(a), self.shape(b), "lincomb_gate: shape mismatch");
        let sv = self.nodes[gate.0].value[(0, 0)];
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = av.mapv(|x| x * sv) + &bv.mapv(|x| x * (F::one() - sv));
        self.push(
            value,
            Some(BackOp {
                parents: vec![gate, a, b],
                run: Box::new(move |g| {
                    let mut gs = F::zero();
                    for ((&gv, &va), &vb) in g.iter().zip(av.iter()).zip(bv.iter()) {
                        gs += gv * (va - vb);
                    }
                    vec![
                        Array2::from_elem((1, 1), gs),
                        g.mapv(|x| x * sv),
                        g.mapv(|x| x * (F::one() - sv)),
                    ]
                }),
            }),
        )
    }

    /// Cosine similarity of two row vectors; errors on a zero-norm input.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, d) = self.shape(a);
        assert_eq!(ra, 1, "cosine: expected row vectors");
        assert_eq!(self.shape(b), (1, d), "cosine: shape mismatch");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let na2: F = av.iter().map(|&x| x * x).sum();
        let nb2: F = bv.iter().map(|&x| x * x).sum();
        if na2 == F::zero() || nb2 == F::zero() {
            return Err(Error::Numeric("cosine of a zero-norm vector".into()));
        }
        let na = na2.sqrt();
        let nb = nb2.sqrt();
        let dot: F = av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).sum();
        let c = dot / (na * nb);
        Ok(self.push(
            Array2::from_elem((1, 1), c),
            Some(BackOp {
                parents: vec![a, b],
                run: Box::new(move |g| {
                    let g0 = g[(0, 0)];
                    let ga = bv.mapv(|y| y / (na * nb)) - av.mapv(|x| x * c / na2);
                    let gb = av.mapv(|x| x / (na * nb)) - bv.mapv(|y| y * c / nb2);
                    vec![ga.mapv(|x| x * g0), gb.mapv(|x| x * g0)]
                }),
            }),
        ))
    }

    /// Cross-entropy of `softmax(logits)` at the target class.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        assert_eq!(r, 1, "cross_entropy: logits must be [1,C]");
        if target >= c {
            return Err(Error::Precondition(format!(
                "target {target} out of range for {c} classes"
            )));
        }
        let z = &self.nodes[logits.0].value;
        let p = softmax_rows_value(z);
        let max = z.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
        let loss = lse - z[(0, target)];
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Some(BackOp {
                parents: vec![logits],
                run: Box::new(move |g| {
                    let g0 = g[(0, 0)];
                    let mut gz = p.mapv(|x| x * g0);
                    gz[(0, target)] -= g0;
                    vec![gz]
                }),
            }),
        ))
    }

    /// Backpropagates from a `[1,1]` loss to every node that feeds it.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Array2<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            if let Some(back) = &self.nodes[id].back {
                let contribs = (back.run)(&g);
                debug_assert_eq!(contribs.len(), back.parents.len());
                for (parent, contrib) in back.parents.iter().zip(contribs) {
                    match &mut grads[parent.0] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // Split on sign for numerical stability at large |x|.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Plain sigmoid on a scalar, shared with the gate math.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    sigmoid_scalar(x)
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64c(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64c(0.044715);
    let u = c * (x + a * x * x * x);
    F::from_f64c(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64c(0.7978845608028654);
    let a = F::from_f64c(0.044715);
    let half = F::from_f64c(0.5);
    let three = F::from_f64c(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

fn softmax_rows_value<F: Scalar>(z: &Array2<F>) -> Array2<F> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: F = row.iter().copied().sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}
