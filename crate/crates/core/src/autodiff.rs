//! Reverse-mode autodiff on a flat tape of matrix operations.
//!
//! The networks in this crate are small enough that a hand-rolled tape is
//! the simplest thing that works: every forward pass records its ops, and
//! [`Tape::backward`] walks them once in reverse. Besides the usual
//! elementwise/matmul primitives there are two graph-structured ops with
//! hand-derived adjoints: masked multi-head [`Tape::attention`] and the
//! independent-activation [`Tape::dissemination_round`]. Every op is
//! finite-difference checked in the test module.

use std::sync::Arc;

use crate::matrix::Matrix;
use crate::scalar::{clamp01, lit, sigmoid, softplus, softplus_prime, Scalar};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    MatMul(usize, usize),
    /// Broadcast-add a `1 x c` row onto an `n x c` matrix.
    AddRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    /// Clamp to [0,1]; zero gradient outside the open interval.
    ClampUnit(usize),
    /// Clamp below at a constant; zero gradient where the floor binds.
    ClampMin(usize, T),
    ConcatCols(Vec<usize>),
    Sum(usize),
    SumSq(usize),
    /// Multi-head masked attention over `{v} ∪ adj(v)`, heads as column blocks.
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        adj: Arc<Vec<Vec<u32>>>,
    },
    /// One round of `p' = 1 - (1 - p0) * prod_{(u,e)} (1 - w[e] p[u])`.
    DissemRound {
        p: usize,
        p0: usize,
        w: usize,
        adj: Arc<Vec<Vec<(u32, u32)>>>,
    },
    /// Mean binary cross-entropy against a constant target, predictions
    /// clamped to `[eps, 1-eps]`.
    BceMean { pred: usize, target: Matrix<T>, eps: T },
    /// Gaussian negative log-likelihood of residuals with per-item scale:
    /// `sum_i dims[i]*ln(sigma_i) + resid_sq[i]/(2 sigma_i^2)`.
    GaussNll { sigma: usize, resid_sq: Vec<T>, dims: Vec<T> },
}

struct Node<T: Scalar> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient store returned by [`Tape::backward`].
pub struct Gradients<T>(Vec<Option<Matrix<T>>>);

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.0[v.0].as_ref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Differentiable input.
    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Input, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Input, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(v, Op::Add(a.0, b.0), self.rg(a.0) || self.rg(b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.push(v, Op::Sub(a.0, b.0), self.rg(a.0) || self.rg(b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value);
        self.push(v, Op::Mul(a.0, b.0), self.rg(a.0) || self.rg(b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.scale(c);
        self.push(v, Op::Scale(a.0, c), self.rg(a.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::AddScalar(a.0, c), self.rg(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0), self.rg(a.0) || self.rg(b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let r = &self.nodes[row.0].value;
        assert_eq!(r.rows(), 1, "add_row expects a 1-row bias");
        assert_eq!(m.cols(), r.cols(), "add_row width mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(i, j) + r.get(0, j);
                out.set(i, j, v);
            }
        }
        self.push(out, Op::AddRow(a.0, row.0), self.rg(a.0) || self.rg(row.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.tanh());
        self.push(v, Op::Tanh(a.0), self.rg(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a.0), self.rg(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(softplus);
        self.push(v, Op::Softplus(a.0), self.rg(a.0))
    }

    pub fn clamp_unit(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(clamp01);
        self.push(v, Op::ClampUnit(a.0), self.rg(a.0))
    }

    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let v = self.nodes[a.0].value.map(|x| if x < floor { floor } else { x });
        self.push(v, Op::ClampMin(a.0, floor), self.rg(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let v = Matrix::concat_cols(&mats);
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.nodes[a.0].value.sum()]);
        self.push(v, Op::Sum(a.0), self.rg(a.0))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.nodes[a.0].value.sum_sq()]);
        self.push(v, Op::SumSq(a.0), self.rg(a.0))
    }

    /// Masked multi-head attention. `q`, `k`, `v` are `n x w` with `w`
    /// divisible by `heads`; node `i` attends over itself and its neighbors.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, adj: Arc<Vec<Vec<u32>>>) -> Var {
        let out = attention_forward(
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            heads,
            &adj,
        );
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, heads, adj }, rg)
    }

    /// One dissemination round; `p` and `p0` are `n x 1`, `w` is `E x 1`
    /// effective edge weights in `[0, 1)`.
    pub fn dissemination_round(
        &mut self,
        p: Var,
        p0: Var,
        w: Var,
        adj: Arc<Vec<Vec<(u32, u32)>>>,
    ) -> Var {
        let out = dissem_forward(
            &self.nodes[p.0].value,
            &self.nodes[p0.0].value,
            &self.nodes[w.0].value,
            &adj,
        );
        let rg = self.rg(p.0) || self.rg(p0.0) || self.rg(w.0);
        self.push(out, Op::DissemRound { p: p.0, p0: p0.0, w: w.0, adj }, rg)
    }

    pub fn bce_mean(&mut self, pred: Var, target: Matrix<T>, eps: T) -> Var {
        let p = &self.nodes[pred.0].value;
        assert_eq!((p.rows(), p.cols()), (target.rows(), target.cols()));
        let n = lit::<T>(p.data().len() as f64);
        let mut acc = T::zero();
        for (&pi, &yi) in p.data().iter().zip(target.data()) {
            let pc = pi.max(eps).min(T::one() - eps);
            acc += -(yi * pc.ln() + (T::one() - yi) * (T::one() - pc).ln());
        }
        let v = Matrix::from_vec(1, 1, vec![acc / n]);
        let rg = self.rg(pred.0);
        self.push(v, Op::BceMean { pred: pred.0, target, eps }, rg)
    }

    /// `sigma` is `m x 1`; `resid_sq[i]` the squared residual norm of item
    /// `i` and `dims[i]` its dimension.
    pub fn gauss_nll(&mut self, sigma: Var, resid_sq: Vec<T>, dims: Vec<T>) -> Var {
        let s = &self.nodes[sigma.0].value;
        assert_eq!(s.cols(), 1);
        assert_eq!(s.rows(), resid_sq.len());
        assert_eq!(dims.len(), resid_sq.len());
        let two = lit::<T>(2.0);
        let mut acc = T::zero();
        for i in 0..resid_sq.len() {
            let si = s.get(i, 0);
            acc += dims[i] * si.ln() + resid_sq[i] / (two * si * si);
        }
        let v = Matrix::from_vec(1, 1, vec![acc]);
        let rg = self.rg(sigma.0);
        self.push(v, Op::GaussNll { sigma: sigma.0, resid_sq, dims }, rg)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let lv = &self.nodes[loss.0].value;
        assert_eq!((lv.rows(), lv.cols()), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![T::one()]));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(&self.nodes[*b].value);
                    let gb = g.hadamard(&self.nodes[*a].value);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, g.scale(*c));
                }
                Op::AddScalar(a, _) => {
                    self.accumulate(&mut grads, *a, g.clone());
                }
                Op::MatMul(a, b) => {
                    // dA = G B^T, dB = A^T G
                    let ga = g.matmul_nt(&self.nodes[*b].value);
                    let gb = self.nodes[*a].value.matmul_tn(&g);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    let mut rg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = rg.get(0, c) + g.get(r, c);
                            rg.set(0, c, v);
                        }
                    }
                    self.accumulate(&mut grads, *row, rg);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&self.nodes[i].value, |gi, yi| gi * (T::one() - yi * yi));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&self.nodes[i].value, |gi, yi| gi * yi * (T::one() - yi));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, |gi, xi| gi * softplus_prime(xi));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::ClampUnit(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, |gi, xi| {
                        if xi > T::zero() && xi < T::one() {
                            gi
                        } else {
                            T::zero()
                        }
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let ga = g.zip_map(&self.nodes[*a].value, |gi, xi| {
                        if xi > *floor {
                            gi
                        } else {
                            T::zero()
                        }
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            for c in 0..w {
                                gp.set(r, c, g.get(r, offset + c));
                            }
                        }
                        self.accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::Sum(a) => {
                    let s = g.get(0, 0);
                    let src = &self.nodes[*a].value;
                    let ga = Matrix::from_vec(
                        src.rows(),
                        src.cols(),
                        vec![s; src.rows() * src.cols()],
                    );
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::SumSq(a) => {
                    let s = g.get(0, 0) * lit::<T>(2.0);
                    let ga = self.nodes[*a].value.scale(s);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Attention { q, k, v, heads, adj } => {
                    let (gq, gk, gv) = attention_backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        *heads,
                        adj,
                        &g,
                    );
                    self.accumulate(&mut grads, *q, gq);
                    self.accumulate(&mut grads, *k, gk);
                    self.accumulate(&mut grads, *v, gv);
                }
                Op::DissemRound { p, p0, w, adj } => {
                    let (gp, gp0, gw) = dissem_backward(
                        &self.nodes[*p].value,
                        &self.nodes[*p0].value,
                        &self.nodes[*w].value,
                        adj,
                        &g,
                    );
                    self.accumulate(&mut grads, *p, gp);
                    self.accumulate(&mut grads, *p0, gp0);
                    self.accumulate(&mut grads, *w, gw);
                }
                Op::BceMean { pred, target, eps } => {
                    let s = g.get(0, 0);
                    let p = &self.nodes[*pred].value;
                    let n = lit::<T>(p.data().len() as f64);
                    let gp = p.zip_map(target, |pi, yi| {
                        if pi > *eps && pi < T::one() - *eps {
                            s * (pi - yi) / (pi * (T::one() - pi) * n)
                        } else {
                            T::zero()
                        }
                    });
                    self.accumulate(&mut grads, *pred, gp);
                }
                Op::GaussNll { sigma, resid_sq, dims } => {
                    let s = g.get(0, 0);
                    let sv = &self.nodes[*sigma].value;
                    let mut gs = Matrix::zeros(sv.rows(), 1);
                    for r in 0..sv.rows() {
                        let si = sv.get(r, 0);
                        gs.set(r, 0, s * (dims[r] / si - resid_sq[r] / (si * si * si)));
                    }
                    self.accumulate(&mut grads, *sigma, gs);
                }
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], target: usize, g: Matrix<T>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    adj: &[Vec<u32>],
) -> Matrix<T> {
    let n = q.rows();
    let w = q.cols();
    assert_eq!(k.rows(), n);
    assert_eq!(v.rows(), n);
    assert_eq!(k.cols(), w);
    assert_eq!(v.cols(), w);
    assert_eq!(adj.len(), n);
    assert!(w % heads == 0, "width must divide into heads");
    let dk = w / heads;
    let inv_sqrt_dk = T::one() / lit::<T>(dk as f64).sqrt();

    let mut out = Matrix::zeros(n, w);
    let mut hood: Vec<usize> = Vec::new();
    let mut scores: Vec<T> = Vec::new();
    for node in 0..n {
        hood.clear();
        hood.push(node);
        hood.extend(adj[node].iter().map(|&u| u as usize));
        for h in 0..heads {
            let base = h * dk;
            let qr = &q.row(node)[base..base + dk];
            scores.clear();
            let mut max = T::neg_infinity();
            for &u in &hood {
                let kr = &k.row(u)[base..base + dk];
                let mut e = T::zero();
                for (a, b) in qr.iter().zip(kr) {
                    e += *a * *b;
                }
                e = e * inv_sqrt_dk;
                if e > max {
                    max = e;
                }
                scores.push(e);
            }
            let mut z = T::zero();
            for e in scores.iter_mut() {
                *e = (*e - max).exp();
                z += *e;
            }
            for (&u, &a) in hood.iter().zip(scores.iter()) {
                let alpha = a / z;
                let vr = &v.row(u)[base..base + dk];
                for (j, &vv) in vr.iter().enumerate() {
                    let cur = out.get(node, base + j) + alpha * vv;
                    out.set(node, base + j, cur);
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    adj: &[Vec<u32>],
    g: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let n = q.rows();
    let w = q.cols();
    let dk = w / heads;
    let inv_sqrt_dk = T::one() / lit::<T>(dk as f64).sqrt();

    let mut gq = Matrix::zeros(n, w);
    let mut gk = Matrix::zeros(n, w);
    let mut gv = Matrix::zeros(n, w);

    let mut hood: Vec<usize> = Vec::new();
    let mut alphas: Vec<T> = Vec::new();
    let mut dscores: Vec<T> = Vec::new();
    for node in 0..n {
        hood.clear();
        hood.push(node);
        hood.extend(adj[node].iter().map(|&u| u as usize));
        for h in 0..heads {
            let base = h * dk;
            let qr = &q.row(node)[base..base + dk];
            // recompute softmax weights
            alphas.clear();
            let mut max = T::neg_infinity();
            for &u in &hood {
                let kr = &k.row(u)[base..base + dk];
                let mut e = T::zero();
                for (a, b) in qr.iter().zip(kr) {
                    e += *a * *b;
                }
                e = e * inv_sqrt_dk;
                if e > max {
                    max = e;
                }
                alphas.push(e);
            }
            let mut z = T::zero();
            for e in alphas.iter_mut() {
                *e = (*e - max).exp();
                z += *e;
            }
            for e in alphas.iter_mut() {
                *e = *e / z;
            }

            let gr = &g.row(node)[base..base + dk];
            // ds_u = g . v_u ; dv_u += alpha_u g
            dscores.clear();
            let mut sbar = T::zero();
            for (&u, &alpha) in hood.iter().zip(alphas.iter()) {
                let vr = &v.row(u)[base..base + dk];
                let mut ds = T::zero();
                for (a, b) in gr.iter().zip(vr) {
                    ds += *a * *b;
                }
                dscores.push(ds);
                sbar += alpha * ds;
                for (j, &gg) in gr.iter().enumerate() {
                    let cur = gv.get(u, base + j) + alpha * gg;
                    gv.set(u, base + j, cur);
                }
            }
            // softmax jacobian, then chain into q and k
            for ((&u, &alpha), &ds) in hood.iter().zip(alphas.iter()).zip(dscores.iter()) {
                let de = alpha * (ds - sbar) * inv_sqrt_dk;
                let kr = &k.row(u)[base..base + dk];
                for (j, (&kj, &qj)) in kr.iter().zip(qr.iter()).enumerate() {
                    let cq = gq.get(node, base + j) + de * kj;
                    gq.set(node, base + j, cq);
                    let ck = gk.get(u, base + j) + de * qj;
                    gk.set(u, base + j, ck);
                }
            }
        }
    }
    (gq, gk, gv)
}

fn dissem_forward<T: Scalar>(
    p: &Matrix<T>,
    p0: &Matrix<T>,
    w: &Matrix<T>,
    adj: &[Vec<(u32, u32)>],
) -> Matrix<T> {
    let n = p.rows();
    assert_eq!(p.cols(), 1);
    assert_eq!(p0.rows(), n);
    assert_eq!(adj.len(), n);
    let mut out = Matrix::zeros(n, 1);
    for v in 0..n {
        let mut prod = T::one();
        for &(u, e) in &adj[v] {
            prod = prod * (T::one() - w.get(e as usize, 0) * p.get(u as usize, 0));
        }
        out.set(v, 0, T::one() - (T::one() - p0.get(v, 0)) * prod);
    }
    out
}

fn dissem_backward<T: Scalar>(
    p: &Matrix<T>,
    p0: &Matrix<T>,
    w: &Matrix<T>,
    adj: &[Vec<(u32, u32)>],
    g: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let n = p.rows();
    let tiny = lit::<T>(1e-12);
    let mut gp = Matrix::zeros(n, 1);
    let mut gp0 = Matrix::zeros(n, 1);
    let mut gw = Matrix::zeros(w.rows(), 1);
    for v in 0..n {
        let gv = g.get(v, 0);
        if gv == T::zero() {
            continue;
        }
        let mut prod = T::one();
        for &(u, e) in &adj[v] {
            prod = prod * (T::one() - w.get(e as usize, 0) * p.get(u as usize, 0));
        }
        let keep = T::one() - p0.get(v, 0);
        gp0.set(v, 0, gp0.get(v, 0) + gv * prod);
        for &(u, e) in &adj[v] {
            let we = w.get(e as usize, 0);
            let pu = p.get(u as usize, 0);
            let factor = T::one() - we * pu;
            // leave-one-out product; recompute directly if the factor is
            // too small to divide through
            let loo = if factor.abs() > tiny {
                prod / factor
            } else {
                let mut q = T::one();
                for &(u2, e2) in &adj[v] {
                    if u2 == u {
                        continue;
                    }
                    q = q * (T::one() - w.get(e2 as usize, 0) * p.get(u2 as usize, 0));
                }
                q
            };
            let cp = gp.get(u as usize, 0) + gv * keep * loo * we;
            gp.set(u as usize, 0, cp);
            let cw = gw.get(e as usize, 0) + gv * keep * loo * pu;
            gw.set(e as usize, 0, cw);
        }
    }
    (gp, gp0, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::Rng;

    /// Central finite-difference check of `f`'s gradient at `x0`.
    fn fd_check(
        x0: &[f64],
        f: &dyn Fn(&[f64]) -> f64,
        grad: &[f64],
        step: f64,
        tol: f64,
    ) {
        for i in 0..x0.len() {
            let mut plus = x0.to_vec();
            plus[i] += step;
            let mut minus = x0.to_vec();
            minus[i] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            let denom = fd.abs().max(1e-6);
            assert!(
                (grad[i] - fd).abs() / denom < tol,
                "component {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    fn test_graph() -> Graph {
        Graph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]).unwrap()
    }

    #[test]
    fn elementwise_and_matmul_gradients_match_fd() {
        let mut rng = crate::seeds::rng(1);
        let a0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let f = |ab: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let a = tape.input(Matrix::from_vec(2, 3, ab[..6].to_vec()));
            let b = tape.input(Matrix::from_vec(3, 2, ab[6..].to_vec()));
            let m = tape.matmul(a, b);
            let t = tape.tanh(m);
            let s = tape.sigmoid(t);
            let sp = tape.softplus(s);
            let loss = tape.sum_sq(sp);
            tape.value(loss).get(0, 0)
        };

        let joined: Vec<f64> = a0.iter().chain(b0.iter()).copied().collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Matrix::from_vec(2, 3, a0.clone()));
        let b = tape.input(Matrix::from_vec(3, 2, b0.clone()));
        let m = tape.matmul(a, b);
        let t = tape.tanh(m);
        let s = tape.sigmoid(t);
        let sp = tape.softplus(s);
        let loss = tape.sum_sq(sp);
        let grads = tape.backward(loss);
        let mut analytic = grads.wrt(a).unwrap().data().to_vec();
        analytic.extend_from_slice(grads.wrt(b).unwrap().data());
        fd_check(&joined, &f, &analytic, 1e-5, 1e-6);
    }

    #[test]
    fn composite_ops_gradients_match_fd() {
        let mut rng = crate::seeds::rng(2);
        let x0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let row0: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let eval = |xs: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let x = tape.input(Matrix::from_vec(4, 2, xs[..8].to_vec()));
            let r = tape.input(Matrix::from_vec(1, 2, xs[8..].to_vec()));
            let xr = tape.add_row(x, r);
            let sc = tape.scale(xr, 0.7);
            let sh = tape.add_scalar(sc, 0.1);
            let cat = tape.concat_cols(&[sh, x]);
            let sq = tape.mul(cat, cat);
            let total = tape.sum(sq);
            let g = tape.backward(total);
            let mut grad = g.wrt(x).unwrap().data().to_vec();
            grad.extend_from_slice(g.wrt(r).unwrap().data());
            (tape.value(total).get(0, 0), grad)
        };

        let joined: Vec<f64> = x0.iter().chain(row0.iter()).copied().collect();
        let (_, analytic) = eval(&joined);
        fd_check(&joined, &|xs| eval(xs).0, &analytic, 1e-5, 1e-6);
    }

    #[test]
    fn attention_gradients_match_fd() {
        let graph = test_graph();
        let adj = graph.neighbor_lists();
        let mut rng = crate::seeds::rng(3);
        let n = 5;
        let w = 4;
        let heads = 2;
        let vals: Vec<f64> = (0..3 * n * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |xs: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let q = tape.input(Matrix::from_vec(n, w, xs[..n * w].to_vec()));
            let k = tape.input(Matrix::from_vec(n, w, xs[n * w..2 * n * w].to_vec()));
            let v = tape.input(Matrix::from_vec(n, w, xs[2 * n * w..].to_vec()));
            let out = tape.attention(q, k, v, heads, adj.clone());
            // weight the output so the gradient is not uniform
            let wmat = Matrix::from_vec(
                n,
                w,
                (0..n * w).map(|i| 0.1 * (i as f64) - 0.8).collect(),
            );
            let wconst = tape.constant(wmat);
            let prod = tape.mul(out, wconst);
            let loss = tape.sum_sq(prod);
            let g = tape.backward(loss);
            let mut grad = g.wrt(q).unwrap().data().to_vec();
            grad.extend_from_slice(g.wrt(k).unwrap().data());
            grad.extend_from_slice(g.wrt(v).unwrap().data());
            (tape.value(loss).get(0, 0), grad)
        };

        let (_, analytic) = eval(&vals);
        fd_check(&vals, &|xs| eval(xs).0, &analytic, 1e-5, 1e-5);
    }

    #[test]
    fn dissemination_round_gradients_match_fd() {
        let graph = test_graph();
        let adj = graph.adjacency_lists();
        let ne = graph.edge_count();
        let mut rng = crate::seeds::rng(4);
        let p: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..0.95)).collect();
        let p0: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..0.95)).collect();
        let wv: Vec<f64> = (0..ne).map(|_| rng.gen_range(0.05..0.9)).collect();
        let all: Vec<f64> = p.iter().chain(&p0).chain(&wv).copied().collect();

        let eval = |xs: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let p = tape.input(Matrix::column(&xs[..5]));
            let p0 = tape.input(Matrix::column(&xs[5..10]));
            let w = tape.input(Matrix::column(&xs[10..]));
            let r1 = tape.dissemination_round(p, p0, w, adj.clone());
            let r2 = tape.dissemination_round(r1, p0, w, adj.clone());
            let loss = tape.sum_sq(r2);
            let g = tape.backward(loss);
            let mut grad = g.wrt(p).unwrap().data().to_vec();
            grad.extend_from_slice(g.wrt(p0).unwrap().data());
            grad.extend_from_slice(g.wrt(w).unwrap().data());
            (tape.value(loss).get(0, 0), grad)
        };

        let (_, analytic) = eval(&all);
        fd_check(&all, &|xs| eval(xs).0, &analytic, 1e-6, 1e-5);
    }

    #[test]
    fn bce_and_gauss_nll_gradients_match_fd() {
        let mut rng = crate::seeds::rng(5);
        let preds: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..0.9)).collect();
        let targets = Matrix::from_vec(6, 1, vec![1.0, 0.0, 1.0, 0.3, 0.0, 1.0]);

        let eval_bce = |xs: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let p = tape.input(Matrix::column(xs));
            let loss = tape.bce_mean(p, targets.clone(), 1e-7);
            let g = tape.backward(loss);
            (tape.value(loss).get(0, 0), g.wrt(p).unwrap().data().to_vec())
        };
        let (_, analytic) = eval_bce(&preds);
        fd_check(&preds, &|xs| eval_bce(xs).0, &analytic, 1e-6, 1e-6);

        let sigmas: Vec<f64> = (0..4).map(|_| rng.gen_range(0.2..2.0)).collect();
        let resid_sq = vec![0.5, 1.3, 0.02, 2.4];
        let dims = vec![3.0, 3.0, 3.0, 3.0];
        let eval_nll = |xs: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let s = tape.input(Matrix::column(xs));
            let loss = tape.gauss_nll(s, resid_sq.clone(), dims.clone());
            let g = tape.backward(loss);
            (tape.value(loss).get(0, 0), g.wrt(s).unwrap().data().to_vec())
        };
        let (_, analytic) = eval_nll(&sigmas);
        fd_check(&sigmas, &|xs| eval_nll(xs).0, &analytic, 1e-6, 1e-6);
    }

    #[test]
    fn clamp_ops_block_gradient_outside_range() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Matrix::column(&[-0.5, 0.5, 1.5]));
        let c = tape.clamp_unit(x);
        let loss = tape.sum_sq(c);
        let g = tape.backward(loss);
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.input(Matrix::column(&[0.1, 0.9]));
        let c = tape.clamp_min(x, 0.5);
        let loss = tape.sum(c);
        let g = tape.backward(loss);
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Matrix::column(&[1.0, 2.0]));
        let c = tape.constant(Matrix::column(&[3.0, 4.0]));
        let m = tape.mul(x, c);
        let loss = tape.sum(m);
        let g = tape.backward(loss);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 4.0]);
    }
}
