//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every kernel computes each output row with a fixed summation order that
//! does not depend on how many rows are processed together, so evaluating a
//! subset of rows (incremental decoding) is bit-identical to the full pass.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Query-grouped (query, key) pairs for sparse attention. Pair `p` of query
/// `i` lives at `offsets[i] + j` and attends to key row `keys[p]`.
#[derive(Clone, Debug, Default)]
pub struct PairList {
    pub offsets: Vec<usize>,
    pub keys: Vec<usize>,
}

impl PairList {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            keys: Vec::new(),
        }
    }

    pub fn push_query<I: IntoIterator<Item = usize>>(&mut self, keys: I) {
        self.keys.extend(keys);
        self.offsets.push(self.keys.len());
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_pairs(&self) -> usize {
        self.keys.len()
    }

    pub fn range(&self, q: usize) -> std::ops::Range<usize> {
        self.offsets[q]..self.offsets[q + 1]
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        rel: Var,
        pairs: Rc<PairList>,
        heads: usize,
        probs: Vec<T>,
    },
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    SumAll(Var),
    RowSum(Var),
}

enum Storage<T> {
    Owned(Vec<T>),
    Param(usize),
}

struct Node<'p, T> {
    rows: usize,
    cols: usize,
    storage: Storage<T>,
    op: Op<T>,
    needs_grad: bool,
    name: &'p str,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [T],
    nodes: Vec<Node<'p, T>>,
}

/// `out = log_softmax(x)` with max subtraction.
pub fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let m = x.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in x {
        sum += (v - m).exp();
    }
    let lse = m + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [T]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.0];
        match &n.storage {
            Storage::Owned(x) => x,
            Storage::Param(off) => &self.params[*off..*off + n.rows * n.cols],
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Attaches a label reported by non-finite diagnostics.
    pub fn named(&mut self, v: Var, name: &'p str) -> Var {
        self.nodes[v.0].name = name;
        v
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool, name: &'p str) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            storage: Storage::Owned(value),
            op,
            needs_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable view into the flat parameter vector.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize, name: &'p str) -> Var {
        assert!(offset + rows * cols <= self.params.len(), "parameter slice out of range");
        self.nodes.push(Node {
            rows,
            cols,
            storage: Storage::Param(offset),
            op: Op::Leaf,
            needs_grad: true,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, value, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); r * c];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..r {
                let orow = &mut out[i * c..(i + 1) * c];
                for kk in 0..k {
                    let x = av[i * k + kk];
                    let brow = &bv[kk * c..(kk + 1) * c];
                    for (o, &w) in orow.iter_mut().zip(brow) {
                        *o += x * w;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape mismatch");
        let mut out = self.value(a).to_vec();
        {
            let bv = self.value(bias);
            for row in out.chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(bv) {
                    *o += b;
                }
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(r, c, out, Op::AddBias(a, bias), ng, "add_bias")
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (usize, usize, Vec<T>) {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "elementwise shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (s.0, s.1, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c, out) = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c, out) = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c, out) = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, s), ng, "scale")
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| silu(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Silu(a), ng, "silu")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.exp()).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Exp(a), ng, "exp")
    }

    /// Row-wise normalization followed by an affine `gain`, `bias` (both 1 x c).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            let n = T::lit(c as f64);
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mean = row.iter().cloned().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * g[j] + b[j];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// Selects rows of `table` (embedding lookup / row subset).
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let (tr, c) = self.shape(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        {
            let tv = self.value(table);
            for &i in &idx {
                assert!(i < tr, "gather index {i} out of range {tr}");
                out.extend_from_slice(&tv[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(table);
        let r = idx.len();
        self.push(r, c, out, Op::Gather(table, idx), ng, "gather")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, c) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(c, cb, "concat column mismatch");
        let mut out = Vec::with_capacity((ra + rb) * c);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(ra + rb, c, out, Op::ConcatRows(a, b), ng, "concat_rows")
    }

    /// Multi-head attention over explicit pairs. Pair `p` contributes key
    /// `k[keys[p]] + rel[p]` and value `v[keys[p]] + rel[p]`. Queries with no
    /// pairs produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, rel: Var, pairs: Rc<PairList>, heads: usize) -> Var {
        let (nq, d) = self.shape(q);
        assert_eq!(pairs.num_queries(), nq, "pair list / query mismatch");
        assert_eq!(self.shape(k).1, d);
        assert_eq!(self.shape(v), self.shape(k));
        assert_eq!(self.shape(rel), (pairs.num_pairs(), d), "relative embedding rows");
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = vec![T::zero(); nq * d];
        let mut probs = vec![T::zero(); pairs.num_pairs() * heads];
        {
            let (qv, kv, vv, rv) = (self.value(q), self.value(k), self.value(v), self.value(rel));
            let mut scores: Vec<T> = Vec::new();
            for i in 0..nq {
                let range = pairs.range(i);
                if range.is_empty() {
                    continue;
                }
                for h in 0..heads {
                    let hs = h * dh;
                    let qi = &qv[i * d + hs..i * d + hs + dh];
                    scores.clear();
                    let mut m = T::neg_infinity();
                    for p in range.clone() {
                        let key = pairs.keys[p];
                        let kr = &kv[key * d + hs..key * d + hs + dh];
                        let rr = &rv[p * d + hs..p * d + hs + dh];
                        let mut s = T::zero();
                        for t in 0..dh {
                            s += qi[t] * (kr[t] + rr[t]);
                        }
                        let s = s * scale;
                        m = m.max(s);
                        scores.push(s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let orow = &mut out[i * d + hs..i * d + hs + dh];
                    for (j, p) in range.clone().enumerate() {
                        let a = scores[j] / z;
                        probs[p * heads + h] = a;
                        let key = pairs.keys[p];
                        let vr = &vv[key * d + hs..key * d + hs + dh];
                        let rr = &rv[p * d + hs..p * d + hs + dh];
                        for t in 0..dh {
                            orow[t] += a * (vr[t] + rr[t]);
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v) || self.ng(rel);
        self.push(
            nq,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                rel,
                pairs,
                heads,
                probs,
            },
            ng,
            "attention",
        )
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = vec![T::zero(); r * c];
        {
            let xv = self.value(x);
            for i in 0..r {
                log_softmax_row(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(x);
        self.push(r, c, out, Op::LogSoftmax(x), ng, "log_softmax")
    }

    /// Picks column `idx[i]` from row `i`, giving an `r x 1` column.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(idx.len(), r);
        let out = {
            let xv = self.value(x);
            idx.iter()
                .enumerate()
                .map(|(i, &j)| {
                    assert!(j < c, "pick index {j} out of range {c}");
                    xv[i * c + j]
                })
                .collect()
        };
        let ng = self.ng(x);
        self.push(r, 1, out, Op::Pick(x, idx), ng, "pick")
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().cloned().sum();
        let ng = self.ng(x);
        self.push(1, 1, vec![s], Op::SumAll(x), ng, "sum")
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).chunks(c).map(|row| row.iter().cloned().sum()).collect();
        let ng = self.ng(x);
        self.push(r, 1, out, Op::RowSum(x), ng, "row_sum")
    }

    /// Errors with the first non-finite node's label, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if self.value(Var(i)).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: n.name.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Gradient of the scalar `loss` with respect to the flat parameters.
    pub fn backward(&self, loss: Var) -> Result<Vec<T>> {
        assert_eq!(self.shape(loss), (1, 1), "loss must be a scalar");
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut pgrad = vec![T::zero(); self.params.len()];

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let (r, c) = (node.rows, node.cols);
            let acc = |grads: &mut Vec<Option<Vec<T>>>, v: Var, f: &dyn Fn(&mut [T])| {
                if !self.ng(v) {
                    return;
                }
                let len = self.nodes[v.0].rows * self.nodes[v.0].cols;
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    if let Storage::Param(off) = node.storage {
                        for (p, &gv) in pgrad[off..off + r * c].iter_mut().zip(&g) {
                            *p += gv;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.nodes[a.0].cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, &|da| {
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for kk in 0..k {
                                let brow = &bv[kk * c..(kk + 1) * c];
                                let mut s = T::zero();
                                for (x, y) in grow.iter().zip(brow) {
                                    s += *x * *y;
                                }
                                da[i * k + kk] += s;
                            }
                        }
                    });
                    acc(&mut grads, *b, &|db| {
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for kk in 0..k {
                                let x = av[i * k + kk];
                                for (o, &y) in db[kk * c..(kk + 1) * c].iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                    });
                }
                Op::AddBias(a, bias) => {
                    acc(&mut grads, *a, &|da| {
                        for (o, &x) in da.iter_mut().zip(&g) {
                            *o += x;
                        }
                    });
                    acc(&mut grads, *bias, &|db| {
                        for row in g.chunks(c) {
                            for (o, &x) in db.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        acc(&mut grads, v, &|d| {
                            for (o, &x) in d.iter_mut().zip(&g) {
                                *o += x;
                            }
                        });
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &|d| {
                        for (o, &x) in d.iter_mut().zip(&g) {
                            *o += x;
                        }
                    });
                    acc(&mut grads, *b, &|d| {
                        for (o, &x) in d.iter_mut().zip(&g) {
                            *o -= x;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, &|d| {
                        for ((o, &x), &y) in d.iter_mut().zip(&g).zip(bv) {
                            *o += x * y;
                        }
                    });
                    acc(&mut grads, *b, &|d| {
                        for ((o, &x), &y) in d.iter_mut().zip(&g).zip(av) {
                            *o += x * y;
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, &|d| {
                        for (o, &x) in d.iter_mut().zip(&g) {
                            *o += x * *s;
                        }
                    });
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, &|d| {
                        for ((o, &x), &y) in d.iter_mut().zip(&g).zip(av) {
                            *o += x * silu_grad(y);
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = self.value(Var(id));
                    acc(&mut grads, *a, &|d| {
                        for ((o, &x), &y) in d.iter_mut().zip(&g).zip(out) {
                            *o += x * y;
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let n = T::lit(c as f64);
                    acc(&mut grads, *x, &|dx| {
                        for i in 0..r {
                            let gr = &g[i * c..(i + 1) * c];
                            let xh = &xhat[i * c..(i + 1) * c];
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..c {
                                let dxh = gr[j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xh[j];
                            }
                            m1 /= n;
                            m2 /= n;
                            for j in 0..c {
                                let dxh = gr[j] * gv[j];
                                dx[i * c + j] += rstd[i] * (dxh - m1 - xh[j] * m2);
                            }
                        }
                    });
                    acc(&mut grads, *gain, &|dg| {
                        for i in 0..r {
                            for j in 0..c {
                                dg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    });
                    acc(&mut grads, *bias, &|db| {
                        for row in g.chunks(c) {
                            for (o, &x) in db.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    });
                }
                Op::Gather(t, idx) => {
                    acc(&mut grads, *t, &|dt| {
                        for (row, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                dt[i * c + j] += g[row * c + j];
                            }
                        }
                    });
                }
                Op::ConcatRows(a, b) => {
                    let na = self.nodes[a.0].rows * c;
                    acc(&mut grads, *a, &|d| {
                        for (o, &x) in d.iter_mut().zip(&g[..na]) {
                            *o += x;
                        }
                    });
                    acc(&mut grads, *b, &|d| {
                        for (o, &x) in d.iter_mut().zip(&g[na..]) {
                            *o += x;
                        }
                    });
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    rel,
                    pairs,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv, drel) = self.attention_backward(&g, *q, *k, *v, *rel, pairs, *heads, probs);
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv), (*rel, drel)] {
                        acc(&mut grads, var, &|o| {
                            for (x, &y) in o.iter_mut().zip(&d) {
                                *x += y;
                            }
                        });
                    }
                }
                Op::LogSoftmax(a) => {
                    let out = self.value(Var(id));
                    acc(&mut grads, *a, &|d| {
                        for i in 0..r {
                            let gr = &g[i * c..(i + 1) * c];
                            let s: T = gr.iter().cloned().sum();
                            for j in 0..c {
                                d[i * c + j] += gr[j] - out[i * c + j].exp() * s;
                            }
                        }
                    });
                }
                Op::Pick(a, idx) => {
                    let ac = self.nodes[a.0].cols;
                    acc(&mut grads, *a, &|d| {
                        for (i, &j) in idx.iter().enumerate() {
                            d[i * ac + j] += g[i];
                        }
                    });
                }
                Op::SumAll(a) => {
                    acc(&mut grads, *a, &|d| {
                        for o in d.iter_mut() {
                            *o += g[0];
                        }
                    });
                }
                Op::RowSum(a) => {
                    let ac = self.nodes[a.0].cols;
                    acc(&mut grads, *a, &|d| {
                        for (i, row) in d.chunks_mut(ac).enumerate() {
                            for o in row {
                                *o += g[i];
                            }
                        }
                    });
                }
            }
        }
        Ok(pgrad)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        rel: Var,
        pairs: &PairList,
        heads: usize,
        probs: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let (qv, kv, vv, rv) = (self.value(q), self.value(k), self.value(v), self.value(rel));
        let (nq, d) = self.shape(q);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut drel = vec![T::zero(); rv.len()];
        let mut dprob: Vec<T> = Vec::new();
        for i in 0..nq {
            let range = pairs.range(i);
            if range.is_empty() {
                continue;
            }
            for h in 0..heads {
                let hs = h * dh;
                let go = &g[i * d + hs..i * d + hs + dh];
                dprob.clear();
                let mut dot = T::zero();
                for p in range.clone() {
                    let key = pairs.keys[p];
                    let a = probs[p * heads + h];
                    let mut s = T::zero();
                    for t in 0..dh {
                        let val = vv[key * d + hs + t] + rv[p * d + hs + t];
                        s += go[t] * val;
                        dv[key * d + hs + t] += a * go[t];
                        drel[p * d + hs + t] += a * go[t];
                    }
                    dot += a * s;
                    dprob.push(s);
                }
                for (j, p) in range.clone().enumerate() {
                    let key = pairs.keys[p];
                    let a = probs[p * heads + h];
                    let ds = a * (dprob[j] - dot) * scale;
                    for t in 0..dh {
                        let kr = kv[key * d + hs + t] + rv[p * d + hs + t];
                        dq[i * d + hs + t] += ds * kr;
                        let qg = ds * qv[i * d + hs + t];
                        dk[key * d + hs + t] += qg;
                        drel[p * d + hs + t] += qg;
                    }
                }
            }
        }
        (dq, dk, dv, drel)
    }
}

/// Value and exact gradient of the scalar built by `f` over `params`.
pub fn grad<'p, T, F>(params: &'p [T], f: F) -> Result<(T, Vec<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<'p, T>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), g))
}
