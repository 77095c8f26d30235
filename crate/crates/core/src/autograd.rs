//! A small reverse-mode tape. Every op computes its value eagerly and, when
//! any input needs a gradient, records a closure that maps the output
//! gradient onto its inputs. Heavy ops (attention, convolutions, layer norm)
//! are fused so the tape stays short.

use std::rc::Rc;

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackFn<F> = Box<dyn Fn(&[Tensor<F>], &[F], &mut Grads<F>)>;

pub struct Grads<F> {
    slots: Vec<Option<Vec<F>>>,
    needs: Vec<bool>,
    lens: Vec<usize>,
}

impl<F: Scalar> Grads<F> {
    fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn slot(&mut self, v: Var) -> &mut [F] {
        let len = self.lens[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn acc(&mut self, v: Var, delta: &[F]) {
        if !self.wants(v) {
            return;
        }
        for (g, d) in self.slot(v).iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.slots[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.slots[v.0].take()
    }
}

/// Precomputed rotary angles: for token `i` and pair `p` within a head,
/// `cos[i * pairs + p]` / `sin[i * pairs + p]`.
#[derive(Clone, Debug)]
pub struct RopeTable<F> {
    pub cos: Vec<F>,
    pub sin: Vec<F>,
    pub pairs: usize,
}

pub struct Graph<F: Scalar> {
    values: Vec<Tensor<F>>,
    backs: Vec<Option<BackFn<F>>>,
    needs: Vec<bool>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new(true)
    }
}

fn gelu_tanh<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation; returns (value, derivative)
    let c = F::of(0.797_884_560_802_865_4);
    let a = F::of(0.044_715);
    let half = F::of(0.5);
    let one = F::one();
    let x2 = x * x;
    let inner = c * (x + a * x2 * x);
    let th = inner.tanh();
    let val = half * x * (one + th);
    let dinner = c * (one + F::of(3.0) * a * x2);
    let d = half * (one + th) + half * x * (one - th * th) * dinner;
    (val, d)
}

impl<F: Scalar> Graph<F> {
    pub fn new(grad_enabled: bool) -> Self {
        Self { values: Vec::new(), backs: Vec::new(), needs: Vec::new(), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn push<B>(&mut self, value: Tensor<F>, inputs: &[Var], back: B) -> Var
    where
        B: Fn(&[Tensor<F>], &[F], &mut Grads<F>) + 'static,
    {
        let needs = self.grad_enabled && inputs.iter().any(|v| self.needs[v.0]);
        self.values.push(value);
        self.needs.push(needs);
        self.backs.push(if needs { Some(Box::new(back)) } else { None });
        Var(self.values.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<F>, needs: bool) -> Var {
        self.values.push(value);
        self.needs.push(needs && self.grad_enabled);
        self.backs.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads<F> {
        assert_eq!(self.values[out.0].len(), 1, "backward needs a scalar output");
        let mut grads = Grads {
            slots: vec![None; self.values.len()],
            needs: self.needs.clone(),
            lens: self.values.iter().map(|t| t.len()).collect(),
        };
        if !self.needs[out.0] {
            return grads;
        }
        grads.slots[out.0] = Some(vec![F::one()]);
        for i in (0..=out.0).rev() {
            let Some(back) = &self.backs[i] else { continue };
            let Some(g) = grads.slots[i].take() else { continue };
            back(&self.values, &g, &mut grads);
            grads.slots[i] = Some(g);
        }
        grads
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add: length mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(data, ta.shape()).unwrap();
        self.push(out, &[a, b], move |_, g, gr| {
            gr.acc(a, g);
            gr.acc(b, g);
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "sub: length mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(data, ta.shape()).unwrap();
        self.push(out, &[a, b], move |_, g, gr| {
            gr.acc(a, g);
            if gr.wants(b) {
                for (s, d) in gr.slot(b).iter_mut().zip(g) {
                    *s = *s - *d;
                }
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "mul: length mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(data, ta.shape()).unwrap();
        self.push(out, &[a, b], move |vals, g, gr| {
            if gr.wants(a) {
                let vb = vals[b.0].data();
                for ((s, d), y) in gr.slot(a).iter_mut().zip(g).zip(vb) {
                    *s = *s + *d * *y;
                }
            }
            if gr.wants(b) {
                let va = vals[a.0].data();
                for ((s, d), x) in gr.slot(b).iter_mut().zip(g).zip(va) {
                    *s = *s + *d * *x;
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.data().iter().map(|x| *x * c).collect(), ta.shape()).unwrap();
        self.push(out, &[a], move |_, g, gr| {
            for (s, d) in gr.slot(a).iter_mut().zip(g) {
                *s = *s + *d * c;
            }
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.data().iter().map(|x| *x + c).collect(), ta.shape()).unwrap();
        self.push(out, &[a], move |_, g, gr| gr.acc(a, g))
    }

    /// `a[r, :] + b` for a row vector `b` of length `cols(a)`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        assert_eq!(tb.len(), c, "add_row: bias length");
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x = *x + *y;
            }
        }
        let out = Tensor::new(data, ta.shape()).unwrap();
        self.push(out, &[a, b], move |_, g, gr| {
            gr.acc(a, g);
            if gr.wants(b) {
                let s = gr.slot(b);
                for row in g.chunks(c) {
                    for (x, y) in s.iter_mut().zip(row) {
                        *x = *x + *y;
                    }
                }
            }
        })
    }

    /// `a[r, :] * b` for a row vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        assert_eq!(tb.len(), c, "mul_row: length");
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x = *x * *y;
            }
        }
        let out = Tensor::new(data, ta.shape()).unwrap();
        self.push(out, &[a, b], move |vals, g, gr| {
            if gr.wants(a) {
                let vb = vals[b.0].data().to_vec();
                let s = gr.slot(a);
                for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                    for ((x, d), y) in srow.iter_mut().zip(grow).zip(&vb) {
                        *x = *x + *d * *y;
                    }
                }
            }
            if gr.wants(b) {
                let va = vals[a.0].data().to_vec();
                let s = gr.slot(b);
                for (arow, grow) in va.chunks(c).zip(g.chunks(c)) {
                    for ((x, d), y) in s.iter_mut().zip(grow).zip(arow) {
                        *x = *x + *d * *y;
                    }
                }
            }
        })
    }

    /// Multiplies every entry of a 1-element tensor `s` into `a`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "mul_scalar_var: scalar expected");
        let k = sv.data()[0];
        let ta = self.value(a);
        let out = Tensor::new(ta.data().iter().map(|x| *x * k).collect(), ta.shape()).unwrap();
        self.push(out, &[a, s], move |vals, g, gr| {
            if gr.wants(a) {
                let k = vals[s.0].data()[0];
                for (x, d) in gr.slot(a).iter_mut().zip(g) {
                    *x = *x + *d * k;
                }
            }
            if gr.wants(s) {
                let dot: F = vals[a.0].data().iter().zip(g).map(|(x, d)| *x * *d).sum();
                let sl = gr.slot(s);
                sl[0] = sl[0] + dot;
            }
        })
    }

    /// Scales row `r` by the constant `w[r]`.
    pub fn mul_rows_const(&mut self, a: Var, w: Rc<Vec<F>>) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        assert_eq!(w.len(), ta.rows(), "mul_rows_const: weight count");
        let mut data = ta.data().to_vec();
        for (row, k) in data.chunks_mut(c).zip(w.iter()) {
            for x in row {
                *x = *x * *k;
            }
        }
        let out = Tensor::new(data, ta.shape()).unwrap();
        self.push(out, &[a], move |_, g, gr| {
            let s = gr.slot(a);
            for ((srow, grow), k) in s.chunks_mut(c).zip(g.chunks(c)).zip(w.iter()) {
                for (x, d) in srow.iter_mut().zip(grow) {
                    *x = *x + *d * *k;
                }
            }
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.data().iter().map(|x| gelu_tanh(*x).0).collect(), ta.shape()).unwrap();
        self.push(out, &[a], move |vals, g, gr| {
            let va = vals[a.0].data().to_vec();
            for ((s, d), x) in gr.slot(a).iter_mut().zip(g).zip(&va) {
                *s = *s + *d * gelu_tanh(*x).1;
            }
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let one = F::one();
        let out =
            Tensor::new(ta.data().iter().map(|x| *x / (one + (-*x).exp())).collect(), ta.shape()).unwrap();
        self.push(out, &[a], move |vals, g, gr| {
            let va = vals[a.0].data().to_vec();
            for ((s, d), x) in gr.slot(a).iter_mut().zip(g).zip(&va) {
                let sig = one / (one + (-*x).exp());
                *s = *s + *d * sig * (one + *x * (one - sig));
            }
        })
    }

    // ---- shape --------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(out, &[a], move |_, g, gr| gr.acc(a, g))
    }

    /// Rows `idx[i]` of `a` (any row may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            data.extend_from_slice(&ta.data()[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(data, &[idx.len(), c]).unwrap();
        self.push(out, &[a], move |_, g, gr| {
            let s = gr.slot(a);
            for (i, &r) in idx.iter().enumerate() {
                for (x, d) in s[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                    *x = *x + *d;
                }
            }
        })
    }

    /// Element gather: `out.flat[i] = a.flat[idx[i]]`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let ta = self.value(a);
        let data = idx.iter().map(|&i| ta.data()[i]).collect();
        let out = Tensor::new(data, shape).expect("gather shape");
        self.push(out, &[a], move |_, g, gr| {
            let s = gr.slot(a);
            for (d, &i) in g.iter().zip(idx.iter()) {
                s[i] = s[i] + *d;
            }
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows: column mismatch");
            spans.push((p, data.len(), t.len()));
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c.max(1);
        let out = Tensor::new(data, &[rows, c]).unwrap();
        self.push(out, parts, move |_, g, gr| {
            for &(p, start, len) in &spans {
                gr.acc(p, &g[start..start + len]);
            }
        })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let data = ta.data()[start * c..end * c].to_vec();
        let out = Tensor::new(data, &[end - start, c]).unwrap();
        self.push(out, &[a], move |_, g, gr| {
            let s = gr.slot(a);
            for (x, d) in s[start * c..end * c].iter_mut().zip(g) {
                *x = *x + *d;
            }
        })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a [.., K] @ b [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape().len(), 2, "matmul: rhs must be 2-D");
        let (k, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(ta.cols(), k, "matmul: inner dims {:?} @ {:?}", ta.shape(), tb.shape());
        let m = ta.rows();
        let mut data = vec![F::zero(); m * n];
        gemm(MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n), F::zero(), &mut data, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(data, &shape).unwrap();
        self.push(out, &[a, b], move |vals, g, gr| {
            if gr.wants(a) {
                let vb = vals[b.0].data().to_vec();
                let s = gr.slot(a);
                gemm(MatRef::new(g, m, n), MatRef::new(&vb, k, n).t(), F::one(), s, k);
            }
            if gr.wants(b) {
                let va = vals[a.0].data().to_vec();
                let s = gr.slot(b);
                gemm(MatRef::new(&va, m, k).t(), MatRef::new(g, m, n), F::one(), s, n);
            }
        })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Row-wise layer normalisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let cf = F::of(c as f64);
        let epsf = F::of(eps);
        let mut data = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|x| (*x - mean) * (*x - mean)).sum::<F>() / cf;
            let is = F::one() / (var + epsf).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(data, ta.shape()).unwrap();
        let me = self.values.len();
        self.push(out, &[a], move |vals, g, gr| {
            let y = vals[me].data().to_vec();
            let s = gr.slot(a);
            for (r, is) in inv_std.iter().enumerate() {
                let yr = &y[r * c..(r + 1) * c];
                let gr_ = &g[r * c..(r + 1) * c];
                let mg = gr_.iter().copied().sum::<F>() / cf;
                let mgy = gr_.iter().zip(yr).map(|(d, v)| *d * *v).sum::<F>() / cf;
                for ((x, d), v) in s[r * c..(r + 1) * c].iter_mut().zip(gr_).zip(yr) {
                    *x = *x + *is * (*d - mg - *v * mgy);
                }
            }
        })
    }

    /// Rotates channel pairs `(2p, 2p+1)` of every head of `x [N, heads*d]`.
    pub fn rope(&mut self, x: Var, heads: usize, table: Rc<RopeTable<F>>) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let n = tx.rows();
        let d = c / heads;
        assert_eq!(d, table.pairs * 2, "rope: head dim vs table");
        assert_eq!(table.cos.len(), n * table.pairs, "rope: token count vs table");
        let mut data = tx.data().to_vec();
        rotate(&mut data, n, heads, &table, false);
        let out = Tensor::new(data, tx.shape()).unwrap();
        self.push(out, &[x], move |_, g, gr| {
            let mut gi = g.to_vec();
            rotate(&mut gi, n, heads, &table, true);
            gr.acc(x, &gi);
        })
    }

    /// Multi-head scaled dot-product attention. Query `i` attends to keys in
    /// `ranges[i]` (half-open). `q [Nq, C]`, `k, v [Nk, C]`, `C = heads*d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, ranges: Rc<Vec<(usize, usize)>>) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let c = tq.cols();
        let nq = tq.rows();
        let nk = tk.rows();
        assert_eq!(tk.cols(), c, "attention: key width");
        assert_eq!(tv.cols(), c, "attention: value width");
        assert_eq!(tv.rows(), nk, "attention: key/value count");
        assert_eq!(ranges.len(), nq, "attention: one range per query");
        let d = c / heads;
        let sc = F::one() / F::of(d as f64).sqrt();
        let mut probs = vec![F::zero(); heads * nq * nk];
        let mut out = vec![F::zero(); nq * c];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                MatRef::strided(&tq.data()[h * d..], nq, d, c),
                MatRef::strided(&tk.data()[h * d..], nk, d, c).t(),
                F::zero(),
                p,
                nk,
            );
            for (i, &(s, e)) in ranges.iter().enumerate() {
                let row = &mut p[i * nk..(i + 1) * nk];
                softmax_range(row, s, e, sc);
            }
            gemm(
                MatRef::new(p, nq, nk),
                MatRef::strided(&tv.data()[h * d..], nk, d, c),
                F::zero(),
                &mut out[h * d..],
                c,
            );
        }
        let shape = tq.shape().to_vec();
        let out = Tensor::new(out, &shape).unwrap();
        self.push(out, &[q, k, v], move |vals, g, gr| {
            let (vq, vk, vv) = (vals[q.0].data(), vals[k.0].data(), vals[v.0].data());
            let mut dq = vec![F::zero(); nq * c];
            let mut dk = vec![F::zero(); nk * c];
            let mut dv = vec![F::zero(); nk * c];
            let mut dp = vec![F::zero(); nq * nk];
            for h in 0..heads {
                let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                // dV = P^T dO
                gemm(MatRef::new(p, nq, nk).t(), MatRef::strided(&g[h * d..], nq, d, c), F::zero(), &mut dv[h * d..], c);
                // dP = dO V^T
                gemm(
                    MatRef::strided(&g[h * d..], nq, d, c),
                    MatRef::strided(&vv[h * d..], nk, d, c).t(),
                    F::zero(),
                    &mut dp,
                    nk,
                );
                // dS = P * (dP - rowsum(P * dP)) * scale
                for (i, &(s, e)) in ranges.iter().enumerate() {
                    let pr = &p[i * nk..(i + 1) * nk];
                    let dr = &mut dp[i * nk..(i + 1) * nk];
                    let dot: F = (s..e).map(|j| pr[j] * dr[j]).sum();
                    for j in 0..nk {
                        dr[j] = if j >= s && j < e { pr[j] * (dr[j] - dot) * sc } else { F::zero() };
                    }
                }
                gemm(MatRef::new(&dp, nq, nk), MatRef::strided(&vk[h * d..], nk, d, c), F::zero(), &mut dq[h * d..], c);
                gemm(MatRef::new(&dp, nq, nk).t(), MatRef::strided(&vq[h * d..], nq, d, c), F::zero(), &mut dk[h * d..], c);
            }
            gr.acc(q, &dq);
            gr.acc(k, &dk);
            gr.acc(v, &dv);
        })
    }

    /// Causal strided 1-D convolution over time: kernel 3, stride 2, two
    /// frames of left zero padding. `x [T, Cin]`, `w [Cout, Cin, 3]`,
    /// `b [Cout]` → `[ceil(T/2), Cout]`. Output `j` reads inputs
    /// `2j-2, 2j-1, 2j`.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (t_in, cin) = (tx.rows(), tx.cols());
        let cout = tw.shape()[0];
        assert_eq!(tw.shape(), &[cout, cin, 3], "conv1d: weight shape");
        let t_out = t_in.div_ceil(2);
        // im2col: [t_out, 3*cin] ordered (tap, channel)
        let cols = im2col_1d(tx.data(), t_in, cin, t_out);
        let wt = conv1d_weight_matrix(tw.data(), cout, cin);
        let mut data = vec![F::zero(); t_out * cout];
        gemm(MatRef::new(&cols, t_out, 3 * cin), MatRef::new(&wt, 3 * cin, cout), F::zero(), &mut data, cout);
        let bias = self.value(b).data().to_vec();
        for row in data.chunks_mut(cout) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v = *v + *bb;
            }
        }
        let out = Tensor::new(data, &[t_out, cout]).unwrap();
        self.push(out, &[x, w, b], move |vals, g, gr| {
            if gr.wants(b) {
                let s = gr.slot(b);
                for row in g.chunks(cout) {
                    for (x, d) in s.iter_mut().zip(row) {
                        *x = *x + *d;
                    }
                }
            }
            if gr.wants(w) {
                let mut dwt = vec![F::zero(); 3 * cin * cout];
                gemm(MatRef::new(&cols, t_out, 3 * cin).t(), MatRef::new(g, t_out, cout), F::zero(), &mut dwt, cout);
                let s = gr.slot(w);
                for o in 0..cout {
                    for i in 0..cin {
                        for tap in 0..3 {
                            s[(o * cin + i) * 3 + tap] = s[(o * cin + i) * 3 + tap] + dwt[(tap * cin + i) * cout + o];
                        }
                    }
                }
            }
            if gr.wants(x) {
                let wt = conv1d_weight_matrix(vals[w.0].data(), cout, cin);
                let mut dcols = vec![F::zero(); t_out * 3 * cin];
                gemm(MatRef::new(g, t_out, cout), MatRef::new(&wt, 3 * cin, cout).t(), F::zero(), &mut dcols, 3 * cin);
                let s = gr.slot(x);
                for j in 0..t_out {
                    for tap in 0..3 {
                        let src = 2 * j + tap;
                        if src < 2 || src - 2 >= t_in {
                            continue;
                        }
                        let ti = src - 2;
                        for i in 0..cin {
                            s[ti * cin + i] = s[ti * cin + i] + dcols[j * 3 * cin + tap * cin + i];
                        }
                    }
                }
            }
        })
    }

    /// Per-frame 3x3 convolution with zero "same" padding.
    /// `x [F, H, W, Cin]`, `w [Cout, Cin, 3, 3]`, `b [Cout]`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let sh = tx.shape().to_vec();
        assert_eq!(sh.len(), 4, "conv2d: input must be [F,H,W,C]");
        let (frames, hh, ww, cin) = (sh[0], sh[1], sh[2], sh[3]);
        let cout = tw.shape()[0];
        assert_eq!(tw.shape(), &[cout, cin, 3, 3], "conv2d: weight shape");
        let wt = conv2d_weight_matrix(tw.data(), cout, cin);
        let kk = 9 * cin;
        let px = hh * ww;
        let mut data = vec![F::zero(); frames * px * cout];
        let mut cols = vec![F::zero(); px * kk];
        for f in 0..frames {
            im2col_2d(&tx.data()[f * px * cin..(f + 1) * px * cin], hh, ww, cin, &mut cols);
            gemm(MatRef::new(&cols, px, kk), MatRef::new(&wt, kk, cout), F::zero(), &mut data[f * px * cout..], cout);
        }
        let bias = self.value(b).data().to_vec();
        for row in data.chunks_mut(cout) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v = *v + *bb;
            }
        }
        let out = Tensor::new(data, &[frames, hh, ww, cout]).unwrap();
        self.push(out, &[x, w, b], move |vals, g, gr| {
            if gr.wants(b) {
                let s = gr.slot(b);
                for row in g.chunks(cout) {
                    for (x, d) in s.iter_mut().zip(row) {
                        *x = *x + *d;
                    }
                }
            }
            let xin = vals[x.0].data();
            let mut cols = vec![F::zero(); px * kk];
            let mut dwt = vec![F::zero(); kk * cout];
            let wt = conv2d_weight_matrix(vals[w.0].data(), cout, cin);
            let want_x = gr.wants(x);
            let mut dx = if want_x { vec![F::zero(); frames * px * cin] } else { Vec::new() };
            let mut dcols = vec![F::zero(); px * kk];
            for f in 0..frames {
                let gf = &g[f * px * cout..(f + 1) * px * cout];
                if gr.wants(w) {
                    im2col_2d(&xin[f * px * cin..(f + 1) * px * cin], hh, ww, cin, &mut cols);
                    gemm(MatRef::new(&cols, px, kk).t(), MatRef::new(gf, px, cout), F::one(), &mut dwt, cout);
                }
                if want_x {
                    gemm(MatRef::new(gf, px, cout), MatRef::new(&wt, kk, cout).t(), F::zero(), &mut dcols, kk);
                    col2im_2d(&dcols, hh, ww, cin, &mut dx[f * px * cin..(f + 1) * px * cin]);
                }
            }
            if gr.wants(w) {
                let s = gr.slot(w);
                for o in 0..cout {
                    for i in 0..cin {
                        for tap in 0..9 {
                            s[(o * cin + i) * 9 + tap] = s[(o * cin + i) * 9 + tap] + dwt[(tap * cin + i) * cout + o];
                        }
                    }
                }
            }
            if want_x {
                gr.acc(x, &dx);
            }
        })
    }

    // ---- reductions -------------------------------------------------------

    /// `scale * sum_r w[r] * sum_c a[r,c]^2` as a 1-element tensor.
    pub fn weighted_sq_sum(&mut self, a: Var, w: Rc<Vec<F>>, scale: F) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        assert_eq!(w.len(), ta.rows(), "weighted_sq_sum: weight count");
        let total: F = ta
            .data()
            .chunks(c)
            .zip(w.iter())
            .map(|(row, k)| *k * row.iter().map(|x| *x * *x).sum::<F>())
            .sum();
        let out = Tensor::scalar(total * scale);
        self.push(out, &[a], move |vals, g, gr| {
            let va = vals[a.0].data().to_vec();
            let two = F::of(2.0) * g[0] * scale;
            let s = gr.slot(a);
            for ((srow, arow), k) in s.chunks_mut(c).zip(va.chunks(c)).zip(w.iter()) {
                for (x, y) in srow.iter_mut().zip(arow) {
                    *x = *x + two * *k * *y;
                }
            }
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let total: F = ta.data().iter().copied().sum();
        let n = ta.len();
        self.push(Tensor::scalar(total), &[a], move |_, g, gr| {
            let d = vec![g[0]; n];
            gr.acc(a, &d);
        })
    }
}

fn softmax_range<F: Scalar>(row: &mut [F], s: usize, e: usize, scale: F) {
    let mut mx = F::neg_infinity();
    for v in &row[s..e] {
        mx = mx.max(*v * scale);
    }
    let mut sum = F::zero();
    for v in &mut row[s..e] {
        *v = (*v * scale - mx).exp();
        sum = sum + *v;
    }
    for v in &mut row[s..e] {
        *v = *v / sum;
    }
    for v in &mut row[..s] {
        *v = F::zero();
    }
    for v in &mut row[e..] {
        *v = F::zero();
    }
}

fn rotate<F: Scalar>(data: &mut [F], n: usize, heads: usize, table: &RopeTable<F>, inverse: bool) {
    let pairs = table.pairs;
    let d = pairs * 2;
    for i in 0..n {
        let cs = &table.cos[i * pairs..(i + 1) * pairs];
        let sn = &table.sin[i * pairs..(i + 1) * pairs];
        for h in 0..heads {
            let base = i * heads * d + h * d;
            for p in 0..pairs {
                let (c, s) = (cs[p], if inverse { -sn[p] } else { sn[p] });
                let a = data[base + 2 * p];
                let b = data[base + 2 * p + 1];
                data[base + 2 * p] = a * c - b * s;
                data[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}

fn im2col_1d<F: Scalar>(x: &[F], t_in: usize, cin: usize, t_out: usize) -> Vec<F> {
    let mut cols = vec![F::zero(); t_out * 3 * cin];
    for j in 0..t_out {
        for tap in 0..3 {
            let src = 2 * j + tap;
            if src < 2 || src - 2 >= t_in {
                continue;
            }
            let ti = src - 2;
            cols[j * 3 * cin + tap * cin..j * 3 * cin + (tap + 1) * cin].copy_from_slice(&x[ti * cin..(ti + 1) * cin]);
        }
    }
    cols
}

fn conv1d_weight_matrix<F: Scalar>(w: &[F], cout: usize, cin: usize) -> Vec<F> {
    let mut wt = vec![F::zero(); 3 * cin * cout];
    for o in 0..cout {
        for i in 0..cin {
            for tap in 0..3 {
                wt[(tap * cin + i) * cout + o] = w[(o * cin + i) * 3 + tap];
            }
        }
    }
    wt
}

fn conv2d_weight_matrix<F: Scalar>(w: &[F], cout: usize, cin: usize) -> Vec<F> {
    let mut wt = vec![F::zero(); 9 * cin * cout];
    for o in 0..cout {
        for i in 0..cin {
            for tap in 0..9 {
                wt[(tap * cin + i) * cout + o] = w[(o * cin + i) * 9 + tap];
            }
        }
    }
    wt
}

fn im2col_2d<F: Scalar>(x: &[F], hh: usize, ww: usize, cin: usize, cols: &mut [F]) {
    let kk = 9 * cin;
    for y in 0..hh {
        for xx in 0..ww {
            let row = &mut cols[(y * ww + xx) * kk..(y * ww + xx + 1) * kk];
            for dy in 0..3 {
                for dx in 0..3 {
                    let tap = dy * 3 + dx;
                    let dst = &mut row[tap * cin..(tap + 1) * cin];
                    let sy = y as isize + dy as isize - 1;
                    let sx = xx as isize + dx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= hh as isize || sx >= ww as isize {
                        dst.fill(F::zero());
                    } else {
                        let s = (sy as usize * ww + sx as usize) * cin;
                        dst.copy_from_slice(&x[s..s + cin]);
                    }
                }
            }
        }
    }
}

fn col2im_2d<F: Scalar>(cols: &[F], hh: usize, ww: usize, cin: usize, dx: &mut [F]) {
    let kk = 9 * cin;
    for y in 0..hh {
        for xx in 0..ww {
            let row = &cols[(y * ww + xx) * kk..(y * ww + xx + 1) * kk];
            for dy in 0..3 {
                for dxx in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    let sx = xx as isize + dxx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= hh as isize || sx >= ww as isize {
                        continue;
                    }
                    let tap = dy * 3 + dxx;
                    let s = (sy as usize * ww + sx as usize) * cin;
                    for i in 0..cin {
                        dx[s + i] = dx[s + i] + row[tap * cin + i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    /// Central finite differences of a scalar graph function against the tape.
    fn check<B>(inputs: Vec<Tensor<f64>>, build: B)
    where
        B: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[k].data_mut()[i] += delta;
                    let mut g = Graph::new(false);
                    let vs: Vec<Var> = ins.into_iter().map(|t| g.constant(t)).collect();
                    let o = build(&mut g, &vs);
                    g.value(o).data()[0]
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let err = (fd - analytic[i]).abs() / (1e-6 + fd.abs().max(analytic[i].abs()));
                assert!(err < 1e-5 || (fd - analytic[i]).abs() < 1e-8, "input {k} idx {i}: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    fn proj(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
        // random linear functional so every output entry matters
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = g.value(v);
        let w = rand_tensor(&mut rng, t.shape());
        let wv = g.constant(w);
        let m = g.mul(v, wv);
        g.sum_all(m)
    }

    #[test]
    fn elementwise_and_row_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let r = rand_tensor(&mut rng, &[4]);
        check(vec![a, b, r], |g, v| {
            let x = g.mul(v[0], v[1]);
            let x = g.sub(x, v[1]);
            let x = g.add_row(x, v[2]);
            let x = g.mul_row(x, v[2]);
            let x = g.gelu(x);
            let x = g.silu(x);
            let x = g.layer_norm(x, 1e-5);
            proj(g, x, 9)
        });
    }

    #[test]
    fn matmul_gather_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[5, 3]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let s = rand_tensor(&mut rng, &[1]);
        check(vec![a, w, s], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y2 = g.gather_rows(y, Rc::new(vec![4, 0, 0, 2]));
            let y3 = g.slice_rows(y, 1, 3);
            let c = g.concat_rows(&[y2, y3]);
            let c = g.mul_scalar_var(c, v[2]);
            let c = g.mul_rows_const(c, Rc::new(vec![1.0, 0.5, -2.0, 0.0, 3.0, 1.0]));
            let e = g.gather(c, Rc::new(vec![0, 5, 5, 23, 7]), &[5]);
            let e = g.reshape(e, &[1, 5]);
            let w = g.weighted_sq_sum(c, Rc::new(vec![1.0, 2.0, 0.0, 1.0, 1.0, 0.5]), 0.3);
            let p = proj(g, e, 3);
            g.add(w, p)
        });
    }

    #[test]
    fn attention_and_rope_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = 2;
        let (nq, nk, c) = (5, 4, 8);
        let q = rand_tensor(&mut rng, &[nq, c]);
        let k = rand_tensor(&mut rng, &[nk, c]);
        let v = rand_tensor(&mut rng, &[nk, c]);
        let pairs = 2;
        let table = Rc::new(RopeTable {
            cos: (0..nq * pairs).map(|i| (i as f64 * 0.7).cos()).collect(),
            sin: (0..nq * pairs).map(|i| (i as f64 * 0.7).sin()).collect(),
            pairs,
        });
        let ranges = Rc::new(vec![(0, 4), (0, 2), (1, 3), (3, 4), (0, 4)]);
        check(vec![q, k, v], move |g, vs| {
            let qr = g.rope(vs[0], heads, table.clone());
            let o = g.attention(qr, vs[1], vs[2], heads, ranges.clone());
            proj(g, o, 4)
        });
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[7, 2]);
        let w = rand_tensor(&mut rng, &[3, 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b], |g, v| {
            let y = g.conv1d_causal(v[0], v[1], v[2]);
            assert_eq!(g.value(y).shape(), &[4, 3]);
            proj(g, y, 6)
        });
        let x = rand_tensor(&mut rng, &[2, 4, 5, 2]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d_same(v[0], v[1], v[2]);
            proj(g, y, 7)
        });
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[1, 4, 3, 2]);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let mut g = Graph::new(false);
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let bv = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d_same(xv, wv, bv);
        let y = g.value(y);
        for yy in 0..4 {
            for xx in 0..3 {
                for o in 0..2 {
                    let mut want = 0.0;
                    for i in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let sy = yy as isize + dy as isize - 1;
                                let sx = xx as isize + dx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= 4 || sx >= 3 {
                                    continue;
                                }
                                want += x.data()[(sy as usize * 3 + sx as usize) * 2 + i]
                                    * w.data()[((o * 2 + i) * 3 + dy) * 3 + dx];
                            }
                        }
                    }
                    assert!((y.data()[(yy * 3 + xx) * 2 + o] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn no_tape_without_grad() {
        let mut g = Graph::<f32>::new(false);
        let a = g.param(Tensor::full(&[2], 1.0));
        let b = g.scale(a, 2.0);
        assert!(!g.needs_grad(b));
    }
}
