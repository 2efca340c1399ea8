//! Reverse-mode tape over [`Arr`] values.
//!
//! Each forward op pushes one node holding its value and a boxed adjoint
//! closure. `backward` replays the tape in reverse insertion order (a
//! valid topological order by construction) and returns a [`Grads`]
//! store. Nodes created via [`Tape::input`] do not track gradients;
//! gradients still flow *through* them to differentiable ancestors, but
//! no buffer is kept for the node itself. Frozen weights therefore never
//! materialize a gradient.

use super::arr::Arr;
use super::kernels;
use std::cell::RefCell;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

type BackFn = Box<dyn FnOnce(&[f64], &[Arr], &mut GradStore)>;

struct Inner {
    vals: Vec<Arr>,
    need: Vec<bool>,
    backs: Vec<Option<BackFn>>,
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    need: Vec<bool>,
}

impl Grads {
    fn with(&mut self, id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        if !self.need[id] {
            return;
        }
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        f(slot.as_mut().expect("just inserted"));
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

pub(crate) type GradStore = Grads;

pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { inner: RefCell::new(Inner { vals: Vec::new(), need: Vec::new(), backs: Vec::new() }) }
    }

    fn push(&self, val: Arr, need: bool, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(val);
        inner.need.push(need);
        inner.backs.push(if need { back } else { None });
        Var { id: inner.vals.len() - 1 }
    }

    /// Id the next pushed node will get; lets backward closures read
    /// their own stored value instead of capturing a copy.
    fn next_id(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    /// Constant leaf: gradients flow through ops consuming it but are not
    /// collected for the leaf itself.
    pub fn input(&self, val: Arr) -> Var {
        self.push(val, false, None)
    }

    /// Trainable leaf: gradient is collected.
    pub fn param(&self, val: Arr) -> Var {
        self.push(val, true, None)
    }

    pub fn value(&self, v: Var) -> Arr {
        self.inner.borrow().vals[v.id].clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().vals[v.id].shape().to_vec()
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.inner.borrow().vals[v.id].len()
    }

    /// Runs reverse accumulation from a scalar root. Consumes the stored
    /// adjoints; call at most once per tape.
    pub fn backward(&self, root: Var) -> Grads {
        let mut inner = self.inner.borrow_mut();
        let Inner { vals, need, backs } = &mut *inner;
        assert_eq!(vals[root.id].len(), 1, "backward root must be scalar");
        let n = vals.len();
        let mut gs = Grads { grads: vec![None; n], need: need.clone() };
        gs.grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(back) = backs[id].take() else { continue };
            let Some(g) = gs.grads[id].take() else { continue };
            back(&g, vals, &mut gs);
            gs.grads[id] = Some(g);
        }
        gs
    }

    fn binary_same_shape(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        back: impl FnOnce(usize) -> Option<BackFn>,
    ) -> Var {
        let (val, need) = {
            let inner = self.inner.borrow();
            let va = &inner.vals[a.id];
            let vb = &inner.vals[b.id];
            assert_eq!(va.shape(), vb.shape(), "shape mismatch in elementwise op");
            let data: Vec<f64> = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
            (Arr::from_vec(va.shape(), data), inner.need[a.id] || inner.need[b.id])
        };
        let len = val.len();
        self.push(val, need, back(len))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x + y, |len| {
            Some(Box::new(move |g, _vals, gs| {
                gs.with(a.id, len, |d| for (d, &gv) in d.iter_mut().zip(g) { *d += gv });
                gs.with(b.id, len, |d| for (d, &gv) in d.iter_mut().zip(g) { *d += gv });
            }))
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x - y, |len| {
            Some(Box::new(move |g, _vals, gs| {
                gs.with(a.id, len, |d| for (d, &gv) in d.iter_mut().zip(g) { *d += gv });
                gs.with(b.id, len, |d| for (d, &gv) in d.iter_mut().zip(g) { *d -= gv });
            }))
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x * y, |len| {
            Some(Box::new(move |g, vals, gs| {
                gs.with(a.id, len, |d| {
                    for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(vals[b.id].iter()) {
                        *d += gv * bv;
                    }
                });
                gs.with(b.id, len, |d| {
                    for ((d, &gv), &av) in d.iter_mut().zip(g).zip(vals[a.id].iter()) {
                        *d += gv * av;
                    }
                });
            }))
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x / y, |len| {
            Some(Box::new(move |g, vals, gs| {
                gs.with(a.id, len, |d| {
                    for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(vals[b.id].iter()) {
                        *d += gv / bv;
                    }
                });
                gs.with(b.id, len, |d| {
                    for (j, (d, &gv)) in d.iter_mut().zip(g).enumerate() {
                        let av = vals[a.id].data()[j];
                        let bv = vals[b.id].data()[j];
                        *d -= gv * av / (bv * bv);
                    }
                });
            }))
        })
    }

    /// Elementwise `a * x + b` with scalar constants.
    pub fn affine(&self, x: Var, a: f64, b: f64) -> Var {
        let (val, need) = {
            let inner = self.inner.borrow();
            (inner.vals[x.id].map(|v| a * v + b), inner.need[x.id])
        };
        let len = val.len();
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, len, |d| for (d, &gv) in d.iter_mut().zip(g) { *d += a * gv });
            })),
        )
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn mul_scalar(&self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// Elementwise multiply by a scalar-valued Var.
    pub fn scale_by(&self, x: Var, s: Var) -> Var {
        let (val, need) = {
            let inner = self.inner.borrow();
            let sv = inner.vals[s.id].item();
            (inner.vals[x.id].map(|v| v * sv), inner.need[x.id] || inner.need[s.id])
        };
        let len = val.len();
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                let sv = vals[s.id].item();
                gs.with(x.id, len, |d| for (d, &gv) in d.iter_mut().zip(g) { *d += gv * sv });
                gs.with(s.id, 1, |d| {
                    d[0] += g.iter().zip(vals[x.id].iter()).map(|(&gv, &xv)| gv * xv).sum::<f64>();
                });
            })),
        )
    }

    /// Elementwise divide by a scalar-valued Var.
    pub fn div_by_scalar(&self, x: Var, s: Var) -> Var {
        let (val, need) = {
            let inner = self.inner.borrow();
            let sv = inner.vals[s.id].item();
            (inner.vals[x.id].map(|v| v / sv), inner.need[x.id] || inner.need[s.id])
        };
        let len = val.len();
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                let sv = vals[s.id].item();
                gs.with(x.id, len, |d| for (d, &gv) in d.iter_mut().zip(g) { *d += gv / sv });
                gs.with(s.id, 1, |d| {
                    let num: f64 =
                        g.iter().zip(vals[x.id].iter()).map(|(&gv, &xv)| gv * xv).sum();
                    d[0] -= num / (sv * sv);
                });
            })),
        )
    }

    fn unary(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let (val, need) = {
            let inner = self.inner.borrow();
            (inner.vals[x.id].map(&f), inner.need[x.id])
        };
        let len = val.len();
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                gs.with(x.id, len, |d| {
                    for (j, (d, &gv)) in d.iter_mut().zip(g).enumerate() {
                        *d += gv * dfdx(vals[x.id].data()[j]);
                    }
                });
            })),
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, |x| 1.0 / x)
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, move |v| v.clamp(lo, hi), move |x| if x > lo && x < hi { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let (val, need) = {
            let inner = self.inner.borrow();
            (inner.vals[x.id].map(sigmoid_scalar), inner.need[x.id])
        };
        let len = val.len();
        let y = val.data().to_vec();
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, len, |d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(&y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            })),
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let (val, need, len) = {
            let inner = self.inner.borrow();
            let v = &inner.vals[x.id];
            (Arr::scalar(v.iter().sum()), inner.need[x.id], v.len())
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                let gv = g[0];
                gs.with(x.id, len, |d| for d in d.iter_mut() { *d += gv });
            })),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let s = self.sum_all(x);
        let n = self.len_of(x) as f64;
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn add_n(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (val, need, m, k, n) = {
            let inner = self.inner.borrow();
            let (m, k) = inner.vals[a.id].dims2();
            let (k2, n) = inner.vals[b.id].dims2();
            assert_eq!(k, k2, "matmul inner dims");
            let mut out = vec![0.0; m * n];
            kernels::mm_acc(inner.vals[a.id].data(), inner.vals[b.id].data(), m, k, n, &mut out);
            (Arr::from_vec(&[m, n], out), inner.need[a.id] || inner.need[b.id], m, k, n)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                // dA = g * B^T ; dB = A^T * g
                gs.with(a.id, m * k, |d| kernels::mm_nt_acc(g, vals[b.id].data(), m, n, k, d));
                gs.with(b.id, k * n, |d| kernels::mm_tn_acc(vals[a.id].data(), g, m, k, n, d));
            })),
        )
    }

    /// a (m x k) times b^T where b is stored (n x k).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (val, need, m, k, n) = {
            let inner = self.inner.borrow();
            let (m, k) = inner.vals[a.id].dims2();
            let (n, k2) = inner.vals[b.id].dims2();
            assert_eq!(k, k2, "matmul_nt inner dims");
            let mut out = vec![0.0; m * n];
            kernels::mm_nt_acc(inner.vals[a.id].data(), inner.vals[b.id].data(), m, k, n, &mut out);
            (Arr::from_vec(&[m, n], out), inner.need[a.id] || inner.need[b.id], m, k, n)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                // dA = g * B ; dB = g^T * A
                gs.with(a.id, m * k, |d| kernels::mm_acc(g, vals[b.id].data(), m, n, k, d));
                gs.with(b.id, n * k, |d| kernels::mm_tn_acc(g, vals[a.id].data(), m, n, k, d));
            })),
        )
    }

    /// Matrix (m x n) times vector (n,) giving (m,).
    pub fn matvec(&self, mat: Var, v: Var) -> Var {
        let (val, need, m, n) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[mat.id].dims2();
            assert_eq!(inner.vals[v.id].len(), n, "matvec dims");
            let md = inner.vals[mat.id].data();
            let vd = inner.vals[v.id].data();
            let out: Vec<f64> = (0..m).map(|i| kernels::dot(&md[i * n..(i + 1) * n], vd)).collect();
            (Arr::from_vec(&[m], out), inner.need[mat.id] || inner.need[v.id], m, n)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                gs.with(mat.id, m * n, |d| {
                    let vd = vals[v.id].data();
                    for i in 0..m {
                        let gi = g[i];
                        let drow = &mut d[i * n..(i + 1) * n];
                        for (dv, &vv) in drow.iter_mut().zip(vd) {
                            *dv += gi * vv;
                        }
                    }
                });
                gs.with(v.id, n, |d| {
                    let md = vals[mat.id].data();
                    for i in 0..m {
                        let gi = g[i];
                        let mrow = &md[i * n..(i + 1) * n];
                        for (dv, &mv) in d.iter_mut().zip(mrow) {
                            *dv += gi * mv;
                        }
                    }
                });
            })),
        )
    }

    /// Row-vector (m,) times matrix (m x n) giving (n,).
    pub fn vecmat(&self, v: Var, mat: Var) -> Var {
        let (val, need, m, n) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[mat.id].dims2();
            assert_eq!(inner.vals[v.id].len(), m, "vecmat dims");
            let md = inner.vals[mat.id].data();
            let vd = inner.vals[v.id].data();
            let mut out = vec![0.0; n];
            for i in 0..m {
                let vi = vd[i];
                for (o, &mv) in out.iter_mut().zip(&md[i * n..(i + 1) * n]) {
                    *o += vi * mv;
                }
            }
            (Arr::from_vec(&[n], out), inner.need[mat.id] || inner.need[v.id], m, n)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                gs.with(v.id, m, |d| {
                    let md = vals[mat.id].data();
                    for i in 0..m {
                        d[i] += kernels::dot(g, &md[i * n..(i + 1) * n]);
                    }
                });
                gs.with(mat.id, m * n, |d| {
                    let vd = vals[v.id].data();
                    for i in 0..m {
                        let vi = vd[i];
                        let drow = &mut d[i * n..(i + 1) * n];
                        for (dv, &gv) in drow.iter_mut().zip(g) {
                            *dv += vi * gv;
                        }
                    }
                });
            })),
        )
    }

    pub fn softmax_rows(&self, x: Var) -> Var {
        let (val, need, m, n) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[x.id].dims2();
            let mut out = inner.vals[x.id].data().to_vec();
            kernels::softmax_rows_inplace(&mut out, m, n);
            (Arr::from_vec(&[m, n], out), inner.need[x.id], m, n)
        };
        let my_id = self.next_id();
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                let p = vals[my_id].data();
                gs.with(x.id, m * n, |d| {
                    for i in 0..m {
                        let prow = &p[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let inner_prod: f64 =
                            prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                        let drow = &mut d[i * n..(i + 1) * n];
                        for ((dv, &pv), &gv) in drow.iter_mut().zip(prow).zip(grow) {
                            *dv += pv * (gv - inner_prod);
                        }
                    }
                });
            })),
        )
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let (val, need, len) = {
            let inner = self.inner.borrow();
            let v = &inner.vals[x.id];
            assert_eq!(
                v.len(),
                shape.iter().product::<usize>().max(1),
                "reshape length mismatch"
            );
            (Arr::from_vec(shape, v.data().to_vec()), inner.need[x.id], v.len())
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, len, |d| for (d, &gv) in d.iter_mut().zip(g) { *d += gv });
            })),
        )
    }

    /// Softmax over a 1-D vector.
    pub fn softmax_vec(&self, x: Var) -> Var {
        let (val, need, n) = {
            let inner = self.inner.borrow();
            let v = &inner.vals[x.id];
            assert_eq!(v.shape().len(), 1, "softmax_vec expects a vector");
            let n = v.len();
            let mut out = v.data().to_vec();
            kernels::softmax_rows_inplace(&mut out, 1, n);
            (Arr::from_vec(&[n], out), inner.need[x.id], n)
        };
        let p = val.data().to_vec();
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, n, |d| {
                    let inner_prod: f64 = p.iter().zip(g).map(|(&pv, &gv)| pv * gv).sum();
                    for ((dv, &pv), &gv) in d.iter_mut().zip(&p).zip(g) {
                        *dv += pv * (gv - inner_prod);
                    }
                });
            })),
        )
    }

    /// Fused `softmax_rows(scale * q * k^T)`; avoids storing raw scores.
    pub fn scaled_softmax_nt(&self, q: Var, k: Var, scale: f64) -> Var {
        let (val, need, m, dk, n) = {
            let inner = self.inner.borrow();
            let (m, dk) = inner.vals[q.id].dims2();
            let (n, dk2) = inner.vals[k.id].dims2();
            assert_eq!(dk, dk2, "attention dims");
            let mut out = vec![0.0; m * n];
            kernels::mm_nt_acc(inner.vals[q.id].data(), inner.vals[k.id].data(), m, dk, n, &mut out);
            for v in out.iter_mut() {
                *v *= scale;
            }
            kernels::softmax_rows_inplace(&mut out, m, n);
            (Arr::from_vec(&[m, n], out), inner.need[q.id] || inner.need[k.id], m, dk, n)
        };
        let my_id = self.next_id();
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                // ds = p .* (g - rowdot(g, p)); dq = scale * ds * K; dk = scale * ds^T * Q
                let p = vals[my_id].data();
                let mut ds = vec![0.0; m * n];
                for i in 0..m {
                    let prow = &p[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let inner_prod: f64 = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                    let dsrow = &mut ds[i * n..(i + 1) * n];
                    for ((dv, &pv), &gv) in dsrow.iter_mut().zip(prow).zip(grow) {
                        *dv = scale * pv * (gv - inner_prod);
                    }
                }
                gs.with(q.id, m * dk, |d| kernels::mm_acc(&ds, vals[k.id].data(), m, n, dk, d));
                gs.with(k.id, n * dk, |d| kernels::mm_tn_acc(&ds, vals[q.id].data(), m, n, dk, d));
            })),
        )
    }

    /// Row-wise max over columns; gradient routes to the first argmax.
    pub fn rowmax(&self, x: Var) -> Var {
        let (val, need, m, n, arg) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[x.id].dims2();
            let xd = inner.vals[x.id].data();
            let mut out = Vec::with_capacity(m);
            let mut arg = Vec::with_capacity(m);
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let (mut bi, mut bv) = (0usize, row[0]);
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > bv {
                        bv = v;
                        bi = j;
                    }
                }
                out.push(bv);
                arg.push(bi);
            }
            (Arr::from_vec(&[m], out), inner.need[x.id], m, n, arg)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, m * n, |d| {
                    for i in 0..m {
                        d[i * n + arg[i]] += g[i];
                    }
                });
            })),
        )
    }

    /// Row-wise mean over columns.
    pub fn rowmean(&self, x: Var) -> Var {
        let (val, need, m, n) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[x.id].dims2();
            let xd = inner.vals[x.id].data();
            let out: Vec<f64> =
                (0..m).map(|i| xd[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
            (Arr::from_vec(&[m], out), inner.need[x.id], m, n)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, m * n, |d| {
                    for i in 0..m {
                        let gi = g[i] / n as f64;
                        for dv in &mut d[i * n..(i + 1) * n] {
                            *dv += gi;
                        }
                    }
                });
            })),
        )
    }

    /// Multiply row i of `mat` (m x n) by `col[i]` (m,).
    pub fn mul_bcast_col(&self, mat: Var, col: Var) -> Var {
        let (val, need, m, n) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[mat.id].dims2();
            assert_eq!(inner.vals[col.id].len(), m, "mul_bcast_col dims");
            let md = inner.vals[mat.id].data();
            let cd = inner.vals[col.id].data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let c = cd[i];
                for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&md[i * n..(i + 1) * n]) {
                    *o = v * c;
                }
            }
            (Arr::from_vec(&[m, n], out), inner.need[mat.id] || inner.need[col.id], m, n)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                gs.with(mat.id, m * n, |d| {
                    let cd = vals[col.id].data();
                    for i in 0..m {
                        let c = cd[i];
                        for (dv, &gv) in d[i * n..(i + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n])
                        {
                            *dv += gv * c;
                        }
                    }
                });
                gs.with(col.id, m, |d| {
                    let md = vals[mat.id].data();
                    for i in 0..m {
                        d[i] += kernels::dot(&g[i * n..(i + 1) * n], &md[i * n..(i + 1) * n]);
                    }
                });
            })),
        )
    }

    /// Add a bias row vector (n,) to every row of mat (m x n).
    pub fn add_bias_row(&self, mat: Var, bias: Var) -> Var {
        let (val, need, m, n) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[mat.id].dims2();
            assert_eq!(inner.vals[bias.id].len(), n, "bias dims");
            let md = inner.vals[mat.id].data();
            let bd = inner.vals[bias.id].data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for (j, (o, &v)) in out[i * n..(i + 1) * n].iter_mut().zip(&md[i * n..(i + 1) * n]).enumerate() {
                    *o = v + bd[j];
                }
            }
            (Arr::from_vec(&[m, n], out), inner.need[mat.id] || inner.need[bias.id], m, n)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(mat.id, m * n, |d| for (d, &gv) in d.iter_mut().zip(g) { *d += gv });
                gs.with(bias.id, n, |d| {
                    for i in 0..m {
                        for (dv, &gv) in d.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *dv += gv;
                        }
                    }
                });
            })),
        )
    }

    /// Per-column standardization of x (m x n) with learned per-column
    /// affine: each column is shifted/scaled to zero mean, unit variance
    /// (biased) over the m rows, then `gamma * xhat + beta`.
    pub fn colnorm_affine(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (val, need, m, n, xhat, inv_s) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[x.id].dims2();
            assert_eq!(inner.vals[gamma.id].len(), n);
            assert_eq!(inner.vals[beta.id].len(), n);
            let xd = inner.vals[x.id].data();
            let gd = inner.vals[gamma.id].data();
            let bd = inner.vals[beta.id].data();
            let mut mean = vec![0.0; n];
            for i in 0..m {
                for (mu, &v) in mean.iter_mut().zip(&xd[i * n..(i + 1) * n]) {
                    *mu += v;
                }
            }
            for mu in mean.iter_mut() {
                *mu /= m as f64;
            }
            let mut var = vec![0.0; n];
            for i in 0..m {
                for (j, &v) in xd[i * n..(i + 1) * n].iter().enumerate() {
                    let d = v - mean[j];
                    var[j] += d * d;
                }
            }
            let inv_s: Vec<f64> = var.iter().map(|&v| 1.0 / (v / m as f64 + eps).sqrt()).collect();
            let mut xhat = vec![0.0; m * n];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let h = (xd[i * n + j] - mean[j]) * inv_s[j];
                    xhat[i * n + j] = h;
                    out[i * n + j] = gd[j] * h + bd[j];
                }
            }
            let need = inner.need[x.id] || inner.need[gamma.id] || inner.need[beta.id];
            (Arr::from_vec(&[m, n], out), need, m, n, xhat, inv_s)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                gs.with(beta.id, n, |d| {
                    for i in 0..m {
                        for (dv, &gv) in d.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *dv += gv;
                        }
                    }
                });
                gs.with(gamma.id, n, |d| {
                    for i in 0..m {
                        for (j, dv) in d.iter_mut().enumerate() {
                            *dv += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                gs.with(x.id, m * n, |d| {
                    let gd = vals[gamma.id].data();
                    // dxhat = g * gamma; dx = inv_s * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    let mut mean_dh = vec![0.0; n];
                    let mut mean_dhh = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let dh = g[i * n + j] * gd[j];
                            mean_dh[j] += dh;
                            mean_dhh[j] += dh * xhat[i * n + j];
                        }
                    }
                    for j in 0..n {
                        mean_dh[j] /= m as f64;
                        mean_dhh[j] /= m as f64;
                    }
                    for i in 0..m {
                        for j in 0..n {
                            let dh = g[i * n + j] * gd[j];
                            d[i * n + j] +=
                                inv_s[j] * (dh - mean_dh[j] - xhat[i * n + j] * mean_dhh[j]);
                        }
                    }
                });
            })),
        )
    }

    /// Columns [c0, c1) of a matrix.
    pub fn slice_cols(&self, x: Var, c0: usize, c1: usize) -> Var {
        let (val, need, m, n) = {
            let inner = self.inner.borrow();
            let (m, n) = inner.vals[x.id].dims2();
            assert!(c0 < c1 && c1 <= n, "slice_cols range");
            let xd = inner.vals[x.id].data();
            let mut out = Vec::with_capacity(m * (c1 - c0));
            for i in 0..m {
                out.extend_from_slice(&xd[i * n + c0..i * n + c1]);
            }
            (Arr::from_vec(&[m, c1 - c0], out), inner.need[x.id], m, n)
        };
        let width = c1 - c0;
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, m * n, |d| {
                    for i in 0..m {
                        for (j, &gv) in g[i * width..(i + 1) * width].iter().enumerate() {
                            d[i * n + c0 + j] += gv;
                        }
                    }
                });
            })),
        )
    }

    /// Horizontal concatenation of same-height matrices.
    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (val, need, m, widths) = {
            let inner = self.inner.borrow();
            let m = inner.vals[xs[0].id].dims2().0;
            let widths: Vec<usize> = xs
                .iter()
                .map(|v| {
                    let (mi, ni) = inner.vals[v.id].dims2();
                    assert_eq!(mi, m, "concat_cols heights");
                    ni
                })
                .collect();
            let n: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for (v, &w) in xs.iter().zip(&widths) {
                    out.extend_from_slice(&inner.vals[v.id].data()[i * w..(i + 1) * w]);
                }
            }
            let need = xs.iter().any(|v| inner.need[v.id]);
            (Arr::from_vec(&[m, n], out), need, m, widths)
        };
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let n: usize = widths.iter().sum();
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                let mut off = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    gs.with(id, m * w, |d| {
                        for i in 0..m {
                            for (j, dv) in d[i * w..(i + 1) * w].iter_mut().enumerate() {
                                *dv += g[i * n + off + j];
                            }
                        }
                    });
                    off += w;
                }
            })),
        )
    }

    /// Single element of a vector, as a scalar node.
    pub fn get(&self, x: Var, idx: usize) -> Var {
        let (val, need, len) = {
            let inner = self.inner.borrow();
            let v = &inner.vals[x.id];
            (Arr::scalar(v.data()[idx]), inner.need[x.id], v.len())
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, len, |d| d[idx] += g[0]);
            })),
        )
    }

    /// (c, h, w) feature map to (h*w, c) token matrix.
    pub fn to_tokens(&self, x: Var) -> Var {
        let (val, need, c, hw) = {
            let inner = self.inner.borrow();
            let (c, h, w) = inner.vals[x.id].dims3();
            let hw = h * w;
            let xd = inner.vals[x.id].data();
            let mut out = vec![0.0; hw * c];
            for ch in 0..c {
                for p in 0..hw {
                    out[p * c + ch] = xd[ch * hw + p];
                }
            }
            (Arr::from_vec(&[hw, c], out), inner.need[x.id], c, hw)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, c * hw, |d| {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[ch * hw + p] += g[p * c + ch];
                        }
                    }
                });
            })),
        )
    }

    /// (h*w, c) token matrix back to (c, h, w).
    pub fn to_chw(&self, x: Var, h: usize, w: usize) -> Var {
        let (val, need, c, hw) = {
            let inner = self.inner.borrow();
            let (hw, c) = inner.vals[x.id].dims2();
            assert_eq!(hw, h * w, "to_chw spatial dims");
            let xd = inner.vals[x.id].data();
            let mut out = vec![0.0; c * hw];
            for ch in 0..c {
                for p in 0..hw {
                    out[ch * hw + p] = xd[p * c + ch];
                }
            }
            (Arr::from_vec(&[c, h, w], out), inner.need[x.id], c, hw)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, hw * c, |d| {
                    for ch in 0..c {
                        for p in 0..hw {
                            d[p * c + ch] += g[ch * hw + p];
                        }
                    }
                });
            })),
        )
    }

    /// Zero-padded 2d convolution: x (ci, h, w), w (co, ci, kh, kw), b (co,).
    pub fn conv2d(&self, x: Var, wgt: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (val, need, ci, h, w, co, kh, kw) = {
            let inner = self.inner.borrow();
            let (ci, h, w) = inner.vals[x.id].dims3();
            let ws = inner.vals[wgt.id].shape().to_vec();
            assert_eq!(ws.len(), 4, "conv weight rank");
            let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            assert_eq!(wci, ci, "conv in-channels");
            assert_eq!(inner.vals[bias.id].len(), co, "conv bias");
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kw) / stride + 1;
            let mut out = vec![0.0; co * oh * ow];
            kernels::conv2d_plane(
                inner.vals[x.id].data(),
                ci,
                h,
                w,
                inner.vals[wgt.id].data(),
                inner.vals[bias.id].data(),
                co,
                kh,
                kw,
                stride,
                pad,
                &mut out,
            );
            let need =
                inner.need[x.id] || inner.need[wgt.id] || inner.need[bias.id];
            (Arr::from_vec(&[co, oh, ow], out), need, ci, h, w, co, kh, kw)
        };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        self.push(
            val,
            need,
            Some(Box::new(move |g, vals, gs| {
                gs.with(bias.id, co, |d| {
                    for c_out in 0..co {
                        d[c_out] += g[c_out * oh * ow..(c_out + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
                gs.with(wgt.id, co * ci * kh * kw, |d| {
                    let xd = vals[x.id].data();
                    for c_out in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[c_out * oh * ow + oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c_in in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            d[((c_out * ci + c_in) * kh + ky) * kw + kx] += gv
                                                * xd[c_in * h * w + iy as usize * w + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                gs.with(x.id, ci * h * w, |d| {
                    let wd = vals[wgt.id].data();
                    for c_out in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[c_out * oh * ow + oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c_in in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            d[c_in * h * w + iy as usize * w + ix as usize] += gv
                                                * wd[((c_out * ci + c_in) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Bilinear resize of (c, h, w) to (c, oh, ow); half-pixel centers,
    /// edge clamped.
    pub fn bilinear_resize(&self, x: Var, oh: usize, ow: usize) -> Var {
        let (val, need, c, h, w) = {
            let inner = self.inner.borrow();
            let (c, h, w) = inner.vals[x.id].dims3();
            let xd = inner.vals[x.id].data();
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                kernels::bilinear_resize_plane(
                    &xd[ch * h * w..(ch + 1) * h * w],
                    h,
                    w,
                    oh,
                    ow,
                    &mut out[ch * oh * ow..(ch + 1) * oh * ow],
                );
            }
            (Arr::from_vec(&[c, oh, ow], out), inner.need[x.id], c, h, w)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, c * h * w, |d| {
                    let ys = kernels::bilinear_axis(h, oh);
                    let xs = kernels::bilinear_axis(w, ow);
                    for ch in 0..c {
                        let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        let dplane = &mut d[ch * h * w..(ch + 1) * h * w];
                        for (oy, (y0, wys)) in ys.iter().enumerate() {
                            for (ox, (x0, wxs)) in xs.iter().enumerate() {
                                let gv = gplane[oy * ow + ox];
                                for (dy, &wy) in wys.iter().enumerate() {
                                    for (dx, &wx) in wxs.iter().enumerate() {
                                        dplane[(y0 + dy) * w + x0 + dx] += gv * wy * wx;
                                    }
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Fixed-kernel 2d filter over an (h, w) plane with edge-replicate
    /// sampling; the kernel is a constant, not a parameter.
    pub fn filter2d_replicate(&self, x: Var, kernel: &Arr) -> Var {
        let (kh, kw) = kernel.dims2();
        assert!(kh % 2 == 1 && kw % 2 == 1, "odd kernel expected");
        let kd = kernel.data().to_vec();
        let (val, need, h, w) = {
            let inner = self.inner.borrow();
            let shp = inner.vals[x.id].shape().to_vec();
            assert_eq!(shp.len(), 2, "filter2d expects (h, w)");
            let (h, w) = (shp[0], shp[1]);
            let xd = inner.vals[x.id].data();
            let cy = kh / 2;
            let cx = kw / 2;
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for xo in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (y + ky).saturating_sub(cy).min(h - 1);
                        for kx in 0..kw {
                            let ix = (xo + kx).saturating_sub(cx).min(w - 1);
                            acc += kd[ky * kw + kx] * xd[iy * w + ix];
                        }
                    }
                    out[y * w + xo] = acc;
                }
            }
            (Arr::from_vec(&[h, w], out), inner.need[x.id], h, w)
        };
        let kd2 = kernel.data().to_vec();
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                gs.with(x.id, h * w, |d| {
                    let cy = kh / 2;
                    let cx = kw / 2;
                    for y in 0..h {
                        for xo in 0..w {
                            let gv = g[y * w + xo];
                            for ky in 0..kh {
                                let iy = (y + ky).saturating_sub(cy).min(h - 1);
                                for kx in 0..kw {
                                    let ix = (xo + kx).saturating_sub(cx).min(w - 1);
                                    d[iy * w + ix] += gv * kd2[ky * kw + kx];
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Unit-normalize a vector; vectors with norm below 1e-12 map to zero
    /// (and propagate zero gradient).
    pub fn normalize_vec(&self, x: Var) -> Var {
        let (val, need, n, y, norm) = {
            let inner = self.inner.borrow();
            let xd = inner.vals[x.id].data();
            let n = xd.len();
            let norm = kernels::dot(xd, xd).sqrt();
            let y: Vec<f64> = if norm < 1e-12 {
                vec![0.0; n]
            } else {
                xd.iter().map(|&v| v / norm).collect()
            };
            (Arr::from_vec(&[n], y.clone()), inner.need[x.id], n, y, norm)
        };
        self.push(
            val,
            need,
            Some(Box::new(move |g, _vals, gs| {
                if norm < 1e-12 {
                    return;
                }
                gs.with(x.id, n, |d| {
                    let ydotg = kernels::dot(&y, g);
                    for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(&y) {
                        *dv += (gv - yv * ydotg) / norm;
                    }
                });
            })),
        )
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
