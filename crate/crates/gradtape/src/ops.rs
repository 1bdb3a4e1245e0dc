use std::rc::Rc;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn sgemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    // a is (m x k) or its transpose stored as (k x m); same for b.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = op(a) * op(b)` for row-major slices, overwriting `c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    sgemm(m, k, n, a, a_t, b, b_t, c, 0.0);
}

/// `c += op(a) * op(b)`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    sgemm(m, k, n, a, a_t, b, b_t, c, 1.0);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    fn unary(&self, a: Var, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32 + 'static) -> Var {
        let out = self.value(a).map(f);
        self.custom(
            &[a],
            out,
            Box::new(move |ctx| {
                let x = &ctx.inputs[0];
                let data: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .zip(ctx.grad.data())
                    .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                    .collect();
                vec![Some(Tensor::new(x.shape(), data))]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f32::exp, |_, y| y)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 20.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f32::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&self, a: Var, eps: f32) -> Var {
        self.unary(a, move |x| (x + eps).sqrt(), |_, y| 0.5 / y.max(1e-12))
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        self.unary(a, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, a: Var, s: f32) -> Var {
        self.unary(a, move |x| x + s, |_, _| 1.0)
    }

    fn binary(&self, a: Var, b: Var, op: u8) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op on mismatched shapes");
        let out = match op {
            0 => va.zip_map(&vb, |x, y| x + y),
            1 => va.zip_map(&vb, |x, y| x - y),
            _ => va.zip_map(&vb, |x, y| x * y),
        };
        self.custom(
            &[a, b],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad;
                match op {
                    0 => vec![Some(g.clone()), Some(g.clone())],
                    1 => vec![Some(g.clone()), Some(g.map(|x| -x))],
                    _ => vec![
                        ctx.needs[0].then(|| g.zip_map(&ctx.inputs[1], |g, y| g * y)),
                        ctx.needs[1].then(|| g.zip_map(&ctx.inputs[0], |g, x| g * x)),
                    ],
                }
            }),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, 0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, 1)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, 2)
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(&self, a: Var, c: Rc<Tensor>) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        self.custom(&[a], out, Box::new(move |ctx| vec![Some(ctx.grad.zip_map(&c, |g, y| g * y))]))
    }

    /// Elementwise sum with a fixed tensor of the same shape.
    pub fn add_const(&self, a: Var, c: &Tensor) -> Var {
        let out = self.value(a).zip_map(c, |x, y| x + y);
        self.custom(&[a], out, Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// `x[N, C] * s[N, 1]`, broadcasting `s` across columns.
    pub fn scale_rows(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let (n, c) = (vx.dim(0), vx.dim(1));
        assert_eq!(vs.len(), n, "scale_rows: one scale per row");
        let mut out = vx.as_ref().clone();
        for r in 0..n {
            let k = vs.data()[r];
            out.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= k);
        }
        self.custom(
            &[x, s],
            out,
            Box::new(move |ctx| {
                let (vx, vs, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
                let gx = ctx.needs[0].then(|| {
                    let mut gx = g.clone();
                    for r in 0..n {
                        let k = vs.data()[r];
                        gx.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= k);
                    }
                    gx
                });
                let gs = ctx.needs[1].then(|| {
                    let d = (0..n)
                        .map(|r| vx.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new(vs.shape(), d)
                });
                vec![gx, gs]
            }),
        )
    }

    /// L2-normalize each row of `x[N, C]`.
    pub fn normalize_rows(&self, x: Var, eps: f32) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.dim(0), vx.dim(1));
        let norms: Vec<f32> = (0..n).map(|r| vx.row(r).iter().map(|v| v * v).sum::<f32>().sqrt().max(eps)).collect();
        let mut out = vx.as_ref().clone();
        for r in 0..n {
            out.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v /= norms[r]);
        }
        self.custom(
            &[x],
            out,
            Box::new(move |ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..n {
                    let dot: f32 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    let dst = &mut gx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = (g.row(r)[j] - y.row(r)[j] * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let s: f64 = va.data().iter().map(|&x| x as f64).sum();
        let shape = va.shape().to_vec();
        self.custom(&[a], Tensor::scalar(s as f32), Box::new(move |ctx| vec![Some(Tensor::full(&shape, ctx.grad.item()))]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// Weighted sum of scalars: `sum_i w_i * x_i`.
    pub fn weighted_sum(&self, xs: &[Var], ws: &[f32]) -> Var {
        assert_eq!(xs.len(), ws.len());
        let total: f32 = xs.iter().zip(ws).map(|(&x, &w)| w * self.value(x).item()).sum();
        let ws = ws.to_vec();
        self.custom(
            xs,
            Tensor::scalar(total),
            Box::new(move |ctx| ws.iter().map(|&w| Some(Tensor::scalar(w * ctx.grad.item()))).collect()),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = va.as_ref().clone().reshaped(shape);
        self.custom(&[a], out, Box::new(move |ctx| vec![Some(ctx.grad.clone().reshaped(&old))]))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&v| self.value(v)).collect();
        let mut shape = vals[0].shape().to_vec();
        let widths: Vec<usize> = vals.iter().map(|t| t.dim(axis)).collect();
        shape[axis] = widths.iter().sum();
        for t in &vals {
            for (d, (&a, &b)) in t.shape().iter().zip(&shape).enumerate() {
                assert!(d == axis || a == b, "concat: shape mismatch {:?} vs {:?}", t.shape(), shape);
            }
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0f32; outer * total * inner];
        let mut off = 0;
        for (t, &w) in vals.iter().zip(&widths) {
            for o in 0..outer {
                let src = &t.data()[o * w * inner..(o + 1) * w * inner];
                let dst = o * total * inner + off * inner;
                out[dst..dst + w * inner].copy_from_slice(src);
            }
            off += w;
        }
        self.custom(
            xs,
            Tensor::new(&shape, out),
            Box::new(move |ctx| {
                let mut res = Vec::with_capacity(widths.len());
                let mut off = 0;
                for (k, &w) in widths.iter().enumerate() {
                    if ctx.needs[k] {
                        let mut g = vec![0.0f32; outer * w * inner];
                        for o in 0..outer {
                            let src = o * total * inner + off * inner;
                            g[o * w * inner..(o + 1) * w * inner].copy_from_slice(&ctx.grad.data()[src..src + w * inner]);
                        }
                        res.push(Some(Tensor::new(ctx.inputs[k].shape(), g)));
                    } else {
                        res.push(None);
                    }
                    off += w;
                }
                res
            }),
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let in_shape = va.shape().to_vec();
        let (outer, total, inner) = split_axis(&in_shape, axis);
        assert!(start + len <= total, "slice out of range");
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let mut out = vec![0.0f32; outer * len * inner];
        for o in 0..outer {
            let src = o * total * inner + start * inner;
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(&va.data()[src..src + len * inner]);
        }
        self.custom(
            &[a],
            Tensor::new(&shape, out),
            Box::new(move |ctx| {
                let mut g = vec![0.0f32; outer * total * inner];
                for o in 0..outer {
                    let dst = o * total * inner + start * inner;
                    g[dst..dst + len * inner].copy_from_slice(&ctx.grad.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&in_shape, g))]
            }),
        )
    }

    /// Rows of `x[N, C]` picked by `idx`, giving `[idx.len(), C]`.
    pub fn gather_rows(&self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.dim(0), vx.dim(1));
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            assert!(i < n, "gather_rows index {i} out of {n}");
            out.extend_from_slice(vx.row(i));
        }
        self.custom(
            &[x],
            Tensor::new(&[idx.len(), c], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[n, c]);
                for (r, &i) in idx.iter().enumerate() {
                    let src = ctx.grad.row(r);
                    let dst = &mut g.data_mut()[i * c..(i + 1) * c];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Average rows of `x[N, C]` into `segments` buckets given by `seg[i]`.
    /// Empty buckets are zero.
    pub fn segment_mean(&self, x: Var, seg: Rc<Vec<usize>>, segments: usize) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.dim(0), vx.dim(1));
        assert_eq!(seg.len(), n);
        let mut counts = vec![0usize; segments];
        for &s in seg.iter() {
            counts[s] += 1;
        }
        let mut out = vec![0.0f32; segments * c];
        for (r, &s) in seg.iter().enumerate() {
            let inv = 1.0 / counts[s] as f32;
            for (d, v) in out[s * c..(s + 1) * c].iter_mut().zip(vx.row(r)) {
                *d += v * inv;
            }
        }
        self.custom(
            &[x],
            Tensor::new(&[segments, c], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[n, c]);
                for (r, &s) in seg.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f32;
                    let src = ctx.grad.row(s);
                    for (d, v) in g.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *d = v * inv;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// `a[N, K] @ b[K, M]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k, m) = (va.dim(0), va.dim(1), vb.dim(1));
        assert_eq!(vb.dim(0), k, "matmul inner dimension");
        let mut out = vec![0.0f32; n * m];
        gemm(n, k, m, va.data(), false, vb.data(), false, &mut out);
        self.custom(
            &[a, b],
            Tensor::new(&[n, m], out),
            Box::new(move |ctx| {
                let (va, vb, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
                let ga = ctx.needs[0].then(|| {
                    let mut d = vec![0.0f32; n * k];
                    gemm(n, m, k, g.data(), false, vb.data(), true, &mut d);
                    Tensor::new(&[n, k], d)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![0.0f32; k * m];
                    gemm(k, n, m, va.data(), true, g.data(), false, &mut d);
                    Tensor::new(&[k, m], d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Affine map `x[N, I] @ w[I, O] + b[O]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, i, o) = (vx.dim(0), vx.dim(1), vw.dim(1));
        assert_eq!(vw.dim(0), i, "linear: input width {} vs weight {:?}", i, vw.shape());
        assert_eq!(vb.len(), o);
        let mut out = vec![0.0f32; n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(vb.data());
        }
        gemm_acc(n, i, o, vx.data(), false, vw.data(), false, &mut out);
        self.custom(
            &[x, w, b],
            Tensor::new(&[n, o], out),
            Box::new(move |ctx| {
                let (vx, vw, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![0.0f32; n * i];
                    gemm(n, o, i, g.data(), false, vw.data(), true, &mut d);
                    Tensor::new(&[n, i], d)
                });
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0f32; i * o];
                    gemm(i, n, o, vx.data(), true, g.data(), false, &mut d);
                    Tensor::new(&[i, o], d)
                });
                let gb = ctx.needs[2].then(|| {
                    let mut d = vec![0.0f32; o];
                    for r in 0..n {
                        d.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                    }
                    Tensor::new(&[o], d)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Swap the two axes of a rank-2 tensor.
    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = (va.dim(0), va.dim(1));
        let t = transpose2(va.data(), r, c);
        self.custom(
            &[a],
            Tensor::new(&[c, r], t),
            Box::new(move |ctx| vec![Some(Tensor::new(&[r, c], transpose2(ctx.grad.data(), c, r)))]),
        )
    }
}

pub(crate) fn transpose2(d: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}
