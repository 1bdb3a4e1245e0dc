use std::rc::Rc;

use crate::graph::{Graph, Var};
use crate::ops::{gemm, gemm_acc};
use crate::tensor::Tensor;

/// Constant sparse matrix stored by rows: `rows[r]` lists `(column, weight)`.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub cols: usize,
    pub rows: Vec<Vec<(u32, f32)>>,
}

/// Input/output row pairs per kernel offset of a sparse convolution.
#[derive(Clone, Debug, Default)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Graph {
    /// `s @ x` for a constant sparse `s[R, N]` and `x[N, C]`.
    pub fn spmm(&self, s: Rc<SparseRows>, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.dim(0), vx.dim(1));
        assert_eq!(s.cols, n, "spmm column count");
        let mut out = vec![0.0f32; s.rows.len() * c];
        for (r, row) in s.rows.iter().enumerate() {
            let dst = &mut out[r * c..(r + 1) * c];
            for &(j, w) in row {
                dst.iter_mut().zip(vx.row(j as usize)).for_each(|(d, v)| *d += w * v);
            }
        }
        let r = s.rows.len();
        self.custom(
            &[x],
            Tensor::new(&[r, c], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[n, c]);
                let gd = g.data_mut();
                for (r, row) in s.rows.iter().enumerate() {
                    let src = ctx.grad.row(r);
                    for &(j, w) in row {
                        let j = j as usize;
                        gd[j * c..(j + 1) * c].iter_mut().zip(src).for_each(|(d, v)| *d += w * v);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Sparse convolution: `out[o] = sum_k sum_{(i, o) in pairs[k]} x[i] @ w[k]`
    /// with `x[n_in, Ci]` and `w[K, Ci, Co]`.
    pub fn sparse_conv(&self, x: Var, w: Var, rules: Rc<Rulebook>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (ci, co) = (vw.dim(1), vw.dim(2));
        assert_eq!(vx.dim(0), rules.n_in, "sparse_conv input rows");
        assert_eq!(vx.dim(1), ci, "sparse_conv input channels");
        assert_eq!(vw.dim(0), rules.pairs.len(), "sparse_conv kernel volume");
        let mut out = vec![0.0f32; rules.n_out * co];
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (k, pairs) in rules.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            gather(&vx, pairs.iter().map(|p| p.0), ci, &mut a);
            b.resize(pairs.len() * co, 0.0);
            gemm(pairs.len(), ci, co, &a, false, &vw.data()[k * ci * co..(k + 1) * ci * co], false, &mut b);
            for (r, &(_, o)) in pairs.iter().enumerate() {
                let o = o as usize;
                out[o * co..(o + 1) * co].iter_mut().zip(&b[r * co..(r + 1) * co]).for_each(|(d, v)| *d += v);
            }
        }
        self.custom(
            &[x, w],
            Tensor::new(&[rules.n_out, co], out),
            Box::new(move |ctx| {
                let (vx, vw) = (&ctx.inputs[0], &ctx.inputs[1]);
                let mut gx = ctx.needs[0].then(|| Tensor::zeros(vx.shape()));
                let mut gw = ctx.needs[1].then(|| Tensor::zeros(vw.shape()));
                let mut a = Vec::new();
                let mut gb = Vec::new();
                let mut ga = Vec::new();
                for (k, pairs) in rules.pairs.iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    let p = pairs.len();
                    gather(ctx.grad, pairs.iter().map(|q| q.1), co, &mut gb);
                    let wk = &vw.data()[k * ci * co..(k + 1) * ci * co];
                    if let Some(gx) = gx.as_mut() {
                        ga.resize(p * ci, 0.0);
                        gemm(p, co, ci, &gb, false, wk, true, &mut ga);
                        let gd = gx.data_mut();
                        for (r, &(i, _)) in pairs.iter().enumerate() {
                            let i = i as usize;
                            gd[i * ci..(i + 1) * ci].iter_mut().zip(&ga[r * ci..(r + 1) * ci]).for_each(|(d, v)| *d += v);
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gather(vx, pairs.iter().map(|q| q.0), ci, &mut a);
                        gemm_acc(ci, p, co, &a, true, &gb, false, &mut gw.data_mut()[k * ci * co..(k + 1) * ci * co]);
                    }
                }
                vec![gx, gw]
            }),
        )
    }
}

fn gather(t: &Tensor, rows: impl Iterator<Item = u32>, c: usize, buf: &mut Vec<f32>) {
    buf.clear();
    for r in rows {
        buf.extend_from_slice(&t.data()[r as usize * c..(r as usize + 1) * c]);
    }
}
