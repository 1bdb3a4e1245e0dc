use crate::graph::{Graph, Var};
use crate::ops::{gemm, gemm_acc};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols_width(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let n = g.cols_width();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let n = g.cols_width();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D convolution of `x[C, H, W]` with `w[O, C, k, k]` and bias `b[O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(vx.rank(), 3, "conv2d expects [C, H, W], got {:?}", vx.shape());
        let (c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (o, k) = (vw.dim(0), vw.dim(2));
        assert_eq!(vw.dim(1), c, "conv2d: weight expects {} input channels, input has {}", vw.dim(1), c);
        assert_eq!(vb.len(), o);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
        let g = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let n = g.cols_width();
        let kk = g.cols_rows();
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0f32; o * n];
        for (oc, chunk) in out.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = vb.data()[oc]);
        }
        if direct {
            gemm_acc(o, kk, n, vw.data(), false, vx.data(), false, &mut out);
        } else {
            let mut cols = vec![0.0f32; kk * n];
            im2col(vx.data(), &g, &mut cols);
            gemm_acc(o, kk, n, vw.data(), false, &cols, false, &mut out);
        }
        self.custom(
            &[x, w, b],
            Tensor::new(&[o, g.ho, g.wo], out),
            Box::new(move |ctx| {
                let (vx, vw, gy) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad.data());
                let gb = ctx.needs[2].then(|| {
                    let d = gy.chunks(n).map(|ch| ch.iter().sum()).collect();
                    Tensor::new(&[o], d)
                });
                let cols_owned;
                let cols: &[f32] = if direct {
                    vx.data()
                } else if ctx.needs[1] {
                    let mut cols = vec![0.0f32; kk * n];
                    im2col(vx.data(), &g, &mut cols);
                    cols_owned = cols;
                    &cols_owned
                } else {
                    &[]
                };
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0f32; o * kk];
                    gemm(o, n, kk, gy, false, cols, true, &mut d);
                    Tensor::new(vw.shape(), d)
                });
                let gx = ctx.needs[0].then(|| {
                    let mut dcols = vec![0.0f32; kk * n];
                    gemm(kk, o, n, vw.data(), true, gy, false, &mut dcols);
                    if direct {
                        Tensor::new(vx.shape(), dcols)
                    } else {
                        let mut dx = vec![0.0f32; c * h * wd];
                        col2im(&dcols, &g, &mut dx);
                        Tensor::new(vx.shape(), dx)
                    }
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `x[C, H, W]`.
    pub fn upsample2x(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; c * h2 * w2];
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ci * h2 + y) * w2 + xx] = vx.data()[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(&[c, h2, w2], out),
            Box::new(move |ctx| {
                let gy = ctx.grad.data();
                let mut gx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gx[(ci * h + y / 2) * w + xx / 2] += gy[(ci * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx))]
            }),
        )
    }

    /// Mean over the spatial axes of `x[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, hw) = (vx.dim(0), vx.dim(1) * vx.dim(2));
        let shape = vx.shape().to_vec();
        let out: Vec<f32> = vx.data().chunks(hw).map(|ch| ch.iter().sum::<f32>() / hw as f32).collect();
        self.custom(
            &[x],
            Tensor::new(&[c], out),
            Box::new(move |ctx| {
                let mut g = vec![0.0f32; c * hw];
                for (ci, ch) in g.chunks_mut(hw).enumerate() {
                    let v = ctx.grad.data()[ci] / hw as f32;
                    ch.iter_mut().for_each(|x| *x = v);
                }
                vec![Some(Tensor::new(&shape, g))]
            }),
        )
    }
}
