use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Normalizes `groups` contiguous blocks of `len` values and applies a
/// per-channel affine transform. Shared by group norm (blocks are channel
/// groups of an image) and row-batch norm (blocks are columns).
struct Blocks {
    /// Element indices of each block.
    members: Vec<Vec<usize>>,
    /// Channel of each element, for the affine parameters.
    channel: Vec<usize>,
    channels: usize,
}

fn normalize(x: &[f32], blocks: &Blocks, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let mut xhat = vec![0.0f32; x.len()];
    let mut inv_std = Vec::with_capacity(blocks.members.len());
    for m in &blocks.members {
        let n = m.len().max(1) as f64;
        let mean = m.iter().map(|&i| x[i] as f64).sum::<f64>() / n;
        let var = m.iter().map(|&i| (x[i] as f64 - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + eps as f64).sqrt();
        for &i in m {
            xhat[i] = ((x[i] as f64 - mean) * is) as f32;
        }
        inv_std.push(is as f32);
    }
    (xhat, inv_std)
}

impl Graph {
    fn block_norm(&self, x: Var, gamma: Var, beta: Var, blocks: Blocks, eps: f32) -> Var {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert_eq!(vg.len(), blocks.channels);
        assert_eq!(vb.len(), blocks.channels);
        let (xhat, inv_std) = normalize(vx.data(), &blocks, eps);
        let out: Vec<f32> = xhat
            .iter()
            .zip(&blocks.channel)
            .map(|(&v, &c)| v * vg.data()[c] + vb.data()[c])
            .collect();
        let shape = vx.shape().to_vec();
        self.custom(
            &[x, gamma, beta],
            Tensor::new(&shape, out),
            Box::new(move |ctx| {
                let vg = &ctx.inputs[1];
                let gy = ctx.grad.data();
                let ch = blocks.channels;
                let mut ggamma = vec![0.0f32; ch];
                let mut gbeta = vec![0.0f32; ch];
                for i in 0..gy.len() {
                    let c = blocks.channel[i];
                    ggamma[c] += gy[i] * xhat[i];
                    gbeta[c] += gy[i];
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0f32; gy.len()];
                    for (m, &is) in blocks.members.iter().zip(&inv_std) {
                        let n = m.len() as f32;
                        let mut s1 = 0.0f32;
                        let mut s2 = 0.0f32;
                        for &i in m {
                            let d = gy[i] * vg.data()[blocks.channel[i]];
                            s1 += d;
                            s2 += d * xhat[i];
                        }
                        for &i in m {
                            let d = gy[i] * vg.data()[blocks.channel[i]];
                            gx[i] = is * (d - s1 / n - xhat[i] * s2 / n);
                        }
                    }
                    Tensor::new(&shape, gx)
                });
                vec![gx, Some(Tensor::new(&[ch], ggamma)), Some(Tensor::new(&[ch], gbeta))]
            }),
        )
    }

    /// Group normalization of `x[C, H, W]` with `groups` groups.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f32) -> Var {
        let shape = self.shape(x);
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups} groups");
        let per = c / groups;
        let members = (0..groups).map(|g| (g * per * hw..(g + 1) * per * hw).collect()).collect();
        let channel = (0..c * hw).map(|i| i / hw).collect();
        self.block_norm(x, gamma, beta, Blocks { members, channel, channels: c }, eps)
    }

    /// Batch normalization over the rows of `x[N, C]` using the statistics of
    /// this batch.
    pub fn batch_norm_rows(&self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let shape = self.shape(x);
        let (n, c) = (shape[0], shape[1]);
        let members = (0..c).map(|j| (0..n).map(|r| r * c + j).collect()).collect();
        let channel = (0..n * c).map(|i| i % c).collect();
        self.block_norm(x, gamma, beta, Blocks { members, channel, channels: c }, eps)
    }
}
