//! Convolution, FiLM and dense layers with explicit backward passes.
//! Feature maps are channel-planar `[c][y][x]` slices.

use rand::Rng;

use super::tensor::{gemm, Tensor};

/// Same-padded stride-1 convolution with square kernel (1 or 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[out, in, k, k]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

impl Conv {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Self { w: Tensor::zeros(&[out_ch, in_ch, k, k]), b: Tensor::zeros(&[out_ch]) }
    }

    /// Uniform fan-in init with bound `gain * sqrt(6 / fan_in)`, zero bias.
    pub fn uniform<R: Rng>(rng: &mut R, out_ch: usize, in_ch: usize, k: usize, gain: f64) -> Self {
        let mut c = Self::zeros(out_ch, in_ch, k);
        let bound = gain * (6.0 / (in_ch * k * k) as f64).sqrt();
        c.w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        c
    }

    pub fn out_ch(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.w.shape()[2]
    }

    /// Length of one unrolled receptive field (`in * k * k`).
    pub fn fan_in(&self) -> usize {
        self.in_ch() * self.k() * self.k()
    }

    /// Returns the output map and the unrolled input columns.
    pub fn forward(&self, weights: &[f64], input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let cols = im2col(input, self.in_ch(), h, w, self.k());
        let out = self.forward_cols(weights, &cols, h * w);
        (out, cols)
    }

    pub fn forward_cols(&self, weights: &[f64], cols: &[f64], hw: usize) -> Vec<f64> {
        let oc = self.out_ch();
        let mut out = Vec::with_capacity(oc * hw);
        for &b in self.b.data() {
            out.extend(std::iter::repeat_n(b, hw));
        }
        gemm(oc, self.fan_in(), hw, weights, false, cols, false, 1.0, &mut out);
        out
    }

    /// Accumulates the weight gradient (`dW += dOut · colsᵀ`) into `dw`.
    pub fn weight_grad(&self, d_out: &[f64], cols: &[f64], hw: usize, dw: &mut [f64]) {
        gemm(self.out_ch(), hw, self.fan_in(), d_out, false, cols, true, 1.0, dw);
    }

    pub fn bias_grad(&self, d_out: &[f64], hw: usize, db: &mut [f64]) {
        for (o, g) in db.iter_mut().enumerate() {
            *g += d_out[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }

    /// Input gradient through `weights`.
    pub fn input_grad(&self, weights: &[f64], d_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut dcols = vec![0.0; self.fan_in() * hw];
        gemm(self.fan_in(), self.out_ch(), hw, weights, true, d_out, false, 0.0, &mut dcols);
        col2im(&dcols, self.in_ch(), h, w, self.k())
    }
}

pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    debug_assert_eq!(input.len(), c * hw);
    if k == 1 {
        return input.to_vec();
    }
    let r = (k / 2) as isize;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = sy as usize * w;
                    let dst = row + y * w;
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            cols[dst + x] = plane[src + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    if k == 1 {
        return cols.to_vec();
    }
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = ci * hw + sy as usize * w;
                    let src = row + y * w;
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            out[dst + sx as usize] += cols[src + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dense layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { w: Tensor::zeros(&[out_dim, in_dim]), b: Tensor::zeros(&[out_dim]) }
    }

    pub fn uniform<R: Rng>(rng: &mut R, out_dim: usize, in_dim: usize, gain: f64) -> Self {
        let mut l = Self::zeros(out_dim, in_dim);
        let bound = gain * (6.0 / in_dim as f64).sqrt();
        l.w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        l
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.in_dim();
        self.w
            .data()
            .chunks_exact(n)
            .zip(self.b.data())
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter grads when `grads` is given; returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: Option<&mut Linear>) -> Vec<f64> {
        let n = self.in_dim();
        if let Some(g) = grads {
            for (o, &d) in dy.iter().enumerate() {
                for (gw, xi) in g.w.data_mut()[o * n..(o + 1) * n].iter_mut().zip(x) {
                    *gw += d * xi;
                }
                g.b.data_mut()[o] += d;
            }
        }
        let mut dx = vec![0.0; n];
        for (row, &d) in self.w.data().chunks_exact(n).zip(dy) {
            for (dxi, w) in dx.iter_mut().zip(row) {
                *dxi += d * w;
            }
        }
        dx
    }
}

/// Feature-wise affine modulation: `y = h * (1 + gamma) + beta`, with
/// `[gamma; beta] = W c + b` for a conditioning vector `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Film {
    pub proj: Linear,
}

impl Film {
    pub fn channels(&self) -> usize {
        self.proj.out_dim() / 2
    }

    /// Returns the modulated map and the raw `[gamma; beta]` vector.
    pub fn forward(&self, h: &[f64], hw: usize, cvec: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gb = self.proj.forward(cvec);
        let c = self.channels();
        let mut out = Vec::with_capacity(h.len());
        for ch in 0..c {
            let (g, b) = (1.0 + gb[ch], gb[c + ch]);
            out.extend(h[ch * hw..(ch + 1) * hw].iter().map(|v| v * g + b));
        }
        (out, gb)
    }

    /// Returns `(dh, dcvec)`; accumulates parameter grads when given.
    pub fn backward(
        &self,
        h: &[f64],
        hw: usize,
        cvec: &[f64],
        gb: &[f64],
        dy: &[f64],
        grads: Option<&mut Film>,
    ) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let mut dgb = vec![0.0; 2 * c];
        let mut dh = Vec::with_capacity(h.len());
        for ch in 0..c {
            let span = ch * hw..(ch + 1) * hw;
            let (hs, ds) = (&h[span.clone()], &dy[span]);
            dgb[ch] = hs.iter().zip(ds).map(|(a, b)| a * b).sum();
            dgb[c + ch] = ds.iter().sum();
            let g = 1.0 + gb[ch];
            dh.extend(ds.iter().map(|d| d * g));
        }
        let dc = self.proj.backward(cvec, &dgb, grads.map(|g| &mut g.proj));
        (dh, dc)
    }
}
