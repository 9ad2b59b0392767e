//! Prompt encoder: image → visual-semantic embedding.

use super::params::Encoder;
use super::tensor::{silu, silu_grad, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    size: usize,
    cols1: Vec<f64>,
    pre1: Vec<f64>,
    cols2: Vec<f64>,
    pre2: Vec<f64>,
    pooled: Vec<f64>,
}

impl Encoder {
    pub fn encode(&self, img: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode_traced(img)?.0)
    }

    pub fn encode_traced(&self, img: &Tensor) -> Result<(Vec<f64>, EncoderTrace)> {
        let size = match img.shape() {
            &[3, h, w] if h == w => h,
            s => return Err(Error::Shape(format!("encoder input {s:?} is not [3, S, S]"))),
        };
        let hw = size * size;
        let (pre1, cols1) = self.conv1.forward(self.conv1.w.data(), img.data(), size, size);
        let act1: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
        let (pre2, cols2) = self.conv2.forward(self.conv2.w.data(), &act1, size, size);
        let pooled: Vec<f64> = pre2.chunks_exact(hw).map(|ch| ch.iter().map(|&v| silu(v)).sum::<f64>() / hw as f64).collect();
        let emb = self.out.forward(&pooled);
        Ok((emb, EncoderTrace { size, cols1, pre1, cols2, pre2, pooled }))
    }

    /// Accumulates parameter gradients of `<d_emb, encode(img)>` into `grads`.
    pub fn backward(&self, trace: &EncoderTrace, d_emb: &[f64], grads: &mut Encoder) {
        let size = trace.size;
        let hw = size * size;
        let d_pooled = self.out.backward(&trace.pooled, d_emb, Some(&mut grads.out));
        let d_pre2: Vec<f64> = trace
            .pre2
            .chunks_exact(hw)
            .zip(&d_pooled)
            .flat_map(|(ch, &d)| ch.iter().map(move |&v| d / hw as f64 * silu_grad(v)))
            .collect();
        self.conv2.weight_grad(&d_pre2, &trace.cols2, hw, grads.conv2.w.data_mut());
        self.conv2.bias_grad(&d_pre2, hw, grads.conv2.b.data_mut());
        let d_act1 = self.conv2.input_grad(self.conv2.w.data(), &d_pre2, size, size);
        let d_pre1: Vec<f64> = d_act1.iter().zip(&trace.pre1).map(|(d, &v)| d * silu_grad(v)).collect();
        self.conv1.weight_grad(&d_pre1, &trace.cols1, hw, grads.conv1.w.data_mut());
        self.conv1.bias_grad(&d_pre1, hw, grads.conv1.b.data_mut());
    }
}
