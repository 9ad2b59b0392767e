//! Velocity network forward and backward passes.
//!
//! Trunk: `stem → depth × block → head`, where every block is
//! `u + SiLU(FiLM(conv(u)))` modulated by `[time embedding; prompt]`.
//! The control branch mirrors the stem and blocks on `x_t + hint(cond)` and
//! feeds `control_scale · proj_k(e_k)` into the input of trunk block `k`
//! (and of the head for `k = depth`).

use super::layers::Conv;
use super::params::{Block, Group, GroupSet, ModelParams};
use super::tensor::{gemm, silu, silu_grad, Tensor};
use crate::error::{Error, Result};

/// Sinusoidal embedding with frequencies spaced geometrically in `[1, 100]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |i: usize| if half > 1 { 100f64.powf(i as f64 / (half - 1) as f64) } else { 1.0 };
    let mut e: Vec<f64> = (0..half).map(|i| (freq(i) * t).sin()).collect();
    e.extend((0..half).map(|i| (freq(i) * t).cos()));
    e
}

#[derive(Debug, Clone, Copy)]
pub struct NetInputs<'a> {
    /// `[3, S, S]`
    pub x_t: &'a Tensor,
    pub t: f64,
    /// `[1, S, S]`
    pub cond: &'a Tensor,
    pub prompt: &'a [f64],
    pub control_scale: f64,
    pub use_lora: bool,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    cols: Vec<f64>,
    pre: Vec<f64>,
    gb: Vec<f64>,
    film: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ControlTrace {
    stem_cols: Vec<f64>,
    hint_cols: Vec<f64>,
    blocks: Vec<BlockTrace>,
    /// `e_0 ..= e_depth`, the inputs of the projections.
    states: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace {
    size: usize,
    cvec: Vec<f64>,
    control_scale: f64,
    use_lora: bool,
    block_weights: Vec<Vec<f64>>,
    stem_cols: Vec<f64>,
    blocks: Vec<BlockTrace>,
    head_cols: Vec<f64>,
    control: Option<ControlTrace>,
}

/// Gradients with respect to the network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub x_t: Vec<f64>,
    pub cond: Vec<f64>,
    pub prompt: Vec<f64>,
}

fn check_inputs(p: &ModelParams, inp: &NetInputs) -> Result<()> {
    let s = p.cfg.image_size;
    if inp.x_t.shape() != [3, s, s] {
        return Err(Error::Shape(format!("x_t has shape {:?}, expected [3, {s}, {s}]", inp.x_t.shape())));
    }
    if inp.cond.shape() != [1, s, s] {
        return Err(Error::Shape(format!("condition has shape {:?}, expected [1, {s}, {s}]", inp.cond.shape())));
    }
    if inp.prompt.len() != p.cfg.embed_dim {
        return Err(Error::Shape(format!("prompt has length {}, expected {}", inp.prompt.len(), p.cfg.embed_dim)));
    }
    if !(0.0..=1.0).contains(&inp.t) {
        return Err(Error::InvalidArgument(format!("timestep {} outside [0, 1]", inp.t)));
    }
    Ok(())
}

fn block_forward(block: &Block, weights: &[f64], mut x: Vec<f64>, size: usize, cvec: &[f64]) -> (Vec<f64>, BlockTrace) {
    let hw = size * size;
    let (pre, cols) = block.conv.forward(weights, &x, size, size);
    let (film, gb) = block.film.forward(&pre, hw, cvec);
    x.iter_mut().zip(&film).for_each(|(u, f)| *u += silu(*f));
    (x, BlockTrace { cols, pre, gb, film })
}

/// Returns `(d_input, d_cvec, d_weights)`; parameter grads other than the
/// conv weight go to `grads` when given. `d_weights` is computed only when
/// `want_dw` is set.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    block: &Block,
    weights: &[f64],
    tr: &BlockTrace,
    size: usize,
    cvec: &[f64],
    d_out: &[f64],
    grads: Option<&mut Block>,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let hw = size * size;
    let d_film: Vec<f64> = d_out.iter().zip(&tr.film).map(|(d, f)| d * silu_grad(*f)).collect();
    let (film_grads, conv_grads) = match grads {
        Some(b) => (Some(&mut b.film), Some(&mut b.conv)),
        None => (None, None),
    };
    let (d_pre, d_cvec) = block.film.backward(&tr.pre, hw, cvec, &tr.gb, &d_film, film_grads);
    if let Some(cg) = conv_grads {
        block.conv.bias_grad(&d_pre, hw, cg.b.data_mut());
    }
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0; block.conv.w.len()];
        block.conv.weight_grad(&d_pre, &tr.cols, hw, &mut dw);
        dw
    });
    let mut d_in = block.conv.input_grad(weights, &d_pre, size, size);
    for (a, b) in d_in.iter_mut().zip(d_out) {
        *a += b;
    }
    (d_in, d_cvec, dw)
}

fn conv_backward(conv: &Conv, cols: &[f64], size: usize, d_out: &[f64], grads: Option<&mut Conv>) -> Vec<f64> {
    let hw = size * size;
    if let Some(g) = grads {
        conv.weight_grad(d_out, cols, hw, g.w.data_mut());
        conv.bias_grad(d_out, hw, g.b.data_mut());
    }
    conv.input_grad(conv.w.data(), d_out, size, size)
}

fn add_scaled(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub fn forward(p: &ModelParams, inp: &NetInputs) -> Result<Tensor> {
    Ok(forward_traced(p, inp)?.0)
}

pub fn forward_traced(p: &ModelParams, inp: &NetInputs) -> Result<(Tensor, Trace)> {
    check_inputs(p, inp)?;
    let size = p.cfg.image_size;
    let mut cvec = time_embedding(inp.t, p.cfg.time_dim);
    cvec.extend_from_slice(inp.prompt);

    let control = (inp.control_scale != 0.0).then(|| {
        let ctl = &p.control;
        let (mut e, stem_cols) = ctl.stem.forward(ctl.stem.w.data(), inp.x_t.data(), size, size);
        let (hint, hint_cols) = ctl.hint.forward(ctl.hint.w.data(), inp.cond.data(), size, size);
        add_scaled(&mut e, 1.0, &hint);
        let mut states = Vec::with_capacity(ctl.blocks.len() + 1);
        let mut blocks = Vec::with_capacity(ctl.blocks.len());
        for blk in &ctl.blocks {
            states.push(e.clone());
            let (next, tr) = block_forward(blk, blk.conv.w.data(), e, size, &cvec);
            blocks.push(tr);
            e = next;
        }
        states.push(e);
        ControlTrace { stem_cols, hint_cols, blocks, states }
    });
    let residuals: Option<Vec<Vec<f64>>> = control.as_ref().map(|c| {
        p.control
            .proj
            .iter()
            .zip(&c.states)
            .map(|(proj, e)| proj.forward(proj.w.data(), e, size, size).0)
            .collect()
    });

    let block_weights = p.effective_block_weights(inp.use_lora);
    let (mut h, stem_cols) = p.trunk.stem.forward(p.trunk.stem.w.data(), inp.x_t.data(), size, size);
    let mut blocks = Vec::with_capacity(p.trunk.blocks.len());
    for (k, (blk, w)) in p.trunk.blocks.iter().zip(&block_weights).enumerate() {
        if let Some(r) = &residuals {
            add_scaled(&mut h, inp.control_scale, &r[k]);
        }
        let (next, tr) = block_forward(blk, w, h, size, &cvec);
        blocks.push(tr);
        h = next;
    }
    if let Some(r) = &residuals {
        add_scaled(&mut h, inp.control_scale, &r[p.cfg.depth]);
    }
    let (v, head_cols) = p.trunk.head.forward(p.trunk.head.w.data(), &h, size, size);
    let out = Tensor::from_vec(&[3, size, size], v)?;
    let trace = Trace {
        size,
        cvec,
        control_scale: inp.control_scale,
        use_lora: inp.use_lora,
        block_weights,
        stem_cols,
        blocks,
        head_cols,
        control,
    };
    Ok((out, trace))
}

/// Accumulates `∂L/∂θ` for every group in `trainable` into `grads` and
/// returns the input gradients. Frozen groups are left untouched.
pub fn backward(
    p: &ModelParams,
    trace: &Trace,
    d_out: &Tensor,
    trainable: GroupSet,
    grads: &mut ModelParams,
) -> Result<InputGrads> {
    let size = trace.size;
    let hw = size * size;
    if d_out.len() != 3 * hw {
        return Err(Error::Shape(format!("upstream gradient has {} values, expected {}", d_out.len(), 3 * hw)));
    }
    let train_trunk = trainable.contains(Group::Trunk);
    let train_ctl = trainable.contains(Group::Control);
    let train_lora = trainable.contains(Group::Lora) && trace.use_lora && p.lora.is_some();
    let cs = trace.control_scale;
    let mut d_cvec = vec![0.0; trace.cvec.len()];

    let mut dh = conv_backward(
        &p.trunk.head,
        &trace.head_cols,
        size,
        d_out.data(),
        train_trunk.then_some(&mut grads.trunk.head),
    );
    let depth = p.trunk.blocks.len();
    let mut d_res: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
    if trace.control.is_some() {
        d_res[depth] = dh.iter().map(|v| cs * v).collect();
    }
    for k in (0..depth).rev() {
        let blk = &p.trunk.blocks[k];
        let g = train_trunk.then_some(&mut grads.trunk.blocks[k]);
        let (d_in, dc, dw) =
            block_backward(blk, &trace.block_weights[k], &trace.blocks[k], size, &trace.cvec, &dh, g, train_trunk || train_lora);
        add_scaled(&mut d_cvec, 1.0, &dc);
        if let Some(dw) = dw {
            if train_trunk {
                add_scaled(grads.trunk.blocks[k].conv.w.data_mut(), 1.0, &dw);
            }
            if train_lora {
                lora_backward(p, k, &dw, grads);
            }
        }
        if trace.control.is_some() {
            d_res[k] = d_in.iter().map(|v| cs * v).collect();
        }
        dh = d_in;
    }
    let mut d_x = conv_backward(&p.trunk.stem, &trace.stem_cols, size, &dh, train_trunk.then_some(&mut grads.trunk.stem));
    let mut d_cond = vec![0.0; hw];

    if let Some(ct) = &trace.control {
        let ctl = &p.control;
        let gc = &mut grads.control;
        let mut de = conv_backward(&ctl.proj[depth], &ct.states[depth], size, &d_res[depth], train_ctl.then_some(&mut gc.proj[depth]));
        for k in (0..depth).rev() {
            let blk = &ctl.blocks[k];
            let (mut d_in, dc, dw) = block_backward(
                blk,
                blk.conv.w.data(),
                &ct.blocks[k],
                size,
                &trace.cvec,
                &de,
                train_ctl.then_some(&mut gc.blocks[k]),
                train_ctl,
            );
            if let Some(dw) = dw {
                add_scaled(gc.blocks[k].conv.w.data_mut(), 1.0, &dw);
            }
            add_scaled(&mut d_cvec, 1.0, &dc);
            let dp = conv_backward(&ctl.proj[k], &ct.states[k], size, &d_res[k], train_ctl.then_some(&mut gc.proj[k]));
            add_scaled(&mut d_in, 1.0, &dp);
            de = d_in;
        }
        let dx = conv_backward(&ctl.stem, &ct.stem_cols, size, &de, train_ctl.then_some(&mut gc.stem));
        add_scaled(&mut d_x, 1.0, &dx);
        d_cond = conv_backward(&ctl.hint, &ct.hint_cols, size, &de, train_ctl.then_some(&mut gc.hint));
    }

    let t_dim = p.cfg.time_dim;
    Ok(InputGrads { x_t: d_x, cond: d_cond, prompt: d_cvec[t_dim..].to_vec() })
}

/// `dB += s · G · Aᵀ`, `dA += s · Bᵀ · G` for the adapter on block `k`.
fn lora_backward(p: &ModelParams, k: usize, g: &[f64], grads: &mut ModelParams) {
    let (Some(lora), Some(glora)) = (&p.lora, &mut grads.lora) else {
        return;
    };
    let pair = &lora.pairs[k];
    let (out, r) = (pair.b.shape()[0], pair.b.shape()[1]);
    let fan_in = pair.a.shape()[1];
    let s = p.cfg.lora_scale();
    let mut db = vec![0.0; out * r];
    gemm(out, fan_in, r, g, false, pair.a.data(), true, 0.0, &mut db);
    let mut da = vec![0.0; r * fan_in];
    gemm(r, out, fan_in, pair.b.data(), true, g, false, 0.0, &mut da);
    add_scaled(glora.pairs[k].b.data_mut(), s, &db);
    add_scaled(glora.pairs[k].a.data_mut(), s, &da);
}
