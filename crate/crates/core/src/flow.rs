//! Rectified-flow primitives: linear noising, the velocity regression loss,
//! prompt distillation, and the Euler sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::color_math::{from_float, Image8};
use crate::error::{Error, Result};
use crate::micronet::{self, gray_tensor, rgb_tensor, Group, GroupSet, ModelParams, NetInputs, Tensor};
use crate::rng::stream_from_seed;

/// `x_t = (1 - t) x0 + t eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_t: Tensor,
    pub t: f64,
    pub eps: Tensor,
    pub x0: Tensor,
}

impl NoisySample {
    /// Regression target `eps - x0`.
    pub fn velocity(&self) -> Tensor {
        target_velocity(&self.x0, &self.eps)
    }
}

pub fn target_velocity(x0: &Tensor, eps: &Tensor) -> Tensor {
    let mut v = eps.clone();
    v.axpy(-1.0, x0);
    v
}

pub fn noisy_sample(x0: &Tensor, eps: &Tensor, t: f64) -> Result<NoisySample> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0, 1]")));
    }
    let data = x0.data().iter().zip(eps.data()).map(|(a, e)| (1.0 - t) * a + t * e).collect();
    Ok(NoisySample { x_t: Tensor::from_vec(x0.shape(), data)?, t, eps: eps.clone(), x0: x0.clone() })
}

/// Training timestep density.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TimestepDist {
    #[default]
    Uniform,
    /// `sigmoid(N(mean, std²))`
    LogitNormal { mean: f64, std: f64 },
}

impl TimestepDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimestepDist::Uniform => rng.random::<f64>(),
            TimestepDist::LogitNormal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                1.0 / (1.0 + (-(mean + std * z)).exp())
            }
        }
    }
}

pub fn sample_t<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    TimestepDist::Uniform.sample(rng)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("sized buffer")
}

/// Mean squared velocity error and its gradient with respect to `v_hat`.
pub fn fm_loss(v_hat: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<(f64, Tensor)> {
    if v_hat.shape() != x0.shape() || x0.shape() != eps.shape() {
        return Err(Error::Shape("fm_loss operands differ in shape".into()));
    }
    let n = v_hat.len() as f64;
    let diff: Vec<f64> = v_hat
        .data()
        .iter()
        .zip(x0.data().iter().zip(eps.data()))
        .map(|(vh, (x, e))| vh - (e - x))
        .collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = Tensor::from_vec(v_hat.shape(), diff.iter().map(|d| 2.0 * d / n).collect())?;
    Ok((value, grad))
}

/// A scalar loss with optional parameter gradients.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: Option<ModelParams>,
}

impl LossValue {
    pub fn check_finite(&self, what: &str) -> Result<()> {
        let grads_ok = self.grads.as_ref().is_none_or(|g| g.is_finite());
        if !self.value.is_finite() || !grads_ok {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }
}

/// `‖Φ(gray) − Φ′(gt)‖²`; gradients reach `Φ` only, and only if `Prompt`
/// is trainable.
pub fn distill_loss(p: &ModelParams, gray_img: &Tensor, gt_img: &Tensor, trainable: GroupSet) -> Result<LossValue> {
    let (student, trace) = p.prompt.encode_traced(gray_img)?;
    let teacher = p.prompt_ref.encode(gt_img)?;
    let diff: Vec<f64> = student.iter().zip(&teacher).map(|(s, t)| s - t).collect();
    let value = diff.iter().map(|d| d * d).sum();
    let grads = trainable.contains(Group::Prompt).then(|| {
        let mut g = p.zeros_like();
        let d_emb: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        p.prompt.backward(&trace, &d_emb, &mut g.prompt);
        g
    });
    Ok(LossValue { value, grads })
}

/// `fm + alpha · distill`, gradients combined linearly.
pub fn combined_loss(fm: LossValue, distill: LossValue, alpha: f64) -> LossValue {
    let grads = match (fm.grads, distill.grads) {
        (Some(mut g), Some(d)) => {
            g.axpy_groups(alpha, &d, GroupSet::all());
            Some(g)
        }
        (Some(g), None) => Some(g),
        (None, Some(mut d)) => {
            for (_, _, t) in d.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= alpha);
            }
            Some(d)
        }
        (None, None) => None,
    };
    LossValue { value: fm.value + alpha * distill.value, grads }
}

/// Where the FiLM prompt embedding comes from.
#[derive(Debug, Clone, Copy)]
pub enum PromptSource<'a> {
    /// Frozen teacher `Φ′` on the color ground truth.
    Reference(&'a Tensor),
    /// Trainable `Φ` on the grayscale condition (replicated to 3 channels).
    Student(&'a Tensor),
    Fixed(&'a [f64]),
}

/// One flow-matching evaluation of the full model.
#[derive(Debug, Clone, Copy)]
pub struct FmCase<'a> {
    pub x0: &'a Tensor,
    pub eps: &'a Tensor,
    pub t: f64,
    pub cond: &'a Tensor,
    pub prompt: PromptSource<'a>,
    pub control_scale: f64,
    pub use_lora: bool,
}

/// Flow-matching loss of the model on one case, with gradients for the
/// trainable groups (including the encoder that produced the prompt).
pub fn model_fm_loss(p: &ModelParams, case: &FmCase, trainable: GroupSet) -> Result<LossValue> {
    let (prompt, enc_trace, enc_group) = match case.prompt {
        PromptSource::Reference(img) => {
            let (e, tr) = p.prompt_ref.encode_traced(img)?;
            (e, Some(tr), Group::PromptRef)
        }
        PromptSource::Student(img) => {
            let (e, tr) = p.prompt.encode_traced(img)?;
            (e, Some(tr), Group::Prompt)
        }
        PromptSource::Fixed(e) => (e.to_vec(), None, Group::Prompt),
    };
    let ns = noisy_sample(case.x0, case.eps, case.t)?;
    let inputs = NetInputs {
        x_t: &ns.x_t,
        t: case.t,
        cond: case.cond,
        prompt: &prompt,
        control_scale: case.control_scale,
        use_lora: case.use_lora,
    };
    let (v_hat, trace) = micronet::forward_traced(p, &inputs)?;
    let (value, d_v) = fm_loss(&v_hat, case.x0, case.eps)?;
    if trainable.is_empty() {
        return Ok(LossValue { value, grads: None });
    }
    let mut g = p.zeros_like();
    let ig = micronet::backward(p, &trace, &d_v, trainable, &mut g)?;
    if let Some(tr) = enc_trace.filter(|_| trainable.contains(enc_group)) {
        match enc_group {
            Group::PromptRef => p.prompt_ref.backward(&tr, &ig.prompt, &mut g.prompt_ref),
            _ => p.prompt.backward(&tr, &ig.prompt, &mut g.prompt),
        }
    }
    Ok(LossValue { value, grads: Some(g) })
}

/// A time-dependent velocity field `v(x, t)`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Tensor> VelocityField for F {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self(x, t))
    }
}

/// The network with its conditioning fixed.
pub struct ModelField<'a> {
    pub params: &'a ModelParams,
    pub cond: &'a Tensor,
    pub prompt: &'a [f64],
    pub control_scale: f64,
    pub use_lora: bool,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        micronet::forward(
            self.params,
            &NetInputs {
                x_t: x,
                t,
                cond: self.cond,
                prompt: self.prompt,
                control_scale: self.control_scale,
                use_lora: self.use_lora,
            },
        )
    }
}

/// Explicit Euler from `t = 1` to `t = 0` on the grid `t_k = k / steps`,
/// without clamping.
pub fn euler_integrate(field: &dyn VelocityField, noise: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = noise.clone();
    for k in (1..=steps).rev() {
        let v = field.velocity(&x, k as f64 / steps as f64)?;
        x.axpy(-dt, &v);
    }
    Ok(x)
}

/// [`euler_integrate`] followed by a clamp into `[0, 1]`.
pub fn euler_sample(field: &dyn VelocityField, noise: &Tensor, steps: usize) -> Result<Tensor> {
    let mut x = euler_integrate(field, noise, steps)?;
    x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(x)
}

pub const DEFAULT_STEPS: usize = 8;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_GUIDANCE: f64 = 3.5;
pub const DEFAULT_CONTROL_SCALE: f64 = 1.0;

/// Inference settings. `guidance` is carried as run metadata only; the
/// network has no guidance input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    pub control_scale: f64,
    pub guidance: f64,
    pub use_lora: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            seed: DEFAULT_SEED,
            control_scale: DEFAULT_CONTROL_SCALE,
            guidance: DEFAULT_GUIDANCE,
            use_lora: true,
        }
    }
}

/// Colorizes a condition image (any channel count; its grayscale is used)
/// at the model's native size. The prompt is `Φ(gray)`.
pub fn colorize(p: &ModelParams, condition: &Image8, opts: &SampleOptions) -> Result<Image8> {
    let s = p.cfg.image_size;
    if condition.width() != s || condition.height() != s {
        return Err(Error::Shape(format!(
            "condition is {}x{}, model expects {s}x{s}",
            condition.width(),
            condition.height()
        )));
    }
    let cond = gray_tensor(condition);
    let prompt = p.prompt.encode(&rgb_tensor(&crate::color_math::rgb_to_gray(condition)))?;
    let noise = standard_normal(&mut stream_from_seed(opts.seed), &[3, s, s]);
    let field = ModelField { params: p, cond: &cond, prompt: &prompt, control_scale: opts.control_scale, use_lora: opts.use_lora };
    let x = euler_sample(&field, &noise, opts.steps)?;
    Ok(from_float(&x.to_image_clamped()?))
}
