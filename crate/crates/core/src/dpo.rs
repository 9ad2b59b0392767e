//! Preference optimization for the flow model: the velocity-form DPO
//! objective, the SFT baseline and the two-stage schedule.

use std::fmt;
use std::str::FromStr;

use crate::augment::AugRange;
use crate::error::{Error, Result};
use crate::flow::{fm_loss, noisy_sample, target_velocity, LossValue};
use crate::micronet::tensor::sigmoid;
use crate::micronet::{self, gray_tensor, rgb_tensor, softplus, Group, GroupSet, ModelParams, NetInputs, Tensor};
use crate::pref_data::Triplet;

pub const DEFAULT_BETA: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaMode {
    #[default]
    Constant,
    /// `β (1 − t)²`
    Quadratic,
}

impl FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(BetaMode::Constant),
            "quadratic" => Ok(BetaMode::Quadratic),
            _ => Err(Error::InvalidArgument(format!("unknown beta mode {s:?}"))),
        }
    }
}

impl fmt::Display for BetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BetaMode::Constant => "constant",
            BetaMode::Quadratic => "quadratic",
        })
    }
}

/// Which model serves as the frozen reference in the second stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefPolicy {
    /// The pre-preference model throughout.
    Fixed,
    /// The merged result of stage one.
    #[default]
    Rebase,
}

impl FromStr for RefPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(RefPolicy::Fixed),
            "rebase" => Ok(RefPolicy::Rebase),
            _ => Err(Error::InvalidArgument(format!("unknown reference policy {s:?}"))),
        }
    }
}

impl fmt::Display for RefPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefPolicy::Fixed => "fixed",
            RefPolicy::Rebase => "rebase",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Fm,
    FmDistill { alpha: f64 },
    Dpo,
    Sft,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Fm => f.write_str("fm"),
            LossKind::FmDistill { alpha } => write!(f, "fm+{alpha}*distill"),
            LossKind::Dpo => f.write_str("dpo"),
            LossKind::Sft => f.write_str("sft"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub trainable: GroupSet,
    pub loss: LossKind,
    pub range: AugRange,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trainable.is_empty() {
            return Err(Error::InvalidArgument("stage trains no parameter group".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoStage {
    pub range: AugRange,
    pub learning_rate: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub beta_mode: BetaMode,
    pub lora_rank: usize,
    pub stage1: DpoStage,
    pub stage2: DpoStage,
    pub batch_size: usize,
    pub ref_policy: RefPolicy,
    /// Draw one noise vector for both branches instead of two.
    pub shared_noise: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            beta_mode: BetaMode::Constant,
            lora_rank: 4,
            stage1: DpoStage { range: AugRange::STAGE1, learning_rate: 4e-5, epochs: 2 },
            stage2: DpoStage { range: AugRange::STAGE2, learning_rate: 1e-5, epochs: 2 },
            batch_size: 8,
            ref_policy: RefPolicy::Rebase,
            shared_noise: false,
        }
    }
}

impl DpoConfig {
    /// The single-stage ablation: the union of both ranges, all epochs at the
    /// first-stage learning rate.
    pub fn one_stage() -> Self {
        let d = Self::default();
        let range = AugRange::new(d.stage1.range.lo(), d.stage2.range.hi()).expect("valid range");
        let only = DpoStage { range, learning_rate: d.stage1.learning_rate, epochs: d.stage1.epochs + d.stage2.epochs };
        Self { stage1: only, stage2: only, ..d }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        if self.lora_rank == 0 {
            return Err(Error::InvalidArgument("lora rank must be positive".into()));
        }
        let (a, b) = (self.stage1.range, self.stage2.range);
        if a.lo() > b.lo() || a.hi() > b.hi() {
            return Err(Error::InvalidArgument(format!("stage 2 range {b} is not milder than stage 1 range {a}")));
        }
        Ok(())
    }

    pub fn is_single_stage(&self) -> bool {
        self.stage1 == self.stage2
    }
}

pub fn beta_t(cfg: &DpoConfig, t: f64) -> f64 {
    match cfg.beta_mode {
        BetaMode::Constant => cfg.beta,
        BetaMode::Quadratic => cfg.beta * (1.0 - t) * (1.0 - t),
    }
}

/// Two lora-only stages, or one when the configured stages coincide.
pub fn pro_dpo_schedule(cfg: &DpoConfig) -> Result<Vec<StageConfig>> {
    cfg.validate()?;
    let stage = |s: &DpoStage| StageConfig {
        trainable: GroupSet::of(&[Group::Lora]),
        loss: LossKind::Dpo,
        range: s.range,
        learning_rate: s.learning_rate,
        epochs: s.epochs,
        batch_size: cfg.batch_size,
    };
    if cfg.is_single_stage() {
        Ok(vec![stage(&cfg.stage1)])
    } else {
        Ok(vec![stage(&cfg.stage1), stage(&cfg.stage2)])
    }
}

/// Scalar core of the objective from the four squared errors.
/// Returns `(loss, z)` with `loss = softplus(-z)`.
pub fn dpo_objective(ew_theta: f64, ew_ref: f64, el_theta: f64, el_ref: f64, beta_t: f64) -> (f64, f64) {
    let z = -0.5 * beta_t * ((ew_theta - ew_ref) - (el_theta - el_ref));
    (softplus(-z), z)
}

/// Tensor views of a triplet.
#[derive(Debug, Clone)]
pub struct PairTensors {
    pub cond: Tensor,
    pub winner: Tensor,
    pub loser: Tensor,
    /// Grayscale condition replicated to three channels for the encoder.
    pub cond_rgb: Tensor,
}

impl PairTensors {
    pub fn from_triplet(t: &Triplet) -> Result<Self> {
        t.check()?;
        Ok(Self {
            cond: gray_tensor(&t.condition),
            winner: rgb_tensor(&t.winner),
            loser: rgb_tensor(&t.loser),
            cond_rgb: rgb_tensor(&t.condition.to_rgb()),
        })
    }
}

/// One preference evaluation: shared `t`, per-branch noise, one prompt.
#[derive(Debug, Clone, Copy)]
pub struct DpoCase<'a> {
    pub pair: &'a PairTensors,
    pub t: f64,
    pub eps_w: &'a Tensor,
    pub eps_l: &'a Tensor,
    pub prompt: &'a [f64],
    pub control_scale: f64,
}

#[derive(Debug, Clone)]
pub struct DpoLoss {
    pub loss: LossValue,
    pub z: f64,
    /// `[winner policy, winner ref, loser policy, loser ref]` squared errors.
    pub errors: [f64; 4],
}

fn sq_err(v: &Tensor, v_hat: &Tensor) -> f64 {
    v.data().iter().zip(v_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn inputs<'a>(case: &'a DpoCase, x_t: &'a Tensor, use_lora: bool) -> NetInputs<'a> {
    NetInputs { x_t, t: case.t, cond: &case.pair.cond, prompt: case.prompt, control_scale: case.control_scale, use_lora }
}

/// Velocity-form DPO loss. The reference is never differentiated; policy
/// gradients land in `trainable` only.
pub fn dpo_loss(
    policy: &ModelParams,
    reference: &ModelParams,
    case: &DpoCase,
    cfg: &DpoConfig,
    trainable: GroupSet,
) -> Result<DpoLoss> {
    if policy.cfg != reference.cfg {
        return Err(Error::Shape("policy and reference configs differ".into()));
    }
    let p = case.pair;
    let nw = noisy_sample(&p.winner, case.eps_w, case.t)?;
    let nl = noisy_sample(&p.loser, case.eps_l, case.t)?;
    let vw = target_velocity(&p.winner, case.eps_w);
    let vl = target_velocity(&p.loser, case.eps_l);

    let ref_lora = reference.lora.is_some();
    let rw = micronet::forward(reference, &inputs(case, &nw.x_t, ref_lora))?;
    let rl = micronet::forward(reference, &inputs(case, &nl.x_t, ref_lora))?;
    let (pw, tw) = micronet::forward_traced(policy, &inputs(case, &nw.x_t, true))?;
    let (pl, tl) = micronet::forward_traced(policy, &inputs(case, &nl.x_t, true))?;

    let errors = [sq_err(&vw, &pw), sq_err(&vw, &rw), sq_err(&vl, &pl), sq_err(&vl, &rl)];
    let bt = beta_t(cfg, case.t);
    let (value, z) = dpo_objective(errors[0], errors[1], errors[2], errors[3], bt);
    if !value.is_finite() || !z.is_finite() {
        return Err(Error::NonFinite("dpo objective".into()));
    }

    let grads = if trainable.is_empty() {
        None
    } else {
        // d loss / d z = -sigmoid(-z); d z / d ew = -bt/2, d z / d el = +bt/2
        let s = sigmoid(-z);
        let dw: Vec<f64> = pw.data().iter().zip(vw.data()).map(|(a, b)| s * bt * (a - b)).collect();
        let dl: Vec<f64> = pl.data().iter().zip(vl.data()).map(|(a, b)| -s * bt * (a - b)).collect();
        let mut g = policy.zeros_like();
        micronet::backward(policy, &tw, &Tensor::from_vec(pw.shape(), dw)?, trainable, &mut g)?;
        micronet::backward(policy, &tl, &Tensor::from_vec(pl.shape(), dl)?, trainable, &mut g)?;
        Some(g)
    };
    let loss = LossValue { value, grads };
    loss.check_finite("dpo gradients")?;
    Ok(DpoLoss { loss, z, errors })
}

/// Flow-matching on the winner only, conditioned on the pair's condition.
pub fn sft_loss(
    policy: &ModelParams,
    case: &DpoCase,
    trainable: GroupSet,
) -> Result<LossValue> {
    let p = case.pair;
    let nw = noisy_sample(&p.winner, case.eps_w, case.t)?;
    let (v_hat, trace) = micronet::forward_traced(policy, &inputs(case, &nw.x_t, true))?;
    let (value, d_v) = fm_loss(&v_hat, &p.winner, case.eps_w)?;
    let grads = if trainable.is_empty() {
        None
    } else {
        let mut g = policy.zeros_like();
        micronet::backward(policy, &trace, &d_v, trainable, &mut g)?;
        Some(g)
    };
    Ok(LossValue { value, grads })
}
