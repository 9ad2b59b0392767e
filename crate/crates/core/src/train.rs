//! Stage orchestration: the optimizer, the four training phases, resumable
//! train state and the run log.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use crate::augment::AugRange;
use crate::color_math::Image8;
use crate::dpo::{dpo_loss, pro_dpo_schedule, sft_loss, DpoCase, DpoConfig, LossKind, PairTensors, RefPolicy};
use crate::error::{Error, Result};
use crate::flow::{combined_loss, distill_loss, model_fm_loss, standard_normal, FmCase, LossValue, PromptSource, TimestepDist};
use crate::micronet::checkpoint::{from_bytes, to_bytes};
use crate::micronet::{gray_tensor, rgb_tensor, write_atomic, Group, GroupSet, ModelParams, Tensor};
use crate::pref_data::{build_triplet, Triplet};
use crate::rng::{SeedTree, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Base,
    Structure,
    BasicColor,
    ProDpo,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Base, Stage::Structure, Stage::BasicColor, Stage::ProDpo];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Structure => "structure",
            Stage::BasicColor => "basic-color",
            Stage::ProDpo => "pro-dpo",
        }
    }

    /// The stage whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Base => None,
            Stage::Structure => Some(Stage::Base),
            Stage::BasicColor => Some(Stage::Structure),
            Stage::ProDpo => Some(Stage::BasicColor),
        }
    }

    pub fn trainable(self) -> GroupSet {
        match self {
            Stage::Base => GroupSet::of(&[Group::Trunk, Group::PromptRef]),
            Stage::Structure => GroupSet::of(&[Group::Control]),
            Stage::BasicColor => GroupSet::of(&[Group::Prompt]),
            Stage::ProDpo => GroupSet::of(&[Group::Lora]),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s || st.name().replace('-', "_") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Variants of the preference stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DpoMode {
    #[default]
    Progressive,
    OneStage,
    Sft,
}

impl DpoMode {
    pub fn name(self) -> &'static str {
        match self {
            DpoMode::Progressive => "pro-dpo",
            DpoMode::OneStage => "one-stage-dpo",
            DpoMode::Sft => "sft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First and second moments shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(p: &ModelParams) -> Self {
        Self { step: 0, m: p.zeros_like(), v: p.zeros_like() }
    }
}

/// One bias-corrected adaptive-moment update of the `groups` tensors.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    hyper: &AdamHyper,
    groups: GroupSet,
) -> Result<()> {
    for (g, name, t) in grads.tensors() {
        if groups.contains(g) && !t.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let k = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(k);
    let c2 = 1.0 - hyper.beta2.powi(k);
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((grp, _, p), (_, _, g)), (_, _, m)), (_, _, v)) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        if !groups.contains(grp) {
            continue;
        }
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub loss: LossKind,
    pub trainable: GroupSet,
    pub adam: AdamHyper,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub timestep: TimestepDist,
    pub control_scale: f64,
    /// Save resumable state every this many optimizer steps.
    pub checkpoint_every: Option<usize>,
}

pub const DEFAULT_ALPHA: f64 = 0.1;

impl TrainConfig {
    /// Desk-scale defaults for each stage.
    pub fn for_stage(stage: Stage, seed: u64) -> Self {
        let (loss, lr, epochs, batch) = match stage {
            Stage::Base => (LossKind::Fm, 3e-3, 40, 16),
            Stage::Structure => (LossKind::Fm, 2e-3, 30, 16),
            Stage::BasicColor => (LossKind::FmDistill { alpha: DEFAULT_ALPHA }, 1e-3, 12, 16),
            Stage::ProDpo => (LossKind::Dpo, 4e-5, 2, 8),
        };
        Self {
            stage,
            loss,
            trainable: stage.trainable(),
            adam: AdamHyper::with_lr(lr),
            batch_size: batch,
            epochs,
            seed,
            timestep: TimestepDist::Uniform,
            control_scale: if stage == Stage::Base { 0.0 } else { 1.0 },
            checkpoint_every: None,
        }
    }

    pub fn frozen(&self) -> GroupSet {
        GroupSet::of(&Group::ALL.into_iter().filter(|g| !self.trainable.contains(*g)).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::FmDistill { alpha } = self.loss {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidArgument(format!("alpha must be non-negative, got {alpha}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.adam.lr)));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidArgument("checkpoint interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Stage { stage: String, phase: usize, loss: String, lr: f64, epochs: usize, batch_size: usize, items: usize },
    Step { stage: String, phase: usize, epoch: usize, step: u64, loss: f64 },
    Epoch { stage: String, phase: usize, epoch: usize, train_loss: f64, aux_loss: Option<f64>, val_loss: Option<f64> },
    Done { stage: String, wall_seconds: f64 },
}

/// Append-only training log; optionally mirrored to a line-delimited file.
#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    sink: Option<PathBuf>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Self {
        Self { records: Vec::new(), sink: Some(path.to_path_buf()) }
    }

    pub fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(path) = &self.sink {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Everything needed to continue an interrupted stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
    /// Batches already taken in `epoch`.
    pub batch: usize,
}

const STATE_MAGIC: &[u8; 4] = b"CFTS";

impl TrainState {
    pub fn fresh(params: ModelParams) -> Self {
        let adam = AdamState::new(&params);
        Self { params, adam, epoch: 0, batch: 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = STATE_MAGIC.to_vec();
        for v in [self.epoch as u64, self.batch as u64, self.adam.step] {
            buf.write_u64::<LittleEndian>(v).expect("vec write");
        }
        for p in [&self.params, &self.adam.m, &self.adam.v] {
            let b = to_bytes(p);
            buf.write_u64::<LittleEndian>(b.len() as u64).expect("vec write");
            buf.extend_from_slice(&b);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("train state: {m}"));
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != STATE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut head = [0u64; 3];
        for h in head.iter_mut() {
            *h = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))?;
        }
        let mut blob = || -> Result<ModelParams> {
            let n = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
            let start = cur.position() as usize;
            let end = start.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            cur.set_position(end as u64);
            from_bytes(&bytes[start..end])
        };
        let (params, m, v) = (blob()?, blob()?, blob()?);
        Ok(Self { params, adam: AdamState { step: head[2], m, v }, epoch: head[0] as usize, batch: head[1] as usize })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Where resumable state goes and, for tests, when to stop early.
#[derive(Debug, Clone, Default)]
pub struct Checkpointing {
    pub path: Option<PathBuf>,
    pub stop_after_steps: Option<u64>,
}

/// Outcome of one optimization phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub stage: String,
    pub phase: usize,
    pub steps: u64,
    pub epoch_train_loss: Vec<f64>,
    /// Auxiliary component per epoch (the distillation term where present).
    pub epoch_aux_loss: Vec<f64>,
    /// Validation loss before training, then after each epoch.
    pub val_loss: Vec<f64>,
    /// True when stopped early by [`Checkpointing::stop_after_steps`].
    pub interrupted: bool,
}

struct ItemLoss {
    loss: LossValue,
    aux: Option<f64>,
}

fn fixed_order_mean(parts: &[ModelParams], template: &ModelParams, groups: GroupSet) -> ModelParams {
    let mut g = template.zeros_like();
    let w = 1.0 / parts.len() as f64;
    for p in parts {
        g.axpy_groups(w, p, groups);
    }
    g
}

fn permutation(rng: &mut StreamRng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Shared minibatch loop. Per-item randomness is keyed by (epoch, item) so
/// a resumed run sees exactly the draws of an uninterrupted one.
#[allow(clippy::too_many_arguments)]
fn optimize<D>(
    state: &mut TrainState,
    items: &[D],
    val: &[D],
    cfg: &TrainConfig,
    phase: usize,
    tree: &SeedTree,
    eval: &dyn Fn(&ModelParams, &D, &mut StreamRng, GroupSet) -> Result<ItemLoss>,
    log: &mut RunLog,
    ckpt: &Checkpointing,
) -> Result<PhaseReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument(format!("{} stage has no training items", cfg.stage)));
    }
    let stage = cfg.stage.name().to_string();
    let validate = |p: &ModelParams| -> Result<f64> {
        let mut total = 0.0;
        for (i, item) in val.iter().enumerate() {
            let l = eval(p, item, &mut tree.stream(&format!("val/{i}")), GroupSet::empty())?;
            l.loss.check_finite("validation loss")?;
            total += l.loss.value;
        }
        Ok(total / val.len().max(1) as f64)
    };
    let mut report = PhaseReport {
        stage: stage.clone(),
        phase,
        steps: 0,
        epoch_train_loss: Vec::new(),
        epoch_aux_loss: Vec::new(),
        val_loss: Vec::new(),
        interrupted: false,
    };
    log.push(LogRecord::Stage {
        stage: stage.clone(),
        phase,
        loss: cfg.loss.to_string(),
        lr: cfg.adam.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        items: items.len(),
    })?;
    if state.epoch == 0 && state.batch == 0 && !val.is_empty() {
        report.val_loss.push(validate(&state.params)?);
    }
    let n_batches = items.len().div_ceil(cfg.batch_size);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let order = permutation(&mut tree.stream(&format!("order/{epoch}")), items.len());
        let (mut sum, mut aux_sum, mut count) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate().skip(state.batch) {
            let mut parts = Vec::with_capacity(chunk.len());
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut rng = tree.stream(&format!("draw/{epoch}/{i}"));
                let l = eval(&state.params, &items[i], &mut rng, cfg.trainable)?;
                l.loss.check_finite(&format!("{stage} loss"))?;
                batch_loss += l.loss.value;
                aux_sum += l.aux.unwrap_or(0.0);
                parts.push(l.loss.grads.ok_or_else(|| Error::InvalidArgument("loss produced no gradients".into()))?);
            }
            sum += batch_loss;
            count += chunk.len();
            let g = fixed_order_mean(&parts, &state.params, cfg.trainable);
            adam_step(&mut state.params, &g, &mut state.adam, &cfg.adam, cfg.trainable)?;
            state.batch = b + 1;
            report.steps += 1;
            log.push(LogRecord::Step {
                stage: stage.clone(),
                phase,
                epoch,
                step: state.adam.step,
                loss: batch_loss / chunk.len() as f64,
            })?;
            if state.batch == n_batches {
                state.epoch += 1;
                state.batch = 0;
            }
            if let (Some(path), Some(every)) = (&ckpt.path, cfg.checkpoint_every) {
                if state.adam.step.is_multiple_of(every as u64) {
                    state.save(path)?;
                }
            }
            if ckpt.stop_after_steps.is_some_and(|s| state.adam.step >= s) {
                if let Some(path) = &ckpt.path {
                    state.save(path)?;
                }
                report.interrupted = true;
                return Ok(report);
            }
        }
        if count > 0 {
            report.epoch_train_loss.push(sum / count as f64);
            report.epoch_aux_loss.push(aux_sum / count as f64);
        }
        let v = if val.is_empty() { None } else { Some(validate(&state.params)?) };
        if let Some(v) = v {
            report.val_loss.push(v);
        }
        log.push(LogRecord::Epoch {
            stage: stage.clone(),
            phase,
            epoch,
            train_loss: if count > 0 { sum / count as f64 } else { f64::NAN },
            aux_loss: matches!(cfg.loss, LossKind::FmDistill { .. }).then(|| aux_sum / count.max(1) as f64),
            val_loss: v,
        })?;
    }
    Ok(report)
}

/// Precomputed tensors of one ground-truth image.
#[derive(Debug, Clone)]
pub struct ImageItem {
    pub gt: Tensor,
    pub cond: Tensor,
    pub gray_rgb: Tensor,
}

impl ImageItem {
    pub fn new(img: &Image8) -> Result<Self> {
        img.expect_rgb("training image")?;
        let gray = crate::color_math::rgb_to_gray(img);
        Ok(Self { gt: rgb_tensor(img), cond: gray_tensor(&gray), gray_rgb: rgb_tensor(&gray.to_rgb()) })
    }
}

pub fn image_items(images: &[Image8], cfg: &crate::micronet::NetConfig) -> Result<Vec<ImageItem>> {
    images
        .iter()
        .map(|img| {
            if img.width() != cfg.image_size || img.height() != cfg.image_size {
                return Err(Error::Shape(format!(
                    "training image is {}x{}, network expects {s}x{s}",
                    img.width(),
                    img.height(),
                    s = cfg.image_size
                )));
            }
            ImageItem::new(img)
        })
        .collect()
}

fn image_eval(cfg: &TrainConfig) -> impl Fn(&ModelParams, &ImageItem, &mut StreamRng, GroupSet) -> Result<ItemLoss> + '_ {
    move |p, item, rng, trainable| {
        let t = cfg.timestep.sample(rng);
        let eps = standard_normal(rng, item.gt.shape());
        let prompt = match cfg.stage {
            Stage::BasicColor => PromptSource::Student(&item.gray_rgb),
            _ => PromptSource::Reference(&item.gt),
        };
        let case = FmCase {
            x0: &item.gt,
            eps: &eps,
            t,
            cond: &item.cond,
            prompt,
            control_scale: cfg.control_scale,
            use_lora: p.lora.is_some(),
        };
        let fm = model_fm_loss(p, &case, trainable)?;
        match cfg.loss {
            LossKind::FmDistill { alpha } => {
                let d = distill_loss(p, &item.gray_rgb, &item.gt, trainable)?;
                let aux = Some(d.value);
                Ok(ItemLoss { loss: combined_loss(fm, d, alpha), aux })
            }
            _ => Ok(ItemLoss { loss: fm, aux: None }),
        }
    }
}

fn run_image_stage(
    state: &mut TrainState,
    train: &[ImageItem],
    val: &[ImageItem],
    cfg: &TrainConfig,
    log: &mut RunLog,
    ckpt: &Checkpointing,
) -> Result<PhaseReport> {
    let tree = SeedTree::new(cfg.seed).child(cfg.stage.name());
    let eval = image_eval(cfg);
    let started = Instant::now();
    let r = optimize(state, train, val, cfg, 0, &tree, &eval, log, ckpt)?;
    if !r.interrupted {
        log.push(LogRecord::Done { stage: cfg.stage.name().into(), wall_seconds: started.elapsed().as_secs_f64() })?;
    }
    Ok(r)
}

/// Trunk and teacher encoder trained jointly from scratch, no condition.
pub fn run_stage_base(
    state: &mut TrainState,
    train: &[ImageItem],
    val: &[ImageItem],
    cfg: &TrainConfig,
    log: &mut RunLog,
    ckpt: &Checkpointing,
) -> Result<PhaseReport> {
    expect_stage(cfg, Stage::Base)?;
    run_image_stage(state, train, val, cfg, log, ckpt)
}

/// Control branch only, seeded from the trained trunk.
pub fn run_stage_structure(
    state: &mut TrainState,
    train: &[ImageItem],
    val: &[ImageItem],
    cfg: &TrainConfig,
    log: &mut RunLog,
    ckpt: &Checkpointing,
) -> Result<PhaseReport> {
    expect_stage(cfg, Stage::Structure)?;
    if is_fresh(state) {
        state.params.reinit_control_from_trunk();
    }
    run_image_stage(state, train, val, cfg, log, ckpt)
}

/// Student encoder only, initialized from the teacher.
pub fn run_stage_basic_color(
    state: &mut TrainState,
    train: &[ImageItem],
    val: &[ImageItem],
    cfg: &TrainConfig,
    log: &mut RunLog,
    ckpt: &Checkpointing,
) -> Result<PhaseReport> {
    expect_stage(cfg, Stage::BasicColor)?;
    if is_fresh(state) {
        state.params.prompt = state.params.prompt_ref.clone();
    }
    run_image_stage(state, train, val, cfg, log, ckpt)
}

fn is_fresh(state: &TrainState) -> bool {
    state.epoch == 0 && state.batch == 0 && state.adam.step == 0
}

fn expect_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::InvalidArgument(format!("config is for stage {}, expected {stage}", cfg.stage)));
    }
    Ok(())
}

/// Preference pairs with the frozen prompt embedding of their condition.
#[derive(Debug, Clone)]
pub struct PairItem {
    pub pair: PairTensors,
    pub prompt: Vec<f64>,
}

/// Preference data for each schedule stage.
#[derive(Debug, Clone)]
pub enum PairSource {
    /// Triplets are synthesized from these images with each stage's range.
    Images { train: Vec<Image8>, val: Vec<Image8> },
    /// One ready-made `(train, val)` triplet set per stage.
    Triplets(Vec<(Vec<Triplet>, Vec<Triplet>)>),
}

fn synth_triplets(images: &[Image8], range: AugRange, tree: &SeedTree, tag: &str) -> Result<Vec<Triplet>> {
    images.iter().enumerate().map(|(i, img)| build_triplet(img, tree.seed(&format!("{tag}/{i}")), range)).collect()
}

impl PairSource {
    fn stage_triplets(&self, phase: usize, range: AugRange, tree: &SeedTree) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
        match self {
            PairSource::Images { train, val } => {
                let tree = tree.child(&format!("pairs/{range}"));
                Ok((synth_triplets(train, range, &tree, "train")?, synth_triplets(val, range, &tree, "val")?))
            }
            PairSource::Triplets(sets) => sets
                .get(phase)
                .or_else(|| sets.last())
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("no preference triplets supplied".into())),
        }
    }
}

fn pair_items(p: &ModelParams, triplets: &[Triplet]) -> Result<Vec<PairItem>> {
    triplets
        .iter()
        .map(|t| {
            let pair = PairTensors::from_triplet(t)?;
            let prompt = p.prompt.encode(&pair.cond_rgb)?;
            Ok(PairItem { pair, prompt })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpoReport {
    pub mode: String,
    pub phases: Vec<PhaseReport>,
    /// Loss of the first training batch, before any update.
    pub initial_batch_loss: f64,
}

/// Adapter-only preference training over the schedule, then a merge.
/// `params` must hold the pre-preference model; on return it holds the
/// merged result.
pub fn run_stage_pro_dpo(
    params: &mut ModelParams,
    source: &PairSource,
    dcfg: &DpoConfig,
    mode: DpoMode,
    base: &TrainConfig,
    log: &mut RunLog,
) -> Result<DpoReport> {
    expect_stage(base, Stage::ProDpo)?;
    let dcfg = match mode {
        DpoMode::OneStage => DpoConfig { beta: dcfg.beta, beta_mode: dcfg.beta_mode, ..DpoConfig::one_stage() },
        _ => dcfg.clone(),
    };
    if dcfg.lora_rank != params.cfg.lora_rank {
        return Err(Error::InvalidArgument(format!(
            "dpo lora rank {} differs from the network's {}",
            dcfg.lora_rank, params.cfg.lora_rank
        )));
    }
    let tree = SeedTree::new(base.seed).child(mode.name());
    let mut policy = params.merge_lora();
    policy.reset_lora(tree.seed("lora"));
    let mut reference = policy.clone();
    let schedule = pro_dpo_schedule(&dcfg)?;
    let mut phases = Vec::new();
    let mut initial_batch_loss = f64::NAN;
    for (k, st) in schedule.iter().enumerate() {
        let cfg = TrainConfig {
            loss: if mode == DpoMode::Sft { LossKind::Sft } else { LossKind::Dpo },
            trainable: st.trainable,
            adam: AdamHyper { lr: st.learning_rate, ..base.adam },
            epochs: st.epochs,
            batch_size: st.batch_size,
            checkpoint_every: None,
            ..base.clone()
        };
        let phase_tree = tree.child(&format!("phase{k}"));
        let (train_t, val_t) = source.stage_triplets(k, st.range, &phase_tree)?;
        let train = pair_items(&policy, &train_t)?;
        let val = pair_items(&policy, &val_t)?;
        let r = &reference;
        let eval = |p: &ModelParams, item: &PairItem, rng: &mut StreamRng, trainable: GroupSet| -> Result<ItemLoss> {
            let t = cfg.timestep.sample(rng);
            let shape = item.pair.winner.shape().to_vec();
            let eps_w = standard_normal(rng, &shape);
            let eps_l = if dcfg.shared_noise { eps_w.clone() } else { standard_normal(rng, &shape) };
            let case = DpoCase {
                pair: &item.pair,
                t,
                eps_w: &eps_w,
                eps_l: &eps_l,
                prompt: &item.prompt,
                control_scale: cfg.control_scale,
            };
            match cfg.loss {
                LossKind::Sft => Ok(ItemLoss { loss: sft_loss(p, &case, trainable)?, aux: None }),
                _ => {
                    let d = dpo_loss(p, r, &case, &dcfg, trainable)?;
                    Ok(ItemLoss { loss: d.loss, aux: Some(d.z) })
                }
            }
        };
        if k == 0 {
            let n = cfg.batch_size.min(train.len());
            let order = permutation(&mut phase_tree.stream("order/0"), train.len());
            let mut total = 0.0;
            for &i in &order[..n] {
                total += eval(&policy, &train[i], &mut phase_tree.stream(&format!("draw/0/{i}")), GroupSet::empty())?.loss.value;
            }
            initial_batch_loss = total / n.max(1) as f64;
        }
        let mut state = TrainState::fresh(policy.clone());
        let report = optimize(&mut state, &train, &val, &cfg, k, &phase_tree, &eval, log, &Checkpointing::default())?;
        policy = state.params;
        phases.push(report);
        if dcfg.ref_policy == RefPolicy::Rebase && k + 1 < schedule.len() {
            reference = policy.merge_lora();
        }
    }
    *params = policy.merge_lora();
    log.push(LogRecord::Done { stage: mode.name().into(), wall_seconds: 0.0 })?;
    Ok(DpoReport { mode: mode.name().into(), phases, initial_batch_loss })
}

/// Settings for the full base → structure → basic-color → preference run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub net: crate::micronet::NetConfig,
    pub seed: u64,
    pub base: TrainConfig,
    pub structure: TrainConfig,
    pub basic_color: TrainConfig,
    pub pro_dpo: TrainConfig,
    pub dpo: DpoConfig,
    /// `None` stops after basic color.
    pub dpo_mode: Option<DpoMode>,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            net: crate::micronet::NetConfig::default(),
            seed,
            base: TrainConfig::for_stage(Stage::Base, seed),
            structure: TrainConfig::for_stage(Stage::Structure, seed),
            basic_color: TrainConfig::for_stage(Stage::BasicColor, seed),
            pro_dpo: TrainConfig::for_stage(Stage::ProDpo, seed),
            dpo: DpoConfig::default(),
            dpo_mode: Some(DpoMode::Progressive),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Parameters after each completed stage, in order.
    pub snapshots: Vec<(Stage, ModelParams)>,
    pub reports: Vec<PhaseReport>,
    pub dpo: Option<DpoReport>,
}

impl PipelineOutcome {
    pub fn params(&self) -> &ModelParams {
        &self.snapshots.last().expect("at least one stage").1
    }

    pub fn after(&self, stage: Stage) -> Option<&ModelParams> {
        self.snapshots.iter().find(|(s, _)| *s == stage).map(|(_, p)| p)
    }
}

pub fn run_pipeline(train: &[Image8], val: &[Image8], cfg: &PipelineConfig, log: &mut RunLog) -> Result<PipelineOutcome> {
    let items = image_items(train, &cfg.net)?;
    let val_items = image_items(val, &cfg.net)?;
    let none = Checkpointing::default();
    let mut state = TrainState::fresh(ModelParams::init(cfg.net, SeedTree::new(cfg.seed).seed("init"))?);
    let mut out = PipelineOutcome { snapshots: Vec::new(), reports: Vec::new(), dpo: None };

    out.reports.push(run_stage_base(&mut state, &items, &val_items, &cfg.base, log, &none)?);
    out.snapshots.push((Stage::Base, state.params.clone()));
    let mut state = TrainState::fresh(state.params);
    out.reports.push(run_stage_structure(&mut state, &items, &val_items, &cfg.structure, log, &none)?);
    out.snapshots.push((Stage::Structure, state.params.clone()));
    let mut state = TrainState::fresh(state.params);
    out.reports.push(run_stage_basic_color(&mut state, &items, &val_items, &cfg.basic_color, log, &none)?);
    out.snapshots.push((Stage::BasicColor, state.params.clone()));

    if let Some(mode) = cfg.dpo_mode {
        let mut p = state.params;
        let src = PairSource::Images { train: train.to_vec(), val: val.to_vec() };
        out.dpo = Some(run_stage_pro_dpo(&mut p, &src, &cfg.dpo, mode, &cfg.pro_dpo, log)?);
        out.snapshots.push((Stage::ProDpo, p));
    }
    Ok(out)
}
