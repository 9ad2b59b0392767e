use std::fmt;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::layers::{Conv, Film, Linear};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub time_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { image_size: 16, channels: 16, depth: 3, embed_dim: 8, lora_rank: 4, lora_alpha: 4.0, time_dim: 16 }
    }
}

impl NetConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self { image_size: 8, channels: 4, depth: 2, embed_dim: 4, lora_rank: 2, lora_alpha: 2.0, time_dim: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.image_size, self.channels, self.depth, self.embed_dim, self.lora_rank, self.time_dim];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument(format!("network dimensions must be positive: {self:?}")));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time embedding dimension must be even".into()));
        }
        if self.lora_rank > self.channels {
            return Err(Error::InvalidArgument(format!(
                "lora rank {} exceeds the smallest adapted weight dimension {}",
                self.lora_rank, self.channels
            )));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::InvalidArgument("lora alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn cond_dim(&self) -> usize {
        self.time_dim + self.embed_dim
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Independently freezable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Base velocity network.
    Trunk,
    /// Structure branch fed by the grayscale condition.
    Control,
    /// Trainable prompt encoder.
    Prompt,
    /// Frozen prompt encoder used as the color teacher.
    PromptRef,
    /// Low-rank adapters on the trunk convolutions.
    Lora,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Trunk, Group::Control, Group::Prompt, Group::PromptRef, Group::Lora];

    pub fn name(self) -> &'static str {
        match self {
            Group::Trunk => "trunk",
            Group::Control => "control",
            Group::Prompt => "prompt",
            Group::PromptRef => "prompt_ref",
            Group::Lora => "lora",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter group `{s}`")))
    }
}

/// A set of trainable groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet([bool; 5]);

impl GroupSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self([true; 5])
    }

    pub fn of(groups: &[Group]) -> Self {
        let mut s = Self::empty();
        for &g in groups {
            s.0[g as usize] = true;
        }
        s
    }

    pub fn contains(&self, g: Group) -> bool {
        self.0[g as usize]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = Group> + '_ {
        Group::ALL.into_iter().filter(|g| self.contains(*g))
    }
}

/// Conv → FiLM → SiLU with an identity skip.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: Conv,
    pub film: Film,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub stem: Conv,
    pub blocks: Vec<Block>,
    pub head: Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    /// Copy of the trunk stem, applied to `x_t`.
    pub stem: Conv,
    /// Condition encoder (gray → hidden).
    pub hint: Conv,
    pub blocks: Vec<Block>,
    /// Zero-initialized 1×1 projections into each trunk block input and the
    /// head input (`depth + 1` of them).
    pub proj: Vec<Conv>,
}

/// Two conv+SiLU layers, global average pooling and a linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub conv1: Conv,
    pub conv2: Conv,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `[rank, fan_in]`
    pub a: Tensor,
    /// `[out, rank]`
    pub b: Tensor,
}

/// Adapters for each trunk block convolution: `W + (alpha / rank) · B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora {
    pub pairs: Vec<LoraPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: NetConfig,
    pub trunk: Trunk,
    pub control: Control,
    pub prompt: Encoder,
    pub prompt_ref: Encoder,
    pub lora: Option<Lora>,
}

fn conv_tensors<'a>(prefix: &str, c: &'a Conv, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.w"), &c.w));
    out.push((format!("{prefix}.b"), &c.b));
}

fn conv_tensors_mut<'a>(prefix: &str, c: &'a mut Conv, out: &mut Vec<(String, &'a mut Tensor)>) {
    out.push((format!("{prefix}.w"), &mut c.w));
    out.push((format!("{prefix}.b"), &mut c.b));
}

impl ModelParams {
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let tree = SeedTree::new(seed);
        let (c, t) = (cfg.channels, cfg.cond_dim());
        let mut rng = tree.stream("init.trunk");
        let block = |rng: &mut crate::rng::StreamRng| Block {
            conv: Conv::uniform(rng, c, c, KERNEL, 0.5),
            film: Film { proj: Linear::uniform(rng, 2 * c, t, 0.1) },
        };
        let trunk = Trunk {
            stem: Conv::uniform(&mut rng, c, 3, KERNEL, 1.0),
            blocks: (0..cfg.depth).map(|_| block(&mut rng)).collect(),
            head: Conv::uniform(&mut rng, 3, c, KERNEL, 0.5),
        };
        let mut rng = tree.stream("init.control");
        let control = Control {
            stem: trunk.stem.clone(),
            hint: Conv::uniform(&mut rng, c, 1, KERNEL, 1.0),
            blocks: trunk.blocks.clone(),
            proj: (0..=cfg.depth).map(|_| Conv::zeros(c, c, 1)).collect(),
        };
        let prompt_ref = Encoder::init(&mut tree.stream("init.prompt"), &cfg);
        let mut p = Self { cfg, trunk, control, prompt: prompt_ref.clone(), prompt_ref, lora: None };
        p.reset_lora(seed);
        Ok(p)
    }

    /// Fresh adapters: `A` random, `B` zero.
    pub fn reset_lora(&mut self, seed: u64) {
        let mut rng = SeedTree::new(seed).stream("init.lora");
        let (c, r) = (self.cfg.channels, self.cfg.lora_rank);
        let fan_in = c * KERNEL * KERNEL;
        let bound = (1.0 / fan_in as f64).sqrt();
        let pairs = (0..self.cfg.depth)
            .map(|_| {
                let mut a = Tensor::zeros(&[r, fan_in]);
                a.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
                LoraPair { a, b: Tensor::zeros(&[c, r]) }
            })
            .collect();
        self.lora = Some(Lora { pairs });
    }

    /// Re-seeds the control branch from the current trunk (copy of stem and
    /// blocks, zero projections), keeping the condition encoder.
    pub fn reinit_control_from_trunk(&mut self) {
        self.control.stem = self.trunk.stem.clone();
        self.control.blocks = self.trunk.blocks.clone();
        self.control.proj.iter_mut().for_each(|p| {
            p.w.fill(0.0);
            p.b.fill(0.0);
        });
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Effective trunk block weights, `W + s·B·A` when adapters are used.
    pub fn effective_block_weights(&self, use_lora: bool) -> Vec<Vec<f64>> {
        self.trunk
            .blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| {
                let mut w = blk.conv.w.data().to_vec();
                if let (true, Some(lora)) = (use_lora, &self.lora) {
                    let pair = &lora.pairs[i];
                    let (out, r) = (pair.b.shape()[0], pair.b.shape()[1]);
                    let fan_in = pair.a.shape()[1];
                    let mut delta = vec![0.0; out * fan_in];
                    gemm(out, r, fan_in, pair.b.data(), false, pair.a.data(), false, 0.0, &mut delta);
                    let s = self.cfg.lora_scale();
                    for (wv, d) in w.iter_mut().zip(delta) {
                        *wv += s * d;
                    }
                }
                w
            })
            .collect()
    }

    /// Folds the adapters into the trunk weights and clears them.
    pub fn merge_lora(&self) -> ModelParams {
        let mut merged = self.clone();
        if self.lora.is_some() {
            for (blk, w) in merged.trunk.blocks.iter_mut().zip(self.effective_block_weights(true)) {
                blk.conv.w.data_mut().copy_from_slice(&w);
            }
            merged.lora = None;
        }
        merged
    }

    /// Every tensor in declared order, with its group and a dotted name.
    pub fn tensors(&self) -> Vec<(Group, String, &Tensor)> {
        let mut out: Vec<(Group, String, &Tensor)> = Vec::new();
        fn tag<'a>(out: &mut Vec<(Group, String, &'a Tensor)>, g: Group, list: Vec<(String, &'a Tensor)>) {
            out.extend(list.into_iter().map(|(n, t)| (g, n, t)));
        }

        let mut v = Vec::new();
        conv_tensors("trunk.stem", &self.trunk.stem, &mut v);
        for (i, b) in self.trunk.blocks.iter().enumerate() {
            block_tensors(&format!("trunk.block{i}"), b, &mut v);
        }
        conv_tensors("trunk.head", &self.trunk.head, &mut v);
        tag(&mut out, Group::Trunk, v);

        let mut v = Vec::new();
        conv_tensors("control.stem", &self.control.stem, &mut v);
        conv_tensors("control.hint", &self.control.hint, &mut v);
        for (i, b) in self.control.blocks.iter().enumerate() {
            block_tensors(&format!("control.block{i}"), b, &mut v);
        }
        for (i, p) in self.control.proj.iter().enumerate() {
            conv_tensors(&format!("control.proj{i}"), p, &mut v);
        }
        tag(&mut out, Group::Control, v);

        for (g, name, enc) in [(Group::Prompt, "prompt", &self.prompt), (Group::PromptRef, "prompt_ref", &self.prompt_ref)] {
            let mut v = Vec::new();
            encoder_tensors(name, enc, &mut v);
            tag(&mut out, g, v);
        }

        if let Some(lora) = &self.lora {
            let mut v = Vec::new();
            for (i, p) in lora.pairs.iter().enumerate() {
                v.push((format!("lora{i}.a"), &p.a));
                v.push((format!("lora{i}.b"), &p.b));
            }
            tag(&mut out, Group::Lora, v);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(Group, String, &mut Tensor)> {
        let mut out: Vec<(Group, String, &mut Tensor)> = Vec::new();
        let ModelParams { trunk, control, prompt, prompt_ref, lora, .. } = self;

        let mut v = Vec::new();
        conv_tensors_mut("trunk.stem", &mut trunk.stem, &mut v);
        for (i, b) in trunk.blocks.iter_mut().enumerate() {
            block_tensors_mut(&format!("trunk.block{i}"), b, &mut v);
        }
        conv_tensors_mut("trunk.head", &mut trunk.head, &mut v);
        out.extend(v.into_iter().map(|(n, t)| (Group::Trunk, n, t)));

        let mut v = Vec::new();
        conv_tensors_mut("control.stem", &mut control.stem, &mut v);
        conv_tensors_mut("control.hint", &mut control.hint, &mut v);
        for (i, b) in control.blocks.iter_mut().enumerate() {
            block_tensors_mut(&format!("control.block{i}"), b, &mut v);
        }
        for (i, p) in control.proj.iter_mut().enumerate() {
            conv_tensors_mut(&format!("control.proj{i}"), p, &mut v);
        }
        out.extend(v.into_iter().map(|(n, t)| (Group::Control, n, t)));

        for (g, name, enc) in [(Group::Prompt, "prompt", prompt), (Group::PromptRef, "prompt_ref", prompt_ref)] {
            let mut v = Vec::new();
            encoder_tensors_mut(name, enc, &mut v);
            out.extend(v.into_iter().map(|(n, t)| (g, n, t)));
        }

        if let Some(lora) = lora {
            for (i, p) in lora.pairs.iter_mut().enumerate() {
                out.push((Group::Lora, format!("lora{i}.a"), &mut p.a));
                out.push((Group::Lora, format!("lora{i}.b"), &mut p.b));
            }
        }
        out
    }

    /// SHA-256 over the little-endian bytes of one group's tensors.
    pub fn group_digest(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.tensors().into_iter().filter(|(g, _, _)| *g == group) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parameter count per group.
    pub fn group_sizes(&self) -> Vec<(Group, usize)> {
        Group::ALL
            .into_iter()
            .map(|g| (g, self.tensors().iter().filter(|(tg, _, _)| *tg == g).map(|(_, _, t)| t.len()).sum()))
            .collect()
    }

    /// `self += alpha * other` restricted to `groups`.
    pub fn axpy_groups(&mut self, alpha: f64, other: &ModelParams, groups: GroupSet) {
        let src = other.tensors();
        for ((g, _, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            if groups.contains(g) {
                dst.axpy(alpha, s);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.is_finite())
    }
}

fn block_tensors<'a>(prefix: &str, b: &'a Block, out: &mut Vec<(String, &'a Tensor)>) {
    conv_tensors(&format!("{prefix}.conv"), &b.conv, out);
    out.push((format!("{prefix}.film.w"), &b.film.proj.w));
    out.push((format!("{prefix}.film.b"), &b.film.proj.b));
}

fn block_tensors_mut<'a>(prefix: &str, b: &'a mut Block, out: &mut Vec<(String, &'a mut Tensor)>) {
    conv_tensors_mut(&format!("{prefix}.conv"), &mut b.conv, out);
    out.push((format!("{prefix}.film.w"), &mut b.film.proj.w));
    out.push((format!("{prefix}.film.b"), &mut b.film.proj.b));
}

fn encoder_tensors<'a>(prefix: &str, e: &'a Encoder, out: &mut Vec<(String, &'a Tensor)>) {
    conv_tensors(&format!("{prefix}.conv1"), &e.conv1, out);
    conv_tensors(&format!("{prefix}.conv2"), &e.conv2, out);
    out.push((format!("{prefix}.out.w"), &e.out.w));
    out.push((format!("{prefix}.out.b"), &e.out.b));
}

fn encoder_tensors_mut<'a>(prefix: &str, e: &'a mut Encoder, out: &mut Vec<(String, &'a mut Tensor)>) {
    conv_tensors_mut(&format!("{prefix}.conv1"), &mut e.conv1, out);
    conv_tensors_mut(&format!("{prefix}.conv2"), &mut e.conv2, out);
    out.push((format!("{prefix}.out.w"), &mut e.out.w));
    out.push((format!("{prefix}.out.b"), &mut e.out.b));
}

impl Encoder {
    pub fn init<R: Rng>(rng: &mut R, cfg: &NetConfig) -> Self {
        let c = cfg.channels;
        Self {
            conv1: Conv::uniform(rng, c, 3, KERNEL, 1.0),
            conv2: Conv::uniform(rng, c, c, KERNEL, 1.0),
            out: Linear::uniform(rng, cfg.embed_dim, c, 1.0),
        }
    }
}
