//! Plain-text `key = value` run configuration. Unknown keys are errors; the
//! resolved configuration is written back out as a snapshot with every key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use flowtint::augment::AugRange;
use flowtint::dpo::{BetaMode, LossKind, RefPolicy};
use flowtint::eval::EndpointConfig;
use flowtint::flow::{SampleOptions, TimestepDist};
use flowtint::pref_data::FilterSpec;
use flowtint::train::PipelineConfig;
use flowtint::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resize {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub pipeline: PipelineConfig,
    pub filter: FilterSpec,
    pub sample: SampleOptions,
    pub resize: Resize,
    pub max_input_size: usize,
    pub corpus_count: usize,
    pub val_count: usize,
    pub judge: EndpointConfig,
    pub judge_template: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::new(0),
            filter: FilterSpec::basic_color(),
            sample: SampleOptions::default(),
            resize: Resize::Bilinear,
            max_input_size: 4096,
            corpus_count: 200,
            val_count: 40,
            judge: EndpointConfig::default(),
            judge_template: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_window(key: &str, v: &str) -> Result<Option<(f64, f64)>> {
    if v == "none" {
        return Ok(None);
    }
    let (lo, hi) = v.split_once(':').ok_or_else(|| Error::Config(format!("{key}: expected lo:hi or none")))?;
    Ok(Some((parse(key, lo)?, parse(key, hi)?)))
}

fn parse_timestep(key: &str, v: &str) -> Result<TimestepDist> {
    if v == "uniform" {
        return Ok(TimestepDist::Uniform);
    }
    let mut it = v.split(':');
    match (it.next(), it.next(), it.next(), it.next()) {
        (Some("logit-normal"), Some(m), Some(s), None) => Ok(TimestepDist::LogitNormal { mean: parse(key, m)?, std: parse(key, s)? }),
        _ => Err(Error::Config(format!("{key}: expected uniform or logit-normal:MEAN:STD"))),
    }
}

fn fmt_timestep(t: TimestepDist) -> String {
    match t {
        TimestepDist::Uniform => "uniform".into(),
        TimestepDist::LogitNormal { mean, std } => format!("logit-normal:{mean}:{std}"),
    }
}

fn fmt_window(w: Option<(f64, f64)>) -> String {
    w.map_or("none".into(), |(lo, hi)| format!("{lo}:{hi}"))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match key {
            "seed" => {
                let s: u64 = parse(key, v)?;
                p.seed = s;
                for t in [&mut p.base, &mut p.structure, &mut p.basic_color, &mut p.pro_dpo] {
                    t.seed = s;
                }
            }
            "net.image_size" => p.net.image_size = parse(key, v)?,
            "net.channels" => p.net.channels = parse(key, v)?,
            "net.depth" => p.net.depth = parse(key, v)?,
            "net.embed_dim" => p.net.embed_dim = parse(key, v)?,
            "net.lora_rank" => {
                p.net.lora_rank = parse(key, v)?;
                p.dpo.lora_rank = p.net.lora_rank;
            }
            "net.lora_alpha" => p.net.lora_alpha = parse(key, v)?,
            "net.time_dim" => p.net.time_dim = parse(key, v)?,
            "train.timestep" => {
                let t = parse_timestep(key, v)?;
                for s in [&mut p.base, &mut p.structure, &mut p.basic_color, &mut p.pro_dpo] {
                    s.timestep = t;
                }
            }
            "train.checkpoint_every" => {
                let n: usize = parse(key, v)?;
                for s in [&mut p.base, &mut p.structure, &mut p.basic_color] {
                    s.checkpoint_every = (n > 0).then_some(n);
                }
            }
            "base.lr" => p.base.adam.lr = parse(key, v)?,
            "base.epochs" => p.base.epochs = parse(key, v)?,
            "base.batch_size" => p.base.batch_size = parse(key, v)?,
            "structure.lr" => p.structure.adam.lr = parse(key, v)?,
            "structure.epochs" => p.structure.epochs = parse(key, v)?,
            "structure.batch_size" => p.structure.batch_size = parse(key, v)?,
            "basic_color.lr" => p.basic_color.adam.lr = parse(key, v)?,
            "basic_color.epochs" => p.basic_color.epochs = parse(key, v)?,
            "basic_color.batch_size" => p.basic_color.batch_size = parse(key, v)?,
            "basic_color.alpha" => p.basic_color.loss = LossKind::FmDistill { alpha: parse(key, v)? },
            "dpo.beta" => p.dpo.beta = parse(key, v)?,
            "dpo.beta_mode" => p.dpo.beta_mode = v.parse::<BetaMode>()?,
            "dpo.ref_policy" => p.dpo.ref_policy = v.parse::<RefPolicy>()?,
            "dpo.shared_noise" => p.dpo.shared_noise = parse_bool(key, v)?,
            "dpo.batch_size" => p.dpo.batch_size = parse(key, v)?,
            "dpo.stage1.range" => p.dpo.stage1.range = v.parse::<AugRange>()?,
            "dpo.stage1.lr" => p.dpo.stage1.learning_rate = parse(key, v)?,
            "dpo.stage1.epochs" => p.dpo.stage1.epochs = parse(key, v)?,
            "dpo.stage2.range" => p.dpo.stage2.range = v.parse::<AugRange>()?,
            "dpo.stage2.lr" => p.dpo.stage2.learning_rate = parse(key, v)?,
            "dpo.stage2.epochs" => p.dpo.stage2.epochs = parse(key, v)?,
            "filter.min_colorfulness" => {
                self.filter.min_colorfulness = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "filter.saturation" => self.filter.sat_window = parse_window(key, v)?,
            "filter.brightness" => self.filter.bright_window = parse_window(key, v)?,
            "corpus.count" => self.corpus_count = parse(key, v)?,
            "corpus.val_count" => self.val_count = parse(key, v)?,
            "sample.steps" => self.sample.steps = parse(key, v)?,
            "sample.seed" => self.sample.seed = parse(key, v)?,
            "sample.guidance" => self.sample.guidance = parse(key, v)?,
            "sample.control_scale" => self.sample.control_scale = parse(key, v)?,
            "sample.resize" => {
                self.resize = match v {
                    "bilinear" => Resize::Bilinear,
                    "nearest" => Resize::Nearest,
                    _ => return Err(Error::Config(format!("{key}: expected bilinear or nearest"))),
                }
            }
            "sample.max_input_size" => self.max_input_size = parse(key, v)?,
            "judge.base_url" => self.judge.base_url = v.to_string(),
            "judge.model" => self.judge.model = v.to_string(),
            "judge.token_env" => self.judge.token_env = v.to_string(),
            "judge.timeout_secs" => self.judge.timeout = Duration::from_secs_f64(parse(key, v)?),
            "judge.max_retries" => self.judge.max_retries = parse(key, v)?,
            "judge.backoff_ms" => self.judge.backoff = Duration::from_millis(parse(key, v)?),
            "judge.max_backoff_ms" => self.judge.max_backoff = Duration::from_millis(parse(key, v)?),
            "judge.concurrency" => self.judge.concurrency = parse(key, v)?,
            "judge.send_condition" => self.judge.send_condition = parse_bool(key, v)?,
            "judge.template" => self.judge_template = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        p.net.validate()?;
        for t in [&p.base, &p.structure, &p.basic_color, &p.pro_dpo] {
            t.validate()?;
        }
        p.dpo.validate()?;
        self.filter.validate()?;
        if self.sample.steps == 0 {
            return Err(Error::Config("sample.steps must be positive".into()));
        }
        if self.judge.concurrency == 0 {
            return Err(Error::Config("judge.concurrency must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn snapshot(&self) -> String {
        let p = &self.pipeline;
        let n = &p.net;
        let alpha = match p.basic_color.loss {
            LossKind::FmDistill { alpha } => alpha,
            _ => 0.0,
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", p.seed.to_string());
        kv("net.image_size", n.image_size.to_string());
        kv("net.channels", n.channels.to_string());
        kv("net.depth", n.depth.to_string());
        kv("net.embed_dim", n.embed_dim.to_string());
        kv("net.lora_rank", n.lora_rank.to_string());
        kv("net.lora_alpha", n.lora_alpha.to_string());
        kv("net.time_dim", n.time_dim.to_string());
        kv("train.timestep", fmt_timestep(p.base.timestep));
        kv("train.checkpoint_every", p.base.checkpoint_every.unwrap_or(0).to_string());
        for (name, t) in [("base", &p.base), ("structure", &p.structure), ("basic_color", &p.basic_color)] {
            kv(&format!("{name}.lr"), t.adam.lr.to_string());
            kv(&format!("{name}.epochs"), t.epochs.to_string());
            kv(&format!("{name}.batch_size"), t.batch_size.to_string());
        }
        kv("basic_color.alpha", alpha.to_string());
        kv("dpo.beta", p.dpo.beta.to_string());
        kv("dpo.beta_mode", p.dpo.beta_mode.to_string());
        kv("dpo.ref_policy", p.dpo.ref_policy.to_string());
        kv("dpo.shared_noise", p.dpo.shared_noise.to_string());
        kv("dpo.batch_size", p.dpo.batch_size.to_string());
        for (name, st) in [("stage1", &p.dpo.stage1), ("stage2", &p.dpo.stage2)] {
            kv(&format!("dpo.{name}.range"), st.range.to_string());
            kv(&format!("dpo.{name}.lr"), st.learning_rate.to_string());
            kv(&format!("dpo.{name}.epochs"), st.epochs.to_string());
        }
        kv("filter.min_colorfulness", self.filter.min_colorfulness.map_or("none".into(), |v| v.to_string()));
        kv("filter.saturation", fmt_window(self.filter.sat_window));
        kv("filter.brightness", fmt_window(self.filter.bright_window));
        kv("corpus.count", self.corpus_count.to_string());
        kv("corpus.val_count", self.val_count.to_string());
        kv("sample.steps", self.sample.steps.to_string());
        kv("sample.seed", self.sample.seed.to_string());
        kv("sample.guidance", self.sample.guidance.to_string());
        kv("sample.control_scale", self.sample.control_scale.to_string());
        kv("sample.resize", if self.resize == Resize::Bilinear { "bilinear" } else { "nearest" }.into());
        kv("sample.max_input_size", self.max_input_size.to_string());
        kv("judge.base_url", self.judge.base_url.clone());
        kv("judge.model", self.judge.model.clone());
        kv("judge.token_env", self.judge.token_env.clone());
        kv("judge.timeout_secs", self.judge.timeout.as_secs_f64().to_string());
        kv("judge.max_retries", self.judge.max_retries.to_string());
        kv("judge.backoff_ms", self.judge.backoff.as_millis().to_string());
        kv("judge.max_backoff_ms", self.judge.max_backoff.as_millis().to_string());
        kv("judge.concurrency", self.judge.concurrency.to_string());
        kv("judge.send_condition", self.judge.send_condition.to_string());
        if let Some(t) = &self.judge_template {
            kv("judge.template", t.display().to_string());
        }
        s
    }
}
