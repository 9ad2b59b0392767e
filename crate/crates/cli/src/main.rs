mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use serde_json::{json, Value};

use config::{Config, Resize};
use flowtint::augment::AugRange;
use flowtint::color_math::{rgb_to_gray, Image8};
use flowtint::eval::{
    aggregate, methods, proxy_scores, read_ballots, win_rate, win_rate_against, AuditLog, JudgeClient, JudgeTemplate,
};
use flowtint::flow::colorize;
use flowtint::image_io::{read_png, write_png};
use flowtint::micronet::{load_params_expecting, save_params, Group, ModelParams};
use flowtint::pref_data::{build_triplet, filter_dataset, read_corpus, read_manifest, write_corpus, write_manifest, FilterPreset, FilterSpec, LabeledImage, Triplet};
use flowtint::rng::SeedTree;
use flowtint::train::{
    image_items, run_stage_basic_color, run_stage_base, run_stage_pro_dpo, run_stage_structure, Checkpointing, DpoMode,
    PairSource, PhaseReport, RunLog, Stage, TrainState,
};

const RUN_ROOT_ENV: &str = "FLOWTINT_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "flowtint", version, about = "Desk-scale rectified-flow colorization")]
struct Cli {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to a timestamped directory under $FLOWTINT_RUN_ROOT (or ./runs)
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic two-class corpus
    Gen {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Keep corpus images that pass a filter
    Filter {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, visible_alias = "filter-preset")]
        preset: Option<String>,
    },
    /// Build preference triplets with one augmentation range
    Pairs {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "0.5:0.8")]
        range: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training stage inside a run directory
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        corpus: PathBuf,
        /// Triplet manifest per preference phase (defaults to pairs built from the corpus)
        #[arg(long)]
        pairs: Vec<PathBuf>,
        /// Continue from the saved train state of this stage
        #[arg(long)]
        resume: bool,
    },
    /// Colorize every PNG in a directory
    Colorize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        control_scale: Option<f64>,
        /// Recorded only; the network has no guidance input
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Score a colorize output directory
    Eval {
        #[arg(long, value_enum, default_value = "proxy")]
        mode: EvalMode,
        #[arg(long)]
        results: PathBuf,
    },
    /// Win rates from a ballot file
    Winrate {
        #[arg(long)]
        ballots: PathBuf,
        #[arg(long)]
        method: Option<String>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StageArg {
    Base,
    Structure,
    BasicColor,
    ProDpo,
    Sft,
    OneStageDpo,
}

impl StageArg {
    fn stage(self) -> Stage {
        match self {
            StageArg::Base => Stage::Base,
            StageArg::Structure => Stage::Structure,
            StageArg::BasicColor => Stage::BasicColor,
            _ => Stage::ProDpo,
        }
    }

    fn dpo_mode(self) -> Option<DpoMode> {
        match self {
            StageArg::ProDpo => Some(DpoMode::Progressive),
            StageArg::Sft => Some(DpoMode::Sft),
            StageArg::OneStageDpo => Some(DpoMode::OneStage),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        self.dpo_mode().map_or(self.stage().name(), DpoMode::name)
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EvalMode {
    Proxy,
    External,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("summary: {}", summary.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Gen { .. } => "gen",
        Cmd::Filter { .. } => "filter",
        Cmd::Pairs { .. } => "pairs",
        Cmd::Train { .. } => "train",
        Cmd::Colorize { .. } => "colorize",
        Cmd::Eval { .. } => "eval",
        Cmd::Winrate { .. } => "winrate",
    }
}

fn resolve_run_dir(explicit: Option<PathBuf>, cmd: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d,
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = root.join(format!("{cmd}-{stamp}"));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<PathBuf> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let name = command_name(&cli.cmd);
    let tag = match &cli.cmd {
        Cmd::Train { stage, .. } => format!("train-{}", stage.name()),
        _ => name.to_string(),
    };
    let dir = resolve_run_dir(cli.run_dir, name)?;
    fs::write(dir.join(format!("{tag}.config.txt")), cfg.snapshot())?;
    let mut summary = match cli.cmd {
        Cmd::Gen { count, size, seed } => cmd_gen(&cfg, &dir, count, size, seed)?,
        Cmd::Filter { corpus, preset } => cmd_filter(&cfg, &dir, &corpus, preset.as_deref())?,
        Cmd::Pairs { corpus, range, seed } => cmd_pairs(&cfg, &dir, &corpus, &range, seed)?,
        Cmd::Train { stage, corpus, pairs, resume } => cmd_train(&cfg, &dir, stage, &corpus, &pairs, resume)?,
        Cmd::Colorize { checkpoint, input, steps, seed, control_scale, guidance } => {
            cmd_colorize(&cfg, &dir, &checkpoint, &input, steps, seed, control_scale, guidance)?
        }
        Cmd::Eval { mode, results } => cmd_eval(&cfg, &dir, mode, &results)?,
        Cmd::Winrate { ballots, method } => cmd_winrate(&dir, &ballots, method.as_deref())?,
    };
    summary["command"] = json!(name);
    summary["run_dir"] = json!(dir.display().to_string());
    let path = dir.join(format!("{tag}.summary.json"));
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(path)
}

fn cmd_gen(cfg: &Config, dir: &Path, count: Option<usize>, size: Option<usize>, seed: Option<u64>) -> Result<Value> {
    let count = count.unwrap_or(cfg.corpus_count);
    let size = size.unwrap_or(cfg.pipeline.net.image_size);
    let seed = seed.unwrap_or(cfg.pipeline.seed);
    let corpus = flowtint::pref_data::gen_synthetic_corpus(count, size, seed)?;
    let manifest = write_corpus(&dir.join("corpus"), &corpus)?;
    let warm = corpus.iter().filter(|c| c.label.name() == "warm").count();
    Ok(json!({ "count": count, "size": size, "seed": seed, "manifest": manifest, "warm": warm, "cool": count - warm }))
}

fn cmd_filter(cfg: &Config, dir: &Path, corpus: &Path, preset: Option<&str>) -> Result<Value> {
    let spec = match preset {
        Some(p) => FilterSpec::preset(p.parse::<FilterPreset>()?),
        None => cfg.filter,
    };
    let items = read_corpus(corpus)?;
    let imgs: Vec<Image8> = items.iter().map(|c| c.image.clone()).collect();
    let report = filter_dataset(&imgs, &spec)?;
    let kept: Vec<LabeledImage> = report.kept.iter().map(|&i| items[i].clone()).collect();
    let out = dir.join("filtered");
    let manifest = write_corpus(&out, &kept)?;
    let mut stats = String::from("index\tcolorfulness\tmean_saturation\tmean_brightness\tkept\n");
    for (i, r) in report.rows.iter().enumerate() {
        stats.push_str(&format!("{i}\t{:.4}\t{:.4}\t{:.4}\t{}\n", r.colorfulness, r.mean_saturation, r.mean_brightness, r.kept));
    }
    fs::write(out.join("filter_report.tsv"), stats)?;
    log::info!("kept {} of {} images", kept.len(), items.len());
    Ok(json!({
        "input": corpus,
        "manifest": manifest,
        "total": items.len(),
        "kept": kept.len(),
        "min_colorfulness": spec.min_colorfulness,
        "saturation_window": spec.sat_window,
        "brightness_window": spec.bright_window,
    }))
}

fn build_pairs(items: &[LabeledImage], range: AugRange, seed: u64) -> Result<Vec<Triplet>> {
    let tree = SeedTree::new(seed).child("pairs");
    items
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut t = build_triplet(&c.image, tree.seed(&i.to_string()), range)?;
            t.label = Some(c.label);
            Ok(t)
        })
        .collect()
}

fn cmd_pairs(cfg: &Config, dir: &Path, corpus: &Path, range: &str, seed: Option<u64>) -> Result<Value> {
    let range: AugRange = range.parse()?;
    let seed = seed.unwrap_or(cfg.pipeline.seed);
    let items = read_corpus(corpus)?;
    let triplets = build_pairs(&items, range, seed)?;
    let manifest = dir.join("pairs").join("manifest.tsv");
    write_manifest(&triplets, &manifest)?;
    Ok(json!({ "corpus": corpus, "range": range.to_string(), "seed": seed, "count": triplets.len(), "manifest": manifest }))
}

fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.cflx"))
}

fn load_prerequisite(cfg: &Config, dir: &Path, stage: Stage, label: &str) -> Result<ModelParams> {
    let Some(pre) = stage.prerequisite() else {
        return Ok(ModelParams::init(cfg.pipeline.net, SeedTree::new(cfg.pipeline.seed).seed("init"))?);
    };
    let path = checkpoint_path(dir, pre.name());
    if !path.is_file() {
        bail!(
            "stage {label} requires the {pre} checkpoint, but {} does not exist; run `flowtint train --stage {pre}` with the same --run-dir first",
            path.display()
        );
    }
    Ok(load_params_expecting(&path, &cfg.pipeline.net)?)
}

fn split_val<T: Clone>(items: &[T], val_count: usize) -> (Vec<T>, Vec<T>) {
    let n_val = if items.len() > val_count { val_count } else { items.len() / 5 };
    let (a, b) = items.split_at(items.len() - n_val);
    (a.to_vec(), b.to_vec())
}

fn digests(p: &ModelParams) -> Value {
    let mut m = serde_json::Map::new();
    for g in Group::ALL {
        m.insert(g.name().into(), json!(p.group_digest(g)));
    }
    Value::Object(m)
}

fn cmd_train(cfg: &Config, dir: &Path, arg: StageArg, corpus: &Path, pairs: &[PathBuf], resume: bool) -> Result<Value> {
    let stage = arg.stage();
    let label = arg.name();
    let items = read_corpus(corpus)?;
    let imgs: Vec<Image8> = items.iter().map(|c| c.image.clone()).collect();
    let (train_imgs, val_imgs) = split_val(&imgs, cfg.val_count);
    let before = load_prerequisite(cfg, dir, stage, label)?;
    let before_digests = digests(&before);
    let mut log = RunLog::to_file(&dir.join("runlog.jsonl"));
    let p = &cfg.pipeline;

    let (params, reports, extra): (ModelParams, Vec<PhaseReport>, Value) = if let Some(mode) = arg.dpo_mode() {
        let source = if pairs.is_empty() {
            PairSource::Images { train: train_imgs, val: val_imgs }
        } else {
            let mut sets = Vec::new();
            for m in pairs {
                let t = read_manifest(m)?;
                sets.push(split_val(&t, cfg.val_count));
            }
            PairSource::Triplets(sets)
        };
        let mut params = before.clone();
        let r = run_stage_pro_dpo(&mut params, &source, &p.dpo, mode, &p.pro_dpo, &mut log)?;
        let extra = json!({ "mode": mode.name(), "initial_batch_loss": r.initial_batch_loss, "ref_policy": p.dpo.ref_policy.to_string() });
        (params, r.phases, extra)
    } else {
        let tcfg = match stage {
            Stage::Base => &p.base,
            Stage::Structure => &p.structure,
            _ => &p.basic_color,
        };
        let train = image_items(&train_imgs, &p.net)?;
        let val = image_items(&val_imgs, &p.net)?;
        let state_path = dir.join(format!("{label}.state"));
        let mut state = if resume {
            TrainState::load(&state_path).with_context(|| format!("resuming from {}", state_path.display()))?
        } else {
            TrainState::fresh(before.clone())
        };
        let ck = Checkpointing { path: tcfg.checkpoint_every.map(|_| state_path), stop_after_steps: None };
        let r = match stage {
            Stage::Base => run_stage_base(&mut state, &train, &val, tcfg, &mut log, &ck)?,
            Stage::Structure => run_stage_structure(&mut state, &train, &val, tcfg, &mut log, &ck)?,
            _ => run_stage_basic_color(&mut state, &train, &val, tcfg, &mut log, &ck)?,
        };
        (state.params, vec![r], json!({}))
    };
    let out = checkpoint_path(dir, label);
    save_params(&params, &out)?;
    Ok(json!({
        "stage": label,
        "checkpoint": out,
        "train_items": items.len(),
        "phases": reports,
        "group_digests_before": before_digests,
        "group_digests_after": digests(&params),
        "details": extra,
    }))
}

fn to_gray(img: &Image8) -> Image8 {
    if img.channels() == 1 {
        img.clone()
    } else {
        rgb_to_gray(img)
    }
}

fn filter_type(r: Resize) -> FilterType {
    match r {
        Resize::Bilinear => FilterType::Triangle,
        Resize::Nearest => FilterType::Nearest,
    }
}

fn resize_gray(img: &Image8, w: usize, h: usize, r: Resize) -> Image8 {
    if img.width() == w && img.height() == h {
        return img.clone();
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).expect("sized buffer");
    let out = imageops::resize(&buf, w as u32, h as u32, filter_type(r));
    Image8::new(w, h, 1, out.into_raw()).expect("sized buffer")
}

fn resize_rgb(img: &Image8, w: usize, h: usize, r: Resize) -> Image8 {
    if img.width() == w && img.height() == h {
        return img.clone();
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).expect("sized buffer");
    let out = imageops::resize(&buf, w as u32, h as u32, filter_type(r));
    Image8::new(w, h, 3, out.into_raw()).expect("sized buffer")
}

/// Restoration hook applied before colorization; identity here.
fn preprocess(img: Image8) -> Image8 {
    img
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

#[allow(clippy::too_many_arguments)]
fn cmd_colorize(
    cfg: &Config,
    dir: &Path,
    checkpoint: &Path,
    input: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    control_scale: Option<f64>,
    guidance: Option<f64>,
) -> Result<Value> {
    let params = load_params_expecting(checkpoint, &cfg.pipeline.net)?;
    let mut opts = cfg.sample;
    opts.steps = steps.unwrap_or(opts.steps);
    opts.seed = seed.unwrap_or(opts.seed);
    opts.control_scale = control_scale.unwrap_or(opts.control_scale);
    opts.guidance = guidance.unwrap_or(opts.guidance);
    if opts.steps == 0 {
        bail!("--steps must be positive");
    }
    let s = params.cfg.image_size;
    let files = png_files(input)?;
    if files.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    let (out_dir, cond_dir) = (dir.join("outputs"), dir.join("conditions"));
    fs::create_dir_all(&out_dir)?;
    fs::create_dir_all(&cond_dir)?;
    let mut written = Vec::new();
    for f in &files {
        let img = read_png(f).with_context(|| format!("reading {}", f.display()))?;
        let (w, h) = (img.width(), img.height());
        if w > cfg.max_input_size || h > cfg.max_input_size {
            bail!("{} is {w}x{h}, above the configured limit of {}", f.display(), cfg.max_input_size);
        }
        let gray = to_gray(&preprocess(img));
        let small = resize_gray(&gray, s, s, cfg.resize);
        let out = colorize(&params, &small, &opts)?;
        let out = resize_rgb(&out, w, h, cfg.resize);
        let name = f.file_name().expect("file name");
        write_png(&out_dir.join(name), &out)?;
        write_png(&cond_dir.join(name), &gray)?;
        written.push(name.to_string_lossy().to_string());
    }
    Ok(json!({
        "checkpoint": checkpoint,
        "input": input,
        "outputs": out_dir,
        "files": written,
        "steps": opts.steps,
        "seed": opts.seed,
        "control_scale": opts.control_scale,
        "guidance": opts.guidance,
        "guidance_note": "recorded only; the network has no guidance input",
        "resize": if cfg.resize == Resize::Bilinear { "bilinear" } else { "nearest" },
    }))
}

fn cmd_eval(cfg: &Config, dir: &Path, mode: EvalMode, results: &Path) -> Result<Value> {
    let (out_dir, cond_dir) = (results.join("outputs"), results.join("conditions"));
    let files = png_files(&out_dir)?;
    if files.is_empty() {
        bail!("no outputs in {}", out_dir.display());
    }
    let mut items = Vec::new();
    for f in &files {
        let name = f.file_name().expect("file name");
        let cond_path = cond_dir.join(name);
        let cond = read_png(&cond_path).with_context(|| format!("condition for {}", f.display()))?;
        items.push((name.to_string_lossy().to_string(), read_png(f)?, cond));
    }
    let scores = match mode {
        EvalMode::Proxy => items.iter().map(|(_, o, c)| proxy_scores(c, o)).collect::<flowtint::Result<Vec<_>>>()?,
        EvalMode::External => {
            let template = match &cfg.judge_template {
                Some(p) => JudgeTemplate::load(p)?,
                None => JudgeTemplate::default(),
            };
            let client = JudgeClient::new(cfg.judge.clone(), template)?;
            let audit = AuditLog::new(&dir.join("judge_audit.jsonl"));
            let batch: Vec<_> = items.iter().map(|(n, o, c)| (n.clone(), o.clone(), Some(c.clone()))).collect();
            let mut out = Vec::new();
            for (r, (name, _, _)) in client.score_all(&batch, Some(&audit)).into_iter().zip(&items) {
                out.push(r.map_err(|e| anyhow!("{name}: {e}"))?.scores);
            }
            out
        }
    };
    let mut lines = String::new();
    for ((name, _, _), s) in items.iter().zip(&scores) {
        let mut v = s.to_json();
        v["item"] = json!(name);
        lines.push_str(&format!("{v}\n"));
    }
    fs::write(dir.join("scores.jsonl"), lines)?;
    let table = aggregate(&scores)?;
    let records = table.records();
    fs::write(dir.join("aggregate.jsonl"), records.iter().map(|r| format!("{r}\n")).collect::<String>())?;
    print!("{table}");
    Ok(json!({ "mode": format!("{mode:?}").to_lowercase(), "results": results, "items": items.len(), "aggregate": records }))
}

fn cmd_winrate(dir: &Path, ballots: &Path, method: Option<&str>) -> Result<Value> {
    let bs = read_ballots(ballots)?;
    let all = methods(&bs);
    let targets: Vec<String> = match method {
        Some(m) => vec![m.to_string()],
        None => all.clone(),
    };
    let mut rows = Vec::new();
    let mut text = String::new();
    for m in &targets {
        let overall = win_rate(&bs, m)?;
        text.push_str(&format!("{m:<16}{overall:>8.4}\n"));
        let mut per = serde_json::Map::new();
        for o in all.iter().filter(|o| *o != m) {
            if let Ok(r) = win_rate_against(&bs, m, o) {
                text.push_str(&format!("  vs {o:<12}{r:>8.4}\n"));
                per.insert(o.clone(), json!(r));
            }
        }
        rows.push(json!({ "method": m, "win_rate": overall, "against": per }));
    }
    print!("{text}");
    fs::write(dir.join("winrate.txt"), &text)?;
    Ok(json!({ "ballots": ballots, "count": bs.len(), "win_rates": rows }))
}
