//! One test per acceptance criterion. Each prints a `criterion N: PASS` or
//! `criterion N: FAIL` line straight to stderr so the verdicts show up in
//! captured test output too.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use flowtint::augment::{adjust_brightness, adjust_contrast, adjust_saturation, AugRange};
use flowtint::color_math::{colorfulness, gray_mae, hsv_stats, rgb_to_gray, Image8};
use flowtint::dpo::{dpo_loss, DpoCase, DpoConfig, PairTensors};
use flowtint::eval::{read_ballots, win_rate, win_rate_against, write_ballots, AuditLog, Ballot, EndpointConfig, JudgeClient, JudgeTemplate};
use flowtint::flow::{colorize, euler_integrate, model_fm_loss, standard_normal, FmCase, PromptSource, SampleOptions};
use flowtint::image_io::encode_png;
use flowtint::micronet::{save_params, Group, GroupSet, ModelParams, Tensor};
use flowtint::pref_data::{
    build_triplet, dominant_hue_class, filter_dataset, gen_synthetic_corpus, FilterSpec, LabeledImage,
};
use flowtint::rng::SeedTree;
use flowtint::train::{
    adam_step, image_items, run_pipeline, run_stage_pro_dpo, AdamHyper, AdamState, DpoMode, ImageItem, LogRecord,
    PairSource, PipelineConfig, PipelineOutcome, RunLog, Stage,
};
use flowtint::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::stub_judge::StubJudge;
use common::{gradcheck, stub_judge};

type Outcome = Result<String, String>;
type Check = fn() -> Result<usize, String>;

fn verdict(n: u32, title: &str, outcome: Outcome) {
    let line = match &outcome {
        Ok(detail) => format!("criterion {n}: PASS  {title}  ({detail})"),
        Err(why) => format!("criterion {n}: FAIL  {title}  ({why})"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(why) = outcome {
        panic!("criterion {n} failed: {why}");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image8 {
    let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
    Image8::new(w, h, 3, data).unwrap()
}

const SEED: u64 = 0;
const CORPUS: usize = 200;
const HELD_OUT: usize = 40;

struct Shared {
    train: Vec<Image8>,
    held_out: Vec<LabeledImage>,
    cfg: PipelineConfig,
    outcome: PipelineOutcome,
    stage_seconds: f64,
}

impl Shared {
    fn held_out_images(&self) -> Vec<Image8> {
        self.held_out.iter().map(|c| c.image.clone()).collect()
    }
}

fn corpus() -> (Vec<Image8>, Vec<LabeledImage>) {
    let corpus = gen_synthetic_corpus(CORPUS, 16, SEED).unwrap();
    let (train, held_out) = corpus.split_at(CORPUS - HELD_OUT);
    (train.iter().map(|c| c.image.clone()).collect(), held_out.to_vec())
}

/// The full pipeline at the default configuration, run once and shared.
fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let (train, held_out) = corpus();
        let cfg = PipelineConfig::new(SEED);
        let val: Vec<Image8> = held_out.iter().map(|c| c.image.clone()).collect();
        let mut log = RunLog::new();
        let outcome = run_pipeline(&train, &val, &cfg, &mut log).unwrap();
        let stage_seconds = log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Done { stage, wall_seconds } if stage != Stage::ProDpo.name() => Some(*wall_seconds),
                _ => None,
            })
            .sum();
        Shared { train, held_out, cfg, outcome, stage_seconds }
    })
}

#[test]
fn criterion_1_gradients() {
    let started = Instant::now();
    let outcome = (|| {
        let checks: [(&str, Check); 5] = [
            ("fm/reference prompt", gradcheck::flow_loss_reference_prompt),
            ("fm/control branch", gradcheck::flow_loss_control_branch),
            ("distill+combined", gradcheck::distillation_and_combined_losses),
            ("dpo", gradcheck::preference_loss_adapters_and_trunk),
            ("sft", gradcheck::supervised_winner_loss),
        ];
        let mut total = 0;
        for (name, f) in checks {
            total += f().map_err(|e| format!("{name}: {e}"))?;
        }
        let secs = started.elapsed().as_secs_f64();
        ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
        Ok(format!("{total} entries within 1e-4 rel / 1e-8 abs, {secs:.2}s"))
    })();
    verdict(1, "analytic gradients match central differences", outcome);
}

#[test]
fn criterion_2_dpo_anchor() {
    let started = Instant::now();
    let outcome = (|| {
        let (train, _) = corpus();
        let cfg = PipelineConfig::new(SEED);
        let mut policy = ModelParams::init(cfg.net, 5).unwrap();
        policy.reset_lora(6);
        let reference = policy.clone();
        let dcfg = DpoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let range = if i % 2 == 0 { dcfg.stage1.range } else { dcfg.stage2.range };
            let trip = build_triplet(&train[i % train.len()], 1000 + i as u64, range).map_err(|e| e.to_string())?;
            let pair = PairTensors::from_triplet(&trip).map_err(|e| e.to_string())?;
            let eps_w = standard_normal(&mut rng, pair.winner.shape());
            let eps_l = standard_normal(&mut rng, pair.loser.shape());
            let prompt = policy.prompt.encode(&pair.cond_rgb).map_err(|e| e.to_string())?;
            let case = DpoCase { pair: &pair, t: rng.random::<f64>(), eps_w: &eps_w, eps_l: &eps_l, prompt: &prompt, control_scale: 1.0 };
            let l = dpo_loss(&policy, &reference, &case, &dcfg, GroupSet::of(&[Group::Lora])).map_err(|e| e.to_string())?;
            worst = worst.max((l.loss.value - std::f64::consts::LN_2).abs());
        }
        ensure(worst <= 1e-9, || format!("max |loss - ln 2| = {worst:e}"))?;
        let secs = started.elapsed().as_secs_f64();
        ensure(secs < 5.0, || format!("took {secs:.1}s"))?;
        Ok(format!("100 triplets, max |loss - ln 2| = {worst:e}, {secs:.2}s"))
    })();
    verdict(2, "preference loss is ln 2 when policy equals reference", outcome);
}

#[test]
fn criterion_3_sampler() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::from_vec(&[3, 4, 4], (0..48).map(|_| rng.random::<f64>()).collect()).unwrap();
        let eps = standard_normal(&mut rng, &[3, 4, 4]);
        let v = Tensor::from_vec(&[3, 4, 4], eps.data().iter().zip(x0.data()).map(|(e, x)| e - x).collect()).unwrap();
        let constant = |_: &Tensor, _: f64| v.clone();
        let mut worst: f64 = 0.0;
        for steps in [1, 2, 3, 5, 8, 16, 32, 100] {
            let out = euler_integrate(&constant, &eps, steps).map_err(|e| e.to_string())?;
            for (a, b) in out.data().iter().zip(x0.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        ensure(worst <= 1e-12, || format!("constant field error {worst:e}"))?;

        let (a, b) = (0.7, -1.3);
        let linear = |x: &Tensor, t: f64| Tensor::from_vec(x.shape(), vec![a + b * t; x.len()]).unwrap();
        let start = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let exact = 0.25 - a - b / 2.0;
        let err = |steps| -> Result<f64, String> {
            let out = euler_integrate(&linear, &start, steps).map_err(|e| e.to_string())?;
            Ok((out.data()[0] - exact).abs())
        };
        let (e8, e16, e32) = (err(8)?, err(16)?, err(32)?);
        let (r1, r2) = (e8 / e16, e16 / e32);
        ensure((1.8..=2.2).contains(&r1) && (1.8..=2.2).contains(&r2), || format!("ratios {r1}, {r2}"))?;
        Ok(format!("constant-field error {worst:e}; error ratios 8/16 = {r1:.4}, 16/32 = {r2:.4}"))
    })();
    verdict(3, "Euler sampler exactness and first-order convergence", outcome);
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

fn oracle_gray(r: u8, g: u8, b: u8) -> u8 {
    let num = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    (num / 1000) as u8
}

fn oracle_blend(degenerate: f64, v: u8, f: f64) -> u8 {
    round_half_up(degenerate + f * (v as f64 - degenerate)).clamp(0.0, 255.0) as u8
}

/// Two-pass mean then variance, straight from the definition.
fn oracle_colorfulness(img: &Image8) -> f64 {
    let px: Vec<(f64, f64)> = img
        .data()
        .chunks(3)
        .map(|p| {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            (r - g, 0.5 * (r + g) - b)
        })
        .collect();
    let n = px.len() as f64;
    let mu_rg = px.iter().map(|p| p.0).sum::<f64>() / n;
    let mu_yb = px.iter().map(|p| p.1).sum::<f64>() / n;
    let var_rg = px.iter().map(|p| (p.0 - mu_rg).powi(2)).sum::<f64>() / n;
    let var_yb = px.iter().map(|p| (p.1 - mu_yb).powi(2)).sum::<f64>() / n;
    (var_rg + var_yb).sqrt() + 0.3 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
}

fn pixels(w: usize, h: usize, cols: &[[u8; 3]]) -> Image8 {
    let data = (0..w * h).flat_map(|i| cols[i % cols.len()]).collect();
    Image8::new(w, h, 3, data).unwrap()
}

#[test]
fn criterion_4_color_pipeline() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst_cf: f64 = 0.0;
        for k in 0..1000 {
            let img = random_image(&mut rng, 16, 16);
            let f = rng.random_range(0.0..1.5);
            let px = img.data();

            let gray = rgb_to_gray(&img);
            let want: Vec<u8> = px.chunks(3).map(|p| oracle_gray(p[0], p[1], p[2])).collect();
            ensure(gray.data() == want.as_slice(), || format!("image {k}: gray differs"))?;

            let bright = adjust_brightness(&img, f).unwrap();
            let want: Vec<u8> = px.iter().map(|&v| oracle_blend(0.0, v, f)).collect();
            ensure(bright.data() == want.as_slice(), || format!("image {k}: brightness {f} differs"))?;

            let mut sum = 0u64;
            for p in px.chunks(3) {
                sum += oracle_gray(p[0], p[1], p[2]) as u64;
            }
            let n = 256u64;
            let mean = ((2 * sum + n) / (2 * n)) as f64;
            let contrast = adjust_contrast(&img, f).unwrap();
            let want: Vec<u8> = px.iter().map(|&v| oracle_blend(mean, v, f)).collect();
            ensure(contrast.data() == want.as_slice(), || format!("image {k}: contrast {f} differs"))?;

            let sat = adjust_saturation(&img, f).unwrap();
            let want: Vec<u8> = px
                .chunks(3)
                .flat_map(|p| {
                    let d = oracle_gray(p[0], p[1], p[2]) as f64;
                    [oracle_blend(d, p[0], f), oracle_blend(d, p[1], f), oracle_blend(d, p[2], f)]
                })
                .collect();
            ensure(sat.data() == want.as_slice(), || format!("image {k}: saturation {f} differs"))?;

            worst_cf = worst_cf.max((colorfulness(&img) - oracle_colorfulness(&img)).abs());
        }
        ensure(worst_cf <= 1e-9, || format!("colorfulness off by {worst_cf:e}"))?;

        // (name, image, kept by colorfulness >= 15, kept by colorfulness + HSV windows)
        let fixtures = [
            ("constant gray", Image8::filled(8, 8, [128, 128, 128]), false, false),
            ("colorfulness 14.06", Image8::filled(8, 8, [130, 100, 79]), false, false),
            ("colorfulness 15.98, saturation 0.45, value 0.51", Image8::filled(8, 8, [130, 100, 71]), true, true),
            ("saturation 0.50, value 0.78", pixels(8, 8, &[[200, 100, 100], [100, 100, 200]]), true, true),
            ("saturation 0.20", pixels(8, 8, &[[200, 160, 160], [160, 160, 200]]), true, false),
            ("saturation exactly 0.30", Image8::filled(1, 1, [200, 140, 140]), true, true),
            ("value 1.0", pixels(8, 8, &[[255, 128, 128], [128, 128, 255]]), true, false),
            ("value 0.31", pixels(8, 8, &[[80, 40, 40], [40, 40, 80]]), true, false),
            ("saturated primaries", pixels(8, 8, &[[255, 0, 0], [0, 0, 255]]), true, false),
        ];
        let imgs: Vec<Image8> = fixtures.iter().map(|f| f.1.clone()).collect();
        for (spec, col, label) in [(FilterSpec::basic_color(), 2, "basic-color"), (FilterSpec::dpo(), 3, "dpo")] {
            let report = filter_dataset(&imgs, &spec).map_err(|e| e.to_string())?;
            for (i, fx) in fixtures.iter().enumerate() {
                let want = if col == 2 { fx.2 } else { fx.3 };
                ensure(report.rows[i].kept == want, || {
                    format!("{label} filter on `{}`: kept {} (row {:?})", fx.0, report.rows[i].kept, report.rows[i])
                })?;
            }
        }
        let cf = oracle_colorfulness(&fixtures[1].1);
        ensure((cf - 0.3 * (30f64 * 30.0 + 36.0 * 36.0).sqrt()).abs() < 1e-12, || format!("fixture colorfulness {cf}"))?;
        Ok(format!(
            "1000 random 16x16 images bit-exact, colorfulness within {worst_cf:e}, {} filter fixtures",
            fixtures.len()
        ))
    })();
    verdict(4, "bit-exact color operators and filter fixtures", outcome);
}

/// Held-out flow-matching loss in the inference configuration (student
/// prompt on the grayscale, control on), averaged over fixed draws.
fn inference_fm_loss(p: &ModelParams, items: &[ImageItem]) -> f64 {
    let tree = SeedTree::new(99);
    let mut total = 0.0;
    let mut n = 0;
    for (i, item) in items.iter().enumerate() {
        for k in 0..4 {
            let mut rng = tree.stream(&format!("{i}/{k}"));
            let t = rng.random::<f64>();
            let eps = standard_normal(&mut rng, item.gt.shape());
            let case = FmCase {
                x0: &item.gt,
                eps: &eps,
                t,
                cond: &item.cond,
                prompt: PromptSource::Student(&item.gray_rgb),
                control_scale: 1.0,
                use_lora: p.lora.is_some(),
            };
            total += model_fm_loss(p, &case, GroupSet::empty()).unwrap().value;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn criterion_5_end_to_end() {
    let outcome = (|| {
        let s = shared();
        let items = image_items(&s.held_out_images(), &s.cfg.net).map_err(|e| e.to_string())?;
        let init = ModelParams::init(s.cfg.net, SeedTree::new(SEED).seed("init")).unwrap();
        let trained = s.outcome.after(Stage::BasicColor).ok_or("no basic-color snapshot")?;
        let (before, after) = (inference_fm_loss(&init, &items), inference_fm_loss(trained, &items));
        let drop = 1.0 - after / before;
        ensure(drop >= 0.5, || format!("held-out loss {before:.4} -> {after:.4}, drop {:.1}%", 100.0 * drop))?;
        let base = &s.outcome.reports[0].val_loss;
        let base_drop = 1.0 - base.last().unwrap() / base[0];

        let mut hits = 0;
        let mut mae = 0.0;
        for c in &s.held_out {
            let gray = rgb_to_gray(&c.image);
            let out = colorize(trained, &gray, &SampleOptions::default()).map_err(|e| e.to_string())?;
            hits += usize::from(dominant_hue_class(&out) == Some(c.label));
            mae += gray_mae(&out, &gray).map_err(|e| e.to_string())?;
        }
        let acc = hits as f64 / s.held_out.len() as f64;
        let mae = mae / s.held_out.len() as f64;
        ensure(acc >= 0.9, || format!("hue accuracy {hits}/{}", s.held_out.len()))?;
        ensure(mae <= 8.0, || format!("gray MAE {mae:.2} levels"))?;
        ensure(s.stage_seconds <= 600.0, || format!("stages took {:.0}s", s.stage_seconds))?;
        Ok(format!(
            "held-out loss {before:.3} -> {after:.3} ({:.0}% drop; base stage {:.0}%), hue {hits}/{}, gray MAE {mae:.2}/255, {:.0}s",
            100.0 * drop,
            100.0 * base_drop,
            s.held_out.len(),
            s.stage_seconds
        ))
    })();
    verdict(5, "desk-scale colorization after the first three stages", outcome);
}

fn faded_conditions(held_out: &[LabeledImage]) -> Vec<Image8> {
    let range = AugRange::new(0.5, 0.95).unwrap();
    held_out.iter().enumerate().map(|(i, c)| build_triplet(&c.image, 7000 + i as u64, range).unwrap().condition).collect()
}

fn color_stats(p: &ModelParams, conds: &[Image8]) -> (f64, f64) {
    let (mut sat, mut cf) = (0.0, 0.0);
    for g in conds {
        let out = colorize(p, g, &SampleOptions::default()).unwrap();
        sat += hsv_stats(&out).mean_saturation;
        cf += colorfulness(&out);
    }
    (sat / conds.len() as f64, cf / conds.len() as f64)
}

#[test]
fn criterion_6_progressive_preference() {
    let outcome = (|| {
        let s = shared();
        let pre = s.outcome.after(Stage::BasicColor).ok_or("no basic-color snapshot")?;
        let conds = faded_conditions(&s.held_out);
        let (pre_sat, pre_cf) = color_stats(pre, &conds);
        let source = PairSource::Images { train: s.train.clone(), val: s.held_out_images()[..8].to_vec() };
        let run = |mode: DpoMode, seed: u64| -> Result<(f64, f64), String> {
            let mut p = pre.clone();
            let mut base = s.cfg.pro_dpo.clone();
            base.seed = seed;
            run_stage_pro_dpo(&mut p, &source, &s.cfg.dpo, mode, &base, &mut RunLog::new()).map_err(|e| e.to_string())?;
            Ok(color_stats(&p, &conds))
        };
        let mut wins = 0;
        let mut rows = Vec::new();
        for seed in 0..5 {
            let (sat, cf) = run(DpoMode::Progressive, seed)?;
            let (_, one_cf) = run(DpoMode::OneStage, seed)?;
            ensure(sat > pre_sat && cf > pre_cf, || {
                format!("seed {seed}: saturation {sat:.6} vs {pre_sat:.6}, colorfulness {cf:.4} vs {pre_cf:.4}")
            })?;
            wins += usize::from(cf >= one_cf);
            rows.push(format!("{:+.2e}/{:+.4}", sat - pre_sat, cf - pre_cf));
        }
        ensure(wins >= 3, || format!("progressive beat one-stage in {wins}/5 seeds"))?;
        Ok(format!(
            "pre-DPO saturation {pre_sat:.5}, colorfulness {pre_cf:.3}; gains per seed [{}]; beats one-stage in {wins}/5",
            rows.join(", ")
        ))
    })();
    verdict(6, "progressive preference stage raises saturation and colorfulness", outcome);
}

fn changed_groups(a: &ModelParams, b: &ModelParams) -> Vec<Group> {
    Group::ALL.into_iter().filter(|&g| a.group_digest(g) != b.group_digest(g)).collect()
}

fn groups(set: GroupSet) -> Vec<Group> {
    set.iter().collect()
}

#[test]
fn criterion_7_decoupling_masks() {
    let outcome = (|| {
        let s = shared();
        let init = ModelParams::init(s.cfg.net, SeedTree::new(SEED).seed("init")).unwrap();
        let mut prev = &init;
        let mut lines = Vec::new();
        for stage in [Stage::Base, Stage::Structure, Stage::BasicColor] {
            let p = s.outcome.after(stage).ok_or("missing snapshot")?;
            let changed = changed_groups(prev, p);
            ensure(changed == groups(stage.trainable()), || format!("{stage} changed {changed:?}"))?;
            lines.push(format!("{stage}: {changed:?}"));
            prev = p;
        }

        // The preference stage's output has its adapters merged into the
        // trunk; everything else must be untouched.
        let fin = s.outcome.after(Stage::ProDpo).ok_or("missing pro-dpo snapshot")?;
        let changed = changed_groups(prev, fin);
        ensure(changed.iter().all(|g| matches!(g, Group::Trunk | Group::Lora)), || format!("pro-dpo changed {changed:?}"))?;
        ensure(fin.lora.is_none(), || "adapters not merged".into())?;

        // Before the merge, optimizer steps on the preference loss touch
        // the adapters only.
        let mut policy = prev.merge_lora();
        policy.reset_lora(1);
        let reference = policy.clone();
        let start = policy.clone();
        let (train, _) = corpus();
        let mut adam = AdamState::new(&policy);
        let dcfg = DpoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (i, img) in train.iter().take(4).enumerate() {
            let trip = build_triplet(img, 50 + i as u64, dcfg.stage1.range).unwrap();
            let pair = PairTensors::from_triplet(&trip).unwrap();
            let eps_w = standard_normal(&mut rng, pair.winner.shape());
            let eps_l = standard_normal(&mut rng, pair.loser.shape());
            let prompt = policy.prompt.encode(&pair.cond_rgb).unwrap();
            let case = DpoCase { pair: &pair, t: 0.6, eps_w: &eps_w, eps_l: &eps_l, prompt: &prompt, control_scale: 1.0 };
            let l = dpo_loss(&policy, &reference, &case, &dcfg, Stage::ProDpo.trainable()).unwrap();
            adam_step(&mut policy, l.loss.grads.as_ref().unwrap(), &mut adam, &AdamHyper::with_lr(1e-3), Stage::ProDpo.trainable())
                .map_err(|e| e.to_string())?;
        }
        let changed = changed_groups(&start, &policy);
        ensure(changed == vec![Group::Lora], || format!("preference steps changed {changed:?}"))?;
        lines.push(format!("pro-dpo: {changed:?} (merged output: {:?})", changed_groups(prev, fin)));
        Ok(lines.join("; "))
    })();
    verdict(7, "each stage mutates only its parameter group", outcome);
}

fn checkpoint_bytes(p: &ModelParams) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.cflx");
    save_params(p, &path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn criterion_8_determinism() {
    let outcome = (|| {
        let s = shared();
        let val = s.held_out_images();
        let again = run_pipeline(&s.train, &val, &s.cfg, &mut RunLog::new()).map_err(|e| e.to_string())?;
        ensure(again.snapshots.len() == s.outcome.snapshots.len(), || "different stage count".into())?;
        for ((stage, a), (_, b)) in s.outcome.snapshots.iter().zip(&again.snapshots) {
            ensure(checkpoint_bytes(a) == checkpoint_bytes(b), || format!("{stage} checkpoints differ"))?;
        }
        let bytes = checkpoint_bytes(again.params()).len();
        let mut pngs = 0;
        for c in &s.held_out {
            let gray = rgb_to_gray(&c.image);
            let a = colorize(s.outcome.params(), &gray, &SampleOptions::default()).unwrap();
            let b = colorize(again.params(), &gray, &SampleOptions::default()).unwrap();
            ensure(encode_png(&a).unwrap() == encode_png(&b).unwrap(), || "sample PNGs differ".into())?;
            pngs += 1;
        }
        Ok(format!("{} checkpoints ({bytes} bytes final) and {pngs} PNGs identical", s.outcome.snapshots.len()))
    })();
    verdict(8, "same seed gives byte-identical checkpoints and samples", outcome);
}

fn endpoint(stub: &StubJudge, model: &str) -> EndpointConfig {
    EndpointConfig {
        base_url: stub.base_url.clone(),
        model: model.into(),
        token_env: "FLOWTINT_TEST_UNSET_TOKEN".into(),
        timeout: Duration::from_secs(5),
        max_retries: 3,
        backoff: Duration::from_millis(5),
        max_backoff: Duration::from_millis(20),
        concurrency: 3,
        send_condition: true,
    }
}

#[test]
fn criterion_9_evaluation_plumbing() {
    let outcome = (|| {
        let dir = tempfile::tempdir().unwrap();
        let methods = ["ours", "ddcolor", "bigcolor", "ctrlcolor"];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ballots = Vec::new();
        for i in 0..250 {
            let a = methods[rng.random_range(0..4)];
            let b = loop {
                let m = methods[rng.random_range(0..4)];
                if m != a {
                    break m;
                }
            };
            let winner = match rng.random_range(0..4) {
                0 => "a",
                1 => "b",
                2 => a,
                _ => b,
            };
            ballots.push(Ballot::new(&format!("item{i:03}"), a, b, winner).unwrap());
        }
        let path = dir.path().join("ballots.tsv");
        write_ballots(&path, &ballots).unwrap();
        let read = read_ballots(&path).map_err(|e| e.to_string())?;
        ensure(read == ballots, || "ballot file does not round-trip".into())?;
        let text = std::fs::read_to_string(&path).unwrap();
        for m in methods {
            let (mut wins, mut seen) = (0u32, 0u32);
            for line in text.lines() {
                let f: Vec<&str> = line.split('\t').collect();
                let slot = if f[1] == m { "a" } else if f[2] == m { "b" } else { continue };
                seen += 1;
                if f[3] == slot || f[3] == m {
                    wins += 1;
                }
            }
            let got = win_rate(&read, m).map_err(|e| e.to_string())?;
            ensure(got == wins as f64 / seen as f64, || format!("{m}: {got} vs hand count {wins}/{seen}"))?;
        }
        let total: f64 = methods.iter().map(|m| win_rate_against(&read, "ours", m).unwrap_or(0.0)).sum();
        ensure(total.is_finite(), || "pairwise rates".into())?;

        let stub = StubJudge::start();
        let audit = AuditLog::new(&dir.path().join("audit.jsonl"));
        let out = random_image(&mut rng, 16, 16);
        let cond = rgb_to_gray(&out);
        let client = |m: &str| JudgeClient::new(endpoint(&stub, m), JudgeTemplate::default()).unwrap();

        let items: Vec<_> = (0..5).map(|i| (format!("img{i}"), out.clone(), Some(cond.clone()))).collect();
        let fixed = client("fixed").score_all(&items, Some(&audit));
        let expected = flowtint::eval::parse_reply(stub_judge::REPLY).unwrap();
        for r in &fixed {
            let r = r.as_ref().map_err(|e| e.to_string())?;
            ensure(r.scores == expected && r.attempts == 1, || format!("fixed reply scored {r:?}"))?;
        }

        let flaky = client("flaky").score("flaky-item", &out, Some(&cond), Some(&audit)).map_err(|e| e.to_string())?;
        ensure(flaky.attempts == 3 && flaky.scores == expected, || format!("retry path gave {flaky:?}"))?;

        match client("partial").score("partial-item", &out, None, Some(&audit)) {
            Err(Error::Parse(m)) => ensure(m.contains("OA") && m.contains("AES: 75"), || m.clone())?,
            other => return Err(format!("partial reply gave {other:?}")),
        }
        ensure(stub.hits("partial") == 1, || "parse failure was retried".into())?;
        match client("down").score("down-item", &out, None, Some(&audit)) {
            Err(Error::Transport { attempts: 4, .. }) => {}
            other => return Err(format!("persistent 500 gave {other:?}")),
        }
        match client("denied").score("denied-item", &out, None, Some(&audit)) {
            Err(Error::Transport { attempts: 1, .. }) => {}
            other => return Err(format!("401 gave {other:?}")),
        }

        let log = std::fs::read_to_string(audit.path()).unwrap();
        let recs: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        ensure(recs.len() == 5 + 3 + 1 + 4 + 1, || format!("{} audit records", recs.len()))?;
        let statuses: Vec<u64> =
            recs.iter().filter(|r| r["item"] == "flaky-item").map(|r| r["status"].as_u64().unwrap()).collect();
        ensure(statuses == [503, 503, 200], || format!("flaky statuses {statuses:?}"))?;
        Ok(format!(
            "250 ballots match hand counts for {} methods; stub judge: {} fixed, 2 retries then success, parse failure not retried, {} audit records",
            methods.len(),
            fixed.len(),
            recs.len()
        ))
    })();
    verdict(9, "win rates and external scorer round trip", outcome);
}
