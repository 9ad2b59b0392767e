//! Dataset filtering, the synthetic shape corpus, and preference triplets.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::augment::{apply_chain, sample_chain, AugRange, AugRecord};
use crate::color_math::{colorfulness, hsv_stats, hsv_to_rgb, quantize, rgb_to_gray, rgb_to_hsv, Image8};
use crate::error::{Error, Result};
use crate::image_io::{read_png, write_png};
use crate::rng::stream_from_seed;

/// Per-criterion dataset filter. Window bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub min_colorfulness: Option<f64>,
    pub sat_window: Option<(f64, f64)>,
    pub bright_window: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterPreset {
    BasicColor,
    Dpo,
    None,
}

impl FromStr for FilterPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic-color" => Ok(FilterPreset::BasicColor),
            "dpo" => Ok(FilterPreset::Dpo),
            "none" => Ok(FilterPreset::None),
            _ => Err(Error::InvalidArgument(format!("unknown filter preset `{s}`"))),
        }
    }
}

impl FilterSpec {
    pub const COLORFULNESS_THRESHOLD: f64 = 15.0;
    pub const SAT_WINDOW: (f64, f64) = (0.3, 0.7);
    pub const BRIGHT_WINDOW: (f64, f64) = (0.4, 0.8);

    pub fn none() -> Self {
        Self { min_colorfulness: None, sat_window: None, bright_window: None }
    }

    /// Colorfulness only, threshold 15.
    pub fn basic_color() -> Self {
        Self { min_colorfulness: Some(Self::COLORFULNESS_THRESHOLD), ..Self::none() }
    }

    /// Colorfulness plus HSV saturation and brightness windows.
    pub fn dpo() -> Self {
        Self {
            min_colorfulness: Some(Self::COLORFULNESS_THRESHOLD),
            sat_window: Some(Self::SAT_WINDOW),
            bright_window: Some(Self::BRIGHT_WINDOW),
        }
    }

    pub fn preset(p: FilterPreset) -> Self {
        match p {
            FilterPreset::BasicColor => Self::basic_color(),
            FilterPreset::Dpo => Self::dpo(),
            FilterPreset::None => Self::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("saturation", self.sat_window), ("brightness", self.bright_window)] {
            if let Some((lo, hi)) = w {
                if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                    return Err(Error::InvalidArgument(format!("{name} window ({lo}, {hi}) invalid")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRow {
    pub colorfulness: f64,
    pub mean_saturation: f64,
    pub mean_brightness: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub kept: Vec<usize>,
    pub rows: Vec<FilterRow>,
}

fn in_window(v: f64, w: Option<(f64, f64)>) -> bool {
    w.is_none_or(|(lo, hi)| lo <= v && v <= hi)
}

pub fn filter_dataset(images: &[Image8], spec: &FilterSpec) -> Result<FilterReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot filter an empty image list".into()));
    }
    spec.validate()?;
    let rows: Vec<FilterRow> = images
        .iter()
        .map(|img| {
            let cf = colorfulness(img);
            let hsv = hsv_stats(img);
            let kept = spec.min_colorfulness.is_none_or(|m| cf >= m)
                && in_window(hsv.mean_saturation, spec.sat_window)
                && in_window(hsv.mean_brightness, spec.bright_window);
            FilterRow {
                colorfulness: cf,
                mean_saturation: hsv.mean_saturation,
                mean_brightness: hsv.mean_brightness,
                kept,
            }
        })
        .collect();
    let kept = rows.iter().enumerate().filter(|(_, r)| r.kept).map(|(i, _)| i).collect();
    Ok(FilterReport { kept, rows })
}

/// Dominant-hue classes of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HueClass {
    /// Bright orange/yellow disks.
    Warm,
    /// Dark blue rectangles.
    Cool,
}

impl HueClass {
    pub const ALL: [HueClass; 2] = [HueClass::Warm, HueClass::Cool];

    pub fn name(self) -> &'static str {
        match self {
            HueClass::Warm => "warm",
            HueClass::Cool => "cool",
        }
    }

    /// Hue (in turns) the class is centred on.
    pub fn center(self) -> f64 {
        match self {
            HueClass::Warm => 0.08,
            HueClass::Cool => 0.60,
        }
    }
}

impl FromStr for HueClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm" => Ok(HueClass::Warm),
            "cool" => Ok(HueClass::Cool),
            _ => Err(Error::InvalidArgument(format!("unknown hue class `{s}`"))),
        }
    }
}

/// Saturation-weighted circular mean hue of the chromatic pixels, snapped to
/// the nearest class centre. `None` when no pixel is chromatic.
pub fn dominant_hue_class(img: &Image8) -> Option<HueClass> {
    let (mut sx, mut sy) = (0.0, 0.0);
    for [r, g, b] in img.pixels() {
        let (h, s, v) = rgb_to_hsv(r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
        if s >= 0.2 && v >= 0.1 {
            let a = std::f64::consts::TAU * h;
            sx += s * a.cos();
            sy += s * a.sin();
        }
    }
    if sx == 0.0 && sy == 0.0 {
        return None;
    }
    let mean = (sy.atan2(sx) / std::f64::consts::TAU).rem_euclid(1.0);
    let dist = |c: HueClass| {
        let d = (mean - c.center()).abs();
        d.min(1.0 - d)
    };
    HueClass::ALL.into_iter().min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image8,
    pub label: HueClass,
}

pub const MIN_CORPUS_SIZE: usize = 8;
pub const MAX_CORPUS_SIZE: usize = 64;

/// Deterministic corpus of colored shapes on flat neutral backgrounds.
/// Classes alternate, so any prefix is balanced.
pub fn gen_synthetic_corpus(n: usize, size: usize, palette_seed: u64) -> Result<Vec<LabeledImage>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    if !(MIN_CORPUS_SIZE..=MAX_CORPUS_SIZE).contains(&size) {
        return Err(Error::InvalidArgument(format!(
            "image size {size} outside [{MIN_CORPUS_SIZE}, {MAX_CORPUS_SIZE}]"
        )));
    }
    let mut rng = stream_from_seed(palette_seed);
    Ok((0..n)
        .map(|i| {
            let label = HueClass::ALL[i % 2];
            LabeledImage { image: render_shapes(&mut rng, size, label), label }
        })
        .collect())
}

fn render_shapes<R: Rng>(rng: &mut R, size: usize, label: HueClass) -> Image8 {
    let bg = rng.random_range(95u8..=125);
    let mut px = vec![[bg; 3]; size * size];
    let mut covered = vec![false; size * size];
    let target = rng.random_range(0.45..0.7);
    let s = size as f64;
    for _ in 0..8 {
        let color = match label {
            HueClass::Warm => {
                hsv_to_rgb(rng.random_range(0.04..0.12), rng.random_range(0.6..0.85), rng.random_range(0.9..1.0))
            }
            HueClass::Cool => {
                hsv_to_rgb(rng.random_range(0.56..0.64), rng.random_range(0.65..0.9), rng.random_range(0.45..0.62))
            }
        };
        let color = [quantize(color.0), quantize(color.1), quantize(color.2)];
        match label {
            HueClass::Warm => {
                let r = rng.random_range(0.18 * s..0.32 * s);
                let cx = rng.random_range(0.0..s);
                let cy = rng.random_range(0.0..s);
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            px[y * size + x] = color;
                            covered[y * size + x] = true;
                        }
                    }
                }
            }
            HueClass::Cool => {
                let w = rng.random_range(size / 4..=size / 2);
                let h = rng.random_range(size / 4..=size / 2);
                let x0 = rng.random_range(0..=size - w);
                let y0 = rng.random_range(0..=size - h);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        px[y * size + x] = color;
                        covered[y * size + x] = true;
                    }
                }
            }
        }
        let frac = covered.iter().filter(|&&c| c).count() as f64 / (size * size) as f64;
        if frac >= target {
            break;
        }
    }
    Image8::new(size, size, 3, px.into_iter().flatten().collect()).expect("valid dimensions")
}

/// Writes `img_NNNN.png` files plus `labels.tsv` (`path<TAB>label`).
pub fn write_corpus(dir: &Path, corpus: &[LabeledImage]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("labels.tsv");
    let mut out = BufWriter::new(fs::File::create(&manifest)?);
    for (i, item) in corpus.iter().enumerate() {
        let name = format!("img_{i:04}.png");
        write_png(&dir.join(&name), &item.image)?;
        writeln!(out, "{name}\t{}", item.label.name())?;
    }
    out.flush()?;
    Ok(manifest)
}

pub fn read_corpus(manifest: &Path) -> Result<Vec<LabeledImage>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_records(manifest, 2)?
        .into_iter()
        .map(|(line, f)| {
            let label = f[1].parse().map_err(|e: Error| manifest_err(manifest, line, e.to_string()))?;
            Ok(LabeledImage { image: load_referenced(&base.join(&f[0]))?, label })
        })
        .collect()
}

/// A preference record: the condition is the grayscale of the loser.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub condition: Image8,
    pub winner: Image8,
    pub loser: Image8,
    pub aug: AugRecord,
    pub label: Option<HueClass>,
}

impl Triplet {
    pub fn check(&self) -> Result<()> {
        if self.condition.channels() != 1 {
            return Err(Error::InvalidImage("triplet condition must be 1-channel".into()));
        }
        if !(self.condition.same_size(&self.winner) && self.winner.same_size(&self.loser)) {
            return Err(Error::Shape("triplet images differ in size".into()));
        }
        if self.condition != rgb_to_gray(&self.loser) {
            return Err(Error::InvalidImage("triplet condition is not the grayscale of the loser".into()));
        }
        Ok(())
    }
}

pub fn build_triplet(gt: &Image8, seed: u64, range: AugRange) -> Result<Triplet> {
    gt.expect_rgb("triplet construction")?;
    let aug = sample_chain(seed, range);
    let loser = apply_chain(gt, &aug)?;
    Ok(Triplet { condition: rgb_to_gray(&loser), winner: gt.clone(), loser, aug, label: None })
}

/// Writes triplet PNGs next to `manifest` and one tab-separated record per
/// triplet: condition, winner, loser, aug token, label.
pub fn write_manifest(triplets: &[Triplet], manifest: &Path) -> Result<()> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(manifest)?);
    for (i, t) in triplets.iter().enumerate() {
        let names = [format!("cond_{i:05}.png"), format!("win_{i:05}.png"), format!("lose_{i:05}.png")];
        for (name, img) in names.iter().zip([&t.condition, &t.winner, &t.loser]) {
            write_png(&dir.join(name), img)?;
        }
        let label = t.label.map(HueClass::name).unwrap_or("");
        writeln!(out, "{}\t{}\t{}\t{}\t{label}", names[0], names[1], names[2], t.aug)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(manifest: &Path) -> Result<Vec<Triplet>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_records(manifest, 5)?
        .into_iter()
        .map(|(line, f)| {
            let aug: AugRecord = f[3].parse().map_err(|e: Error| manifest_err(manifest, line, e.to_string()))?;
            let label = match f[4].as_str() {
                "" => None,
                s => Some(s.parse().map_err(|e: Error| manifest_err(manifest, line, e.to_string()))?),
            };
            let t = Triplet {
                condition: load_referenced(&base.join(&f[0]))?,
                winner: load_referenced(&base.join(&f[1]))?,
                loser: load_referenced(&base.join(&f[2]))?,
                aug,
                label,
            };
            t.check().map_err(|e| manifest_err(manifest, line, e.to_string()))?;
            Ok(t)
        })
        .collect()
}

fn load_referenced(path: &Path) -> Result<Image8> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_png(path)
}

fn manifest_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Manifest { path: path.to_path_buf(), line, msg }
}

/// Non-empty lines split on tabs, each required to have `fields` fields.
fn read_records(path: &Path, fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<String> = line.split('\t').map(str::to_owned).collect();
        if parts.len() != fields {
            return Err(manifest_err(path, i + 1, format!("expected {fields} tab-separated fields, found {}", parts.len())));
        }
        out.push((i + 1, parts));
    }
    Ok(out)
}
