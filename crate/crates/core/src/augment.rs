//! Fading augmentations (brightness, contrast, saturation) and random
//! augmentation chains used to synthesize dispreferred samples.
//!
//! Each adjuster blends the image with a degenerate image (black, the
//! rounded mean gray level, or the grayscale version) and rounds half up:
//! `out = clamp(round(D + f * (in - D)), 0, 255)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::color_math::{gray_value, rgb_to_gray, Image8};
use crate::error::{Error, Result};
use crate::rng::stream_from_seed;

/// Largest accepted upper bound for an augmentation factor (over-exposure).
pub const MAX_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugKind {
    Brightness,
    Contrast,
    Saturation,
}

impl AugKind {
    pub const ALL: [AugKind; 3] = [AugKind::Brightness, AugKind::Contrast, AugKind::Saturation];

    pub fn code(self) -> char {
        match self {
            AugKind::Brightness => 'B',
            AugKind::Contrast => 'C',
            AugKind::Saturation => 'S',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'B' => Some(AugKind::Brightness),
            'C' => Some(AugKind::Contrast),
            'S' => Some(AugKind::Saturation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugRange {
    lo: f64,
    hi: f64,
}

impl AugRange {
    pub const STAGE1: AugRange = AugRange { lo: 0.5, hi: 0.8 };
    pub const STAGE2: AugRange = AugRange { lo: 0.75, hi: 0.95 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi <= MAX_FACTOR) {
            return Err(Error::InvalidArgument(format!(
                "augmentation range [{lo}, {hi}] must satisfy 0 < lo <= hi <= {MAX_FACTOR}"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, f: f64) -> bool {
        (self.lo..=self.hi).contains(&f)
    }
}

impl fmt::Display for AugRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

/// Parses `lo:hi`, e.g. `0.5:0.8`.
impl FromStr for AugRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("range `{s}` is not of the form lo:hi")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number `{v}` in range `{s}`")))
        };
        AugRange::new(parse(lo)?, parse(hi)?)
    }
}

/// Ordered augmentation steps, applied left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct AugRecord {
    steps: Vec<(AugKind, f64)>,
}

impl AugRecord {
    pub fn new(steps: Vec<(AugKind, f64)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("augmentation record has no steps".into()));
        }
        for (i, (kind, f)) in steps.iter().enumerate() {
            if !(f.is_finite() && *f >= 0.0) {
                return Err(Error::InvalidArgument(format!("factor {f} for {} is invalid", kind.code())));
            }
            if steps[..i].iter().any(|(k, _)| k == kind) {
                return Err(Error::InvalidArgument(format!("repeated augmentation {}", kind.code())));
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[(AugKind, f64)] {
        &self.steps
    }

    /// Compact form with two decimals, for logs.
    pub fn short(&self) -> String {
        self.steps
            .iter()
            .map(|(k, f)| format!("{}:{f:.2}", k.code()))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Full-precision token, e.g. `S:0.62|B:0.71`; parses back exactly.
impl fmt::Display for AugRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (kind, factor)) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{}:{factor:?}", kind.code())?;
        }
        Ok(())
    }
}

impl FromStr for AugRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed augmentation token `{s}`"));
        let steps = s
            .split('|')
            .map(|part| {
                let (code, factor) = part.split_once(':').ok_or_else(bad)?;
                let mut chars = code.chars();
                let kind = match (chars.next(), chars.next()) {
                    (Some(c), None) => AugKind::from_code(c).ok_or_else(bad)?,
                    _ => return Err(bad()),
                };
                let factor: f64 = factor.parse().map_err(|_| bad())?;
                Ok((kind, factor))
            })
            .collect::<Result<Vec<_>>>()?;
        AugRecord::new(steps)
    }
}

#[inline]
fn blend(degenerate: f64, value: u8, f: f64) -> u8 {
    (degenerate + f * (value as f64 - degenerate) + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn check_factor(f: f64) -> Result<()> {
    if !(f.is_finite() && f >= 0.0) {
        return Err(Error::InvalidArgument(format!("enhancement factor {f} must be finite and >= 0")));
    }
    Ok(())
}

pub fn adjust_brightness(img: &Image8, f: f64) -> Result<Image8> {
    check_factor(f)?;
    let data = img.data().iter().map(|&v| blend(0.0, v, f)).collect();
    Image8::new(img.width(), img.height(), img.channels(), data)
}

pub fn adjust_contrast(img: &Image8, f: f64) -> Result<Image8> {
    check_factor(f)?;
    let gray = rgb_to_gray(img);
    let sum: u64 = gray.data().iter().map(|&v| v as u64).sum();
    let mean = (sum as f64 / gray.pixel_count() as f64 + 0.5).floor();
    let data = img.data().iter().map(|&v| blend(mean, v, f)).collect();
    Image8::new(img.width(), img.height(), img.channels(), data)
}

pub fn adjust_saturation(img: &Image8, f: f64) -> Result<Image8> {
    check_factor(f)?;
    img.expect_rgb("saturation adjustment")?;
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let d = gray_value(p[0], p[1], p[2]) as f64;
            [blend(d, p[0], f), blend(d, p[1], f), blend(d, p[2], f)]
        })
        .collect();
    Image8::new(img.width(), img.height(), 3, data)
}

pub fn apply_step(img: &Image8, kind: AugKind, f: f64) -> Result<Image8> {
    match kind {
        AugKind::Brightness => adjust_brightness(img, f),
        AugKind::Contrast => adjust_contrast(img, f),
        AugKind::Saturation => adjust_saturation(img, f),
    }
}

pub fn apply_chain(img: &Image8, rec: &AugRecord) -> Result<Image8> {
    rec.steps().iter().try_fold(img.clone(), |acc, &(kind, f)| apply_step(&acc, kind, f))
}

/// Draws a chain: one of the 7 nonempty subsets of {B, C, S} uniformly, a
/// random order, and each factor uniform in the range.
pub fn sample_chain(seed: u64, range: AugRange) -> AugRecord {
    let mut rng = stream_from_seed(seed);
    sample_chain_with(&mut rng, range)
}

pub fn sample_chain_with<R: Rng + ?Sized>(rng: &mut R, range: AugRange) -> AugRecord {
    let mask: u8 = rng.random_range(1..8);
    let mut kinds: Vec<AugKind> = AugKind::ALL
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, &k)| k)
        .collect();
    kinds.shuffle(rng);
    let steps = kinds
        .into_iter()
        .map(|k| {
            let f = if range.lo == range.hi { range.lo } else { rng.random_range(range.lo..=range.hi) };
            (k, f)
        })
        .collect();
    AugRecord { steps }
}
