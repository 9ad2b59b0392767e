//! Color-space conversions and the statistical color metrics used for
//! dataset filtering and evaluation.
//!
//! 8-bit images ([`Image8`]) are the I/O domain; [`ImageF`] holds the same
//! samples as `f64` in `[0, 1]` for the numerical core. All functions here
//! are pure.

use crate::error::{Error, Result};

/// Row-major interleaved 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image8 {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty dimensions {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, channels: 3, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_size(&self, other: &Image8) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Iterator over RGB triples. Gray images yield replicated triples.
    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        let c = self.channels;
        self.data.chunks_exact(c).map(move |p| if c == 3 { [p[0], p[1], p[2]] } else { [p[0]; 3] })
    }

    /// 1-channel images become 3-channel by replication; 3-channel images are cloned.
    pub fn to_rgb(&self) -> Image8 {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image8 { width: self.width, height: self.height, channels: 3, data }
    }

    pub(crate) fn expect_rgb(&self, what: &str) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::InvalidImage(format!("{what} requires a 3-channel image")));
        }
        Ok(())
    }
}

/// Row-major interleaved `f64` raster with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty dimensions {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage("data length does not match dimensions".into()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("sample {v} outside [0,1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel-planar copy (`[c][y][x]`), the layout the network works in.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * n + i] = v;
            }
        }
        out
    }

    /// Builds an image from planar data, clamping every sample into `[0, 1]`.
    pub fn from_planar_clamped(width: usize, height: usize, channels: usize, planar: &[f64]) -> Self {
        let n = width * height;
        assert_eq!(planar.len(), n * channels, "planar buffer size");
        let mut data = vec![0.0; n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[i * channels + c] = planar[c * n + i].clamp(0.0, 1.0);
            }
        }
        Self { width, height, channels, data }
    }
}

/// Mean HSV saturation and value over an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvStats {
    pub mean_saturation: f64,
    pub mean_brightness: f64,
}

#[inline]
pub fn gray_value(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32) / 1000) as u8
}

/// Integer BT.601 luma with floor division. 1-channel input is returned as is.
pub fn rgb_to_gray(img: &Image8) -> Image8 {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img.data.chunks_exact(3).map(|p| gray_value(p[0], p[1], p[2])).collect();
    Image8 { width: img.width, height: img.height, channels: 1, data }
}

/// Hexcone HSV. Hue is in `[0, 1)` and is 0 for achromatic input.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    if max <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let delta = max - min;
    let s = delta / max;
    if delta <= 0.0 {
        return (0.0, 0.0, v);
    }
    let h6 = if max == r {
        (g - b) / delta
    } else if max == g {
        2.0 + (b - r) / delta
    } else {
        4.0 + (r - g) / delta
    };
    let mut h = h6 / 6.0;
    if h < 0.0 {
        h += 1.0;
    }
    if h >= 1.0 {
        h -= 1.0;
    }
    (h, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (v, v, v);
    }
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Hasler–Süsstrunk colorfulness over opponent channels, with population
/// standard deviations.
pub fn colorfulness(img: &Image8) -> f64 {
    let n = img.pixel_count() as f64;
    let (mut s_rg, mut s_yb, mut q_rg, mut q_yb) = (0.0, 0.0, 0.0, 0.0);
    for [r, g, b] in img.pixels() {
        let (r, g, b) = (r as f64, g as f64, b as f64);
        let rg = r - g;
        let yb = 0.5 * (r + g) - b;
        s_rg += rg;
        s_yb += yb;
        q_rg += rg * rg;
        q_yb += yb * yb;
    }
    let mu_rg = s_rg / n;
    let mu_yb = s_yb / n;
    let var_rg = (q_rg / n - mu_rg * mu_rg).max(0.0);
    let var_yb = (q_yb / n - mu_yb * mu_yb).max(0.0);
    (var_rg + var_yb).sqrt() + 0.3 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
}

pub fn hsv_stats(img: &Image8) -> HsvStats {
    let n = img.pixel_count() as f64;
    let (mut s_sum, mut v_sum) = (0.0, 0.0);
    // from integer channels so window bounds like 0.3 are hit exactly
    for [r, g, b] in img.pixels() {
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        if max > 0 {
            s_sum += (max - min) as f64 / max as f64;
        }
        v_sum += max as f64 / 255.0;
    }
    HsvStats { mean_saturation: s_sum / n, mean_brightness: v_sum / n }
}

pub fn to_float(img: &Image8) -> ImageF {
    ImageF {
        width: img.width,
        height: img.height,
        channels: img.channels,
        data: img.data.iter().map(|&v| v as f64 / 255.0).collect(),
    }
}

/// Clamp to `[0, 1]`, scale to 255 and round half up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn from_float(img: &ImageF) -> Image8 {
    Image8 {
        width: img.width,
        height: img.height,
        channels: img.channels,
        data: img.data.iter().map(|&v| quantize(v)).collect(),
    }
}

/// Mean absolute difference in 8-bit units between two same-size gray images.
pub fn gray_mae(a: &Image8, b: &Image8) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let ga = rgb_to_gray(a);
    let gb = rgb_to_gray(b);
    let sum: f64 = ga
        .data
        .iter()
        .zip(&gb.data)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.pixel_count() as f64)
}
