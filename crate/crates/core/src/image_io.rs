//! 8-bit PNG reading and writing. Alpha channels are rejected on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::color_math::Image8;
use crate::error::{Error, Result};

pub fn read_png(path: &Path) -> Result<Image8> {
    let file = File::open(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("{}: only 8-bit samples are supported", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgba | png::ColorType::GrayscaleAlpha => {
            return Err(Error::Png(format!("{}: alpha channel not supported", path.display())))
        }
        other => return Err(Error::Png(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    buf.truncate(info.buffer_size());
    Image8::new(info.width as usize, info.height as usize, channels, buf)
}

pub fn write_png(path: &Path, img: &Image8) -> Result<()> {
    let file = File::create(path)?;
    encode(BufWriter::new(file), img).map_err(|e| png_err(path, e))
}

/// PNG bytes in memory.
pub fn encode_png(img: &Image8) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    encode(&mut buf, img).map_err(|e| Error::Png(e.to_string()))?;
    Ok(buf)
}

fn encode<W: Write>(w: W, img: &Image8) -> std::result::Result<(), png::EncodingError> {
    let mut encoder = png::Encoder::new(w, img.width() as u32, img.height() as u32);
    encoder.set_color(if img.channels() == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(img.data())?;
    writer.finish()
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png(format!("{}: {e}", path.display()))
}
