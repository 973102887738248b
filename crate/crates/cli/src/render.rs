//! 16-bit grayscale PNG rendering for the labeling service.
//!
//! Pixels map linearly onto the full `u16` range: `value = offset + scale·code`.
//! The mapping and a suggested display window travel as metadata (PNG text
//! chunks and response headers); the window is never baked into the codes.

use std::io::Cursor;

use anyhow::{ensure, Context, Result};
use mriq_core::sim::MagnitudeImage;

/// Fraction of the brightest pixels left out of the suggested window.
const WINDOW_CLIP: f64 = 0.005;

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub png: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub offset: f64,
    pub scale: f64,
    pub window_center: f64,
    pub window_width: f64,
}

impl Rendered {
    pub fn value(&self, code: u16) -> f64 {
        self.offset + self.scale * f64::from(code)
    }
}

/// Linear code for every pixel, row-major, plus `(offset, scale)`.
pub fn codes(values: &[f64]) -> (Vec<u16>, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi <= lo {
        let offset = if lo.is_finite() { lo } else { 0.0 };
        return (vec![0; values.len()], offset, 1.0);
    }
    let scale = (hi - lo) / f64::from(u16::MAX);
    let codes = values
        .iter()
        .map(|&v| ((v - lo) / scale).round().clamp(0.0, f64::from(u16::MAX)) as u16)
        .collect();
    (codes, lo, scale)
}

pub fn render(img: &MagnitudeImage) -> Result<Rendered> {
    let (height, width) = img.dim();
    let values: Vec<f64> = img.pixels.iter().copied().collect();
    let (codes, offset, scale) = codes(&values);

    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted.first().copied().unwrap_or(0.0);
    let hi_idx = ((sorted.len() as f64) * (1.0 - WINDOW_CLIP)).floor() as usize;
    let hi = sorted.get(hi_idx.min(sorted.len().saturating_sub(1))).copied().unwrap_or(lo);
    let window_width = (hi - lo).max(scale);
    let window_center = lo + window_width / 2.0;

    let mut png_bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut png_bytes), width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        for (key, v) in [
            ("mriq:offset", offset),
            ("mriq:scale", scale),
            ("mriq:window_center", window_center),
            ("mriq:window_width", window_width),
        ] {
            enc.add_text_chunk(key.to_string(), format!("{v:e}"))?;
        }
        let mut writer = enc.write_header()?;
        let data: Vec<u8> = codes.iter().flat_map(|c| c.to_be_bytes()).collect();
        writer.write_image_data(&data)?;
        writer.finish()?;
    }
    Ok(Rendered { png: png_bytes, width, height, offset, scale, window_center, window_width })
}

/// Decodes a 16-bit grayscale PNG into `(width, height, codes)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().context("reading PNG header")?;
    let mut buf = vec![0; reader.output_buffer_size().context("PNG too large")?];
    let info = reader.next_frame(&mut buf)?;
    ensure!(
        info.color_type == png::ColorType::Grayscale && info.bit_depth == png::BitDepth::Sixteen,
        "expected 16-bit grayscale, got {:?} at {:?}",
        info.color_type,
        info.bit_depth
    );
    let codes = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((info.width as usize, info.height as usize, codes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_renders_to_zero_codes() {
        let (c, offset, scale) = codes(&[2.5; 4]);
        assert_eq!(c, vec![0; 4]);
        assert_eq!((offset, scale), (2.5, 1.0));
    }

    #[test]
    fn extremes_hit_the_ends_of_the_range() {
        let (c, _, _) = codes(&[1.0, 3.0, 2.0]);
        assert_eq!(c[0], 0);
        assert_eq!(c[1], u16::MAX);
        assert!(c[2] == 32767 || c[2] == 32768);
    }
}
