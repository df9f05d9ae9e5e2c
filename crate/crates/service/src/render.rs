//! Grayscale scalogram images: log-frequency rows, low frequencies at the bottom.

use std::io::Cursor;

use anyhow::Result;
use image::{GrayImage, ImageFormat, Luma};
use qbe_core::scattering::{scalogram, Filterbank};
use qbe_core::signal::{to_canonical, Waveform};

/// Pixel rows per band.
const ROW_HEIGHT: u32 = 3;
const MAX_WIDTH: usize = 800;
/// Dynamic range shown, in dB below the loudest cell.
const RANGE_DB: f64 = 60.0;

/// PNG of `|x * psi|` on a dB scale, dark where loud.
pub fn scalogram_png(w: &Waveform, fb: &Filterbank, hop: usize) -> Result<Vec<u8>> {
    let w = to_canonical(w)?;
    let s = scalogram(&w, fb, hop)?;
    let frames = s.n_frames().max(1);
    let width = frames.min(MAX_WIDTH);
    let bands = s.magnitudes.len();
    // average frames into columns
    let columns: Vec<Vec<f64>> = s
        .magnitudes
        .iter()
        .map(|row| {
            (0..width)
                .map(|c| {
                    let lo = c * frames / width;
                    let hi = ((c + 1) * frames / width).max(lo + 1).min(row.len().max(lo + 1));
                    let slice = &row[lo.min(row.len())..hi.min(row.len())];
                    if slice.is_empty() {
                        0.0
                    } else {
                        slice.iter().sum::<f64>() / slice.len() as f64
                    }
                })
                .collect()
        })
        .collect();
    let peak = columns.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let mut img = GrayImage::new(width as u32, bands as u32 * ROW_HEIGHT);
    for (b, row) in columns.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let level = if peak > 0.0 && v > 0.0 {
                (1.0 + 20.0 * (v / peak).log10() / RANGE_DB).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let shade = (255.0 * (1.0 - level)).round() as u8;
            let top = (bands - 1 - b) as u32 * ROW_HEIGHT;
            for dy in 0..ROW_HEIGHT {
                img.put_pixel(c as u32, top + dy, Luma([shade]));
            }
        }
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
