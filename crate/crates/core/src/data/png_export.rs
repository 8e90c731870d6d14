//! 8-bit PNG previews. Axis 0 maps to rows, axis 1 to columns.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::ScalarField;

fn check_2d(field: &ScalarField) -> Result<(usize, usize)> {
    match field.grid().dims() {
        &[rows, cols] => Ok((rows, cols)),
        d => Err(Error::Unsupported(format!(
            "PNG export needs a 2D field, got rank {} (export slices instead)",
            d.len()
        ))),
    }
}

fn encode(rows: usize, cols: usize, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, cols as u32, rows as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Input(format!("png header: {e}")))?;
        w.write_image_data(pixels)
            .map_err(|e| Error::Input(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Min-max normalized grayscale bytes; a constant field maps to mid gray.
pub fn encode_png_gray(field: &ScalarField) -> Result<Vec<u8>> {
    let (rows, cols) = check_2d(field)?;
    let (lo, hi) = (field.min(), field.max());
    let pixels: Vec<u8> = field
        .values()
        .iter()
        .map(|&v| {
            if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect();
    encode(rows, cols, png::ColorType::Grayscale, &pixels)
}

pub fn export_png(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png_gray(field)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Diverging RGB colormap centered at 1: white where the determinant is 1,
/// blue for shrinking and red for expanding voxels, scaled by the largest
/// deviation from 1.
pub(crate) fn detjac_rgb(detjac: &ScalarField) -> Vec<u8> {
    let dev = detjac
        .values()
        .iter()
        .map(|d| (d - 1.0).abs())
        .fold(0.0, f64::max);
    let mut px = Vec::with_capacity(3 * detjac.values().len());
    for &d in detjac.values() {
        let t = if dev > 0.0 { (d - 1.0) / dev } else { 0.0 };
        let fade = (255.0 * (1.0 - t.abs())).round() as u8;
        px.extend_from_slice(&if t < 0.0 { [fade, fade, 255] } else { [255, fade, fade] });
    }
    px
}

pub fn export_detjac_png(detjac: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = check_2d(detjac)?;
    let path = path.as_ref();
    let bytes = encode(rows, cols, png::ColorType::Rgb, &detjac_rgb(detjac))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
