//! Binary PNM image writers (P5 grayscale, P6 color) for visualizing inputs,
//! explanation heatmaps, and overlays. Maxval is always 255.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Rounds half up to a byte; inputs are expected in [0, 255].
fn to_byte(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Heatmap colormap with linear stops black (0,0,0) -> red (255,0,0) ->
/// yellow (255,255,0) for t in [0,1].
pub fn colormap(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        (to_byte(510.0 * t), 0, 0)
    } else {
        (255, to_byte(510.0 * (t - 0.5)), 0)
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument {
            op: "write_pgm",
            detail: format!("{} pixels for {width}x{height}", pixels.len()),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[(u8, u8, u8)]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument {
            op: "write_ppm",
            detail: format!("{} pixels for {width}x{height}", pixels.len()),
        });
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &(r, g, b) in pixels {
        out.extend_from_slice(&[r, g, b]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Grayscale bytes of an [h,w,1] image with values in [0,1].
pub fn image_bytes(image: &Tensor) -> Result<Vec<u8>> {
    match image.shape() {
        [_, _, 1] => Ok(image.data().iter().map(|&v| to_byte(v * 255.0)).collect()),
        other => Err(Error::ShapeMismatch {
            op: "image_bytes",
            detail: format!("expected [h,w,1], got {other:?}"),
        }),
    }
}

/// Normalizes nonnegative scores by their maximum; an all-zero map stays
/// all-zero.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|&s| (s / max).max(0.0)).collect()
}

/// Writes a soft explanation as a grayscale PGM: each cell's byte is
/// round(255 * q_i / max q).
pub fn write_q_pgm(path: &Path, q: &[f64], grid: (usize, usize)) -> Result<()> {
    let norm = normalize_scores(q);
    let bytes: Vec<u8> = norm.iter().map(|&t| to_byte(255.0 * t)).collect();
    write_pgm(path, grid.1, grid.0, &bytes)
}

/// Writes a heatmap PPM of the normalized scores under the colormap.
pub fn write_heatmap_ppm(path: &Path, scores: &[f64], grid: (usize, usize)) -> Result<()> {
    let norm = normalize_scores(scores);
    let pixels: Vec<(u8, u8, u8)> = norm.iter().map(|&t| colormap(t)).collect();
    write_ppm(path, grid.1, grid.0, &pixels)
}

/// Writes an overlay PPM: the grayscale image alpha-blended (alpha = 0.5)
/// with the heatmap colors, the grid upsampled to the image size by
/// nearest-neighbor repetition.
pub fn write_overlay_ppm(
    path: &Path,
    image: &Tensor,
    scores: &[f64],
    grid: (usize, usize),
) -> Result<()> {
    let [h, w] = match image.shape() {
        [h, w, 1] => [*h, *w],
        other => {
            return Err(Error::ShapeMismatch {
                op: "write_overlay_ppm",
                detail: format!("expected [h,w,1], got {other:?}"),
            })
        }
    };
    let (gh, gw) = grid;
    if scores.len() != gh * gw || h % gh != 0 || w % gw != 0 {
        return Err(Error::InvalidArgument {
            op: "write_overlay_ppm",
            detail: format!(
                "{} scores on a {gh}x{gw} grid cannot cover a {h}x{w} image",
                scores.len()
            ),
        });
    }
    let (fy, fx) = (h / gh, w / gw);
    let norm = normalize_scores(scores);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gray = 255.0 * image.data()[y * w + x].clamp(0.0, 1.0);
            let t = norm[(y / fy) * gw + x / fx];
            let (r, g, b) = colormap(t);
            pixels.push((
                to_byte(0.5 * gray + 0.5 * r as f64),
                to_byte(0.5 * gray + 0.5 * g as f64),
                to_byte(0.5 * gray + 0.5 * b as f64),
            ));
        }
    }
    write_ppm(path, w, h, &pixels)
}
