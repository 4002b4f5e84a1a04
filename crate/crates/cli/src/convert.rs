//! Importers for raw byte dumps and PNG tile grids.

use std::path::Path;

use dpdistill_core::data::LabeledImages;
use dpdistill_core::{Error, Result};

/// `N x C x H x W` unsigned bytes, scaled to `[0, 1]`, with one label byte per image.
pub fn from_raw(images: &Path, labels: &Path, shape: (usize, usize, usize)) -> Result<LabeledImages> {
    let bytes = std::fs::read(images)?;
    let labels = std::fs::read(labels)?;
    let per = shape.0 * shape.1 * shape.2;
    if per == 0 || bytes.len() != per * labels.len() {
        return Err(Error::Format(format!(
            "{} bytes do not hold {} images of shape {:?}",
            bytes.len(),
            labels.len(),
            shape
        )));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    LabeledImages::new(shape, bytes.iter().map(|&b| b as f64 / 255.0).collect(), labels, classes)
}

/// A PNG grid where tile row `r` holds images of class `r`. Tiles are
/// `tile = (h, w)` pixels separated by `gap` pixels, with a `gap` border.
pub fn from_png_grid(path: &Path, tile: (usize, usize), gap: usize, channels: usize) -> Result<LabeledImages> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (th, tw) = tile;
    if th == 0 || tw == 0 {
        return Err(Error::Validation("tile size must be positive".into()));
    }
    let (w, h, raw): (usize, usize, Vec<u8>) = match channels {
        1 => {
            let g = img.to_luma8();
            (g.width() as usize, g.height() as usize, g.into_raw())
        }
        3 => {
            let g = img.to_rgb8();
            (g.width() as usize, g.height() as usize, g.into_raw())
        }
        _ => return Err(Error::Validation("png grids hold 1 or 3 channels".into())),
    };
    let rows = h.saturating_sub(gap) / (th + gap);
    let cols = w.saturating_sub(gap) / (tw + gap);
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("a {w}x{h} image holds no {th}x{tw} tiles")));
    }
    if rows > 256 {
        return Err(Error::Format(format!("{rows} tile rows exceed 256 classes")));
    }
    let mut classes = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut imgs = Vec::with_capacity(cols);
        for c in 0..cols {
            let (y0, x0) = (gap + r * (th + gap), gap + c * (tw + gap));
            let mut v = vec![0.0; channels * th * tw];
            for y in 0..th {
                for x in 0..tw {
                    for k in 0..channels {
                        v[(k * th + y) * tw + x] = raw[((y0 + y) * w + x0 + x) * channels + k] as f64 / 255.0;
                    }
                }
            }
            imgs.push(v);
        }
        classes.push(imgs);
    }
    LabeledImages::from_classes((channels, th, tw), classes)
}
