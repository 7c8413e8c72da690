//! Image artifacts: mask PNGs, overlays and score histograms.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};
use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, MetricsReport};

/// Red channel value reserved for mask pixels in overlays.
pub const OVERLAY_MARK: u8 = 255;
const HISTOGRAM_BINS: usize = 20;

/// `[3, H, W]` tensor in `[0, 1]` to an 8-bit image.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let hwc = image.permute((1, 2, 0))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let raw = hwc.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("image buffer size".into()))
}

/// Foreground as 255, background as 0.
pub fn mask_image(mask: &BinaryMask) -> GrayImage {
    let raw = mask.data().iter().map(|b| if *b { 255 } else { 0 }).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("mask dimensions")
}

/// `[H, W]` values in `[-1, 1]` mapped linearly to `0..=255`.
pub fn continuous_image(values: &Tensor) -> Result<GrayImage> {
    let (h, w) = values.dims2()?;
    let v = values.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let raw = v.iter().map(|x| ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
    GrayImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("mask buffer size".into()))
}

/// Mask pixels get full red and halved green/blue; every other pixel keeps
/// its colour with red capped one below, so `R == 255` marks the mask exactly.
pub fn overlay(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    if (image.height() as usize, image.width() as usize) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "overlay of {}x{} image with {}x{} mask",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let [r, g, b] = image.get_pixel(x, y).0;
        if mask.get(y as usize, x as usize) {
            Rgb([OVERLAY_MARK, g / 2, b / 2])
        } else {
            Rgb([r.min(OVERLAY_MARK - 1), g, b])
        }
    }))
}

/// Pixels an overlay marks as foreground.
pub fn overlay_positives(overlay: &RgbImage) -> Result<BinaryMask> {
    let data = overlay.pixels().map(|p| p[0] == OVERLAY_MARK).collect();
    BinaryMask::new(overlay.height() as usize, overlay.width() as usize, data)
}

/// Counts of `values` (clamped to `[0, 1]`) in equal-width bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for v in values {
        let i = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

/// Bar chart of a histogram over `[0, 1]`.
pub fn histogram_image(counts: &[usize]) -> RgbImage {
    let (bar, gap, height, margin) = (16u32, 2u32, 160u32, 8u32);
    let width = margin * 2 + counts.len() as u32 * (bar + gap);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = RgbImage::from_pixel(width, height + 2 * margin, Rgb([255, 255, 255]));
    for (i, c) in counts.iter().enumerate() {
        let h = ((*c as f64 / max) * height as f64).round() as u32;
        let x0 = margin + i as u32 * (bar + gap);
        for x in x0..x0 + bar {
            for y in (margin + height - h)..(margin + height) {
                img.put_pixel(x, y, Rgb([60, 110, 200]));
            }
        }
    }
    for x in margin..width - margin {
        img.put_pixel(x, margin + height, Rgb([0, 0, 0]));
    }
    img
}

/// Histogram plots of per-image IoU and F1 plus their bin counts.
pub fn write_score_plots(report: &MetricsReport, dir: &Path) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "bins={HISTOGRAM_BINS} range=0..1");
    for (name, values) in [
        ("iou", report.per_image.iter().map(|s| s.iou).collect::<Vec<_>>()),
        ("f1", report.per_image.iter().map(|s| s.f1).collect::<Vec<_>>()),
    ] {
        let counts = histogram(&values, HISTOGRAM_BINS);
        let path = dir.join(format!("{name}_histogram.png"));
        histogram_image(&counts).save(&path).map_err(|e| Error::image(&path, e))?;
        let joined: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(text, "{name}={}", joined.join(","));
    }
    let path = dir.join("score_histograms.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
