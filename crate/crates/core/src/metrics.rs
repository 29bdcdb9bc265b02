//! PSNR, SSIM and the box-interior evaluation protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{perceptual_loss, FeatureExtractor, Patch, PatchPair};
use crate::scene_io::{pixel_in_boxes, BBox};

/// PSNR values are capped here when written to reports.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const PROXY_PATCH: usize = 32;

/// Boolean pixel selection, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn full(width: usize, height: usize) -> Self {
        PixelMask { width, height, bits: vec![true; width * height] }
    }

    pub fn from_boxes(width: usize, height: usize, boxes: &[BBox]) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| pixel_in_boxes(x as f64, y as f64, boxes))
            .collect();
        PixelMask { width, height, bits }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

fn check_shapes(a: &Image, b: &Image, mask: Option<&PixelMask>) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid(format!("image shapes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height {
            return Err(Error::invalid("mask shape differs from the images"));
        }
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image, mask: Option<&PixelMask>) -> Result<f64> {
    check_shapes(a, b, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..a.pixel_count() {
        if mask.is_some_and(|m| !m.bits[p]) {
            continue;
        }
        for c in 0..3 {
            let d = a.data[3 * p + c] - b.data[3 * p + c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::invalid("empty evaluation mask"));
    }
    Ok(sum / count as f64)
}

/// `10·log₁₀(1/MSE)` over the selected pixels; `+∞` for identical inputs.
pub fn psnr(a: &Image, b: &Image, mask: Option<&PixelMask>) -> Result<f64> {
    let m = mse(a, b, mask)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5) over window centers inside the mask, averaged over channels.
pub fn ssim(a: &Image, b: &Image, mask: Option<&PixelMask>) -> Result<f64> {
    check_shapes(a, b, mask)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let win = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut centers = 0usize;
    for cy in r..a.height - r {
        for cx in r..a.width - r {
            if mask.is_some_and(|m| !m.get(cx, cy)) {
                continue;
            }
            for c in 0..3 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let w = win[wy * SSIM_WINDOW + wx];
                        let p = ((cy + wy - r) * a.width + cx + wx - r) * 3 + c;
                        let (va, vb) = (a.data[p], b.data[p]);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            centers += 1;
        }
    }
    if centers == 0 {
        return Err(Error::invalid("SSIM region contains no complete window"));
    }
    Ok(total / (3 * centers) as f64)
}

fn crop_patch(img: &Image, x0: usize, y0: usize, size: usize) -> Patch {
    Patch::from_fn(size, |x, y, c| img.data[((y0 + y) * img.width + x0 + x) * 3 + c])
}

fn clamp_origin(center: f64, size: usize, extent: usize) -> usize {
    let start = (center - size as f64 / 2.0).round().max(0.0) as usize;
    start.min(extent - size)
}

/// Mean perceptual distance over square patches: one per box, or a tiling of the frame when `boxes` is `None`.
pub fn lpips_proxy(a: &Image, b: &Image, boxes: Option<&[BBox]>, extractor: &dyn FeatureExtractor) -> Result<f64> {
    check_shapes(a, b, None)?;
    let size = PROXY_PATCH.min(a.width).min(a.height);
    let mut origins = Vec::new();
    match boxes {
        Some(bs) => {
            for bx in bs {
                let (cx, cy) = bx.center();
                origins.push((clamp_origin(cx, size, a.width), clamp_origin(cy, size, a.height)));
            }
        }
        None => {
            for y in (0..=a.height - size).step_by(size) {
                for x in (0..=a.width - size).step_by(size) {
                    origins.push((x, y));
                }
            }
        }
    }
    if origins.is_empty() {
        return Err(Error::invalid("no patches to compare"));
    }
    let mut sum = 0.0;
    for &(x, y) in &origins {
        let pair = PatchPair { rendered: crop_patch(a, x, y, size), target: crop_patch(b, x, y, size), origin: (x, y), view_id: 0 };
        sum += perceptual_loss(&pair, extractor)?.0;
    }
    Ok(sum / origins.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    FullImage,
    BoxInterior,
}

impl Region {
    pub fn label(self) -> &'static str {
        match self {
            Region::FullImage => "full-image",
            Region::BoxInterior => "box-interior",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(rename = "lpips_proxy")]
    pub lpips_proxy: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_lpips_proxy: f64,
    pub region: Region,
    /// Views without boxes under box-interior evaluation.
    pub skipped: Vec<usize>,
}

/// Scores rendered views against clean references, per view and averaged.
pub fn masked_eval(
    rendered: &[Image],
    clean: &[Image],
    boxes: &[Vec<BBox>],
    region: Region,
    extractor: &dyn FeatureExtractor,
) -> Result<EvalReport> {
    if rendered.len() != clean.len() || rendered.len() != boxes.len() {
        return Err(Error::invalid(format!(
            "view counts differ: {} rendered, {} clean, {} box sets",
            rendered.len(),
            clean.len(),
            boxes.len()
        )));
    }
    let mut views = Vec::new();
    let mut skipped = Vec::new();
    for (i, ((r, c), bs)) in rendered.iter().zip(clean).zip(boxes).enumerate() {
        let (mask, proxy_boxes) = match region {
            Region::FullImage => (PixelMask::full(r.width, r.height), None),
            Region::BoxInterior => {
                if bs.is_empty() {
                    skipped.push(i);
                    continue;
                }
                (PixelMask::from_boxes(r.width, r.height, bs), Some(bs.as_slice()))
            }
        };
        views.push(ViewScore {
            view_id: i,
            psnr: psnr(r, c, Some(&mask))?,
            ssim: ssim(r, c, Some(&mask))?,
            lpips_proxy: lpips_proxy(r, c, proxy_boxes, extractor)?,
            pixels: mask.count(),
        });
    }
    if views.is_empty() {
        return Err(Error::invalid("no view could be evaluated"));
    }
    let n = views.len() as f64;
    Ok(EvalReport {
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        mean_lpips_proxy: views.iter().map(|v| v.lpips_proxy).sum::<f64>() / n,
        views,
        region,
        skipped,
    })
}

fn cap(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

#[derive(Serialize)]
struct ReportJson<'a> {
    views: Vec<ViewScore>,
    mean_psnr: f64,
    mean_ssim: f64,
    mean_lpips_proxy: f64,
    region: &'a str,
    skipped: &'a [usize],
}

/// Writes `report` as JSON plus a CSV twin with one row per view. PSNR is capped for serialization.
pub fn write_report(report: &EvalReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    let views: Vec<ViewScore> = report.views.iter().map(|v| ViewScore { psnr: cap(v.psnr), ..v.clone() }).collect();
    let json = ReportJson {
        views: views.clone(),
        mean_psnr: cap(report.mean_psnr),
        mean_ssim: report.mean_ssim,
        mean_lpips_proxy: report.mean_lpips_proxy,
        region: report.region.label(),
        skipped: &report.skipped,
    };
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(json_path, text).map_err(|e| Error::io(json_path, e))?;
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::Serde(e.to_string()))?;
    w.write_record(["view_id", "psnr", "ssim", "lpips_proxy", "pixels"]).map_err(|e| Error::Serde(e.to_string()))?;
    for v in &views {
        w.write_record([v.view_id.to_string(), v.psnr.to_string(), v.ssim.to_string(), v.lpips_proxy.to_string(), v.pixels.to_string()])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))
}
