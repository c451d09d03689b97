//! PSNR/SSIM quality metrics and the directory benchmark harness.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, mosaic, CfaPattern, RgbImage};
use crate::model::{forward, pack_bayer, Checkpoint};
use crate::util::ordered_parallel_map;

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB over `[0,1]` images; inputs are clamped
/// first and zero error reports the cap value.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut sq = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
        sq += d * d;
    }
    let mse = sq / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), valid-window
/// interior, averaged over windows and channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs images >= {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = win[dy * SSIM_WINDOW + dx];
                        mu_a += k * a.get(y0 + dy, x0 + dx, c).clamp(0.0, 1.0);
                        mu_b += k * b.get(y0 + dy, x0 + dx, c).clamp(0.0, 1.0);
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = win[dy * SSIM_WINDOW + dx];
                        let da = a.get(y0 + dy, x0 + dx, c).clamp(0.0, 1.0) - mu_a;
                        let db = b.get(y0 + dy, x0 + dx, c).clamp(0.0, 1.0) - mu_b;
                        var_a += k * da * da;
                        var_b += k * db * db;
                        cov += k * da * db;
                    }
                }
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageScore {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub dataset_name: String,
    pub restorer: String,
    pub per_image: Vec<PerImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl BenchmarkResult {
    fn from_scores(dataset_name: String, restorer: String, per_image: Vec<PerImageScore>) -> Self {
        let n = per_image.len() as f64;
        let mean_psnr = per_image.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self { dataset_name, restorer, per_image, mean_psnr, mean_ssim }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,psnr,ssim\n");
        for s in &self.per_image {
            out.push_str(&format!("{},{},{}\n", s.image_id, s.psnr, s.ssim));
        }
        out.push_str(&format!("mean,{},{}\n", self.mean_psnr, self.mean_ssim));
        out
    }
}

/// Reconstructs an image after degrading it through the CFA. Implementations
/// own the degradation so oracles can bypass it in tests.
pub trait ImageRestorer: Sync {
    fn name(&self) -> String;
    fn restore(&self, original: &RgbImage) -> Result<RgbImage>;
}

/// Mosaic + bilinear interpolation reference.
pub struct BilinearRestorer {
    pub pattern: CfaPattern,
}

impl ImageRestorer for BilinearRestorer {
    fn name(&self) -> String {
        "bilinear".into()
    }

    fn restore(&self, original: &RgbImage) -> Result<RgbImage> {
        Ok(crate::imaging::demosaic_bilinear(&mosaic(original, self.pattern)?))
    }
}

/// Mosaic + model forward (tiled when large) + clamp.
pub struct CheckpointRestorer<'a> {
    pub checkpoint: &'a Checkpoint,
    pub pattern: CfaPattern,
    pub tile: usize,
    pub overlap: usize,
}

impl<'a> CheckpointRestorer<'a> {
    pub fn new(checkpoint: &'a Checkpoint) -> Self {
        Self { checkpoint, pattern: CfaPattern::default(), tile: 256, overlap: 16 }
    }
}

impl ImageRestorer for CheckpointRestorer<'_> {
    fn name(&self) -> String {
        format!("model-{}p", self.checkpoint.params.param_count())
    }

    fn restore(&self, original: &RgbImage) -> Result<RgbImage> {
        let (h, w) = (original.height(), original.width());
        let params = &self.checkpoint.params;
        let spec = &self.checkpoint.spec;
        if h.max(w) <= self.tile {
            let packed = pack_bayer(&mosaic(original, self.pattern)?);
            return Ok(forward(params, spec, &packed)?.clamped_unit());
        }

        // Tiled inference: tiles sit at even offsets so the CFA phase is
        // preserved; interior seams are hidden by cropping `overlap` pixels
        // from inner tile borders.
        let tile = self.tile.min(h.min(w));
        let step = tile - 2 * self.overlap;
        let mut out = RgbImage::zeros(h, w);
        let positions = |extent: usize| -> Vec<usize> {
            let mut v = Vec::new();
            let mut p = 0usize;
            loop {
                let p_clamped = p.min(extent - tile) & !1usize;
                v.push(p_clamped);
                if p_clamped + tile >= extent {
                    break;
                }
                p += step;
            }
            v
        };
        for &ty in &positions(h) {
            for &tx in &positions(w) {
                let crop = original.crop(ty, tx, tile, tile)?;
                let packed = pack_bayer(&mosaic(&crop, self.pattern)?);
                let pred = forward(params, spec, &packed)?.clamped_unit();
                // Valid region excludes the overlap margin except at image
                // edges.
                let y_lo = if ty == 0 { 0 } else { self.overlap };
                let x_lo = if tx == 0 { 0 } else { self.overlap };
                let y_hi = if ty + tile >= h { tile } else { tile - self.overlap };
                let x_hi = if tx + tile >= w { tile } else { tile - self.overlap };
                for y in y_lo..y_hi {
                    for x in x_lo..x_hi {
                        for c in 0..3 {
                            out.set(ty + y, tx + x, c, pred.get(y, x, c));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Evaluates a restorer over in-memory images. Odd-sized images are cropped
/// to even dimensions before mosaicking.
pub fn evaluate_images(
    restorer: &dyn ImageRestorer,
    images: &[(String, RgbImage)],
    dataset_name: &str,
) -> Result<BenchmarkResult> {
    if images.is_empty() {
        return Err(Error::InvalidConfig(format!("dataset '{dataset_name}' has no images")));
    }
    let scores: Vec<Result<PerImageScore>> = ordered_parallel_map(images, |(id, img)| {
        let (h, w) = (img.height() & !1usize, img.width() & !1usize);
        let img = if (h, w) == (img.height(), img.width()) {
            img.clone()
        } else {
            img.crop(0, 0, h, w)?
        };
        let restored = restorer.restore(&img)?;
        Ok(PerImageScore {
            image_id: id.clone(),
            psnr: psnr(&restored, &img)?,
            ssim: ssim(&restored, &img)?,
        })
    });
    let per_image: Vec<PerImageScore> = scores.into_iter().collect::<Result<_>>()?;
    Ok(BenchmarkResult::from_scores(dataset_name.into(), restorer.name(), per_image))
}

/// Evaluates every readable PNG/PPM in a directory, in filename order.
/// Unreadable files are skipped with a warning on stderr.
pub fn evaluate_benchmark(restorer: &dyn ImageRestorer, dataset_dir: &Path) -> Result<BenchmarkResult> {
    let mut entries: Vec<_> = std::fs::read_dir(dataset_dir)
        .map_err(|e| Error::io(dataset_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    entries.sort();
    let mut images = Vec::new();
    for path in entries {
        match load_image(&path) {
            Ok(img) => {
                let name =
                    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                images.push((name, img));
            }
            Err(e) => eprintln!("warning: skipping unreadable image {}: {e}", path.display()),
        }
    }
    let name = dataset_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    evaluate_images(restorer, &images, &name)
}

/// Mean patch-level PSNR of model predictions over a ref list; the tail-side
/// counterpart of image-level benchmarks.
pub fn mean_patch_psnr(
    ckpt: &Checkpoint,
    corpus: &crate::corpus::Corpus,
    refs: &[crate::mining::PatchRef],
    pattern: CfaPattern,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidConfig("empty ref list".into()));
    }
    let mut total = 0.0;
    for r in refs {
        let gt = r.resolve(corpus)?;
        let packed = pack_bayer(&mosaic(&gt, pattern)?);
        let pred = forward(&ckpt.params, &ckpt.spec, &packed)?.clamped_unit();
        total += psnr(&pred, &gt)?;
    }
    Ok(total / refs.len() as f64)
}

/// Regime comparison table: one row per (regime, dataset) pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub regime: String,
    pub params: usize,
    pub dataset: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,params,dataset,mean_psnr,mean_ssim\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.regime, r.params, r.dataset, r.mean_psnr, r.mean_ssim
            ));
        }
        out
    }

    /// Size-vs-quality series grouped by dataset, sorted by parameter count.
    pub fn size_series(&self) -> BTreeMap<String, Vec<(usize, f64)>> {
        let mut map: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for r in &self.rows {
            map.entry(r.dataset.clone()).or_default().push((r.params, r.mean_psnr));
        }
        for series in map.values_mut() {
            series.sort_unstable_by_key(|(p, _)| *p);
        }
        map
    }
}
