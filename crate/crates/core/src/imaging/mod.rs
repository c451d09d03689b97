//! Raster data model, CFA mosaicking, the bilinear demosaicing baseline, and
//! gradient/edge operators.
//!
//! Images are row-major `H x W x 3` buffers of `f64`. File I/O produces values
//! in `[0, 1]`; network outputs may briefly leave that range and are clamped
//! before anything range-sensitive (saving, quality metrics, scoring).

mod io;

pub use io::{load_image, save_image};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-color raster, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A crop of an [`RgbImage`]; same layout, just small.
pub type Patch = RgbImage;

impl RgbImage {
    /// Builds an image from raw data, checking only shape and finiteness.
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "data length {} != {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("non-finite pixel value".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Like [`RgbImage::from_raw`] but additionally requires values in `[0,1]`.
    pub fn from_unit_range(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self::from_raw(height, width, data)?;
        if img.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dimension("pixel value outside [0,1]".into()));
        }
        Ok(img)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Patch> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let row = &self.data[(y * self.width + x0) * 3..(y * self.width + x0 + w) * 3];
            data.extend_from_slice(row);
        }
        Ok(Self { height: h, width: w, data })
    }

    pub fn clamped_unit(&self) -> Self {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self { height: self.height, width: self.width, data }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.set(x, y, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    pub fn flip_h(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    pub fn flip_v(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| self.get(self.height - 1 - y, x, c))
    }
}

/// One of the three sensor colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
}

/// 2x2 Bayer tile layout. GRBG is the default throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPattern {
    #[default]
    Grbg,
    Rggb,
    Gbrg,
    Bggr,
}

impl CfaPattern {
    /// Channel recorded at pixel (y, x).
    #[inline]
    pub fn color_at(self, y: usize, x: usize) -> Channel {
        let tile = self.tile();
        tile[(y % 2) * 2 + (x % 2)]
    }

    /// Row-major 2x2 tile: positions (0,0), (0,1), (1,0), (1,1).
    pub fn tile(self) -> [Channel; 4] {
        use Channel::*;
        match self {
            CfaPattern::Grbg => [G, R, B, G],
            CfaPattern::Rggb => [R, G, G, B],
            CfaPattern::Gbrg => [G, B, R, G],
            CfaPattern::Bggr => [B, G, G, R],
        }
    }

    pub const ALL: [CfaPattern; 4] =
        [CfaPattern::Grbg, CfaPattern::Rggb, CfaPattern::Gbrg, CfaPattern::Bggr];
}

/// Single-channel CFA-sampled raster; whole 2x2 tiles only.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerMosaic {
    height: usize,
    width: usize,
    data: Vec<f64>,
    pattern: CfaPattern,
}

impl BayerMosaic {
    pub fn new(height: usize, width: usize, data: Vec<f64>, pattern: CfaPattern) -> Result<Self> {
        if height == 0 || width == 0 || height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Dimension(format!(
                "mosaic dimensions must be positive and even, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mosaic data length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data, pattern })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pattern(&self) -> CfaPattern {
        self.pattern
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Per-channel `|d/dx| + |d/dy|` field, `H x W x C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl GradientField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Edge-strength response, `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl EdgeMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Samples one channel per pixel according to the CFA layout.
pub fn mosaic(image: &RgbImage, pattern: CfaPattern) -> Result<BayerMosaic> {
    if image.height() % 2 != 0 || image.width() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "mosaic requires even dimensions, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let mut data = Vec::with_capacity(image.height() * image.width());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let c = pattern.color_at(y, x) as usize;
            data.push(image.get(y, x, c));
        }
    }
    BayerMosaic::new(image.height(), image.width(), data, pattern)
}

/// Bilinear CFA interpolation: each missing sample is the kernel-weighted mean
/// of same-color neighbors, with replicate handling at the borders. Sampled
/// positions pass through unchanged.
pub fn demosaic_bilinear(mosaic: &BayerMosaic) -> RgbImage {
    // Cross kernel for green, full 3x3 for red/blue.
    const KG: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]];
    const KRB: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];

    let (h, w) = (mosaic.height(), mosaic.width());
    let pattern = mosaic.pattern();
    let mut out = RgbImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let channel = match c {
                    0 => Channel::R,
                    1 => Channel::G,
                    _ => Channel::B,
                };
                let kernel = if channel == Channel::G { &KG } else { &KRB };
                let mut num = 0.0;
                let mut den = 0.0;
                for (dy, krow) in kernel.iter().enumerate() {
                    for (dx, &k) in krow.iter().enumerate() {
                        if k == 0.0 {
                            continue;
                        }
                        let sy = (y + dy).saturating_sub(1).min(h - 1);
                        let sx = (x + dx).saturating_sub(1).min(w - 1);
                        if pattern.color_at(sy, sx) == channel {
                            num += k * mosaic.get(sy, sx);
                            den += k;
                        }
                    }
                }
                debug_assert!(den > 0.0);
                out.set(y, x, c, num / den);
            }
        }
    }
    out
}

/// Per-channel `|d/dx| + |d/dy|` with forward differences; the last column and
/// row take a zero difference.
pub fn grad_abs(image: &RgbImage) -> Result<GradientField> {
    let (h, w) = (image.height(), image.width());
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!("gradient needs H,W >= 2, got {h}x{w}")));
    }
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.get(y, x, c);
                let dx = if x + 1 < w { image.get(y, x + 1, c) - v } else { 0.0 };
                let dy = if y + 1 < h { image.get(y + 1, x, c) - v } else { 0.0 };
                data[(y * w + x) * 3 + c] = dx.abs() + dy.abs();
            }
        }
    }
    Ok(GradientField { height: h, width: w, channels: 3, data })
}

/// Channel-averaged Sobel gradient magnitude with replicate padding.
///
/// Each Sobel response is computed as a difference of two identically
/// weighted sums, so constant images map to exactly zero and transposing the
/// input transposes the output bit-for-bit.
pub fn edge_map(image: &RgbImage) -> Result<EdgeMap> {
    let (h, w) = (image.height(), image.width());
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("edge map needs H,W >= 3, got {h}x{w}")));
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let mut acc = 0.0;
            for c in 0..3 {
                let v = |sy: usize, sx: usize| image.get(sy, sx, c);
                // 1-2-1 smoothed one-sided sums; differences cancel exactly
                // when both sides are equal.
                let right = v(ym, xp) + 2.0 * v(y, xp) + v(yp, xp);
                let left = v(ym, xm) + 2.0 * v(y, xm) + v(yp, xm);
                let bottom = v(yp, xm) + 2.0 * v(yp, x) + v(yp, xp);
                let top = v(ym, xm) + 2.0 * v(ym, x) + v(ym, xp);
                let gx = right - left;
                let gy = bottom - top;
                acc += (gx * gx + gy * gy).sqrt();
            }
            data[y * w + x] = acc / 3.0;
        }
    }
    Ok(EdgeMap { height: h, width: w, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = rng_from_seed(seed);
        RgbImage::from_fn(h, w, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn rggb_tile_picks() {
        let img = RgbImage::from_fn(2, 2, |y, x, c| (y * 2 + x) as f64 * 0.1 + c as f64 * 0.01);
        let m = mosaic(&img, CfaPattern::Rggb).unwrap();
        assert_eq!(m.get(0, 0), img.get(0, 0, 0)); // R
        assert_eq!(m.get(0, 1), img.get(0, 1, 1)); // G
        assert_eq!(m.get(1, 0), img.get(1, 0, 1)); // G
        assert_eq!(m.get(1, 1), img.get(1, 1, 2)); // B
    }

    #[test]
    fn constant_image_gives_constant_mosaic() {
        let img = RgbImage::constant(4, 4, 0.37);
        for p in CfaPattern::ALL {
            let m = mosaic(&img, p).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.37));
        }
    }

    #[test]
    fn mosaic_matches_channel_picks_elementwise() {
        let img = random_image(4, 4, 11);
        let m = mosaic(&img, CfaPattern::Grbg).unwrap();
        // Independent double loop selecting the pattern channel.
        for y in 0..4 {
            for x in 0..4 {
                let c = match (y % 2, x % 2) {
                    (0, 0) => 1,
                    (0, 1) => 0,
                    (1, 0) => 2,
                    _ => 1,
                };
                assert_eq!(m.get(y, x), img.get(y, x, c));
            }
        }
    }

    #[test]
    fn mosaic_agrees_at_sampled_positions_all_patterns() {
        let img = random_image(6, 8, 5);
        for p in CfaPattern::ALL {
            let m = mosaic(&img, p).unwrap();
            for y in 0..6 {
                for x in 0..8 {
                    assert_eq!(m.get(y, x), img.get(y, x, p.color_at(y, x) as usize));
                }
            }
        }
    }

    #[test]
    fn mosaic_rejects_odd_dimensions() {
        let img = RgbImage::constant(3, 4, 0.5);
        assert!(mosaic(&img, CfaPattern::Grbg).is_err());
    }

    #[test]
    fn bilinear_on_constant_is_identity() {
        for p in CfaPattern::ALL {
            let img = RgbImage::constant(6, 6, 0.25);
            let m = mosaic(&img, p).unwrap();
            let back = demosaic_bilinear(&m);
            for v in back.data() {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bilinear_passes_through_sampled_green() {
        let img = random_image(6, 6, 3);
        let m = mosaic(&img, CfaPattern::Grbg).unwrap();
        let back = demosaic_bilinear(&m);
        for y in 0..6 {
            for x in 0..6 {
                if CfaPattern::Grbg.color_at(y, x) == Channel::G {
                    assert!((back.get(y, x, 1) - m.get(y, x)).abs() < 1e-15);
                }
            }
        }
    }

    // Independent reference: collect in-bounds same-color neighbors with the
    // stated kernel weights (replicate-clamped), take the weighted mean.
    fn bilinear_reference(m: &BayerMosaic) -> RgbImage {
        let kg = [[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]];
        let krb = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
        let (h, w) = (m.height(), m.width());
        RgbImage::from_fn(h, w, |y, x, c| {
            let ch = [Channel::R, Channel::G, Channel::B][c];
            let k = if ch == Channel::G { &kg } else { &krb };
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let weight = k[(dy + 1) as usize][(dx + 1) as usize];
                    if weight == 0.0 {
                        continue;
                    }
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    if m.pattern().color_at(sy, sx) == ch {
                        num += weight * m.get(sy, sx);
                        den += weight;
                    }
                }
            }
            num / den
        })
    }

    #[test]
    fn bilinear_matches_reference_on_ramp() {
        // 4x4 ramp mosaic.
        let img = RgbImage::from_fn(4, 4, |y, x, _| (y * 4 + x) as f64 / 15.0);
        let m = mosaic(&img, CfaPattern::Grbg).unwrap();
        let got = demosaic_bilinear(&m);
        let want = bilinear_reference(&m);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_stays_in_unit_range() {
        let img = random_image(8, 8, 17);
        for p in CfaPattern::ALL {
            let m = mosaic(&img, p).unwrap();
            let back = demosaic_bilinear(&m);
            assert!(back.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn grad_abs_zero_on_constant() {
        let g = grad_abs(&RgbImage::constant(5, 7, 0.9)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_abs_on_linear_ramp() {
        let w = 8usize;
        let img = RgbImage::from_fn(4, w, |_, x, c| if c == 0 { x as f64 / w as f64 } else { 0.0 });
        let g = grad_abs(&img).unwrap();
        for y in 0..4 {
            for x in 0..w {
                let want = if x + 1 < w { 1.0 / w as f64 } else { 0.0 };
                assert!((g.get(y, x, 0) - want).abs() < 1e-15);
                assert_eq!(g.get(y, x, 1), 0.0);
            }
        }
    }

    #[test]
    fn grad_abs_matches_scalar_loop() {
        let img = random_image(8, 8, 23);
        let g = grad_abs(&img).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let dx = if x + 1 < 8 { img.get(y, x + 1, c) - img.get(y, x, c) } else { 0.0 };
                    let dy = if y + 1 < 8 { img.get(y + 1, x, c) - img.get(y, x, c) } else { 0.0 };
                    assert_eq!(g.get(y, x, c), dx.abs() + dy.abs());
                }
            }
        }
    }

    #[test]
    fn grad_abs_rejects_degenerate() {
        let img = RgbImage::constant(1, 8, 0.0);
        assert!(grad_abs(&img).is_err());
    }

    #[test]
    fn edge_map_zero_on_constant_and_shift_invariant() {
        let e = edge_map(&RgbImage::constant(5, 5, 0.4)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));

        let img = random_image(6, 6, 9);
        let mut shifted = img.clone();
        for v in shifted.data_mut() {
            *v += 0.125;
        }
        let a = edge_map(&img).unwrap();
        let b = edge_map(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_map_localizes_step_edge() {
        // Vertical step at column k: response concentrated at columns k-1..k.
        let k = 4usize;
        let img = RgbImage::from_fn(6, 8, |_, x, _| if x < k { 0.0 } else { 1.0 });
        let e = edge_map(&img).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let v = e.get(y, x);
                if x == k - 1 || x == k {
                    // Hand Sobel on the step: gx = 4, gy = 0 -> magnitude 4.
                    assert!((v - 4.0).abs() < 1e-12, "col {x} -> {v}");
                } else {
                    assert_eq!(v, 0.0, "col {x}");
                }
            }
        }
    }

    #[test]
    fn mosaic_then_bilinear_is_identity_on_constants() {
        for p in CfaPattern::ALL {
            let img = RgbImage::constant(4, 6, 0.613);
            let back = demosaic_bilinear(&mosaic(&img, p).unwrap());
            for (a, b) in back.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn transpose_flip_roundtrip() {
        let img = random_image(5, 5, 31);
        assert_eq!(img.transpose().transpose(), img);
        assert_eq!(img.flip_h().flip_h(), img);
        assert_eq!(img.flip_v().flip_v(), img);
    }
}
