//! Seed-deterministic random-convolution feature extractor.
//!
//! A fixed stack of strided 3x3 convolutions with rectifier nonlinearities,
//! He-scaled weights drawn from a seeded stream, and zero biases. Serves as
//! the fixed feature map behind the perceptual distance; it is never trained.

use crate::error::{Error, Result};
use crate::imaging::Patch;
use crate::util::{rng_from_seed, sample_standard_normal};

/// Channel plan: RGB input through three stride-2 stages.
const CHANNELS: [usize; 4] = [3, 8, 16, 32];
const KERNEL: usize = 3;

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub out_channels: usize,
    pub in_channels: usize,
    /// `[out][in][ky][kx]` row-major.
    pub weights: Vec<f64>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<ConvStage>,
    seed: u64,
}

impl FeatureExtractor {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut stages = Vec::new();
        for s in 0..CHANNELS.len() - 1 {
            let (cin, cout) = (CHANNELS[s], CHANNELS[s + 1]);
            let fan_in = (cin * KERNEL * KERNEL) as f64;
            let scale = (2.0 / fan_in).sqrt();
            let weights = (0..cout * cin * KERNEL * KERNEL)
                .map(|_| sample_standard_normal(&mut rng) * scale)
                .collect();
            stages.push(ConvStage { out_channels: cout, in_channels: cin, weights, stride: 2 });
        }
        Self { stages, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[ConvStage] {
        &self.stages
    }

    /// Minimum input side length for features at `stage` (1-based) to cover a
    /// full receptive field.
    pub fn receptive_field(stage: usize) -> usize {
        // 3x3 stride-2 stack: rf(s) = rf(s-1) + 2^s.
        let mut rf = 3usize;
        for s in 1..stage {
            rf += 1 << (s + 1);
        }
        rf
    }

    /// Post-activation feature planes after running stages `1..=stage`.
    /// Returns `(channels, height, width, data)` with channel-major layout.
    pub fn features(&self, patch: &Patch, stage: usize) -> Result<(usize, usize, usize, Vec<f64>)> {
        if stage == 0 || stage > self.stages.len() {
            return Err(Error::InvalidConfig(format!(
                "extractor stage {stage} out of range 1..={}",
                self.stages.len()
            )));
        }
        let rf = Self::receptive_field(stage);
        if patch.height() < rf || patch.width() < rf {
            return Err(Error::Dimension(format!(
                "patch {}x{} too small for extractor stage {stage} (needs >= {rf})",
                patch.height(),
                patch.width()
            )));
        }

        // HWC -> CHW planes.
        let (mut h, mut w) = (patch.height(), patch.width());
        let mut planes = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    planes[c * h * w + y * w + x] = patch.get(y, x, c);
                }
            }
        }

        for st in &self.stages[..stage] {
            let oh = h.div_ceil(st.stride);
            let ow = w.div_ceil(st.stride);
            let mut next = vec![0.0; st.out_channels * oh * ow];
            for o in 0..st.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..st.in_channels {
                            let plane = &planes[i * h * w..(i + 1) * h * w];
                            for ky in 0..KERNEL {
                                for kx in 0..KERNEL {
                                    let sy =
                                        (oy * st.stride + ky).saturating_sub(1).min(h - 1);
                                    let sx =
                                        (ox * st.stride + kx).saturating_sub(1).min(w - 1);
                                    let wgt = st.weights
                                        [((o * st.in_channels + i) * KERNEL + ky) * KERNEL + kx];
                                    acc += wgt * plane[sy * w + sx];
                                }
                            }
                        }
                        next[o * oh * ow + oy * ow + ox] = acc.max(0.0);
                    }
                }
            }
            planes = next;
            h = oh;
            w = ow;
        }
        let channels = self.stages[stage - 1].out_channels;
        Ok((channels, h, w, planes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RgbImage;
    use crate::util::rng_from_seed;
    use rand::Rng;

    #[test]
    fn construction_is_seed_deterministic() {
        let a = FeatureExtractor::from_seed(42);
        let b = FeatureExtractor::from_seed(42);
        for (sa, sb) in a.stages().iter().zip(b.stages()) {
            assert_eq!(sa.weights, sb.weights);
        }
        let c = FeatureExtractor::from_seed(43);
        assert_ne!(a.stages()[0].weights, c.stages()[0].weights);
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(FeatureExtractor::receptive_field(1), 3);
        assert_eq!(FeatureExtractor::receptive_field(2), 7);
        assert_eq!(FeatureExtractor::receptive_field(3), 15);
    }

    #[test]
    fn features_err_on_small_patch() {
        let fx = FeatureExtractor::from_seed(1);
        let p = RgbImage::constant(8, 8, 0.5);
        assert!(fx.features(&p, 3).is_err());
        assert!(fx.features(&p, 2).is_ok());
        assert!(fx.features(&p, 4).is_err());
    }

    #[test]
    fn feature_shapes_halve() {
        let fx = FeatureExtractor::from_seed(7);
        let mut rng = rng_from_seed(2);
        let p = RgbImage::from_fn(16, 16, |_, _, _| rng.gen());
        let (c1, h1, w1, _) = fx.features(&p, 1).unwrap();
        assert_eq!((c1, h1, w1), (8, 8, 8));
        let (c3, h3, w3, _) = fx.features(&p, 3).unwrap();
        assert_eq!((c3, h3, w3), (32, 2, 2));
    }
}
