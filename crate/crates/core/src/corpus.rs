//! Image corpus: on-disk layout, train/val split, and the seeded synthetic
//! generator used for desk-scale experiments.
//!
//! A corpus directory holds PNG/PPM files plus `index.json` describing ids,
//! file names, head/tail class labels, and the split. The synthetic generator
//! mirrors the long-tailed structure of natural images: mostly smooth
//! gradient images, with a rare tail of high-frequency gratings,
//! checkerboards, and stroke patterns that demosaicers find hard.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, RgbImage};
use crate::util::{derive_seed, rng_from_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageClass {
    Head,
    Tail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusIndexEntry {
    pub id: usize,
    pub file: String,
    pub class: ImageClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub seed: u64,
    pub images: Vec<CorpusIndexEntry>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub id: usize,
    pub name: String,
    pub class: ImageClass,
    pub image: RgbImage,
}

/// In-memory corpus with a disjoint train/val image-id partition.
#[derive(Debug, Clone)]
pub struct Corpus {
    images: Vec<CorpusImage>,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Corpus {
    pub fn new(images: Vec<CorpusImage>, train: Vec<usize>, val: Vec<usize>) -> Result<Self> {
        let ids: BTreeSet<usize> = images.iter().map(|i| i.id).collect();
        if ids.len() != images.len() {
            return Err(Error::InvalidConfig("duplicate image ids in corpus".into()));
        }
        let train_set: BTreeSet<usize> = train.iter().copied().collect();
        let val_set: BTreeSet<usize> = val.iter().copied().collect();
        if !train_set.is_disjoint(&val_set) {
            return Err(Error::InvalidConfig("train/val splits overlap".into()));
        }
        for id in train_set.union(&val_set) {
            if !ids.contains(id) {
                return Err(Error::InvalidConfig(format!("split references unknown id {id}")));
            }
        }
        Ok(Self { images, train, val })
    }

    pub fn images(&self) -> &[CorpusImage] {
        &self.images
    }

    pub fn get(&self, id: usize) -> Result<&CorpusImage> {
        self.images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no image with id {id}")))
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.train
    }

    pub fn val_ids(&self) -> &[usize] {
        &self.val
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusGenConfig {
    pub n_images: usize,
    pub size: usize,
    /// Fraction of images carrying tail-class content.
    pub tail_fraction: f64,
    /// Fraction of images held out as the validation split.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusGenConfig {
    fn default() -> Self {
        Self { n_images: 100, size: 128, tail_fraction: 0.1, val_fraction: 0.1, seed: 0 }
    }
}

impl CorpusGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 2 {
            return Err(Error::InvalidConfig("corpus needs at least 2 images".into()));
        }
        if self.size < 8 || self.size % 2 != 0 {
            return Err(Error::InvalidConfig("image size must be even and >= 8".into()));
        }
        if !(0.0..=1.0).contains(&self.tail_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("fractions out of range".into()));
        }
        Ok(())
    }
}

fn smooth_background(size: usize, rng: &mut SeededRng) -> RgbImage {
    // Low-frequency sinusoid blend with per-channel offsets.
    let fx = rng.gen_range(0.3..1.4) / size as f64;
    let fy = rng.gen_range(0.3..1.4) / size as f64;
    let phase: [f64; 3] = [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)];
    let base: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let amp = rng.gen_range(0.05..0.18);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    RgbImage::from_fn(size, size, |y, x, c| {
        let u = ca * x as f64 + sa * y as f64;
        let v = -sa * x as f64 + ca * y as f64;
        let t = (std::f64::consts::TAU * (fx * u + fy * v) + phase[c]).sin();
        (base[c] + amp * t).clamp(0.0, 1.0)
    })
}

fn paint_grating(img: &mut RgbImage, rng: &mut SeededRng) {
    // Near-Nyquist luminance grating in a random box: classic moire fodder.
    let size = img.height();
    let bw = rng.gen_range(size / 3..=size / 2);
    let bh = rng.gen_range(size / 3..=size / 2);
    let y0 = rng.gen_range(0..=size - bh);
    let x0 = rng.gen_range(0..=size - bw);
    let freq = rng.gen_range(0.35..0.5);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let lo = rng.gen_range(0.0..0.15);
    let hi = rng.gen_range(0.8..1.0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let u = ca * x as f64 + sa * y as f64;
            let t = 0.5 + 0.5 * (std::f64::consts::TAU * freq * u).sin();
            let v = lo + (hi - lo) * t;
            for c in 0..3 {
                img.set(y, x, c, v);
            }
        }
    }
}

fn paint_checkerboard(img: &mut RgbImage, rng: &mut SeededRng) {
    let size = img.height();
    let bw = rng.gen_range(size / 3..=size / 2);
    let bh = rng.gen_range(size / 3..=size / 2);
    let y0 = rng.gen_range(0..=size - bh);
    let x0 = rng.gen_range(0..=size - bw);
    let cell = rng.gen_range(1..=2usize);
    let a = rng.gen_range(0.0..0.2);
    let b = rng.gen_range(0.75..1.0);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let v = if ((y / cell) + (x / cell)) % 2 == 0 { a } else { b };
            for c in 0..3 {
                img.set(y, x, c, v);
            }
        }
    }
}

fn paint_strokes(img: &mut RgbImage, rng: &mut SeededRng) {
    // Thin high-contrast strokes, text-like.
    let size = img.height();
    let n = rng.gen_range(12..28);
    let ink = if rng.gen_bool(0.5) { 0.02 } else { 0.98 };
    for _ in 0..n {
        let y0 = rng.gen_range(0..size) as i64;
        let x0 = rng.gen_range(0..size) as i64;
        let len = rng.gen_range(4..size as i64 / 3);
        let (dy, dx) = match rng.gen_range(0..4) {
            0 => (0i64, 1i64),
            1 => (1, 0),
            2 => (1, 1),
            _ => (1, -1),
        };
        for t in 0..len {
            let y = y0 + dy * t;
            let x = x0 + dx * t;
            if y >= 0 && (y as usize) < size && x >= 0 && (x as usize) < size {
                for c in 0..3 {
                    img.set(y as usize, x as usize, c, ink);
                }
            }
        }
    }
}

/// Builds the synthetic corpus in memory. Which images are tail-class is a
/// seeded choice; the count is `round(n * tail_fraction)`.
pub fn generate_corpus(cfg: &CorpusGenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let n_tail = ((cfg.n_images as f64) * cfg.tail_fraction + 0.5).floor() as usize;
    let mut pick_rng = rng_from_seed(derive_seed(cfg.seed, "corpus/classes"));
    let mut ids: Vec<usize> = (0..cfg.n_images).collect();
    ids.shuffle(&mut pick_rng);
    let tail_ids: BTreeSet<usize> = ids.iter().take(n_tail).copied().collect();

    let mut images = Vec::with_capacity(cfg.n_images);
    for id in 0..cfg.n_images {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("corpus/image/{id}")));
        let mut img = smooth_background(cfg.size, &mut rng);
        let class = if tail_ids.contains(&id) { ImageClass::Tail } else { ImageClass::Head };
        if class == ImageClass::Tail {
            match rng.gen_range(0..3) {
                0 => paint_grating(&mut img, &mut rng),
                1 => paint_checkerboard(&mut img, &mut rng),
                _ => paint_strokes(&mut img, &mut rng),
            }
        }
        images.push(CorpusImage { id, name: format!("img_{id:04}.png"), class, image: img });
    }

    let mut split_rng = rng_from_seed(derive_seed(cfg.seed, "corpus/split"));
    let mut ids: Vec<usize> = (0..cfg.n_images).collect();
    ids.shuffle(&mut split_rng);
    let n_val = ((cfg.n_images as f64) * cfg.val_fraction + 0.5).floor().max(1.0) as usize;
    let val: Vec<usize> = {
        let mut v: Vec<usize> = ids.iter().take(n_val).copied().collect();
        v.sort_unstable();
        v
    };
    let train: Vec<usize> = {
        let mut t: Vec<usize> = ids.iter().skip(n_val).copied().collect();
        t.sort_unstable();
        t
    };
    Corpus::new(images, train, val)
}

/// Writes images plus `index.json`.
pub fn save_corpus(corpus: &Corpus, dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for img in corpus.images() {
        save_image(&img.image, &dir.join(&img.name))?;
    }
    let index = CorpusIndex {
        seed,
        images: corpus
            .images()
            .iter()
            .map(|i| CorpusIndexEntry { id: i.id, file: i.name.clone(), class: i.class })
            .collect(),
        train: corpus.train_ids().to_vec(),
        val: corpus.val_ids().to_vec(),
    };
    crate::util::write_json(&dir.join("index.json"), &index)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let index: CorpusIndex = crate::util::read_json(&dir.join("index.json"))?;
    let mut images = Vec::with_capacity(index.images.len());
    for entry in &index.images {
        let image = load_image(&dir.join(&entry.file))?;
        images.push(CorpusImage {
            id: entry.id,
            name: entry.file.clone(),
            class: entry.class,
            image,
        });
    }
    Corpus::new(images, index.train, index.val)
}

pub fn index_path(dir: &Path) -> PathBuf {
    dir.join("index.json")
}
