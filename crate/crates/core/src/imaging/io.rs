//! PNG (8-bit RGB) and binary PPM (P6) readers/writers.
//!
//! Loading scales to `[0,1]` via `v / 255`; saving quantizes with
//! round-half-up. No other formats, no color management.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => load_ppm(path),
        "png" => load_png(path),
        other => Err(Error::ImageFormat {
            path: path.into(),
            reason: format!("unsupported extension '{other}' (png and ppm only)"),
        }),
    }
}

pub fn save_image(image: &RgbImage, path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => save_ppm(image, path),
        "png" => save_png(image, path),
        other => Err(Error::ImageFormat {
            path: path.into(),
            reason: format!("unsupported extension '{other}' (png and ppm only)"),
        }),
    }
}

/// Round-half-up quantization to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn bytes_to_image(height: usize, width: usize, bytes: &[u8]) -> Result<RgbImage> {
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    RgbImage::from_unit_range(height, width, data)
}

fn image_to_bytes(image: &RgbImage) -> Vec<u8> {
    image.data().iter().map(|&v| quantize(v)).collect()
}

fn load_png(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dynimg = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::ImageFormat { path: path.into(), reason: e.to_string() })?;
    match dynimg {
        image::DynamicImage::ImageRgb8(img) => {
            bytes_to_image(img.height() as usize, img.width() as usize, img.as_raw())
        }
        other => Err(Error::ImageFormat {
            path: path.into(),
            reason: format!("expected 8-bit RGB PNG, got {:?}", other.color()),
        }),
    }
}

fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    let buf = image_to_bytes(image);
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(image.width() as u32, image.height() as u32, buf)
            .expect("buffer sized from image");
    // Encode to memory first so the atomic-write path is shared.
    let mut encoded = std::io::Cursor::new(Vec::new());
    img.write_to(&mut encoded, image::ImageFormat::Png)
        .map_err(|e| Error::ImageFormat { path: path.into(), reason: e.to_string() })?;
    crate::util::write_atomic(path, encoded.get_ref())
}

fn load_ppm(path: &Path) -> Result<RgbImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |reason: &str| Error::ImageFormat { path: path.into(), reason: reason.to_string() };

    let magic = read_ppm_token(&mut reader).map_err(|e| Error::io(path, e))?;
    if magic != "P6" {
        return Err(bad(&format!("expected P6 magic, got '{magic}'")));
    }
    let width: usize = read_ppm_token(&mut reader)
        .map_err(|e| Error::io(path, e))?
        .parse()
        .map_err(|_| bad("bad width"))?;
    let height: usize = read_ppm_token(&mut reader)
        .map_err(|e| Error::io(path, e))?
        .parse()
        .map_err(|_| bad("bad height"))?;
    let maxval: usize = read_ppm_token(&mut reader)
        .map_err(|e| Error::io(path, e))?
        .parse()
        .map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported bit depth (maxval {maxval}, want 255)")));
    }
    let mut bytes = vec![0u8; width * height * 3];
    reader.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    bytes_to_image(height, width, &bytes)
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn read_ppm_token(reader: &mut impl BufRead) -> std::io::Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte)?;
        let ch = byte[0] as char;
        if in_comment {
            if ch == '\n' {
                in_comment = false;
            }
            continue;
        }
        if ch == '#' {
            in_comment = true;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(ch);
    }
}

fn save_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image_to_bytes(image));
    crate::util::write_atomic(path, &out)
}
