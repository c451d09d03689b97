//! Seeding, deterministic sampling helpers, and small shared utilities.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// All randomness in the crate flows through explicitly seeded ChaCha streams.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label, so that
/// adding a consumer never shifts the draws of another.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = splitmix64(base);
    for &b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw via Box-Muller on uniform f64s. Kept in-crate so the
/// stream is pinned to this exact arithmetic rather than a dependency's.
pub fn sample_standard_normal(rng: &mut SeededRng) -> f64 {
    // Uniforms in (0,1]; avoids ln(0).
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Worker-thread cap from `HARDCYCLE_THREADS`. Absent or unparsable means 1.
pub fn max_threads() -> usize {
    match std::env::var("HARDCYCLE_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => 1,
    }
}

/// Maps `f` over `items`, splitting across up to `max_threads()` scoped
/// threads. Results are returned in input order regardless of scheduling.
pub fn ordered_parallel_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = max_threads().min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<U>> = Vec::with_capacity(items.len());
    out.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        let f = &f;
        let mut handles = Vec::new();
        for (ci, part) in items.chunks(chunk).enumerate() {
            handles.push((ci, scope.spawn(move || part.iter().map(f).collect::<Vec<U>>())));
        }
        for (ci, h) in handles {
            let vals = h.join().expect("worker panicked");
            for (i, v) in vals.into_iter().enumerate() {
                out[ci * chunk + i] = Some(v);
            }
        }
    });
    out.into_iter().map(|v| v.expect("slot filled")).collect()
}

/// Writes bytes via a temp file + rename so partially written artifacts never
/// appear under their final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path, e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}
