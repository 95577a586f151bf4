use std::fs;
use std::path::{Path, PathBuf};

use super::{abs_channel_sum, FeatureMap};
use crate::error::Result;
use crate::tensor::Real;

/// Min-max maps `values` onto 0..=255 with round-half-up. A constant input maps to 0.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / range * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8).collect()
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

fn agent_path(path: &Path, agent: usize, agents: usize) -> PathBuf {
    if agents == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "pgm".into());
    path.with_file_name(format!("{stem}.agent{agent}.{ext}"))
}

/// Writes one grayscale PGM per agent: brighter pixels carry more channel energy.
///
/// Single-agent maps go to `path`; otherwise agent `k` goes to
/// `<stem>.agent<k>.<ext>`. Returns the written paths.
pub fn viz_export<T: Real>(fm: &FeatureMap<T>, path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let (a, h, w, _) = fm.dims();
    let energy = abs_channel_sum(fm).to_f64_vec();
    let mut written = Vec::with_capacity(a);
    for (k, plane) in energy.chunks(h * w).enumerate() {
        let p = agent_path(path.as_ref(), k, a);
        write_pgm(&p, w, h, &normalize_to_u8(plane))?;
        written.push(p);
    }
    Ok(written)
}
