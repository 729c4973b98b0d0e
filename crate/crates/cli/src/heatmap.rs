//! 8-bit PGM heatmaps of alignment maps with a JSON sidecar of the scale bounds.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use expalign::AlignmentMap;
use serde::{Deserialize, Serialize};

use crate::SCHEMA_VERSION;

/// Sidecar of one heatmap: `value = min + pixel / 255 * (max - min)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBounds {
    pub schema_version: u32,
    pub image: usize,
    pub prompt: usize,
    pub height: usize,
    pub width: usize,
    pub min: f64,
    pub max: f64,
}

/// Min-max scaling to `0..=255`. A constant map becomes all zeros.
pub fn quantize(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixels = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    (pixels, min, max)
}

pub fn dequantize(pixel: u8, min: f64, max: f64) -> f64 {
    min + f64::from(pixel) / 255.0 * (max - min)
}

/// Binary graymap (`P5`) with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Width, height and pixels of a `P5` file written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PGM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        bail!("expected a P5 graymap with maxval 255");
    }
    let (w, h): (usize, usize) = (fields[1].parse()?, fields[2].parse()?);
    let pixels = bytes[pos + 1..].to_vec();
    if pixels.len() != w * h {
        bail!("PGM body has {} bytes, header says {}", pixels.len(), w * h);
    }
    Ok((w, h, pixels))
}

/// Writes `<stem>_prompt<p>.pgm` and `<stem>_prompt<p>.json` for every prompt of `map`.
pub fn write_heatmaps(dir: &Path, stem: &str, image: usize, map: &AlignmentMap) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating heatmap directory {}", dir.display()))?;
    let mut written = Vec::with_capacity(2 * map.prompts());
    for p in 0..map.prompts() {
        let (pixels, min, max) = quantize(map.slice(p));
        let pgm = dir.join(format!("{stem}_prompt{p}.pgm"));
        std::fs::write(&pgm, encode_pgm(map.width(), map.height(), &pixels))
            .with_context(|| format!("writing {}", pgm.display()))?;
        let bounds =
            HeatmapBounds { schema_version: SCHEMA_VERSION, image, prompt: p, height: map.height(), width: map.width(), min, max };
        let side = pgm.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&bounds)? + "\n")
            .with_context(|| format!("writing {}", side.display()))?;
        written.push(pgm);
        written.push(side);
    }
    Ok(written)
}
