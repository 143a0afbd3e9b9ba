//! Classification-map images as binary PPM (P6).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::LabelMap;

/// One RGB triple per class; label 0 is always black.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    /// Evenly spaced hues (golden-angle walk from a seeded start) at two
    /// alternating brightness levels. Pure in `(classes, seed)`.
    pub fn new(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start: f64 = rng.random_range(0.0..1.0);
        let mut colors: Vec<[u8; 3]> = Vec::with_capacity(classes);
        let mut i = 0usize;
        while colors.len() < classes {
            let hue = (start + i as f64 * 0.618_033_988_749_895).fract();
            let value = if i % 2 == 0 { 0.95 } else { 0.7 };
            let sat = 0.55 + 0.4 * ((i / 2) % 2) as f64;
            let rgb = hsv_to_rgb(hue, sat, value);
            if !colors.contains(&rgb) && rgb != [0, 0, 0] {
                colors.push(rgb);
            }
            i += 1;
        }
        Self { colors }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, label: u16) -> Option<[u8; 3]> {
        match label {
            0 => Some([0, 0, 0]),
            l => self.colors.get(l as usize - 1).copied(),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|x| (x * 255.0).round() as u8)
}

/// Encodes a label raster as a P6 image with maxval 255.
pub fn encode_class_map(labels: &LabelMap, palette: &Palette) -> Result<Vec<u8>> {
    let header = format!("P6\n{} {}\n255\n", labels.width(), labels.height());
    let mut out = Vec::with_capacity(header.len() + 3 * labels.labels().len());
    out.extend_from_slice(header.as_bytes());
    for &l in labels.labels() {
        let rgb = palette.color(l).ok_or_else(|| {
            Error::config(format!("label {l} has no palette entry ({} classes)", palette.len()))
        })?;
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

pub fn emit_class_map(labels: &LabelMap, palette: &Palette, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_class_map(labels, palette)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
