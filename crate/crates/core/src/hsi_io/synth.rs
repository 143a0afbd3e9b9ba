//! Seeded synthetic labeled scenes.
//!
//! Classes occupy the Voronoi cells of randomly placed anchor pixels. Each
//! class has a smooth mean spectrum (a random mixture of sinusoids over the
//! band axis, normalized to unit L2 norm) and every pixel is its class mean
//! plus i.i.d. Gaussian noise.

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

use super::{HsiCube, LabelMap};

/// Minimum pairwise L2 distance between unit-normalized class means.
pub const MIN_MEAN_SEPARATION: f64 = 1.0;
const HARMONICS: usize = 4;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub cube: HsiCube,
    pub labels: LabelMap,
    /// Generating mean spectrum of class `k + 1`.
    pub class_means: Vec<Vec<f64>>,
}

pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    let &SynthSpec {
        height,
        width,
        bands,
        classes,
        noise_sigma,
        seed,
    } = spec;
    if height == 0 || width == 0 || bands == 0 || classes == 0 {
        return Err(Error::config(format!("synthetic scene extents must be positive: {spec:?}")));
    }
    if classes > height * width {
        return Err(Error::config(format!(
            "{classes} classes cannot fit in a {height}x{width} scene"
        )));
    }
    if classes > u16::MAX as usize {
        return Err(Error::config(format!("{classes} classes exceed 16-bit labels")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let anchors: Vec<(f64, f64)> = sample(&mut rng, height * width, classes)
        .into_iter()
        .map(|p| ((p / width) as f64, (p % width) as f64))
        .collect();
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for (k, &(ar, ac)) in anchors.iter().enumerate() {
                let d = (r as f64 - ar).powi(2) + (c as f64 - ac).powi(2);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            labels.push(best as u16 + 1);
        }
    }

    let class_means = class_spectra(&mut rng, bands, classes)?;

    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut values = Vec::with_capacity(height * width * bands);
    for &l in &labels {
        let mean = &class_means[l as usize - 1];
        values.extend(mean.iter().map(|&m| (m + noise.sample(&mut rng)) as f32));
    }
    Ok(SynthScene {
        cube: HsiCube::new(height, width, bands, values)?,
        labels: LabelMap::new(height, width, labels)?,
        class_means,
    })
}

fn class_spectra(rng: &mut ChaCha8Rng, bands: usize, classes: usize) -> Result<Vec<Vec<f64>>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while means.len() < classes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::config(format!(
                "could not draw {classes} class spectra with pairwise distance >= {MIN_MEAN_SEPARATION} over {bands} bands"
            )));
        }
        let terms: Vec<(f64, f64, f64)> = (0..HARMONICS)
            .map(|_| {
                let amp: f64 = StandardNormal.sample(rng);
                let freq = rng.random_range(0.5..4.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (amp, freq, phase)
            })
            .collect();
        let mut s: Vec<f64> = (0..bands)
            .map(|b| {
                let t = b as f64 / bands as f64;
                terms
                    .iter()
                    .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                    .sum()
            })
            .collect();
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        s.iter_mut().for_each(|v| *v /= norm);
        let separated = means.iter().all(|m| {
            m.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_MEAN_SEPARATION
        });
        if separated {
            means.push(s);
        }
    }
    Ok(means)
}
