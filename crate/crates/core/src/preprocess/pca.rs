//! PCA with whitening over the spectral axis of a cube.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hsi_io::HsiCube;
use crate::numerics::Real;

use super::jacobi::symmetric_eigen;

pub const PCA_MAGIC: &[u8; 4] = b"HSIP";
/// Eigenvalues are floored here before `Λ^{-1/2}`.
pub const EIGEN_FLOOR: f64 = 1e-8;
const COV_BLOCK_ROWS: usize = 4096;

/// Fitted spectral PCA: mean, leading eigenvectors and eigenvalues.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `bands × k`, column-major: component `j` is `components[j*bands..]`.
    components: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn component(&self, j: usize) -> &[f64] {
        let c = self.bands();
        &self.components[j * c..(j + 1) * c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PCA_MAGIC);
        out.extend_from_slice(&(self.bands() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        for v in self.mean.iter().chain(&self.components).chain(&self.eigenvalues) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len() as u64, "truncated PCA header"));
        }
        if &bytes[..4] != PCA_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"HSIP\""));
        }
        let bands = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let k = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if k == 0 || k > bands {
            return Err(Error::format(8, format!("invalid k = {k} for {bands} bands")));
        }
        let count = bands + bands * k + k;
        let expected = 12 + 8 * count;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected) as u64,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let vals: Vec<f64> = bytes[12..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            mean: vals[..bands].to_vec(),
            components: vals[bands..bands + bands * k].to_vec(),
            eigenvalues: vals[bands + bands * k..].to_vec(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Sample covariance (divisor `n − 1`) of the cube's pixel spectra.
pub fn spectral_covariance(cube: &HsiCube) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c) = (cube.pixels(), cube.bands());
    if n < 2 {
        return Err(Error::config(format!("PCA needs at least 2 pixels, got {n}")));
    }
    let values = cube.values();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in cube".into()));
    }
    let mut mean = vec![0.0f64; c];
    for px in values.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0f64; c * c];
    let mut block = Vec::with_capacity(COV_BLOCK_ROWS * c);
    for chunk in values.chunks(COV_BLOCK_ROWS * c) {
        block.clear();
        block.extend(
            chunk
                .chunks_exact(c)
                .flat_map(|px| px.iter().zip(&mean).map(|(&v, m)| v as f64 - m)),
        );
        let rows = block.len() / c;
        // cov += blockᵀ · block
        f64::gemm(c, rows, c, 1.0, &block, (1, c as isize), &block, (c as isize, 1), 1.0, &mut cov, (c as isize, 1));
    }
    let denom = (n - 1) as f64;
    cov.iter_mut().for_each(|v| *v /= denom);
    Ok((mean, cov))
}

pub fn fit_pca(cube: &HsiCube, k: usize) -> Result<PcaModel> {
    let c = cube.bands();
    if k == 0 || k > c {
        return Err(Error::config(format!("PCA components k = {k} must be in 1..={c}")));
    }
    let (mean, cov) = spectral_covariance(cube)?;
    let (vals, vecs) = symmetric_eigen(&cov, c);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(c * k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let mut col: Vec<f64> = (0..c).map(|r| vecs[r * c + j]).collect();
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
            .0;
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend(col);
        eigenvalues.push(vals[j].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
    })
}

/// Projects every pixel onto the retained components and scales each
/// coordinate by `1/sqrt(max(λ, EIGEN_FLOOR))`.
pub fn apply_pca_whiten(cube: &HsiCube, model: &PcaModel) -> Result<HsiCube> {
    let (c, k) = (cube.bands(), model.k());
    if c != model.bands() {
        return Err(Error::shape("apply_pca_whiten", &[c], &[model.bands()]));
    }
    let scale: Vec<f64> = model
        .eigenvalues
        .iter()
        .map(|&l| 1.0 / l.max(EIGEN_FLOOR).sqrt())
        .collect();
    let mut out = Vec::with_capacity(cube.pixels() * k);
    let mut centered = vec![0.0f64; c];
    for px in cube.values().chunks_exact(c) {
        for ((d, &v), m) in centered.iter_mut().zip(px).zip(&model.mean) {
            *d = v as f64 - m;
        }
        for j in 0..k {
            let dot: f64 = model.component(j).iter().zip(&centered).map(|(a, b)| a * b).sum();
            out.push((dot * scale[j]) as f32);
        }
    }
    HsiCube::new(cube.height(), cube.width(), k, out)
}
