//! Spatial patch extraction in channel-first (`k × p × p`) layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi_io::{HsiCube, LabelMap};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// One patch centred on every labeled pixel, reflect-padded at borders.
    PerPixel,
    /// Disjoint `p × p` tiles labeled by majority vote.
    NonOverlap,
}

/// A set of equally sized patches with their labels and anchor pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    bands: usize,
    size: usize,
    data: Vec<f32>,
    labels: Vec<u16>,
    positions: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    fn patch_len(&self) -> usize {
        self.bands * self.size * self.size
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Stacks the selected patches into a `[B, k, p, p]` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.patch_len());
        for &i in indices {
            data.extend(self.patch(i).iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(vec![indices.len(), self.bands, self.size, self.size], data)
            .expect("patch batch shape")
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn centered_patch(cube: &HsiCube, row: usize, col: usize, p: usize, out: &mut Vec<f32>) {
    let half = (p / 2) as isize;
    let (h, w) = (cube.height(), cube.width());
    for band in 0..cube.bands() {
        for dy in 0..p as isize {
            let r = reflect(row as isize + dy - half, h);
            for dx in 0..p as isize {
                let c = reflect(col as isize + dx - half, w);
                out.push(cube.get(r, c, band));
            }
        }
    }
}

/// Centered patches around explicit pixel positions (labels taken from
/// `labels`, or 0 when absent).
pub fn patches_at(
    cube: &HsiCube,
    labels: Option<&LabelMap>,
    positions: &[(usize, usize)],
    p: usize,
) -> Result<PatchSet> {
    if p % 2 == 0 || p == 0 {
        return Err(Error::config(format!("centered patches need an odd size, got {p}")));
    }
    if let Some(l) = labels {
        l.check_pairing(cube)?;
    }
    let mut data = Vec::with_capacity(positions.len() * cube.bands() * p * p);
    let mut out_labels = Vec::with_capacity(positions.len());
    for &(r, c) in positions {
        if r >= cube.height() || c >= cube.width() {
            return Err(Error::Index(format!("pixel ({r}, {c}) outside cube")));
        }
        centered_patch(cube, r, c, p, &mut data);
        out_labels.push(labels.map_or(0, |l| l.get(r, c)));
    }
    Ok(PatchSet {
        bands: cube.bands(),
        size: p,
        data,
        labels: out_labels,
        positions: positions.to_vec(),
    })
}

pub fn extract_patches(cube: &HsiCube, labels: &LabelMap, p: usize, mode: PatchMode) -> Result<PatchSet> {
    labels.check_pairing(cube)?;
    match mode {
        PatchMode::PerPixel => {
            let w = cube.width();
            let positions: Vec<(usize, usize)> = labels
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l > 0)
                .map(|(i, _)| (i / w, i % w))
                .collect();
            patches_at(cube, Some(labels), &positions, p)
        }
        PatchMode::NonOverlap => non_overlap(cube, labels, p),
    }
}

fn non_overlap(cube: &HsiCube, labels: &LabelMap, p: usize) -> Result<PatchSet> {
    let (h, w) = (cube.height(), cube.width());
    if p == 0 || p > h || p > w {
        return Err(Error::config(format!("tile size {p} does not fit a {h}x{w} cube")));
    }
    let k = labels.num_classes();
    let mut set = PatchSet {
        bands: cube.bands(),
        size: p,
        data: Vec::new(),
        labels: Vec::new(),
        positions: Vec::new(),
    };
    let mut votes = vec![0usize; k + 1];
    for ty in 0..h / p {
        for tx in 0..w / p {
            votes.iter_mut().for_each(|v| *v = 0);
            for r in ty * p..(ty + 1) * p {
                for c in tx * p..(tx + 1) * p {
                    votes[labels.get(r, c) as usize] += 1;
                }
            }
            // Ties go to the smaller label.
            let Some((label, _)) = votes
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, &v)| v > 0)
                .fold(None, |best: Option<(usize, usize)>, (l, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((l, v)),
                })
            else {
                continue;
            };
            for band in 0..cube.bands() {
                for r in ty * p..(ty + 1) * p {
                    for c in tx * p..(tx + 1) * p {
                        set.data.push(cube.get(r, c, band));
                    }
                }
            }
            set.labels.push(label as u16);
            set.positions.push((ty * p + p / 2, tx * p + p / 2));
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> HsiCube {
        let values = (0..h * w * c).map(|i| i as f32).collect();
        HsiCube::new(h, w, c, values).unwrap()
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(4, 1), 0);
    }

    #[test]
    fn non_overlap_tiling_count() {
        let cube = ramp(30, 30, 2);
        let labels = LabelMap::new(30, 30, vec![1; 900]).unwrap();
        let set = extract_patches(&cube, &labels, 15, PatchMode::NonOverlap).unwrap();
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn non_overlap_majority_and_dropping() {
        let cube = ramp(4, 4, 1);
        #[rustfmt::skip]
        let labels = LabelMap::new(4, 4, vec![
            2, 1, 0, 0,
            2, 0, 0, 0,
            3, 3, 1, 1,
            3, 1, 1, 2,
        ]).unwrap();
        let set = extract_patches(&cube, &labels, 2, PatchMode::NonOverlap).unwrap();
        assert_eq!(set.labels(), &[2, 3, 1]);
    }

    #[test]
    fn per_pixel_on_full_labels() {
        let cube = ramp(8, 8, 3);
        let labels = LabelMap::new(8, 8, vec![1; 64]).unwrap();
        let set = extract_patches(&cube, &labels, 5, PatchMode::PerPixel).unwrap();
        assert_eq!(set.len(), 64);
        assert_eq!(set.patch(0).len(), 3 * 5 * 5);
    }

    #[test]
    fn corner_patch_is_mirror_reflected() {
        let cube = ramp(6, 6, 1);
        let set = patches_at(&cube, None, &[(0, 0)], 3).unwrap();
        // Rows -1,0,1 map to 1,0,1; same for columns.
        let cube_ref = &cube;
        let expect: Vec<f32> = [1, 0, 1]
            .iter()
            .flat_map(|&r| [1, 0, 1].map(move |c| cube_ref.get(r, c, 0)))
            .collect();
        assert_eq!(set.patch(0), expect.as_slice());
    }

    #[test]
    fn even_size_rejected_in_per_pixel_mode() {
        let cube = ramp(4, 4, 1);
        let labels = LabelMap::new(4, 4, vec![1; 16]).unwrap();
        assert!(matches!(
            extract_patches(&cube, &labels, 4, PatchMode::PerPixel),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_first_batch_layout() {
        let cube = ramp(5, 5, 2);
        let set = patches_at(&cube, None, &[(2, 2)], 3).unwrap();
        let t: Tensor<f32> = set.batch(&[0]);
        assert_eq!(t.shape(), &[1, 2, 3, 3]);
        assert_eq!(t.data()[4], cube.get(2, 2, 0));
        assert_eq!(t.data()[9 + 4], cube.get(2, 2, 1));
    }
}
