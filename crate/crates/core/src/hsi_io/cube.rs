//! `HSIC` reflectance cubes and `HSIL` label rasters.
//!
//! Both formats are little-endian. A cube file stores its payload
//! band-sequentially (all of band 0 row-major, then band 1, ...), while the
//! in-memory [`HsiCube`] keeps the bands of one pixel contiguous.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const LABEL_MAGIC: &[u8; 4] = b"HSIL";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const CUBE_HEADER_LEN: usize = 24;
const LABEL_HEADER_LEN: usize = 16;

/// `H × W × C` reflectance cube, pixel-interleaved in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HsiCube {
    /// `values` is pixel-interleaved: index `(h·W + w)·C + c`.
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::config(format!(
                "cube extents must be positive, got {height}x{width}x{bands}"
            )));
        }
        if values.len() != height * width * bands {
            return Err(Error::shape("cube", &[height, width, bands], &[values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite cube value at element {i}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    /// Builds a cube from band-sequential values.
    pub fn from_band_sequential(height: usize, width: usize, bands: usize, bsq: &[f32]) -> Result<Self> {
        if bsq.len() != height * width * bands {
            return Err(Error::shape("cube", &[bands, height, width], &[bsq.len()]));
        }
        let plane = height * width;
        let mut values = vec![0.0; bsq.len()];
        for c in 0..bands {
            for p in 0..plane {
                values[p * bands + c] = bsq[c * plane + p];
            }
        }
        Self::new(height, width, bands, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let off = (row * self.width + col) * self.bands;
        &self.values[off..off + self.bands]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[(row * self.width + col) * self.bands + band]
    }

    pub fn to_band_sequential(&self) -> Vec<f32> {
        let plane = self.pixels();
        let mut out = vec![0.0; self.values.len()];
        for p in 0..plane {
            for c in 0..self.bands {
                out[c * plane + p] = self.values[p * self.bands + c];
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(CUBE_MAGIC);
        for v in [FORMAT_VERSION, self.height as u32, self.width as u32, self.bands as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&[DTYPE_F32, 0, 0, 0]);
        for v in self.to_band_sequential() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CUBE_MAGIC)?;
        r.version()?;
        let dims_at = r.pos;
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let dtype_at = r.pos;
        let dtype = r.take(4)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::format(dtype_at, format!("unsupported dtype code {dtype}")));
        }
        let count = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(c))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::format(dims_at, format!("dimensions {h}x{w}x{c} overflow")))?;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::format(dims_at, format!("zero extent in {h}x{w}x{c}")));
        }
        let payload = r.payload(count * 4)?;
        let bsq: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(i) = bsq.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                (CUBE_HEADER_LEN + 4 * i) as u64,
                "non-finite payload value",
            ));
        }
        Self::from_band_sequential(h, w, c, &bsq)
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

/// `H × W` class raster; 0 = unlabeled, classes are 1..=K.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config(format!(
                "label map extents must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::shape("label map", &[height, width], &[labels.len()]));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Largest label present (K when every class occurs).
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Checks that this raster belongs to `cube`.
    pub fn check_pairing(&self, cube: &HsiCube) -> Result<()> {
        if self.height != cube.height() || self.width != cube.width() {
            return Err(Error::Pairing(format!(
                "label map {}x{} does not match cube {}x{}",
                self.height,
                self.width,
                cube.height(),
                cube.width()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LABEL_HEADER_LEN + 2 * self.labels.len());
        out.extend_from_slice(LABEL_MAGIC);
        for v in [FORMAT_VERSION, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(LABEL_MAGIC)?;
        r.version()?;
        let dims_at = r.pos;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let count = h
            .checked_mul(w)
            .filter(|n| n.checked_mul(2).is_some())
            .ok_or_else(|| Error::format(dims_at, format!("dimensions {h}x{w} overflow")))?;
        if h == 0 || w == 0 {
            return Err(Error::format(dims_at, format!("zero extent in {h}x{w}")));
        }
        let payload = r.payload(count * 2)?;
        let labels = payload
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self::new(h, w, labels)
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

/// Reads a cube and its labels and verifies they belong together.
pub fn read_pair(cube: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<(HsiCube, LabelMap)> {
    let cube = HsiCube::read(cube)?;
    let labels = LabelMap::read(labels)?;
    labels.check_pairing(&cube)?;
    Ok((cube, labels))
}

/// Little-endian cursor that reports failures with byte offsets.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let start = self.pos as usize;
        let end = start.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {start}"),
            )
        })?;
        self.pos = end as u64;
        Ok(&self.bytes[start..end])
    }

    pub(crate) fn pos(&self) -> u64 {
        self.pos
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if (self.pos as usize) != self.bytes.len() {
            return Err(Error::format(self.pos, "trailing bytes after payload"));
        }
        Ok(())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn payload(&mut self, n: usize) -> Result<&'a [u8]> {
        let data = self.take(n)?;
        if (self.pos as usize) != self.bytes.len() {
            return Err(Error::format(self.pos, "trailing bytes after payload"));
        }
        Ok(data)
    }
}
