use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Reader, Tensor, MAGIC};

pub const BAG_VERSION: u32 = 1;

/// One slide's tile features with their grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBag {
    pub slide_id: String,
    /// `[N, D_in]`
    pub features: Tensor<f32>,
    pub coords: Vec<(i32, i32)>,
}

impl TileBag {
    pub fn new(slide_id: impl Into<String>, features: Tensor<f32>, coords: Vec<(i32, i32)>) -> Result<Self> {
        let bag = Self {
            slide_id: slide_id.into(),
            features,
            coords,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 {
            return Err(Error::Data(format!(
                "bag `{}` features must be [N, D], got {:?}",
                self.slide_id,
                self.features.shape()
            )));
        }
        if self.features.rows() != self.coords.len() {
            return Err(Error::Data(format!(
                "bag `{}` has {} feature rows but {} coordinates",
                self.slide_id,
                self.features.rows(),
                self.coords.len()
            )));
        }
        if self.coords.is_empty() {
            return Err(Error::EmptySlide(self.slide_id.clone()));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite(format!("features of bag `{}`", self.slide_id)));
        }
        let mut seen = self.coords.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("bag `{}` repeats a coordinate", self.slide_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// A new bag holding rows `idx` in that order.
    pub fn select(&self, idx: &[usize]) -> Result<TileBag> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut coords = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::contract(format!("tile {i} of {}", self.len())));
            }
            data.extend_from_slice(self.features.row(i));
            coords.push(self.coords[i]);
        }
        Ok(TileBag {
            slide_id: self.slide_id.clone(),
            features: Tensor::new(&[idx.len(), d], data)?,
            coords,
        })
    }
}

pub fn encode_bag(bag: &TileBag) -> Vec<u8> {
    let (n, d) = (bag.len(), bag.dim());
    let mut out = Vec::with_capacity(16 + 4 * n * d + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &x in bag.features.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &(x, y) in &bag.coords {
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

/// Parses a bag file. The slide id is not stored; `slide_id` names it.
pub fn decode_bag(buf: &[u8], slide_id: &str) -> Result<TileBag> {
    let mut r = Reader::new(buf);
    r.header(BAG_VERSION)?;
    let n = r.u32("tile count")? as usize;
    let d = r.u32("feature width")? as usize;
    if n == 0 || d == 0 {
        return Err(Error::format(8, format!("empty bag ({n} x {d})")));
    }
    let cells = n
        .checked_mul(d)
        .ok_or_else(|| Error::format(8, "tile count overflows"))?;
    let features = r.f32s(cells, "features")?;
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push((r.i32("x coordinate")?, r.i32("y coordinate")?));
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes"));
    }
    TileBag::new(slide_id, Tensor::new(&[n, d], features)?, coords)
}

pub fn write_bag(path: &Path, bag: &TileBag) -> Result<()> {
    bag.validate()?;
    fs::write(path, encode_bag(bag)).map_err(|e| Error::io(path, e))
}

/// Reads a bag; the slide id is taken from the file stem.
pub fn read_bag(path: &Path) -> Result<TileBag> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(&buf, &id)
}
