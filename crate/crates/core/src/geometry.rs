//! Integer pixel boxes, binary masks, and the overlap metrics built on them.
//!
//! Boxes are half-open: `(sx, sy, ex, ey)` covers columns `sx..ex` and rows
//! `sy..ey`. Box-to-mask conversion is a filled-rectangle rasterizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width and height of the pixel canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl From<[u32; 2]> for Canvas {
    fn from(v: [u32; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Canvas> for [u32; 2] {
    fn from(c: Canvas) -> Self {
        [c.width, c.height]
    }
}

/// Half-open pixel rectangle `[sx, ex) × [sy, ey)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub sx: u32,
    pub sy: u32,
    pub ex: u32,
    pub ey: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        Self {
            sx: v[0],
            sy: v[1],
            ex: v[2],
            ey: v[3],
        }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.sx, b.sy, b.ex, b.ey]
    }
}

impl BBox {
    /// Builds a nondegenerate box; fails when `sx >= ex` or `sy >= ey`.
    pub fn new(sx: u32, sy: u32, ex: u32, ey: u32) -> Result<Self> {
        let b = Self { sx, sy, ex, ey };
        if b.is_degenerate() {
            return Err(Error::Validation(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_degenerate(&self) -> bool {
        self.sx >= self.ex || self.sy >= self.ey
    }

    pub fn width(&self) -> u32 {
        self.ex.saturating_sub(self.sx)
    }

    pub fn height(&self) -> u32 {
        self.ey.saturating_sub(self.sy)
    }

    pub fn area(&self) -> usize {
        self.width() as usize * self.height() as usize
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            sx: self.sx.max(other.sx),
            sy: self.sy.max(other.sy),
            ex: self.ex.min(other.ex),
            ey: self.ey.min(other.ey),
        };
        (!b.is_degenerate()).then_some(b)
    }

    pub fn fits(&self, canvas: Canvas) -> bool {
        !self.is_degenerate() && self.ex <= canvas.width && self.ey <= canvas.height
    }

    pub fn validate(&self, canvas: Canvas) -> Result<()> {
        if self.fits(canvas) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "box {self:?} is degenerate or outside the {}x{} canvas",
                canvas.width, canvas.height
            )))
        }
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(canvas: Canvas) -> Self {
        Self {
            width: canvas.width,
            height: canvas.height,
            bits: vec![false; canvas.area()],
        }
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn fill_box(&mut self, b: &BBox) {
        for y in b.sy..b.ey {
            let row = (y * self.width) as usize;
            self.bits[row + b.sx as usize..row + b.ex as usize]
                .iter_mut()
                .for_each(|v| *v = true);
        }
    }

    fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimension(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// `(|a ∩ b|, |a ∪ b|)`
    pub fn overlap_counts(&self, other: &Mask) -> Result<(usize, usize)> {
        self.check_dims(other)?;
        let mut inter = 0;
        let mut union = 0;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        Ok((inter, union))
    }

    /// Run-length encoding; runs alternate starting with an unset run (possibly 0).
    pub fn to_rle(&self) -> MaskRle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        MaskRle {
            width: self.width,
            height: self.height,
            counts,
        }
    }

    pub fn from_rle(rle: &MaskRle) -> Result<Self> {
        let n = rle.width as usize * rle.height as usize;
        let mut bits = Vec::with_capacity(n);
        let mut value = false;
        for &c in &rle.counts {
            bits.extend(std::iter::repeat(value).take(c as usize));
            value = !value;
        }
        if bits.len() != n {
            return Err(Error::Validation(format!(
                "rle covers {} pixels, canvas has {n}",
                bits.len()
            )));
        }
        Ok(Self {
            width: rle.width,
            height: rle.height,
            bits,
        })
    }
}

/// Serialized mask: row-major run lengths plus the canvas size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

/// Union of filled rectangles. Stands in for a box-prompted mask generator.
pub fn rasterize_boxes(boxes: &[BBox], canvas: Canvas) -> Result<Mask> {
    let mut mask = Mask::empty(canvas);
    for b in boxes {
        b.validate(canvas)?;
        mask.fill_box(b);
    }
    Ok(mask)
}

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.0.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, union) = a.overlap_counts(b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Running sums for cumulative IoU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiouAccumulator {
    pub intersection: u64,
    pub union: u64,
    pub pairs: u64,
}

impl CiouAccumulator {
    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        let (i, u) = pred.overlap_counts(gt)?;
        self.intersection += i as u64;
        self.union += u as u64;
        self.pairs += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CiouAccumulator) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.pairs += other.pairs;
    }

    /// `None` when every pair had an empty union.
    pub fn value(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// Cumulative IoU: total intersection over total union across pairs.
///
/// Pairs whose union is empty add nothing to either sum. Errors when no pair
/// has a nonempty union.
pub fn ciou<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a Mask, &'a Mask)>,
{
    let mut acc = CiouAccumulator::default();
    for (p, g) in pairs {
        acc.add(p, g)?;
    }
    acc.value()
        .ok_or_else(|| Error::Undefined("cIoU over pairs with no nonempty union".into()))
}
