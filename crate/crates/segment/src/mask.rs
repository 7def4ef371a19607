//! Binary masks, logit maps and the overlap measures used for filtering.

use crate::error::{Result, SegmentError};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(SegmentError::Dimension {
                what: "mask bits",
                expected: width * height,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        self.bits[idx] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }
}

/// Per-pixel mask logits for one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub width: usize,
    pub height: usize,
    pub logits: Vec<f64>,
}

impl MaskLogits {
    pub fn new(width: usize, height: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != width * height {
            return Err(SegmentError::Dimension {
                what: "mask logits",
                expected: width * height,
                actual: logits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            logits,
        })
    }
}

/// Pixel `i` is set iff `logits[i] > t`.
pub fn binarize(logits: &MaskLogits, t: f64) -> Mask {
    Mask {
        width: logits.width,
        height: logits.height,
        bits: logits.logits.iter().map(|&l| l > t).collect(),
    }
}

fn iou_bits(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Intersection over union; two empty masks count as identical (1.0).
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.bits.len() != b.bits.len() || a.width != b.width {
        return Err(SegmentError::Dimension {
            what: "mask size",
            expected: a.bits.len(),
            actual: b.bits.len(),
        });
    }
    Ok(iou_bits(&a.bits, &b.bits))
}

/// IoU between the masks binarized at `t + delta` and `t - delta`.
pub fn stability_score(logits: &MaskLogits, t: f64, delta: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for &l in &logits.logits {
        inter += (l > t + delta) as usize;
        union += (l > t - delta) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Row-major run lengths, alternating background/foreground and always
/// starting with a (possibly zero) background run.
pub fn rle_encode(mask: &Mask) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for &b in &mask.bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

/// Inverse of [`rle_encode`] for a `width x height` mask.
pub fn rle_decode(counts: &[usize], width: usize, height: usize) -> Result<Mask> {
    let size = width * height;
    let sum: usize = counts.iter().sum();
    if sum != size {
        return Err(SegmentError::RleFormat { sum, size });
    }
    let mut bits = Vec::with_capacity(size);
    for (i, &c) in counts.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, c));
    }
    Ok(Mask {
        width,
        height,
        bits,
    })
}
