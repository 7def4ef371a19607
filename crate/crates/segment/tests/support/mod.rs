//! Naive reference implementations used as test oracles.
#![allow(dead_code)]

use mscl_segment::{GrayImage, Mask, MaskProposal};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reference flood fill over pixels strictly above `level`, seeded at `(sx, sy)`.
pub fn flood_oracle(img: &GrayImage, level: f64, sx: usize, sy: usize) -> Vec<bool> {
    let (w, h) = (img.width(), img.height());
    let mut seen = vec![false; w * h];
    let mut stack = vec![(sx, sy)];
    while let Some((x, y)) = stack.pop() {
        if seen[y * w + x] || img.get(x, y) <= level {
            continue;
        }
        seen[y * w + x] = true;
        if x > 0 {
            stack.push((x - 1, y));
        }
        if x + 1 < w {
            stack.push((x + 1, y));
        }
        if y > 0 {
            stack.push((x, y - 1));
        }
        if y + 1 < h {
            stack.push((x, y + 1));
        }
    }
    seen
}

pub fn count_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Brute-force greedy NMS: repeatedly scan for the best remaining proposal.
pub fn nms_oracle(props: &[MaskProposal], thr: f64) -> Vec<MaskProposal> {
    let mut remaining: Vec<usize> = (0..props.len()).collect();
    let mut kept: Vec<usize> = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            let (a, b) = (&props[remaining[k]], &props[remaining[best]]);
            let better = a.confidence() > b.confidence()
                || (a.confidence() == b.confidence() && a.mask().bits().iter().filter(|&&x| x).count() > b.mask().bits().iter().filter(|&&x| x).count());
            if better {
                best = k;
            }
        }
        let i = remaining.remove(best);
        if kept.iter().all(|&j| count_iou(props[j].mask().bits(), props[i].mask().bits()) <= thr) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| props[i].clone()).collect()
}

pub fn random_proposals(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Vec<MaskProposal> {
    (0..n)
        .map(|_| {
            let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
            let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
            let bits = (0..w * h)
                .map(|i| {
                    let (x, y) = (i % w, i / w);
                    x >= x0 && x <= x1 && y >= y0 && y <= y1
                })
                .collect();
            // coarse confidences so ties are exercised
            let conf = rng.random_range(0..5) as f64 / 4.0;
            MaskProposal::new(Mask::new(w, h, bits).unwrap(), conf, rng.random::<f64>()).unwrap()
        })
        .collect()
}
