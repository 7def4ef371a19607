//! Scored proposals, greedy mask NMS and the confidence/stability filter.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegmentError};
use crate::mask::{mask_iou, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskProposal {
    mask: Mask,
    confidence: f64,
    stability: f64,
    area: usize,
}

impl MaskProposal {
    pub fn new(mask: Mask, confidence: f64, stability: f64) -> Result<Self> {
        for (what, value) in [("confidence", confidence), ("stability", stability)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SegmentError::Range { what, value });
            }
        }
        let area = mask.area();
        Ok(Self {
            mask,
            confidence,
            stability,
            area,
        })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn stability(&self) -> f64 {
        self.stability
    }

    pub fn area(&self) -> usize {
        self.area
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub grid_size: usize,
    pub conf_threshold: f64,
    pub stability_threshold: f64,
    pub stability_offset: f64,
    pub nms_iou_threshold: f64,
    pub background_attenuation: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            conf_threshold: 0.8,
            stability_threshold: 0.85,
            stability_offset: 1.0,
            nms_iou_threshold: 0.7,
            background_attenuation: 0.2,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(SegmentError::Config("grid_size must be at least 1".into()));
        }
        if !(self.stability_offset > 0.0 && self.stability_offset.is_finite()) {
            return Err(SegmentError::Config(format!(
                "stability_offset must be positive, got {}",
                self.stability_offset
            )));
        }
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("stability_threshold", self.stability_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("background_attenuation", self.background_attenuation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SegmentError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Indices of `proposals` in processing order: confidence descending, then
/// larger area, then input order.
fn nms_order(proposals: &[MaskProposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&proposals[a], &proposals[b]);
        pb.confidence
            .total_cmp(&pa.confidence)
            .then(pb.area.cmp(&pa.area))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy suppression: a proposal survives iff its IoU with every already
/// kept proposal is at most `iou_threshold`. Output is in kept order.
pub fn mask_nms(proposals: &[MaskProposal], iou_threshold: f64) -> Result<Vec<MaskProposal>> {
    let mut kept: Vec<MaskProposal> = Vec::new();
    for i in nms_order(proposals) {
        let candidate = &proposals[i];
        let mut survives = true;
        for k in &kept {
            if mask_iou(&k.mask, &candidate.mask)? > iou_threshold {
                survives = false;
                break;
            }
        }
        if survives {
            kept.push(candidate.clone());
        }
    }
    Ok(kept)
}

/// Drops empty, low-confidence and unstable proposals, then applies NMS.
pub fn filter_masks(proposals: &[MaskProposal], config: &SegmenterConfig) -> Result<Vec<MaskProposal>> {
    let survivors: Vec<MaskProposal> = proposals
        .iter()
        .filter(|p| {
            p.area > 0
                && p.confidence >= config.conf_threshold
                && p.stability >= config.stability_threshold
        })
        .cloned()
        .collect();
    mask_nms(&survivors, config.nms_iou_threshold)
}
