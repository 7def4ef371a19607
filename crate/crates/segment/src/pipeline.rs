use crate::backend::{ProposalBackend, ProposalMask, RawProposal};
use crate::error::{Result, SegmentError};
use crate::image::GrayImage;
use crate::mask::{binarize, stability_score, Mask};
use crate::proposal::{filter_masks, MaskProposal, SegmenterConfig};

/// Logit threshold at which backend logits are binarized into masks.
pub const MASK_THRESHOLD: f64 = 0.0;

/// `grid_size²` prompt points at cell centers, row-major.
pub fn generate_point_grid(width: usize, height: usize, grid_size: usize) -> Result<Vec<(usize, usize)>> {
    if width == 0 || height == 0 {
        return Err(SegmentError::EmptyInput("point grid over a zero-sized image"));
    }
    if grid_size == 0 {
        return Err(SegmentError::Config("grid_size must be at least 1".into()));
    }
    // floor((i + 0.5) * len / g) in exact integer arithmetic
    let center = |i: usize, len: usize| ((2 * i + 1) * len) / (2 * grid_size);
    Ok((0..grid_size)
        .flat_map(|j| (0..grid_size).map(move |i| (center(i, width), center(j, height))))
        .collect())
}

/// Keeps pixels inside the union of `kept` and multiplies the rest by `alpha`.
pub fn composite_roi(image: &GrayImage, kept: &[MaskProposal], alpha: f64) -> Result<GrayImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SegmentError::Range {
            what: "background attenuation",
            value: alpha,
        });
    }
    let mut union = Mask::empty(image.width(), image.height());
    for p in kept {
        if p.mask().bits().len() != union.bits().len() {
            return Err(SegmentError::Dimension {
                what: "proposal mask size",
                expected: union.bits().len(),
                actual: p.mask().bits().len(),
            });
        }
        union.union_with(p.mask());
    }
    let pixels = image
        .pixels()
        .iter()
        .zip(union.bits())
        .map(|(&v, &keep)| if keep { v } else { v * alpha })
        .collect();
    GrayImage::new(image.width(), image.height(), pixels)
}

/// Intermediate products of one segmentation pass.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub processed: GrayImage,
    /// Every backend proposal, scored but unfiltered.
    pub proposals: Vec<MaskProposal>,
    pub kept: Vec<MaskProposal>,
}

fn score(raw: RawProposal, image: &GrayImage, delta: f64) -> std::result::Result<MaskProposal, String> {
    let (mask, stability) = match raw.mask {
        ProposalMask::Logits(logits) => {
            if (logits.width, logits.height) != (image.width(), image.height()) || logits.logits.len() != logits.width * logits.height {
                return Err("proposal logits do not match the image size".into());
            }
            let s = stability_score(&logits, MASK_THRESHOLD, delta);
            (binarize(&logits, MASK_THRESHOLD), s)
        }
        ProposalMask::Binary { mask, stability } => {
            if (mask.width(), mask.height()) != (image.width(), image.height()) {
                return Err("proposal mask does not match the image size".into());
            }
            (mask, stability.unwrap_or(1.0))
        }
    };
    MaskProposal::new(mask, raw.confidence, stability).map_err(|e| e.to_string())
}

pub fn segment_image_detailed(
    image: &GrayImage,
    image_id: &str,
    backend: &dyn ProposalBackend,
    config: &SegmenterConfig,
) -> Result<Segmentation> {
    config.validate()?;
    let points = generate_point_grid(image.width(), image.height(), config.grid_size)?;
    let wrap = |message: String| SegmentError::Backend {
        backend: backend.name().to_string(),
        message,
    };
    let raw = backend.propose(image_id, image, &points).map_err(|e| match e {
        e @ SegmentError::Backend { .. } => e,
        other => wrap(other.to_string()),
    })?;
    let proposals = raw
        .into_iter()
        .map(|r| score(r, image, config.stability_offset).map_err(wrap))
        .collect::<Result<Vec<_>>>()?;
    let kept = filter_masks(&proposals, config)?;
    let processed = composite_roi(image, &kept, config.background_attenuation)?;
    Ok(Segmentation {
        processed,
        proposals,
        kept,
    })
}

/// Everything-mode segmentation: grid prompts, backend proposals, filtering and
/// ROI compositing.
pub fn segment_image(
    image: &GrayImage,
    image_id: &str,
    backend: &dyn ProposalBackend,
    config: &SegmenterConfig,
) -> Result<GrayImage> {
    segment_image_detailed(image, image_id, backend, config).map(|s| s.processed)
}
