//! Everything-mode segmentation preprocessing for grayscale images.
//!
//! A grid of point prompts is handed to a [`ProposalBackend`]; the returned
//! candidate masks are scored for stability under threshold jitter, filtered
//! by confidence and stability, de-duplicated with mask NMS, and the survivors
//! define the region kept at full intensity while the background is attenuated.
//!
//! ```
//! use mscl_segment::{segment_image, GrayImage, SegmenterConfig, ThresholdBackend};
//!
//! let img = GrayImage::filled(16, 16, 0.4).unwrap();
//! let out = segment_image(&img, "blank", &ThresholdBackend::default(), &SegmenterConfig::default()).unwrap();
//! assert!((out.get(3, 3) - 0.08).abs() < 1e-12);
//! ```

mod backend;
mod error;
mod image;
mod manifest;
mod mask;
mod pipeline;
mod proposal;

pub use backend::{ProposalBackend, ProposalMask, ProposalsDirBackend, RawProposal, ThresholdBackend};
pub use error::{Result, SegmentError};
pub use image::GrayImage;
pub use manifest::{ManifestProposal, ProposalManifest};
pub use mask::{binarize, mask_iou, rle_decode, rle_encode, stability_score, Mask, MaskLogits};
pub use pipeline::{composite_roi, generate_point_grid, segment_image, segment_image_detailed, Segmentation, MASK_THRESHOLD};
pub use proposal::{filter_masks, mask_nms, MaskProposal, SegmenterConfig};
