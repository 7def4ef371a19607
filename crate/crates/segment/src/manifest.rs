//! JSON interchange format for raw proposals of one image.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegmentError};
use crate::mask::{rle_decode, rle_encode, Mask};
use crate::proposal::MaskProposal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestProposal {
    pub confidence: f64,
    /// `None` when the producer could not score stability; consumers treat it as 1.0.
    pub stability: Option<f64>,
    pub rle: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalManifest {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub proposals: Vec<ManifestProposal>,
}

impl ProposalManifest {
    pub fn from_proposals(image_id: &str, width: usize, height: usize, proposals: &[MaskProposal]) -> Self {
        Self {
            image_id: image_id.to_string(),
            width,
            height,
            proposals: proposals
                .iter()
                .map(|p| ManifestProposal {
                    confidence: p.confidence(),
                    stability: Some(p.stability()),
                    rle: rle_encode(p.mask()),
                })
                .collect(),
        }
    }

    /// Schema checks beyond what serde enforces. Messages name the offending
    /// proposal index.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!("zero image size {}x{}", self.width, self.height));
        }
        let size = self.width * self.height;
        for (i, p) in self.proposals.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(format!("proposal {i}: confidence {} outside [0, 1]", p.confidence));
            }
            if let Some(s) = p.stability {
                if !(0.0..=1.0).contains(&s) {
                    return Err(format!("proposal {i}: stability {s} outside [0, 1]"));
                }
            }
            let sum: usize = p.rle.iter().sum();
            if sum != size {
                return Err(format!("proposal {i}: rle counts sum to {sum}, expected {size}"));
            }
        }
        Ok(())
    }

    /// Decoded proposals in file order, with missing stability read as 1.0.
    pub fn to_proposals(&self) -> Result<Vec<MaskProposal>> {
        self.proposals
            .iter()
            .map(|p| {
                let mask: Mask = rle_decode(&p.rle, self.width, self.height)?;
                MaskProposal::new(mask, p.confidence, p.stability.unwrap_or(1.0))
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let err = |message: String| SegmentError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| SegmentError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        manifest.validate().map_err(err)?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| SegmentError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| SegmentError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
