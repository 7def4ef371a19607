//! Proposal sources: the builtin threshold backend and replay from exported manifests.

use std::collections::VecDeque;
use std::path::PathBuf;

use crate::error::{Result, SegmentError};
use crate::image::GrayImage;
use crate::manifest::ProposalManifest;
use crate::mask::{Mask, MaskLogits};

/// What a backend hands back before scoring: either logits, from which the
/// pipeline binarizes and scores stability, or an already binary mask.
#[derive(Clone, Debug, PartialEq)]
pub enum ProposalMask {
    Logits(MaskLogits),
    Binary { mask: Mask, stability: Option<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawProposal {
    pub mask: ProposalMask,
    pub confidence: f64,
}

pub trait ProposalBackend: Send + Sync {
    fn name(&self) -> &str;

    fn propose(&self, image_id: &str, image: &GrayImage, points: &[(usize, usize)]) -> Result<Vec<RawProposal>>;
}

/// Multi-level thresholding with 4-connected components.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdBackend {
    pub levels: Vec<f64>,
    /// Multiplier from intensity above the level to logit units.
    pub logit_scale: f64,
    /// Contrast at which confidence reaches `1 - 1/e`.
    pub contrast_scale: f64,
}

impl Default for ThresholdBackend {
    fn default() -> Self {
        Self {
            levels: vec![0.3, 0.5, 0.7],
            logit_scale: 10.0,
            contrast_scale: 0.1,
        }
    }
}

/// Logit assigned to pixels that are neither in a component nor on its ring.
const FAR_LOGIT: f64 = -100.0;

const NONE: u32 = u32::MAX;

fn label_components(image: &GrayImage, level: f64) -> Vec<u32> {
    let (w, h) = (image.width(), image.height());
    let px = image.pixels();
    let mut labels = vec![NONE; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if labels[start] != NONE || px[start] <= level {
            continue;
        }
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if labels[j] == NONE && px[j] > level {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        next += 1;
    }
    labels
}

impl ThresholdBackend {
    fn component_proposal(&self, image: &GrayImage, labels: &[u32], id: u32, level: f64) -> Option<RawProposal> {
        let (w, h) = (image.width(), image.height());
        let px = image.pixels();
        let mut region = vec![false; w * h];
        let (mut in_sum, mut in_n, mut ring_sum, mut ring_n) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..w * h {
            if labels[i] == id {
                region[i] = true;
                in_sum += px[i];
                in_n += 1;
                continue;
            }
            let (x, y) = (i % w, i / w);
            let touches = (x > 0 && labels[i - 1] == id)
                || (x + 1 < w && labels[i + 1] == id)
                || (y > 0 && labels[i - w] == id)
                || (y + 1 < h && labels[i + w] == id);
            if touches {
                region[i] = true;
                ring_sum += px[i];
                ring_n += 1;
            }
        }
        if ring_n == 0 {
            return None;
        }
        let contrast = in_sum / in_n as f64 - ring_sum / ring_n as f64;
        if contrast <= 0.0 {
            return None;
        }
        let confidence = (1.0 - (-contrast / self.contrast_scale).exp()).clamp(0.0, 1.0);
        let logits = px
            .iter()
            .zip(&region)
            .map(|(&p, &r)| if r { (p - level) * self.logit_scale } else { FAR_LOGIT })
            .collect();
        Some(RawProposal {
            mask: ProposalMask::Logits(MaskLogits {
                width: w,
                height: h,
                logits,
            }),
            confidence,
        })
    }
}

impl ProposalBackend for ThresholdBackend {
    fn name(&self) -> &str {
        "builtin"
    }

    fn propose(&self, _image_id: &str, image: &GrayImage, points: &[(usize, usize)]) -> Result<Vec<RawProposal>> {
        let w = image.width();
        let mut out = Vec::new();
        for &level in &self.levels {
            let labels = label_components(image, level);
            let mut seen: Vec<u32> = Vec::new();
            for &(x, y) in points {
                if x >= w || y >= image.height() {
                    continue;
                }
                let id = labels[y * w + x];
                if id == NONE || seen.contains(&id) {
                    continue;
                }
                seen.push(id);
                out.extend(self.component_proposal(image, &labels, id, level));
            }
        }
        Ok(out)
    }
}

/// Replays `<dir>/<image_id>.json` manifests written by an external exporter
/// or by a previous run.
#[derive(Clone, Debug)]
pub struct ProposalsDirBackend {
    dir: PathBuf,
}

impl ProposalsDirBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn manifest_path(&self, image_id: &str) -> PathBuf {
        self.dir.join(format!("{image_id}.json"))
    }
}

impl ProposalBackend for ProposalsDirBackend {
    fn name(&self) -> &str {
        "proposals-dir"
    }

    fn propose(&self, image_id: &str, image: &GrayImage, _points: &[(usize, usize)]) -> Result<Vec<RawProposal>> {
        let path = self.manifest_path(image_id);
        let manifest = ProposalManifest::read(&path)?;
        if (manifest.width, manifest.height) != (image.width(), image.height()) {
            return Err(SegmentError::Manifest {
                path,
                message: format!(
                    "manifest is {}x{} but image is {}x{}",
                    manifest.width,
                    manifest.height,
                    image.width(),
                    image.height()
                ),
            });
        }
        Ok(manifest
            .to_proposals()?
            .into_iter()
            .map(|p| RawProposal {
                confidence: p.confidence(),
                mask: ProposalMask::Binary {
                    stability: Some(p.stability()),
                    mask: p.mask().clone(),
                },
            })
            .collect())
    }
}
