//! Seeded synthetic corpus: template reports paired with images whose
//! abnormal topics show up as bright disks at topic-specific sites.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use mscl_segment::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, Study, TopicState};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicTemplates {
    pub name: String,
    pub normal: Vec<String>,
    pub abnormal: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub studies: usize,
    pub seed: u64,
    pub abnormal_rate: f64,
    pub topics: Vec<TopicTemplates>,
    pub image_size: usize,
    pub background: f64,
    pub noise_std: f64,
    pub lesion_radius: f64,
    pub lesion_intensity: f64,
    /// Soft blobs that are not findings; up to this many per image.
    pub max_distractors: usize,
    pub distractor_peak: (f64, f64),
    pub distractor_sigma: (f64, f64),
    pub two_view_rate: f64,
}

fn topic(name: &str, normal: &str, abnormal: &str) -> TopicTemplates {
    TopicTemplates {
        name: name.into(),
        normal: vec![normal.into()],
        abnormal: vec![abnormal.into()],
    }
}

pub fn default_topics() -> Vec<TopicTemplates> {
    vec![
        topic("cardiomegaly", "the heart size is normal .", "the heart is enlarged ."),
        topic("effusion", "there is no pleural effusion .", "there is a small pleural effusion ."),
        topic("pneumothorax", "no pneumothorax is seen .", "there is a right apical pneumothorax ."),
        topic(
            "consolidation",
            "the lungs are clear without consolidation .",
            "there is focal consolidation at the left base .",
        ),
        topic("edema", "no pulmonary edema .", "mild interstitial edema is present ."),
        topic(
            "nodule",
            "no suspicious nodule is identified .",
            "a nodule is noted in the right upper lobe .",
        ),
    ]
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            studies: 200,
            seed: 0,
            abnormal_rate: 0.3,
            topics: default_topics(),
            image_size: 64,
            background: 0.1,
            noise_std: 0.02,
            lesion_radius: 6.0,
            lesion_intensity: 0.95,
            max_distractors: 2,
            distractor_peak: (0.35, 0.6),
            distractor_sigma: (5.0, 9.0),
            two_view_rate: 0.75,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(0.0..=1.0).contains(&self.abnormal_rate) {
            return bad(format!("abnormal_rate {} outside [0, 1]", self.abnormal_rate));
        }
        if !(0.0..=1.0).contains(&self.two_view_rate) {
            return bad(format!("two_view_rate {} outside [0, 1]", self.two_view_rate));
        }
        if self.topics.is_empty() || self.topics.len() > 63 {
            return bad(format!("need 1..=63 topics, got {}", self.topics.len()));
        }
        if let Some(t) = self.topics.iter().find(|t| t.normal.is_empty() || t.abnormal.is_empty()) {
            return bad(format!("topic `{}` needs at least one normal and one abnormal template", t.name));
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        Ok(())
    }

    /// Lesion center of `topic` in view `view`: topics sit on a ring, and the
    /// second view uses a rotated, reversed ring.
    pub fn lesion_site(&self, topic: usize, view: usize) -> (f64, f64) {
        let n = self.topics.len() as f64;
        let c = self.image_size as f64 / 2.0;
        let radius = self.image_size as f64 * 0.34;
        let t = topic as f64;
        let angle = if view == 0 {
            2.0 * PI * t / n
        } else {
            -2.0 * PI * t / n + PI / n + PI / 2.0
        };
        (c + radius * angle.cos(), c + radius * angle.sin())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthStudy {
    pub study: Study,
    pub images: Vec<GrayImage>,
}

fn render_view(spec: &SynthSpec, states: &[TopicState], view: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let s = spec.image_size;
    let mut px = vec![spec.background; s * s];
    for _ in 0..rng.random_range(0..=spec.max_distractors) {
        let (cx, cy) = (rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64));
        let peak = rng.random_range(spec.distractor_peak.0..=spec.distractor_peak.1);
        let sigma = rng.random_range(spec.distractor_sigma.0..=spec.distractor_sigma.1);
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                px[y * s + x] += (peak - spec.background) * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for (t, state) in states.iter().enumerate() {
        if !state.is_abnormal() {
            continue;
        }
        let (cx, cy) = spec.lesion_site(t, view);
        let (cx, cy) = (cx + rng.random_range(-2.0..=2.0), cy + rng.random_range(-2.0..=2.0));
        for y in 0..s {
            for x in 0..s {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= spec.lesion_radius.powi(2) {
                    px[y * s + x] = spec.lesion_intensity;
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("positive std");
        for p in &mut px {
            *p += noise.sample(rng);
        }
    }
    for p in &mut px {
        *p = p.clamp(0.0, 1.0);
    }
    GrayImage::new(s, s, px).expect("valid synthetic image").quantized()
}

fn pick<'a>(options: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
    &options[rng.random_range(0..options.len())]
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<SynthStudy>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.topics.len();
    let mut out = Vec::with_capacity(spec.studies);
    for i in 0..spec.studies {
        let states: Vec<TopicState> = (0..n)
            .map(|_| {
                if rng.random_bool(spec.abnormal_rate) {
                    TopicState::Positive
                } else {
                    TopicState::Negative
                }
            })
            .collect();
        let views = if rng.random_bool(spec.two_view_rate) { 2 } else { 1 };
        let images: Vec<GrayImage> = (0..views).map(|v| render_view(spec, &states, v, &mut rng)).collect();
        let report = states
            .iter()
            .zip(&spec.topics)
            .map(|(s, t)| pick(if s.is_abnormal() { &t.abnormal } else { &t.normal }, &mut rng))
            .collect::<Vec<_>>()
            .join(" ");
        let first = rng.random_range(0..n);
        let mut asked = vec![first];
        if n > 1 && rng.random_bool(0.5) {
            let second = (first + rng.random_range(1..n)) % n;
            asked.push(second);
        }
        let indication = format!(
            "evaluate for {} .",
            asked.iter().map(|&t| spec.topics[t].name.as_str()).collect::<Vec<_>>().join(" and ")
        );
        let id = format!("s{i:05}");
        out.push(SynthStudy {
            study: Study {
                images: (0..views).map(|v| PathBuf::from(format!("images/{id}_v{v}.png"))).collect(),
                id,
                indication,
                report,
                topic_states: states,
            },
            images,
        });
    }
    Ok(out)
}

/// Writes `manifest.jsonl` and the PNGs it references under `dir`.
pub fn write_corpus(dir: &Path, corpus: &[SynthStudy]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images")).map_err(|e| CoreError::io(dir, e))?;
    for s in corpus {
        for (path, img) in s.study.images.iter().zip(&s.images) {
            img.write_png(&dir.join(path))?;
        }
    }
    let manifest = dir.join("manifest.jsonl");
    let studies: Vec<Study> = corpus.iter().map(|s| s.study.clone()).collect();
    write_manifest(&manifest, &studies)?;
    Ok(manifest)
}
