//! Classification, generation and weighted contrastive losses, and their
//! mixture.

use mscl_autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::PAD;
use crate::error::{CoreError, Result};

/// When two studies count as sharing a label in the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Identical sets of abnormal topics.
    #[default]
    ExactSet,
    /// At least one abnormal topic in common.
    AnyOverlap,
}

impl LabelMode {
    pub fn same(self, a: u64, b: u64) -> bool {
        match self {
            LabelMode::ExactSet => a == b,
            LabelMode::AnyOverlap => a & b != 0,
        }
    }
}

pub fn one_hot(indices: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; indices.len() * classes];
    for (r, &i) in indices.iter().enumerate() {
        if i >= classes {
            return Err(CoreError::Input(format!("class {i} outside 0..{classes}")));
        }
        data[r * classes + i] = 1.0;
    }
    Ok(Tensor::new(vec![indices.len(), classes], data)?)
}

/// Mean cross entropy of per-topic state distributions `p` `[n x k]`.
pub fn classification_loss<'t>(p: Var<'t>, states: &[usize]) -> Result<Var<'t>> {
    let k = p.shape().get(1).copied().unwrap_or(0);
    Ok(p.cross_entropy_rows(&one_hot(states, k)?)?)
}

/// Mean negative log-likelihood over non-PAD target positions.
pub fn generation_loss<'t>(p_word: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    if targets.iter().all(|&t| t == PAD) {
        return Err(CoreError::Input("generation target has no non-PAD positions".into()));
    }
    let rows: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    Ok(p_word.nll_rows(&rows)?)
}

/// `w_ii = 1`, `w_ij = theta` for same-label pairs, `1` otherwise.
pub fn contrastive_weights(labels: &[u64], theta: f64, mode: LabelMode) -> Tensor {
    let n = labels.len();
    let mut w = vec![1.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && mode.same(labels[i], labels[j]) {
                w[i * n + j] = theta;
            }
        }
    }
    Tensor::new(vec![n, n], w).expect("square weights")
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Cosine similarities between image and text projections divided by `tau`.
pub fn similarity_matrix<'t>(z_img: Var<'t>, z_txt: Var<'t>, tau: f64) -> Result<Var<'t>> {
    check_tau(tau)?;
    Ok(z_img
        .normalize_rows()?
        .matmul_nt(&z_txt.normalize_rows()?)?
        .scale(1.0 / tau))
}

/// Image-anchored weighted contrastive loss, summed over anchors.
pub fn contrastive_loss<'t>(
    z_img: Var<'t>,
    z_txt: Var<'t>,
    labels: &[u64],
    theta: f64,
    tau: f64,
    mode: LabelMode,
) -> Result<Var<'t>> {
    if z_img.shape()[0] != labels.len() || z_txt.shape()[0] != labels.len() {
        return Err(CoreError::Input(format!(
            "{} labels for {} image and {} text projections",
            labels.len(),
            z_img.shape()[0],
            z_txt.shape()[0]
        )));
    }
    let s = similarity_matrix(z_img, z_txt, tau)?;
    let denom = s.weighted_logsumexp_rows(&contrastive_weights(labels, theta, mode))?.sum();
    let positives = s.mul_const(&Tensor::eye(labels.len()))?.sum();
    Ok(denom.add(&positives.scale(-1.0))?)
}

/// The same loss from a plain row-major `[n x n]` similarity matrix.
pub fn contrastive_loss_value(s: &[f64], labels: &[u64], theta: f64, mode: LabelMode) -> f64 {
    let n = labels.len();
    let w = contrastive_weights(labels, theta, mode);
    (0..n)
        .map(|i| {
            let row = &s[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().zip(w.row(i)).map(|(v, w)| w * (v - max).exp()).sum();
            max + sum.ln() - row[i]
        })
        .sum()
}

/// `lambda (l_c + l_ce) + (1 - lambda) l_cl`.
pub fn total_loss<'t>(l_c: Var<'t>, l_ce: Var<'t>, l_cl: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    check_lambda(lambda)?;
    Ok(l_c.add(&l_ce)?.scale(lambda).add(&l_cl.scale(1.0 - lambda))?)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(CoreError::Config(format!("lambda {lambda} outside [0, 1]")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_ce: f64,
    pub l_cl: f64,
    pub lambda: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn new(l_c: f64, l_ce: f64, l_cl: f64, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            l_c,
            l_ce,
            l_cl,
            lambda,
            l_total: lambda * (l_c + l_ce) + (1.0 - lambda) * l_cl,
        })
    }
}
