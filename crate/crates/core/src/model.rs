//! The report-generation network and its differentiable forward pass.
//!
//! Images become per-topic embeddings through a patch extractor, max-pooling
//! over views and a per-topic affine projection; the indication text is
//! encoded and attended by learned topic queries; the two are fused with a
//! layer norm. A state classifier reads the fused embeddings, and a pre-norm
//! transformer decoder cross-attends to them to produce the report.

use std::collections::HashMap;

use mscl_autodiff::{concat_cols, max_pool, Parameter, Tape, Tensor, Var};
use mscl_segment::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};

pub const LN_EPS: f64 = 1e-5;
/// Added to attention logits above the diagonal; far below any real logit.
pub const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    positions: Tensor,
}

/// Parameter names, shapes and initializers in creation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, c, n, k, f, p) = (
        cfg.d_model,
        cfg.visual_dim,
        cfg.topics,
        cfg.states,
        cfg.ffn_dim,
        cfg.proj_dim,
    );
    let pp = cfg.patch_size * cfg.patch_size;
    let inv = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    let q = cfg.patch_channels();
    add("visual.patch_w".into(), vec![pp, q], inv(pp));
    add("visual.patch_b".into(), vec![q], Init::Zeros);
    add("disease.a".into(), vec![c, n * d], inv(c));
    add("disease.b".into(), vec![n, d], Init::Zeros);
    add("embed.w".into(), vec![cfg.vocab_size, d], inv(d));

    let ln = |add: &mut dyn FnMut(String, Vec<usize>, Init), name: String| {
        add(format!("{name}.g"), vec![d], Init::Ones);
        add(format!("{name}.b"), vec![d], Init::Zeros);
    };
    let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), name: String| {
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("{name}.{w}"), vec![d, d], inv(d));
        }
    };
    let ffn = |add: &mut dyn FnMut(String, Vec<usize>, Init), name: String| {
        add(format!("{name}.w1"), vec![d, f], inv(d));
        add(format!("{name}.b1"), vec![f], Init::Zeros);
        add(format!("{name}.w2"), vec![f, d], inv(f));
        add(format!("{name}.b2"), vec![d], Init::Zeros);
    };

    for i in 0..cfg.encoder_layers {
        ln(&mut add, format!("encoder.{i}.ln1"));
        attn(&mut add, format!("encoder.{i}.attn"));
        ln(&mut add, format!("encoder.{i}.ln2"));
        ffn(&mut add, format!("encoder.{i}.ffn"));
    }
    ln(&mut add, "encoder.ln".into());
    add("topic.q".into(), vec![n, d], inv(d));
    ln(&mut add, "fuse.ln".into());
    add("state.s".into(), vec![k, d], inv(d));
    for i in 0..cfg.decoder_layers {
        ln(&mut add, format!("decoder.{i}.ln1"));
        attn(&mut add, format!("decoder.{i}.self"));
        ln(&mut add, format!("decoder.{i}.ln2"));
        attn(&mut add, format!("decoder.{i}.cross"));
        ln(&mut add, format!("decoder.{i}.ln3"));
        ffn(&mut add, format!("decoder.{i}.ffn"));
    }
    ln(&mut add, "decoder.ln".into());
    for side in ["img", "txt"] {
        add(format!("contrast.{side}.w1"), vec![d, d], inv(d));
        add(format!("contrast.{side}.b1"), vec![d], Init::Zeros);
        add(format!("contrast.{side}.w2"), vec![d, p], inv(d));
        add(format!("contrast.{side}.b2"), vec![p], Init::Zeros);
    }
    out
}

/// Fixed sinusoidal table `[len x d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("table shape")
}

/// Splits an image into non-overlapping `patch x patch` tiles, one row per
/// tile in row-major tile order.
pub fn patchify(image: &GrayImage, patch: usize) -> Result<Tensor> {
    let (w, h) = (image.width(), image.height());
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(CoreError::Input(format!(
            "image {w}x{h} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (cols, rows) = (w / patch, h / patch);
    let mut data = Vec::with_capacity(w * h);
    for ty in 0..rows {
        for tx in 0..cols {
            for y in 0..patch {
                for x in 0..patch {
                    data.push(image.get(tx * patch + x, ty * patch + y));
                }
            }
        }
    }
    Ok(Tensor::new(vec![rows * cols, patch * patch], data)?)
}

pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASKED;
        }
    }
    Tensor::new(vec![len, len], data).expect("mask shape")
}

/// `softmax(q hᵀ) h`, unscaled.
pub fn topic_attention<'t>(q: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    Ok(q.matmul_nt(&h)?.softmax_rows()?.matmul(&h)?)
}

/// `layer_norm(d_img + d_txt)`.
pub fn fuse<'t>(d_img: Var<'t>, d_txt: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    Ok(d_img.add(&d_txt)?.layer_norm(&gain, &bias, LN_EPS)?)
}

/// `softmax(d_it sᵀ)`: one distribution over states per topic.
pub fn classify_states<'t>(d_it: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    Ok(d_it.matmul_nt(&s)?.softmax_rows()?)
}

/// `softmax(h wᵀ)`: one vocabulary distribution per position.
pub fn word_distribution<'t>(h: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    Ok(h.matmul_nt(&w)?.softmax_rows()?)
}

/// `p_word w`: expected word embedding per position.
pub fn weighted_word_embedding<'t>(p_word: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    Ok(p_word.matmul(&w)?)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                Parameter::new(name, Tensor::new(shape, data).expect("layout shape"))
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: Vec<Parameter>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Self {
            config,
            params,
            index,
            positions,
        }
    }

    /// Builds a model from stored tensors, which must match the layout of
    /// `config` exactly.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(CoreError::Compat(format!(
                "config implies {} tensors, checkpoint has {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, shape, _), (got_name, t)) in expected.into_iter().zip(tensors) {
            if name != got_name || shape != t.shape() {
                return Err(CoreError::Compat(format!(
                    "expected `{name}` {shape:?}, found `{got_name}` {:?}",
                    t.shape()
                )));
            }
            params.push(Parameter::new(name, t));
        }
        Ok(Self::assemble(config, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[self.index[name]].value
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&'t self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            model: self,
            vars: self.params.iter().map(|p| tape.var(p.value.clone())).collect(),
            tape,
        }
    }
}

/// Inputs of one study, already tensorized.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyInput {
    /// One `[patches x patch²]` matrix per view.
    pub views: Vec<Tensor>,
    pub indication: Vec<usize>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward<'t> {
    pub pooled: Var<'t>,
    pub d_img: Var<'t>,
    pub h_txt: Var<'t>,
    pub d_txt: Var<'t>,
    pub d_it: Var<'t>,
    pub p_state: Var<'t>,
    pub h_dec: Var<'t>,
    pub p_word: Var<'t>,
}

/// A model whose parameters live on a tape.
pub struct Bound<'t> {
    model: &'t Model,
    vars: Vec<Var<'t>>,
    tape: &'t Tape,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        self.vars[self.model.index[name]]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    fn layer_norm(&self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        Ok(x.layer_norm(&self.var(&format!("{name}.g")), &self.var(&format!("{name}.b")), LN_EPS)?)
    }

    fn attention(&self, name: &str, xq: Var<'t>, xkv: Var<'t>, causal: bool) -> Result<Var<'t>> {
        let heads = self.cfg().heads;
        let dh = self.cfg().d_model / heads;
        let q = xq.matmul(&self.var(&format!("{name}.wq")))?;
        let k = xkv.matmul(&self.var(&format!("{name}.wk")))?;
        let v = xkv.matmul(&self.var(&format!("{name}.wv")))?;
        let mask = causal.then(|| causal_mask(xq.shape()[0]));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let mut scores = qh.matmul_nt(&kh)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.add_const(m)?;
            }
            outs.push(scores.softmax_rows()?.matmul(&vh)?);
        }
        Ok(concat_cols(&outs)?.matmul(&self.var(&format!("{name}.wo")))?)
    }

    fn feed_forward(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let hidden = x
            .matmul(&self.var(&format!("{name}.w1")))?
            .add_row(&self.var(&format!("{name}.b1")))?
            .relu();
        Ok(hidden
            .matmul(&self.var(&format!("{name}.w2")))?
            .add_row(&self.var(&format!("{name}.b2")))?)
    }

    fn embed(&self, ids: &[usize]) -> Result<Var<'t>> {
        let cfg = self.cfg();
        if ids.len() > cfg.max_len {
            return Err(CoreError::Input(format!(
                "sequence of {} tokens exceeds max_len {}",
                ids.len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(CoreError::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let e = self.var("embed.w").gather_rows(ids)?.scale((cfg.d_model as f64).sqrt());
        if !cfg.positional_encoding {
            return Ok(e);
        }
        let d = cfg.d_model;
        let pe = Tensor::new(vec![ids.len(), d], self.model.positions.data()[..ids.len() * d].to_vec())?;
        Ok(e.add_const(&pe)?)
    }

    /// Per-patch linear features of one view, concatenated in patch order
    /// into a `[c]` vector.
    pub fn extract_view(&self, patches: &Tensor) -> Result<Var<'t>> {
        let cfg = self.cfg();
        let want = [cfg.patches(), cfg.patch_size * cfg.patch_size];
        if patches.shape() != want {
            return Err(CoreError::Input(format!(
                "view patches have shape {:?}, model expects {want:?}",
                patches.shape()
            )));
        }
        let x = self.tape.constant(patches.clone());
        Ok(x.matmul(&self.var("visual.patch_w"))?
            .add_row(&self.var("visual.patch_b"))?
            .reshape(vec![cfg.visual_dim])?)
    }

    pub fn pool_views(&self, features: &[Var<'t>]) -> Result<Var<'t>> {
        Ok(max_pool(features)?)
    }

    /// Row `j` is `A_jᵀ x + b_j`.
    pub fn project_diseases(&self, x: Var<'t>) -> Result<Var<'t>> {
        let cfg = self.cfg();
        Ok(x.matmul(&self.var("disease.a"))?
            .reshape(vec![cfg.topics, cfg.d_model])?
            .add(&self.var("disease.b"))?)
    }

    /// Bidirectional encoder states; an empty sequence is read as one PAD.
    pub fn encode_text(&self, ids: &[usize]) -> Result<Var<'t>> {
        let ids = if ids.is_empty() { &[crate::data::PAD][..] } else { ids };
        let mut x = self.embed(ids)?;
        for i in 0..self.cfg().encoder_layers {
            let h = self.layer_norm(x, &format!("encoder.{i}.ln1"))?;
            x = x.add(&self.attention(&format!("encoder.{i}.attn"), h, h, false)?)?;
            let h = self.layer_norm(x, &format!("encoder.{i}.ln2"))?;
            x = x.add(&self.feed_forward(&format!("encoder.{i}.ffn"), h)?)?;
        }
        self.layer_norm(x, "encoder.ln")
    }

    pub fn decode_hidden(&self, prefix: &[usize], d_it: Var<'t>) -> Result<Var<'t>> {
        if prefix.is_empty() {
            return Err(CoreError::Input("decoder prefix is empty".into()));
        }
        let mut x = self.embed(prefix)?;
        for i in 0..self.cfg().decoder_layers {
            let h = self.layer_norm(x, &format!("decoder.{i}.ln1"))?;
            x = x.add(&self.attention(&format!("decoder.{i}.self"), h, h, true)?)?;
            let h = self.layer_norm(x, &format!("decoder.{i}.ln2"))?;
            x = x.add(&self.attention(&format!("decoder.{i}.cross"), h, d_it, false)?)?;
            let h = self.layer_norm(x, &format!("decoder.{i}.ln3"))?;
            x = x.add(&self.feed_forward(&format!("decoder.{i}.ffn"), h)?)?;
        }
        self.layer_norm(x, "decoder.ln")
    }

    /// Everything up to the fused topic embeddings and state distribution.
    pub fn encode_study(&self, input: &StudyInput) -> Result<Forward<'t>> {
        if input.views.is_empty() {
            return Err(CoreError::Input("study has no views".into()));
        }
        let feats = input
            .views
            .iter()
            .map(|v| self.extract_view(v))
            .collect::<Result<Vec<_>>>()?;
        let pooled = self.pool_views(&feats)?;
        let d_img = self.project_diseases(pooled)?;
        let h_txt = self.encode_text(&input.indication)?;
        let d_txt = topic_attention(self.var("topic.q"), h_txt)?;
        let d_it = fuse(d_img, d_txt, self.var("fuse.ln.g"), self.var("fuse.ln.b"))?;
        let p_state = classify_states(d_it, self.var("state.s"))?;
        Ok(Forward {
            pooled,
            d_img,
            h_txt,
            d_txt,
            d_it,
            p_state,
            h_dec: d_it,
            p_word: p_state,
        })
    }

    /// Full teacher-forced forward pass over `prefix` (starting with BOS).
    pub fn forward(&self, input: &StudyInput, prefix: &[usize]) -> Result<Forward<'t>> {
        let mut out = self.encode_study(input)?;
        out.h_dec = self.decode_hidden(prefix, out.d_it)?;
        out.p_word = word_distribution(out.h_dec, self.var("embed.w"))?;
        Ok(out)
    }

    pub fn weighted_word_embedding(&self, p_word: Var<'t>) -> Result<Var<'t>> {
        weighted_word_embedding(p_word, self.var("embed.w"))
    }

    /// `linear, ReLU, linear` projection head for `side` (`img` or `txt`).
    pub fn project_contrastive(&self, side: &str, x: Var<'t>) -> Result<Var<'t>> {
        let p = |n: &str| self.var(&format!("contrast.{side}.{n}"));
        Ok(x.matmul(&p("w1"))?
            .add_row(&p("b1"))?
            .relu()
            .matmul(&p("w2"))?
            .add_row(&p("b2"))?)
    }
}
