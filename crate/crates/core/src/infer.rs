//! Tape-free inference: the same network evaluated with plain kernels, plus
//! greedy and beam-search decoding over a key/value cache.

use mscl_autodiff::kernels::{self, MatRef};
use mscl_autodiff::Tensor;

use crate::data::{BOS, EOS, PAD};
use crate::error::{CoreError, Result};
use crate::model::{Model, StudyInput, LN_EPS};

pub const MAX_BEAM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

/// Encoder-side results for one study.
#[derive(Clone, Debug)]
pub struct Context {
    /// Fused topic embeddings, `[n x d]` row-major.
    pub d_it: Vec<f64>,
    /// State distributions, `[n x k]` row-major.
    pub p_state: Vec<f64>,
    cross: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Context {
    /// Most likely state per topic, ties to the lowest index.
    pub fn predicted_states(&self, states: usize) -> Vec<usize> {
        self.p_state.chunks(states).map(kernels::argmax).collect()
    }
}

#[derive(Clone, Debug)]
struct Cache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

/// Reads model weights without a tape.
pub struct Generator<'m> {
    model: &'m Model,
}

fn linear(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, c) = (w.shape()[0], w.shape()[1]);
    kernels::matmul(MatRef::new(x, rows, k), MatRef::new(w.data(), k, c))
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Multi-head attention of `lq` query rows over `lk` key/value rows.
fn attend(q: &[f64], lq: usize, k: &[f64], v: &[f64], lk: usize, d: usize, heads: usize, causal: bool) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; lq * d];
    let mut scores = vec![0.0; lk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let qi = &q[i * d + off..i * d + off + dh];
            let visible = if causal { i + 1 } else { lk };
            for j in 0..lk {
                scores[j] = if j < visible {
                    let kj = &k[j * d + off..j * d + off + dh];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            kernels::softmax_rows_inplace(&mut scores, lk);
            let oi = &mut out[i * d + off..i * d + off + dh];
            for (j, &p) in scores.iter().enumerate().take(visible) {
                for (o, vj) in oi.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *o += p * vj;
                }
            }
        }
    }
    out
}

impl<'m> Generator<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model }
    }

    fn p(&self, name: &str) -> &'m Tensor {
        self.model.param(name)
    }

    fn layer_norm(&self, x: &[f64], name: &str) -> Vec<f64> {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        kernels::layer_norm_rows(x, g.numel(), g.data(), b.data(), LN_EPS).0
    }

    fn feed_forward(&self, name: &str, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = linear(x, rows, self.p(&format!("{name}.w1")));
        kernels::add_row_inplace(&mut h, self.p(&format!("{name}.b1")).data());
        kernels::relu_inplace(&mut h);
        let mut o = linear(&h, rows, self.p(&format!("{name}.w2")));
        kernels::add_row_inplace(&mut o, self.p(&format!("{name}.b2")).data());
        o
    }

    fn embed(&self, ids: &[usize], start: usize) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        if start + ids.len() > cfg.max_len {
            return Err(CoreError::Input(format!(
                "sequence of {} tokens exceeds max_len {}",
                start + ids.len(),
                cfg.max_len
            )));
        }
        let w = self.p("embed.w");
        let scale = (d as f64).sqrt();
        let mut x = Vec::with_capacity(ids.len() * d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= cfg.vocab_size {
                return Err(CoreError::Input(format!("token id {id} outside vocabulary of {}", cfg.vocab_size)));
            }
            let pe = self.model.positions().row(start + i);
            for (c, &e) in w.row(id).iter().enumerate() {
                x.push(e * scale + if cfg.positional_encoding { pe[c] } else { 0.0 });
            }
        }
        Ok(x)
    }

    fn self_attention(&self, name: &str, x: &[f64], rows: usize, causal: bool) -> Vec<f64> {
        let cfg = self.model.config();
        let q = linear(x, rows, self.p(&format!("{name}.wq")));
        let k = linear(x, rows, self.p(&format!("{name}.wk")));
        let v = linear(x, rows, self.p(&format!("{name}.wv")));
        let o = attend(&q, rows, &k, &v, rows, cfg.d_model, cfg.heads, causal);
        linear(&o, rows, self.p(&format!("{name}.wo")))
    }

    /// Concatenated per-patch features of one view.
    pub fn extract_view(&self, patches: &Tensor) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let pp = cfg.patch_size * cfg.patch_size;
        if patches.shape() != [cfg.patches(), pp] {
            return Err(CoreError::Input(format!(
                "view patches have shape {:?}, model expects {:?}",
                patches.shape(),
                [cfg.patches(), pp]
            )));
        }
        let rows = cfg.patches();
        let mut h = linear(patches.data(), rows, self.p("visual.patch_w"));
        kernels::add_row_inplace(&mut h, self.p("visual.patch_b").data());
        Ok(h)
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let ids = if ids.is_empty() { &[PAD][..] } else { ids };
        let l = ids.len();
        let mut x = self.embed(ids, 0)?;
        for i in 0..self.model.config().encoder_layers {
            let h = self.layer_norm(&x, &format!("encoder.{i}.ln1"));
            add_in_place(&mut x, &self.self_attention(&format!("encoder.{i}.attn"), &h, l, false));
            let h = self.layer_norm(&x, &format!("encoder.{i}.ln2"));
            add_in_place(&mut x, &self.feed_forward(&format!("encoder.{i}.ffn"), &h, l));
        }
        Ok(self.layer_norm(&x, "encoder.ln"))
    }

    pub fn context(&self, input: &StudyInput) -> Result<Context> {
        let cfg = self.model.config();
        let (n, d, k) = (cfg.topics, cfg.d_model, cfg.states);
        if input.views.is_empty() {
            return Err(CoreError::Input("study has no views".into()));
        }
        let mut pooled = vec![f64::NEG_INFINITY; cfg.visual_dim];
        for view in &input.views {
            for (p, f) in pooled.iter_mut().zip(self.extract_view(view)?) {
                if f > *p {
                    *p = f;
                }
            }
        }
        let mut d_img = linear(&pooled, 1, self.p("disease.a"));
        add_in_place(&mut d_img, self.p("disease.b").data());

        let h = self.encode_text(&input.indication)?;
        let l = h.len() / d;
        let mut attn = kernels::matmul(MatRef::new(self.p("topic.q").data(), n, d), MatRef::new(&h, l, d).t());
        kernels::softmax_rows_inplace(&mut attn, l);
        let d_txt = kernels::matmul(MatRef::new(&attn, n, l), MatRef::new(&h, l, d));

        add_in_place(&mut d_img, &d_txt);
        let d_it = self.layer_norm(&d_img, "fuse.ln");
        let mut p_state = kernels::matmul(MatRef::new(&d_it, n, d), MatRef::new(self.p("state.s").data(), k, d).t());
        kernels::softmax_rows_inplace(&mut p_state, k);

        let cross = (0..cfg.decoder_layers)
            .map(|i| {
                (
                    linear(&d_it, n, self.p(&format!("decoder.{i}.cross.wk"))),
                    linear(&d_it, n, self.p(&format!("decoder.{i}.cross.wv"))),
                )
            })
            .collect();
        Ok(Context { d_it, p_state, cross })
    }

    fn empty_cache(&self) -> Cache {
        Cache {
            layers: vec![(Vec::new(), Vec::new()); self.model.config().decoder_layers],
            len: 0,
        }
    }

    /// Vocabulary logits for the next position after feeding `token`.
    fn step(&self, ctx: &Context, cache: &mut Cache, token: usize) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let (d, n, heads) = (cfg.d_model, cfg.topics, cfg.heads);
        let mut x = self.embed(&[token], cache.len)?;
        for (i, (ks, vs)) in cache.layers.iter_mut().enumerate() {
            let name = format!("decoder.{i}");
            let h = self.layer_norm(&x, &format!("{name}.ln1"));
            let q = linear(&h, 1, self.p(&format!("{name}.self.wq")));
            ks.extend(linear(&h, 1, self.p(&format!("{name}.self.wk"))));
            vs.extend(linear(&h, 1, self.p(&format!("{name}.self.wv"))));
            let o = attend(&q, 1, ks, vs, cache.len + 1, d, heads, false);
            add_in_place(&mut x, &linear(&o, 1, self.p(&format!("{name}.self.wo"))));

            let h = self.layer_norm(&x, &format!("{name}.ln2"));
            let q = linear(&h, 1, self.p(&format!("{name}.cross.wq")));
            let (ck, cv) = &ctx.cross[i];
            let o = attend(&q, 1, ck, cv, n, d, heads, false);
            add_in_place(&mut x, &linear(&o, 1, self.p(&format!("{name}.cross.wo"))));

            let h = self.layer_norm(&x, &format!("{name}.ln3"));
            add_in_place(&mut x, &self.feed_forward(&format!("{name}.ffn"), &h, 1));
        }
        cache.len += 1;
        let h = self.layer_norm(&x, "decoder.ln");
        let w = self.p("embed.w");
        Ok(kernels::matmul(MatRef::new(&h, 1, d), MatRef::new(w.data(), cfg.vocab_size, d).t()))
    }

    /// Logits at every position of a teacher-forced `prefix`, computed one
    /// step at a time through the cache.
    pub fn prefix_logits(&self, ctx: &Context, prefix: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut cache = self.empty_cache();
        prefix.iter().map(|&t| self.step(ctx, &mut cache, t)).collect()
    }

    /// Generated ids, ending with EOS unless `max_len` tokens were produced.
    pub fn generate(&self, input: &StudyInput, decoding: Decoding) -> Result<Vec<usize>> {
        let ctx = self.context(input)?;
        self.generate_from(&ctx, decoding)
    }

    pub fn generate_from(&self, ctx: &Context, decoding: Decoding) -> Result<Vec<usize>> {
        match decoding {
            Decoding::Greedy => self.greedy(ctx),
            Decoding::Beam(b) if (1..=MAX_BEAM).contains(&b) => self.beam(ctx, b),
            Decoding::Beam(b) => Err(CoreError::Config(format!("beam width {b} outside 1..={MAX_BEAM}"))),
        }
    }

    fn greedy(&self, ctx: &Context) -> Result<Vec<usize>> {
        let mut cache = self.empty_cache();
        let mut out = Vec::new();
        let mut prev = BOS;
        while out.len() < self.model.config().max_len {
            let next = kernels::argmax(&self.step(ctx, &mut cache, prev)?);
            out.push(next);
            if next == EOS {
                break;
            }
            prev = next;
        }
        Ok(out)
    }

    fn beam(&self, ctx: &Context, width: usize) -> Result<Vec<usize>> {
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            logit: f64,
            cache: Cache,
        }
        let done = |h: &Hyp| h.tokens.last() == Some(&EOS);
        let max_len = self.model.config().max_len;
        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            logit: 0.0,
            cache: self.empty_cache(),
        }];
        while beams.iter().any(|h| !done(h) && h.tokens.len() < max_len) {
            // (score, logit, token, source beam); token None keeps a finished beam.
            let mut cands: Vec<(f64, f64, Option<usize>, usize)> = Vec::new();
            let mut caches = Vec::with_capacity(beams.len());
            for (bi, h) in beams.iter().enumerate() {
                if done(h) || h.tokens.len() >= max_len {
                    cands.push((h.score, h.logit, None, bi));
                    caches.push(None);
                    continue;
                }
                let mut cache = h.cache.clone();
                let logits = self.step(ctx, &mut cache, *h.tokens.last().unwrap_or(&BOS))?;
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (t, &z) in logits.iter().enumerate() {
                    cands.push((h.score + (z - lse), z, Some(t), bi));
                }
                caches.push(Some(cache));
            }
            cands.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(b.1.total_cmp(&a.1))
                    .then(a.2.unwrap_or(0).cmp(&b.2.unwrap_or(0)))
                    .then(a.3.cmp(&b.3))
            });
            cands.truncate(width);
            let mut next = Vec::with_capacity(width);
            for (score, logit, token, bi) in cands {
                let src = &beams[bi];
                let mut tokens = src.tokens.clone();
                let cache = match token {
                    Some(t) => {
                        tokens.push(t);
                        caches[bi].clone().expect("expanded beam has a cache")
                    }
                    None => src.cache.clone(),
                };
                next.push(Hyp {
                    tokens,
                    score,
                    logit,
                    cache,
                });
            }
            beams = next;
        }
        Ok(beams.swap_remove(0).tokens)
    }
}
