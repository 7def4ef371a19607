//! Example preparation, minibatch training, evaluation and checkpointing.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mscl_autodiff::{concat_rows, AdamW, AutodiffError, Tape, Tensor, Var};
use mscl_metrics::{evaluate_corpus, GenerationRecord, MetricReport};
use mscl_segment::{segment_image, GrayImage, ProposalBackend, ProposalsDirBackend, ThresholdBackend};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Progress};
use crate::config::{BackendKind, RunConfig};
use crate::data::{detokenize, tokenize, Study, Vocabulary, BOS, EOS};
use crate::error::{CoreError, Result};
use crate::infer::{Decoding, Generator};
use crate::model::{patchify, word_distribution, Model, StudyInput};
use crate::objectives::{classification_loss, contrastive_loss, generation_loss, total_loss, LossBundle};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const STATE_FILE: &str = "state.ckpt";

/// A tensorized study.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: StudyInput,
    /// Report ids followed by EOS.
    pub target: Vec<usize>,
    /// Report ids without EOS, fed to the text encoder for the contrastive
    /// text side.
    pub report_ids: Vec<usize>,
    pub states: Vec<usize>,
    pub label: u64,
    pub reference: String,
}

impl Example {
    /// Teacher-forcing input: BOS followed by all target tokens but the last.
    pub fn decoder_prefix(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.target[..self.target.len() - 1].iter().copied()).collect()
    }
}

pub fn make_backend(config: &RunConfig) -> Result<Box<dyn ProposalBackend>> {
    match config.backend {
        BackendKind::Builtin => Ok(Box::new(ThresholdBackend::default())),
        BackendKind::ProposalsDir => {
            let dir = config
                .paths
                .proposals_dir
                .as_ref()
                .ok_or_else(|| CoreError::Config("backend `proposals-dir` needs paths.proposals_dir".into()))?;
            Ok(Box::new(ProposalsDirBackend::new(dir)))
        }
    }
}

/// Proposal-manifest id of an image: its file stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Segments (unless `backend` is `None`) and patchifies one view.
pub fn preprocess_view(
    image: &GrayImage,
    id: &str,
    backend: Option<&dyn ProposalBackend>,
    config: &RunConfig,
) -> Result<Tensor> {
    let size = config.model.image_size;
    if (image.width(), image.height()) != (size, size) {
        return Err(CoreError::Input(format!(
            "image `{id}` is {}x{}, model expects {size}x{size}",
            image.width(),
            image.height()
        )));
    }
    let processed = match backend {
        Some(b) => segment_image(image, id, b, &config.segmenter)?,
        None => image.clone(),
    };
    patchify(&processed, config.model.patch_size)
}

fn truncate(mut ids: Vec<usize>, len: usize) -> Vec<usize> {
    ids.truncate(len);
    ids
}

/// Loads, preprocesses and encodes `studies`, whose image paths are relative
/// to `root`.
pub fn prepare_examples(studies: &[Study], root: &Path, vocab: &Vocabulary, config: &RunConfig) -> Result<Vec<Example>> {
    let backend = if config.train.no_sam { None } else { Some(make_backend(config)?) };
    let max_len = config.model.max_len;
    studies
        .iter()
        .map(|s| {
            let paths = if config.train.single_view { &s.images[..1] } else { &s.images[..] };
            let views = paths
                .iter()
                .map(|p| {
                    let img = GrayImage::read_png(&root.join(p))?;
                    preprocess_view(&img, &image_id(p), backend.as_deref(), config)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = vocab.encode(&s.report);
            let mut target = truncate(report.clone(), max_len - 1);
            target.push(EOS);
            Ok(Example {
                id: s.id.clone(),
                input: StudyInput {
                    views,
                    indication: truncate(vocab.encode(&s.indication), max_len),
                },
                target,
                report_ids: truncate(report, max_len),
                states: s.topic_states.iter().map(|t| t.index()).collect(),
                label: s.abnormal_set(),
                reference: detokenize(&tokenize(&s.report)),
            })
        })
        .collect()
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: f64,
    pub l_ce: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub val_bleu4: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricReport,
    /// Fraction of (study, topic) pairs whose most likely state is correct.
    pub state_accuracy: f64,
    pub generations: Vec<GenerationRecord>,
}

pub fn evaluate(model: &Model, vocab: &Vocabulary, examples: &[Example], decoding: Decoding) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(CoreError::Input("nothing to evaluate".into()));
    }
    let generator = Generator::new(model);
    let k = model.config().states;
    let (mut correct, mut total) = (0usize, 0usize);
    let mut generations = Vec::with_capacity(examples.len());
    for ex in examples {
        let ctx = generator.context(&ex.input)?;
        let predicted = ctx.predicted_states(k);
        correct += predicted.iter().zip(&ex.states).filter(|(a, b)| a == b).count();
        total += ex.states.len();
        let ids = generator.generate_from(&ctx, decoding)?;
        generations.push(GenerationRecord {
            id: ex.id.clone(),
            candidate: detokenize(&vocab.decode(&ids)),
            reference: ex.reference.clone(),
        });
    }
    let pairs: Vec<_> = generations.iter().map(GenerationRecord::to_pair).collect();
    Ok(Evaluation {
        metrics: evaluate_corpus(&pairs)?,
        state_accuracy: correct as f64 / total.max(1) as f64,
        generations,
    })
}

/// Early stop once validation reaches both thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopRule {
    pub bleu4: f64,
    pub state_accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    pub stop: Option<StopRule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub log: EpochLog,
    pub eval: Evaluation,
}

fn mean<'t>(terms: &[Var<'t>], scale: f64) -> Result<Var<'t>> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(scale))
}

/// Reports a NaN rejected inside an op as a non-finite `term`.
fn blame(err: CoreError, term: &'static str, epoch: usize, batch: usize) -> CoreError {
    match err {
        CoreError::Autodiff(AutodiffError::InvalidValue { .. }) => CoreError::NonFinite { term, epoch, batch },
        other => other,
    }
}

fn finite(v: f64, term: &'static str, epoch: usize, batch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::NonFinite { term, epoch, batch })
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub best_bleu4: f64,
}

impl Trainer {
    /// Fresh model sized to `vocab`, seeded from `config.seed`.
    pub fn new(mut config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.model.vocab_size = vocab.len();
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(config.train.lr, config.train.weight_decay);
        Ok(Self {
            config,
            vocab,
            model,
            optimizer,
            epochs_done: 0,
            best_bleu4: f64::NEG_INFINITY,
        })
    }

    pub fn resume(state_path: &Path) -> Result<Self> {
        let s = checkpoint::load_state(state_path)?;
        Ok(Self {
            config: s.config,
            vocab: s.vocab,
            model: s.model,
            optimizer: s.optimizer,
            epochs_done: s.progress.epochs_done,
            best_bleu4: s.progress.best_bleu4,
        })
    }

    /// Loss terms and per-parameter gradients of one minibatch.
    pub fn compute_gradients(&self, batch: &[&Example], epoch: usize, index: usize) -> Result<(LossBundle, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(CoreError::Input("empty batch".into()));
        }
        let train = &self.config.train;
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let scale = 1.0 / batch.len() as f64;
        let (mut l_c, mut l_ce) = (Vec::new(), Vec::new());
        let (mut h_img, mut h_txt) = (Vec::new(), Vec::new());
        let tag = |term| move |e| blame(e, term, epoch, index);
        for ex in batch {
            let enc = bound.encode_study(&ex.input).map_err(tag("l_c"))?;
            l_c.push(classification_loss(enc.p_state, &ex.states).map_err(tag("l_c"))?);
            let p_word = bound
                .decode_hidden(&ex.decoder_prefix(), enc.d_it)
                .and_then(|h| word_distribution(h, bound.var("embed.w")))
                .map_err(tag("l_ce"))?;
            l_ce.push(generation_loss(p_word, &ex.target).map_err(tag("l_ce"))?);
            h_img.push(enc.d_img.mean_rows()?);
            h_txt.push(bound.encode_text(&ex.report_ids).map_err(tag("l_cl"))?.mean_rows()?);
        }
        let l_c = mean(&l_c, scale)?;
        let l_ce = mean(&l_ce, scale)?;
        let labels: Vec<u64> = batch.iter().map(|e| e.label).collect();
        let l_cl = (|| {
            let z_img = bound.project_contrastive("img", concat_rows(&h_img)?)?;
            let z_txt = bound.project_contrastive("txt", concat_rows(&h_txt)?)?;
            contrastive_loss(z_img, z_txt, &labels, train.theta, train.tau, train.label_mode)
        })()
        .map_err(tag("l_cl"))?;
        let total = total_loss(l_c, l_ce, l_cl, train.lambda).map_err(tag("l_total"))?;

        let bundle = LossBundle {
            l_c: finite(l_c.item(), "l_c", epoch, index)?,
            l_ce: finite(l_ce.item(), "l_ce", epoch, index)?,
            l_cl: finite(l_cl.item(), "l_cl", epoch, index)?,
            lambda: train.lambda,
            l_total: finite(total.item(), "l_total", epoch, index)?,
        };
        let mut grads = tape.backward(total)?;
        let grads: Vec<Vec<f64>> = bound
            .vars()
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(CoreError::NonFinite {
                term: "gradient",
                epoch,
                batch: index,
            });
        }
        Ok((bundle, grads))
    }

    pub fn train_step(&mut self, batch: &[&Example], epoch: usize, index: usize) -> Result<LossBundle> {
        let (bundle, grads) = self.compute_gradients(batch, epoch, index)?;
        for (p, g) in self.model.params_mut().iter_mut().zip(grads) {
            p.grad = Some(g);
        }
        self.optimizer.step(self.model.params_mut())?;
        for p in self.model.params_mut() {
            p.zero_grad();
        }
        Ok(bundle)
    }

    /// Visit order of epoch `epoch` (0-based); depends only on seed and epoch.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `train`; returns the mean of each term over batches.
    pub fn train_epoch(&mut self, train: &[Example]) -> Result<LossBundle> {
        if train.is_empty() {
            return Err(CoreError::Input("empty training set".into()));
        }
        let epoch = self.epochs_done;
        let order = self.epoch_order(epoch, train.len());
        let mut sum = LossBundle {
            lambda: self.config.train.lambda,
            ..Default::default()
        };
        let batches: Vec<&[usize]> = order.chunks(self.config.train.batch_size).collect();
        for (i, idx) in batches.iter().enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&j| &train[j]).collect();
            let b = self.train_step(&batch, epoch + 1, i)?;
            sum.l_c += b.l_c;
            sum.l_ce += b.l_ce;
            sum.l_cl += b.l_cl;
            sum.l_total += b.l_total;
        }
        self.epochs_done += 1;
        let n = batches.len() as f64;
        Ok(LossBundle {
            l_c: sum.l_c / n,
            l_ce: sum.l_ce / n,
            l_cl: sum.l_cl / n,
            lambda: sum.lambda,
            l_total: sum.l_total / n,
        })
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<Evaluation> {
        evaluate(&self.model, &self.vocab, examples, Decoding::Greedy)
    }

    fn save(&self, dir: &Path, is_best: bool) -> Result<()> {
        if is_best {
            checkpoint::save_model(&dir.join(BEST_CHECKPOINT), &self.config, &self.vocab, &self.model)?;
        }
        checkpoint::save_model(&dir.join(LAST_CHECKPOINT), &self.config, &self.vocab, &self.model)?;
        checkpoint::save_state(
            &dir.join(STATE_FILE),
            &self.config,
            &self.vocab,
            &self.model,
            &self.optimizer,
            Progress {
                epochs_done: self.epochs_done,
                optimizer_step: self.optimizer.step,
                best_bleu4: self.best_bleu4,
            },
        )
    }

    /// Trains until `config.train.epochs` epochs are done or the stop rule
    /// fires, evaluating on `val` after every epoch.
    pub fn fit(&mut self, train: &[Example], val: &[Example], options: &FitOptions) -> Result<Vec<EpochRecord>> {
        if let Some(dir) = &options.out_dir {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
            let log = dir.join(LOG_FILE);
            if self.epochs_done == 0 {
                fs::write(&log, "").map_err(|e| CoreError::io(&log, e))?;
            }
        }
        let mut records = Vec::new();
        while self.epochs_done < self.config.train.epochs {
            let losses = self.train_epoch(train)?;
            let eval = self.evaluate(val)?;
            let log = EpochLog {
                epoch: self.epochs_done,
                l_c: losses.l_c,
                l_ce: losses.l_ce,
                l_cl: losses.l_cl,
                l_total: losses.l_total,
                val_bleu4: eval.metrics.bleu4,
            };
            let is_best = eval.metrics.bleu4 > self.best_bleu4;
            if is_best {
                self.best_bleu4 = eval.metrics.bleu4;
            }
            if let Some(dir) = &options.out_dir {
                let path = dir.join(LOG_FILE);
                let mut f = OpenOptions::new().append(true).open(&path).map_err(|e| CoreError::io(&path, e))?;
                writeln!(f, "{}", serde_json::to_string(&log).expect("log serializes"))
                    .map_err(|e| CoreError::io(&path, e))?;
                self.save(dir, is_best)?;
            }
            let stop = options
                .stop
                .is_some_and(|r| eval.metrics.bleu4 >= r.bleu4 && eval.state_accuracy >= r.state_accuracy);
            records.push(EpochRecord { log, eval });
            if stop {
                break;
            }
        }
        Ok(records)
    }
}
