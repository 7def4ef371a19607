//! Finite-difference verification of every differentiable op and of the full
//! training loss.

use std::fmt;

use mscl_autodiff::finite_diff::{max_relative_error, numeric_grad, relative_error, DEFAULT_STEP};
use mscl_autodiff::{concat_cols, concat_rows, max_pool, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RunConfig};
use crate::data::{Vocabulary, EOS};
use crate::error::Result;
use crate::model::StudyInput;
use crate::train::{Example, Trainer};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const END_TO_END_SAMPLES: usize = 50;
pub const END_TO_END: &str = "l_total";

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.op.as_str()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<26} max_rel_err={:.3e} tol={:.0e} {}",
                c.op,
                c.max_rel_error,
                c.tolerance,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.passed() { "gradcheck passed" } else { "gradcheck FAILED" })
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient of the named check.
    pub corrupt: Option<String>,
}

type Build = for<'t> fn(&[Var<'t>]) -> mscl_autodiff::Result<Var<'t>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape")
}

/// Contracts an output with fixed weights so every element gets a distinct
/// upstream gradient.
fn probe<'t>(v: Var<'t>) -> mscl_autodiff::Result<Var<'t>> {
    let n = v.shape().iter().product::<usize>();
    let w = Tensor::new(v.shape(), (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect())?;
    Ok(v.mul_const(&w)?.sum())
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |v| probe(v[0].matmul(&v[1])?)),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |v| probe(v[0].matmul_nt(&v[1])?)),
        ("add", vec![vec![2, 3], vec![2, 3]], |v| probe(v[0].add(&v[1])?)),
        ("mul", vec![vec![2, 3], vec![2, 3]], |v| probe(v[0].mul(&v[1])?)),
        ("mul_shared_input", vec![vec![2, 3]], |v| probe(v[0].mul(&v[0])?.add(&v[0])?)),
        ("add_row", vec![vec![3, 4], vec![4]], |v| probe(v[0].add_row(&v[1])?)),
        ("scale", vec![vec![2, 3]], |v| probe(v[0].scale(-1.7))),
        ("add_const", vec![vec![2, 2]], |v| {
            probe(v[0].add_const(&Tensor::from_rows(&[vec![1.0, -1e30], vec![0.5, 0.0]])?)?.softmax_rows()?)
        }),
        ("mul_const", vec![vec![2, 2]], |v| {
            probe(v[0].mul_const(&Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]])?)?)
        }),
        ("relu", vec![vec![3, 4]], |v| probe(v[0].relu())),
        ("softmax_rows", vec![vec![3, 5]], |v| probe(v[0].softmax_rows()?)),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |v| {
            probe(v[0].layer_norm(&v[1], &v[2], 1e-5)?)
        }),
        ("mean_rows", vec![vec![4, 3]], |v| probe(v[0].mean_rows()?)),
        ("sum", vec![vec![2, 3]], |v| Ok(v[0].sum())),
        ("slice_cols", vec![vec![3, 5]], |v| probe(v[0].slice_cols(1, 3)?)),
        ("reshape", vec![vec![2, 6]], |v| probe(v[0].reshape(vec![3, 4])?.softmax_rows()?)),
        ("transpose", vec![vec![2, 3]], |v| probe(v[0].transpose()?.softmax_rows()?)),
        ("normalize_rows", vec![vec![3, 4]], |v| probe(v[0].normalize_rows()?)),
        ("cosine_sim", vec![vec![5], vec![5]], |v| v[0].cosine_sim(&v[1])),
        ("gather_rows", vec![vec![5, 3]], |v| probe(v[0].gather_rows(&[4, 0, 4, 2])?)),
        ("nll_rows", vec![vec![3, 5]], |v| v[0].softmax_rows()?.nll_rows(&[Some(1), None, Some(4)])),
        ("cross_entropy_rows", vec![vec![2, 4]], |v| {
            v[0].softmax_rows()?
                .cross_entropy_rows(&Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]])?)
        }),
        ("weighted_logsumexp_rows", vec![vec![3, 3]], |v| {
            probe(v[0].weighted_logsumexp_rows(&Tensor::from_rows(&[
                vec![1.0, 2.0, 1.0],
                vec![2.0, 1.0, 0.0],
                vec![1.0, 1.0, 1.0],
            ])?)?)
        }),
        ("max_pool", vec![vec![6], vec![6], vec![6]], |v| probe(max_pool(v)?)),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |v| probe(concat_cols(&[v[1], v[0]])?)),
        ("concat_rows", vec![vec![3], vec![2, 3]], |v| probe(concat_rows(&[v[1], v[0], v[1]])?)),
    ]
}

fn check_op(name: &str, shapes: &[Vec<usize>], build: Build, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<OpCheck> {
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(rng, s)).collect();
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&vars)?;
    let grads = tape.backward(loss)?;
    let mut f = |xs: &[Tensor]| {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        build(&vs).map(|v| v.item()).unwrap_or(f64::NAN)
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let numeric = numeric_grad(&mut f, &inputs, i, DEFAULT_STEP);
        let mut analytic = grads.get_slice(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numeric.len()]);
        if corrupt {
            analytic[0] = analytic[0] * 1.1 + 0.1;
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(OpCheck {
        op: name.to_string(),
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
    })
}

/// Small model and two random two-view studies for the end-to-end check.
pub fn end_to_end_fixture(seed: u64) -> Result<(Trainer, Vec<Example>)> {
    let mut config = RunConfig {
        seed,
        model: ModelConfig {
            topics: 3,
            states: 4,
            d_model: 8,
            visual_dim: 8,
            vocab_size: 0,
            encoder_layers: 1,
            decoder_layers: 2,
            heads: 2,
            ffn_dim: 12,
            max_len: 12,
            patch_size: 4,
            image_size: 8,
            proj_dim: 5,
            positional_encoding: true,
        },
        ..Default::default()
    };
    config.train.lambda = 0.8;
    config.train.theta = 2.0;
    let vocab = Vocabulary::build(&["the heart is enlarged . no effusion evaluate for edema"], 1)?;
    let trainer = Trainer::new(config, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let v = trainer.vocab.len();
    let examples = (0..2)
        .map(|i| {
            let report: Vec<usize> = (0..5).map(|_| rng.random_range(4..v)).collect();
            let mut target = report.clone();
            target.push(EOS);
            Example {
                id: format!("g{i}"),
                input: StudyInput {
                    views: (0..2).map(|_| random(&mut rng, &[4, 16]).reshaped(vec![4, 16]).expect("shape")).collect(),
                    indication: (0..3).map(|_| rng.random_range(4..v)).collect(),
                },
                target,
                report_ids: report,
                states: (0..3).map(|_| rng.random_range(0..4)).collect(),
                label: i as u64,
                reference: String::new(),
            }
        })
        .collect();
    Ok((trainer, examples))
}

fn check_end_to_end(seed: u64, corrupt: bool) -> Result<OpCheck> {
    let (mut trainer, examples) = end_to_end_fixture(seed)?;
    let batch: Vec<&Example> = examples.iter().collect();
    let (_, grads) = trainer.compute_gradients(&batch, 0, 0)?;
    let sizes: Vec<usize> = trainer.model.params().iter().map(|p| p.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (k, flat) in sample(&mut rng, total, END_TO_END_SAMPLES.min(total)).into_iter().enumerate() {
        let (mut p, mut j) = (0, flat);
        while j >= sizes[p] {
            j -= sizes[p];
            p += 1;
        }
        let orig = trainer.model.params()[p].value.data()[j];
        let eval = |x: f64, t: &mut Trainer| -> Result<f64> {
            t.model.params_mut()[p].value.data_mut()[j] = x;
            Ok(t.compute_gradients(&batch, 0, 0)?.0.l_total)
        };
        let up = eval(orig + DEFAULT_STEP, &mut trainer)?;
        let down = eval(orig - DEFAULT_STEP, &mut trainer)?;
        trainer.model.params_mut()[p].value.data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * DEFAULT_STEP);
        let mut analytic = grads[p][j];
        if corrupt && k == 0 {
            analytic = analytic * 1.1 + 0.1;
        }
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(OpCheck {
        op: END_TO_END.to_string(),
        max_rel_error: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}

pub fn op_names() -> Vec<&'static str> {
    op_cases().into_iter().map(|c| c.0).chain([END_TO_END]).collect()
}

pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let corrupt = |name: &str| options.corrupt.as_deref() == Some(name);
    let mut checks = Vec::new();
    for (name, shapes, build) in op_cases() {
        checks.push(check_op(name, &shapes, build, &mut rng, corrupt(name))?);
    }
    checks.push(check_end_to_end(options.seed, corrupt(END_TO_END))?);
    Ok(GradcheckReport { checks })
}
