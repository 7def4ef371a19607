use std::fs;
use std::path::{Path, PathBuf};

use mscl_core::checkpoint::load_model;
use mscl_core::gradcheck::{run_gradcheck, GradcheckOptions};
use mscl_core::synth::{synth_corpus, write_corpus, SynthSpec};
use mscl_core::train::{evaluate, image_id, make_backend, prepare_examples, FitOptions, STATE_FILE};
use mscl_core::{load_dataset, split_dataset, BackendKind, CoreError, Decoding, Result, RunConfig, Study, Trainer, Vocabulary};
use mscl_metrics::{evaluate_file, write_generations};
use mscl_segment::{segment_image_detailed, GrayImage, ProposalManifest};

use crate::{Ablation, Cli, Command, Split};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Synth {
            out,
            studies,
            abnormal_rate,
        } => synth(&out, studies, abnormal_rate, &config),
        Command::Segment {
            input,
            output,
            proposals_dir,
        } => {
            if let Some(dir) = proposals_dir {
                config.backend = BackendKind::ProposalsDir;
                config.paths.proposals_dir = Some(dir);
            }
            segment(&input, &output, &config)
        }
        Command::Train {
            manifest,
            out,
            epochs,
            resume,
            ablation,
        } => {
            if let Some(m) = manifest {
                config.paths.manifest = Some(m);
            }
            if let Some(o) = out {
                config.paths.out_dir = Some(o);
            }
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            apply_ablation(&mut config, ablation);
            train(config, resume)
        }
        Command::Generate {
            checkpoint,
            manifest,
            split,
            beam,
            output,
        } => {
            let decoding = beam.map_or(Decoding::Greedy, Decoding::Beam);
            let given = cli.config.is_some().then_some(&config);
            generate(&checkpoint, manifest.as_deref(), split, decoding, &output, given)
        }
        Command::Evaluate { generations, output } => {
            let output = output.unwrap_or_else(|| {
                let mut name = generations.clone().into_os_string();
                name.push(".metrics.json");
                PathBuf::from(name)
            });
            evaluate_generations(&generations, &output)
        }
        Command::Gradcheck { corrupt } => {
            let report = run_gradcheck(&GradcheckOptions {
                seed: config.seed,
                corrupt,
            })?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(CoreError::Input(format!("gradient check failed for {}", report.failures().join(", "))))
            }
        }
    }
}

pub fn apply_ablation(config: &mut RunConfig, ablation: Ablation) {
    if ablation.single_view {
        config.train.single_view = true;
    }
    if ablation.no_cl {
        config.train.lambda = 1.0;
    }
    if ablation.no_sam {
        config.train.no_sam = true;
    }
}

fn synth(out: &Path, studies: usize, abnormal_rate: f64, config: &RunConfig) -> Result<()> {
    let spec = SynthSpec {
        studies,
        seed: config.seed,
        abnormal_rate,
        image_size: config.model.image_size,
        ..Default::default()
    };
    let manifest = write_corpus(out, &synth_corpus(&spec)?)?;
    println!("wrote {studies} studies to {}", manifest.display());
    Ok(())
}

fn segment(input: &Path, output: &Path, config: &RunConfig) -> Result<()> {
    config.validate()?;
    let backend = make_backend(config)?;
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CoreError::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    fs::create_dir_all(output).map_err(|e| CoreError::io(output, e))?;
    let mut failed = 0;
    for path in &files {
        let id = image_id(path);
        let result = (|| -> Result<usize> {
            let image = GrayImage::read_png(path)?;
            let seg = segment_image_detailed(&image, &id, backend.as_ref(), &config.segmenter)?;
            seg.processed.write_png(&output.join(format!("{id}.png")))?;
            ProposalManifest::from_proposals(&id, image.width(), image.height(), &seg.proposals)
                .write(&output.join(format!("{id}.json")))?;
            Ok(seg.kept.len())
        })();
        match result {
            Ok(kept) => println!("{id}: kept {kept} masks"),
            Err(e) => {
                failed += 1;
                eprintln!("error[{}]: {}", e.class(), e);
            }
        }
    }
    if failed > 0 {
        return Err(CoreError::Input(format!("{failed} of {} images failed", files.len())));
    }
    println!("segmented {} images into {}", files.len(), output.display());
    Ok(())
}

fn manifest_root(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

/// The 7:1:2 partition used by both training and generation.
fn splits(studies: &[Study], seed: u64) -> Result<(Vec<Study>, Vec<Study>, Vec<Study>)> {
    split_dataset(studies, seed)
}

fn train(config: RunConfig, resume: bool) -> Result<()> {
    config.validate()?;
    let manifest = config
        .paths
        .manifest
        .clone()
        .ok_or_else(|| CoreError::Config("no dataset: pass --manifest or set paths.manifest".into()))?;
    let out = config.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let studies = load_dataset(&manifest, config.model.topics, config.model.states)?;
    let (train_set, val_set, _) = splits(&studies, config.seed)?;
    let mut trainer = if resume {
        let mut t = Trainer::resume(&out.join(STATE_FILE))?;
        t.config.train.epochs = config.train.epochs;
        t
    } else {
        let texts: Vec<&str> = train_set
            .iter()
            .flat_map(|s| [s.report.as_str(), s.indication.as_str()])
            .collect();
        let vocab = Vocabulary::build(&texts, config.train.min_freq)?;
        Trainer::new(config, vocab)?
    };
    let root = manifest_root(&manifest);
    let train_ex = prepare_examples(&train_set, root, &trainer.vocab, &trainer.config)?;
    let val_ex = prepare_examples(&val_set, root, &trainer.vocab, &trainer.config)?;
    println!(
        "training on {} studies, validating on {}, {} parameters",
        train_ex.len(),
        val_ex.len(),
        trainer.model.num_parameters()
    );
    let records = trainer.fit(
        &train_ex,
        &val_ex,
        &FitOptions {
            out_dir: Some(out.clone()),
            stop: None,
        },
    )?;
    for r in &records {
        println!(
            "epoch {:>3}  l_total {:.4}  l_c {:.4}  l_ce {:.4}  l_cl {:.4}  val_bleu4 {:.4}",
            r.log.epoch, r.log.l_total, r.log.l_c, r.log.l_ce, r.log.l_cl, r.log.val_bleu4
        );
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn generate(
    checkpoint: &Path,
    manifest: Option<&Path>,
    split: Split,
    decoding: Decoding,
    output: &Path,
    given: Option<&RunConfig>,
) -> Result<()> {
    let loaded = load_model(checkpoint)?;
    let config = loaded.config;
    if let Some(given) = given {
        let mut expected = given.model.clone();
        expected.vocab_size = config.model.vocab_size;
        if expected != config.model {
            return Err(CoreError::Compat(format!(
                "model section of the given config does not match checkpoint {}",
                checkpoint.display()
            )));
        }
    }
    let manifest = manifest
        .map(Path::to_path_buf)
        .or_else(|| config.paths.manifest.clone())
        .ok_or_else(|| CoreError::Config("no dataset: pass --manifest".into()))?;
    let studies = load_dataset(&manifest, config.model.topics, config.model.states)?;
    let chosen = match split {
        Split::All => studies,
        _ => {
            let (train, val, test) = splits(&studies, config.seed)?;
            match split {
                Split::Train => train,
                Split::Val => val,
                _ => test,
            }
        }
    };
    let examples = prepare_examples(&chosen, manifest_root(&manifest), &loaded.vocab, &config)?;
    let eval = evaluate(&loaded.model, &loaded.vocab, &examples, decoding)?;
    write_generations(output, &eval.generations)?;
    println!("wrote {} generations to {}", eval.generations.len(), output.display());
    Ok(())
}

fn evaluate_generations(generations: &Path, output: &Path) -> Result<()> {
    let report = evaluate_file(generations)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(output, format!("{json}\n")).map_err(|e| CoreError::io(output, e))?;
    println!("{json}");
    Ok(())
}
