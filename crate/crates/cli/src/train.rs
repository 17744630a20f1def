use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use capsnet::data::{
    load_mnist, read_multimnist, LabeledImage, MultiExample, MultiSet, ShiftedMnist, Split, TrainSet, Translated40,
    MULTI_SIDE, TRANSLATE_CANVAS,
};
use capsnet::eval::{evaluate, write_text, EvalMode, PlainImages};
use capsnet::train::{load_checkpoint, metrics_csv, save_checkpoint, EpochMetrics, TrainConfig, Trainer};
use capsnet::{CapsNet, CapsNetConfig};
use clap::Args;

use crate::Threads;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding the four uncompressed MNIST IDX files.
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// Train on composites generated from the training split.
    #[arg(long)]
    multimnist: Option<PathBuf>,
    /// Composites from the test split, evaluated after each epoch.
    #[arg(long, requires = "multimnist")]
    eval_multimnist: Option<PathBuf>,
    /// Train on digits placed at random on a 40x40 canvas.
    #[arg(long, conflicts_with = "multimnist")]
    translate40: bool,
    #[arg(long, default_value_t = 3)]
    routing: usize,
    /// Drop the reconstruction term from the loss.
    #[arg(long)]
    no_recon: bool,
    #[arg(long, default_value_t = 0.0005)]
    recon_scale: f64,
    #[arg(long)]
    orphan: bool,
    #[arg(long)]
    learnable_priors: bool,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Rescale gradients whose global norm exceeds this value.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Steps per decay period; 2000, or 20000 with --multimnist.
    #[arg(long)]
    decay_steps: Option<f64>,
    /// Largest random shift for single-digit training.
    #[arg(long, default_value_t = 2)]
    max_shift: usize,
    /// Use only the first N training examples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Evaluate on only the first N test examples.
    #[arg(long)]
    test_limit: Option<usize>,
    /// Skip the per-epoch test evaluation.
    #[arg(long)]
    no_eval: bool,
    /// Stop once the per-epoch test error is at or below this fraction.
    #[arg(long)]
    target_error: Option<f64>,
    /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state. Model
    /// hyperparameters and the random key come from the checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Leave optimizer moments out of the saved checkpoint.
    #[arg(long)]
    no_optimizer_state: bool,
    #[command(flatten)]
    threads: Threads,
}

pub fn load_split(dir: &Path, split: Split, limit: Option<usize>) -> Result<Vec<LabeledImage>> {
    let mut images = load_mnist(dir, split).with_context(|| format!("loading MNIST from {}", dir.display()))?;
    if let Some(n) = limit {
        images.truncate(n);
    }
    Ok(images)
}

pub fn load_composites(path: &Path, limit: Option<usize>) -> Result<Vec<MultiExample>> {
    let mut ex = read_multimnist(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(n) = limit {
        ex.truncate(n);
    }
    Ok(ex)
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics.csv")
}

pub fn run(a: TrainArgs) -> Result<()> {
    let parallel = a.threads.install()?;
    if a.target_error.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
        bail!("--target-error is a fraction in [0, 1]");
    }
    let multi = a.multimnist.is_some();
    let train_cfg = TrainConfig {
        batch_size: a.batch,
        learning_rate: a.lr,
        decay_steps: a.decay_steps.unwrap_or(if multi { 20_000.0 } else { 2_000.0 }),
        epochs: a.epochs,
        seed: a.seed,
        max_shift: a.max_shift,
        grad_clip: a.grad_clip,
        parallel,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;

    let train_split = load_split(&a.data_dir, Split::Train, if multi { None } else { a.train_limit })?;
    let need_test = !a.no_eval && (!multi || a.eval_multimnist.is_some());
    let test_split = if need_test {
        load_split(&a.data_dir, Split::Test, if multi { None } else { a.test_limit })?
    } else {
        Vec::new()
    };
    let composites = match &a.multimnist {
        Some(p) => load_composites(p, a.train_limit)?,
        None => Vec::new(),
    };
    let eval_composites = match &a.eval_multimnist {
        Some(p) if !a.no_eval => load_composites(p, a.test_limit)?,
        _ => Vec::new(),
    };

    let input = if multi {
        MULTI_SIDE
    } else if a.translate40 {
        TRANSLATE_CANVAS
    } else {
        28
    };
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.model.config().input_size != input {
                bail!(
                    "checkpoint expects {0}x{0} inputs but this run feeds {input}x{input}",
                    ck.model.config().input_size
                );
            }
            Trainer::resume(ck, train_cfg.clone())?
        }
        None => {
            let model_cfg = CapsNetConfig {
                routing_iterations: a.routing,
                orphan: a.orphan,
                learnable_priors: a.learnable_priors,
                recon_scale: if a.no_recon { 0.0 } else { a.recon_scale },
                ..CapsNetConfig::for_input(input)
            };
            Trainer::new(CapsNet::new(model_cfg, a.seed)?, train_cfg.clone())?
        }
    };

    let shifted = ShiftedMnist { images: &train_split, max_shift: a.max_shift };
    let translated = Translated40 { images: &train_split };
    let multi_train = MultiSet { examples: &composites, base: &train_split };
    let data: &dyn TrainSet = if multi {
        &multi_train
    } else if a.translate40 {
        &translated
    } else {
        &shifted
    };
    if data.is_empty() {
        bail!("no training examples");
    }

    let plain_test = PlainImages { images: &test_split };
    let translated_test = Translated40 { images: &test_split };
    let multi_test = MultiSet { examples: &eval_composites, base: &test_split };
    let eval_set: Option<(&dyn TrainSet, EvalMode)> = if !need_test {
        None
    } else if multi {
        Some((&multi_test, EvalMode::Multi))
    } else if a.translate40 {
        Some((&translated_test, EvalMode::Single))
    } else {
        Some((&plain_test, EvalMode::Single))
    };

    let metrics_file = a.metrics.clone().unwrap_or_else(|| metrics_path(&a.out));
    let model_cfg = trainer.model.config().clone();
    let params = trainer.model.parameter_count();
    eprintln!(
        "training {} examples ({input}x{input}), {} parameters, {} steps per epoch",
        data.len(),
        if model_cfg.recon_scale > 0.0 { params.with_decoder } else { params.without_decoder },
        trainer.steps_per_epoch(data.len())
    );

    let done = (trainer.step() / trainer.steps_per_epoch(data.len()).max(1)) as usize;
    let mut log: Vec<EpochMetrics> = Vec::new();
    for epoch in done..a.epochs {
        let start = Instant::now();
        let mut m = trainer.run_epoch(data, epoch)?;
        if let Some((set, mode)) = eval_set {
            let report = evaluate(&trainer.model, set, mode, "test", parallel)?;
            m.eval_error = Some(report.error_rate);
        }
        eprintln!(
            "epoch {}/{}  steps {}  loss {:.5}  margin {:.5}  recon {:.3}  test error {}  ({:.0} s)",
            m.epoch,
            a.epochs,
            m.steps,
            m.train_loss,
            m.train_margin,
            m.train_recon,
            m.eval_error.map_or("-".to_string(), |e| format!("{:.2}%", 100.0 * e)),
            start.elapsed().as_secs_f64()
        );
        let stop = matches!((a.target_error, m.eval_error), (Some(t), Some(e)) if e <= t);
        log.push(m);
        save_checkpoint(&a.out, &trainer.checkpoint(!a.no_optimizer_state))?;
        write_text(&metrics_file, &metrics_csv(&log, &train_cfg, &model_cfg))?;
        if stop {
            eprintln!("target error reached");
            break;
        }
    }
    if log.is_empty() {
        eprintln!("checkpoint already covers {} epochs; nothing to do", a.epochs);
    }
    println!("{}", a.out.display());
    Ok(())
}
