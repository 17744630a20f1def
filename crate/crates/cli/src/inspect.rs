use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capsnet::data::{
    bytes_to_tensor, generate_multimnist, multimnist_count, overlap_stats, write_multimnist, AffineBounds, AffineSet,
    MultiSet, Split, TrainSet, Translated40, MULTI_SIDE, TRANSLATE_CANVAS,
};
use capsnet::eval::{
    evaluate, perturb_dimensions, routing_diagnostics, segment as run_segment, write_text, EvalMode, PlainImages,
};
use capsnet::rng;
use capsnet::train::load_checkpoint;
use capsnet::CapsNet;
use clap::Args;

use crate::train::{load_composites, load_split};
use crate::{default_data_dir, SplitArg, Threads};

fn load_model(path: &Path) -> Result<CapsNet<f32>> {
    Ok(load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?.model)
}

fn sibling(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// Composites built from the test split.
    #[arg(long)]
    multimnist: Option<PathBuf>,
    /// Test digits under random small affine transforms (40x40 models).
    #[arg(long, conflicts_with = "multimnist")]
    affine: bool,
    /// Seed for the affine transforms.
    #[arg(long, default_value_t = 0)]
    affine_seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Evaluate only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    threads: Threads,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let parallel = a.threads.install()?;
    let model = load_model(&a.ckpt)?;
    let input = model.config().input_size;
    let report = if let Some(path) = &a.multimnist {
        if input != MULTI_SIDE {
            bail!("MultiMNIST evaluation needs a {MULTI_SIDE}x{MULTI_SIDE} model; this one takes {input}x{input}");
        }
        let base = load_split(&a.data_dir, Split::Test, None)?;
        let examples = load_composites(path, a.limit)?;
        evaluate(&model, &MultiSet { examples: &examples, base: &base }, EvalMode::Multi, "multimnist", parallel)?
    } else {
        let images = load_split(&a.data_dir, Split::Test, a.limit)?;
        if a.affine {
            if input != TRANSLATE_CANVAS {
                bail!("--affine needs a model trained on {TRANSLATE_CANVAS}x{TRANSLATE_CANVAS} inputs (train --translate40)");
            }
            let bounds = AffineBounds::default();
            let name = format!(
                "mnist-affine rotation<={}deg scale={}..{} shear<={} seed={}",
                bounds.max_rotation_deg, bounds.scale.0, bounds.scale.1, bounds.max_shear, a.affine_seed
            );
            let set = AffineSet { images: &images, bounds, key: rng::key_from_seed(a.affine_seed) };
            evaluate(&model, &set, EvalMode::Single, &name, parallel)?
        } else if input == TRANSLATE_CANVAS {
            evaluate(&model, &Translated40 { images: &images }, EvalMode::Single, "mnist-translated", parallel)?
        } else if input == 28 {
            evaluate(&model, &PlainImages { images: &images }, EvalMode::Single, "mnist", parallel)?
        } else {
            bail!("a {input}x{input} model needs --multimnist");
        }
    };
    println!(
        "{}: {} examples, {} errors, error rate {:.4}%, mean margin loss {:.5}",
        report.dataset,
        report.count,
        report.errors,
        100.0 * report.error_rate,
        report.mean_margin
    );
    if let Some(p) = &a.report {
        write_text(p, &report.to_csv())?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_enum)]
    split: SplitArg,
    /// Composites per base digit.
    #[arg(long, default_value_t = 100)]
    per_digit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Use only the first N base digits.
    #[arg(long)]
    limit: Option<usize>,
}

pub fn gen_multimnist(a: GenArgs) -> Result<()> {
    let base = load_split(&a.data_dir, a.split.into(), a.limit)?;
    let full = multimnist_count(base.len() as u64, a.per_digit as u64);
    eprintln!("generating {full} composites from {} digits", base.len());
    let examples = generate_multimnist(&base, a.per_digit, a.seed)?;
    write_multimnist(&examples, &a.out)?;
    let stats = overlap_stats(&examples, &base)?;
    println!(
        "{} composites written to {}; mean box overlap {:.1}% of each digit's box, IoU {:.1}%",
        examples.len(),
        a.out.display(),
        100.0 * stats.intersection_over_area,
        100.0 * stats.iou
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_os_t = default_data_dir())]
    data_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    image_index: usize,
    /// Capsule to perturb; defaults to the image's label.
    #[arg(long)]
    class: Option<usize>,
    /// Grid image; the numbers behind it go next to it as CSV.
    #[arg(long)]
    out: PathBuf,
}

pub fn perturb(a: PerturbArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    if model.config().input_size != 28 {
        bail!("perturb works on 28x28 models");
    }
    let images = load_split(&a.data_dir, a.split.into(), None)?;
    let Some(img) = images.get(a.image_index) else {
        bail!("image index {} out of range ({} images)", a.image_index, images.len());
    };
    let class = a.class.unwrap_or(usize::from(img.label));
    let grid = perturb_dimensions(&model, &img.to_tensor(), class)?;
    grid.write_png(&a.out)?;
    let csv = sibling(&a.out, "csv");
    grid.write_csv(&csv)?;
    println!(
        "{}x{} grid for class {class} written to {} and {}",
        grid.rows(),
        grid.offsets.len(),
        a.out.display(),
        csv.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct DiagArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Number of images averaged over.
    #[arg(long, default_value_t = 1000)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    threads: Threads,
}

pub fn routing_diag(a: DiagArgs) -> Result<()> {
    let parallel = a.threads.install()?;
    let model = load_model(&a.ckpt)?;
    let images = load_split(&a.data_dir, a.split.into(), Some(a.limit))?;
    let plain = PlainImages { images: &images };
    let translated = Translated40 { images: &images };
    let data: &dyn TrainSet = match model.config().input_size {
        28 => &plain,
        TRANSLATE_CANVAS => &translated,
        n => bail!("routing-diag works on 28x28 or 40x40 models, not {n}x{n}"),
    };
    let diag = routing_diagnostics(&model, data, a.iters, parallel)?;
    write_text(&a.out, &diag.to_csv())?;
    print!("{}", diag.to_csv());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    multimnist: PathBuf,
    #[arg(long)]
    index: usize,
    /// Four panels: composite, both reconstructions, assignment map. A CSV
    /// summary is written alongside.
    #[arg(long)]
    out: PathBuf,
}

pub fn segment(a: SegmentArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    if model.config().input_size != MULTI_SIDE {
        bail!("segment needs a {MULTI_SIDE}x{MULTI_SIDE} model");
    }
    let examples = load_composites(&a.multimnist, None)?;
    let Some(ex) = examples.get(a.index) else {
        bail!("index {} out of range ({} composites)", a.index, examples.len());
    };
    let seg = run_segment(&model, &bytes_to_tensor(&ex.pixels, MULTI_SIDE, MULTI_SIDE))?;
    seg.write_png(&a.out)?;
    let count = |f: &dyn Fn(&capsnet::eval::Assignment) -> bool| seg.assignment.iter().filter(|x| f(x)).count();
    let (first, second, both) = (count(&|x| x.first), count(&|x| x.second), count(&|x| x.first && x.second));
    let csv = format!(
        "index,label_a,label_b,predicted_a,predicted_b,pixels_first,pixels_second,pixels_both\n{},{},{},{},{},{first},{second},{both}\n",
        a.index, ex.labels.0, ex.labels.1, seg.classes.0, seg.classes.1
    );
    let csv_path = sibling(&a.out, "csv");
    write_text(&csv_path, &csv)?;
    println!(
        "labels {:?}, predicted ({}, {}); {first} pixels to the first digit, {second} to the second, {both} to both",
        ex.labels, seg.classes.0, seg.classes.1
    );
    Ok(())
}
