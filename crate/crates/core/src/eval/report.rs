use std::fmt::Write as _;

use rayon::prelude::*;

use super::{classify, classify_top2, pair_matches};
use crate::data::{LabeledImage, TrainSet};
use crate::model::{CapsNet, TrainSample};
use crate::rng::RngKey;
use crate::tensor::Graph;
use crate::{CapsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// One digit per image, argmax classification.
    Single,
    /// Two digits per image, top-2 set match.
    Multi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub lengths: Vec<f32>,
    pub margin: f64,
    pub reconstruction: f64,
}

pub trait Predictor: Sync {
    fn predict(&self, sample: &TrainSample<f32>) -> Result<Prediction>;
}

impl Predictor for CapsNet<f32> {
    fn predict(&self, sample: &TrainSample<f32>) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let nodes = self.loss_graph(&mut g, &p, sample)?;
        let loss = self.breakdown(&g, &nodes);
        Ok(Prediction {
            lengths: g.value(nodes.caps.lengths).to_vec(),
            margin: loss.margin,
            reconstruction: loss.reconstruction,
        })
    }
}

/// 28×28 (or any square) digits used as-is.
pub struct PlainImages<'a> {
    pub images: &'a [LabeledImage],
}

impl TrainSet for PlainImages<'_> {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn input_size(&self) -> usize {
        self.images.first().map_or(28, LabeledImage::side)
    }
    fn sample(&self, index: usize, _epoch: usize, _key: &RngKey) -> Result<TrainSample<f32>> {
        let im = &self.images[index];
        Ok(TrainSample::single(im.to_tensor(), usize::from(im.label)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: EvalMode,
    pub count: usize,
    pub errors: usize,
    /// `errors / count`.
    pub error_rate: f64,
    /// `confusion[true][predicted]`. In multi mode each pair contributes two
    /// entries, matched digits first.
    pub confusion: Vec<Vec<u64>>,
    pub mean_margin: f64,
    pub mean_reconstruction: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str("dataset,mode,count,errors,error_rate,mean_margin,mean_reconstruction\n");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            self.dataset,
            match self.mode {
                EvalMode::Single => "single",
                EvalMode::Multi => "multi",
            },
            self.count,
            self.errors,
            self.error_rate,
            self.mean_margin,
            self.mean_reconstruction
        );
        s.push_str("\ntrue\\predicted");
        for j in 0..self.confusion.len() {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{i}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

const BLOCK: usize = 256;

/// Error rate, confusion counts and mean losses over every example of `data`.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &dyn TrainSet,
    mode: EvalMode,
    name: &str,
    parallel: bool,
) -> Result<EvalReport> {
    let key = [0u8; 32];
    let run = |i: usize| -> Result<(TrainSample<f32>, Prediction)> {
        let s = data.sample(i, 0, &key)?;
        let p = predictor.predict(&s)?;
        Ok((s, p))
    };
    let mut confusion: Vec<Vec<u64>> = Vec::new();
    let (mut errors, mut margin, mut recon) = (0usize, 0.0f64, 0.0f64);
    let n = data.len();
    for start in (0..n).step_by(BLOCK) {
        let range = start..(start + BLOCK).min(n);
        let results: Vec<Result<(TrainSample<f32>, Prediction)>> =
            if parallel { range.into_par_iter().map(run).collect() } else { range.map(run).collect() };
        for r in results {
            let (s, p) = r?;
            let k = p.lengths.len();
            if confusion.is_empty() {
                confusion = vec![vec![0; k]; k];
            }
            margin += p.margin;
            recon += p.reconstruction;
            match (mode, s.targets.as_slice()) {
                (EvalMode::Single, &[t]) => {
                    let c = classify(&p.lengths);
                    confusion[t][c] += 1;
                    errors += usize::from(c != t);
                }
                (EvalMode::Multi, &[a, b]) => {
                    let pred = classify_top2(&p.lengths);
                    errors += usize::from(!pair_matches(pred, (a, b)));
                    let mut preds = vec![pred.0, pred.1];
                    let mut unmatched = Vec::new();
                    for t in [a, b] {
                        if let Some(pos) = preds.iter().position(|&x| x == t) {
                            confusion[t][t] += 1;
                            preds.remove(pos);
                        } else {
                            unmatched.push(t);
                        }
                    }
                    for (t, q) in unmatched.into_iter().zip(preds) {
                        confusion[t][q] += 1;
                    }
                }
                (_, targets) => {
                    return Err(CapsError::InvalidArgument(format!(
                        "{mode:?} evaluation got an example with {} labels",
                        targets.len()
                    )))
                }
            }
        }
    }
    let c = n.max(1) as f64;
    Ok(EvalReport {
        dataset: name.to_string(),
        mode,
        count: n,
        errors,
        error_rate: if n == 0 { 0.0 } else { errors as f64 / n as f64 },
        confusion,
        mean_margin: margin / c,
        mean_reconstruction: recon / c,
    })
}
