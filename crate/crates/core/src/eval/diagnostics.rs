use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::TrainSet;
use crate::model::{CapsNet, Decode};
use crate::{CapsError, Result};

/// Mean `|Δb_ij|` per routing iteration, averaged over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDiagnostics {
    pub mean_abs_delta: Vec<f64>,
    pub count: usize,
}

impl RoutingDiagnostics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,mean_abs_delta_b\n");
        for (i, d) in self.mean_abs_delta.iter().enumerate() {
            let _ = writeln!(s, "{},{d}", i + 1);
        }
        s
    }
}

/// Runs every example with `r_max` routing iterations and averages the
/// per-iteration logit change.
pub fn routing_diagnostics(
    model: &CapsNet<f32>,
    data: &dyn TrainSet,
    r_max: usize,
    parallel: bool,
) -> Result<RoutingDiagnostics> {
    if r_max < 2 {
        return Err(CapsError::InvalidArgument(format!("r_max must be at least 2, got {r_max}")));
    }
    if data.is_empty() {
        return Err(CapsError::InvalidArgument("no examples to diagnose".into()));
    }
    let mut m = model.clone();
    m.set_routing_iterations(r_max)?;
    let key = [0u8; 32];
    let run = |i: usize| -> Result<Vec<f64>> {
        let s = data.sample(i, 0, &key)?;
        Ok(m.forward(&s.image, Decode::None)?.trace.mean_abs_delta)
    };
    let traces: Vec<Result<Vec<f64>>> =
        if parallel { (0..data.len()).into_par_iter().map(run).collect() } else { (0..data.len()).map(run).collect() };
    let mut sum = vec![0.0f64; r_max];
    for t in traces {
        for (a, b) in sum.iter_mut().zip(t?) {
            *a += b;
        }
    }
    let n = data.len() as f64;
    Ok(RoutingDiagnostics { mean_abs_delta: sum.into_iter().map(|x| x / n).collect(), count: data.len() })
}
