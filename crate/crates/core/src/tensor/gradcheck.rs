use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Upper bound on the number of coordinates perturbed; larger parameter
    /// sets are sampled without replacement.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { epsilon: 1e-3, max_coords: 64, seed: 0 }
    }
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    match g.value(loss) {
        [x] => Ok(*x),
        _ => Err(TensorError::NonScalarLoss(g.shape(loss).to_vec())),
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, in 64-bit arithmetic.
///
/// Returns the largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
/// over the checked coordinates.
pub fn finite_difference_check<F>(f: F, params: &[Tensor<f64>], opts: &FdOptions) -> Result<f64, TensorError>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = f(&mut g, &vars)?;
        let mut grads = g.backward(loss)?;
        vars.iter().zip(params).map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.len()])).collect()
    };

    let coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(pi, p)| (0..p.len()).map(move |i| (pi, i))).collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= opts.max_coords {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| coords[i]).collect()
    };

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, i) in chosen {
        let orig = work[pi].data()[i];
        work[pi].data_mut()[i] = orig + opts.epsilon;
        let plus = eval(&f, &work)?;
        work[pi].data_mut()[i] = orig - opts.epsilon;
        let minus = eval(&f, &work)?;
        work[pi].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let a = analytic[pi][i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
