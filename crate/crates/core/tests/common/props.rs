//! Invariant checks shared by the property tests. Each takes one generated
//! case and fails through `prop_assert!`.

use capsnet::capsule::{coupling_softmax, predict_values, route_values, squash};
use capsnet::{CapsNet, Tensor};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

type Check = Result<(), TestCaseError>;

pub fn norm(x: &[f32]) -> f32 {
    x.iter().map(|v| v * v).sum::<f32>().sqrt()
}

pub fn vec_f32(len: usize, mag: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-mag..mag, len)
}

/// `[n, j, d]` prediction tensor with its dimensions.
pub fn predictions() -> impl Strategy<Value = (usize, usize, usize, Vec<f32>)> {
    (1usize..=5, 1usize..=4, 1usize..=4).prop_flat_map(|(n, j, d)| (Just(n), Just(j), Just(d), vec_f32(n * j * d, 3.0)))
}

pub fn logits() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| (Just(r), Just(c), vec_f32(r * c, 20.0)))
}

/// Weights and poses for `n` lower capsules of dimension `k`, three 2D parents.
pub fn lower_layer() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>)> {
    (2usize..6, 1usize..4).prop_flat_map(|(n, k)| (Just(n), Just(k), vec_f32(n * 3 * 2 * k, 1.0), vec_f32(n * k, 1.0)))
}

fn close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

pub fn squash_bounded_and_aligned(s: Vec<f32>) -> Check {
    let t = Tensor::new(vec![s.len()], s.clone()).unwrap();
    let v = squash(&t);
    let (ns, nv) = (norm(&s), norm(v.data()));
    prop_assert!(nv < 1.0);
    if ns > 1e-6 {
        let dot: f32 = s.iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let cos = dot / (ns * nv);
        prop_assert!((cos - 1.0).abs() < 1e-6, "cos {}", cos);
    }
    Ok(())
}

pub fn squash_monotone(s: Vec<f32>, a: f32, b: f32) -> Check {
    if norm(&s) <= 1e-2 {
        return Ok(());
    }
    let scaled = |k: f32| {
        let t = Tensor::new(vec![s.len()], s.iter().map(|x| x * k).collect()).unwrap();
        norm(squash(&t).data())
    };
    prop_assert!(scaled(a) <= scaled(1.0));
    prop_assert!(scaled(1.0) <= scaled(b));
    prop_assert!(scaled(a * 0.5) < scaled(b * 2.0));
    Ok(())
}

pub fn softmax_normalised_and_shift_invariant(rows: usize, cols: usize, b: Vec<f32>, shift: f32) -> Check {
    let t = Tensor::new(vec![rows, cols], b.clone()).unwrap();
    let c = coupling_softmax(&t);
    for row in c.data().chunks(cols) {
        let s: f32 = row.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-5);
        prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
    let shifted = Tensor::new(vec![rows, cols], b.iter().map(|x| x + shift).collect()).unwrap();
    for (x, y) in c.data().iter().zip(coupling_softmax(&shifted).data()) {
        prop_assert!((x - y).abs() < 1e-5);
    }
    Ok(())
}

pub fn couplings_normalised_every_iteration(
    n: usize,
    j: usize,
    d: usize,
    u: Vec<f32>,
    r: usize,
    orphan: bool,
) -> Check {
    let t = Tensor::new(vec![n, j, d], u).unwrap();
    let (v, _, trace) = route_values(&t, r, None, orphan).unwrap();
    prop_assert_eq!(trace.len(), r);
    let width = j + usize::from(orphan);
    for c in &trace.couplings {
        for row in c.data().chunks(width) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
    for row in v.data().chunks(d) {
        prop_assert!(norm(row) < 1.0);
    }
    Ok(())
}

pub fn single_iteration_uniform(n: usize, j: usize, d: usize, u: Vec<f32>) -> Check {
    let t = Tensor::new(vec![n, j, d], u).unwrap();
    let (_, state, _) = route_values(&t, 1, None, false).unwrap();
    for &c in state.couplings.data() {
        prop_assert!((c - 1.0 / j as f32).abs() < 1e-6);
    }
    Ok(())
}

/// Rotating the parents permutes outputs and couplings the same way.
pub fn upper_permutation_equivariant(n: usize, j: usize, d: usize, u: Vec<f32>, r: usize, rot: usize) -> Check {
    let perm: Vec<usize> = (0..j).map(|k| (k + rot) % j).collect();
    let t = Tensor::new(vec![n, j, d], u.clone()).unwrap();
    let mut pu = vec![0.0f32; u.len()];
    for i in 0..n {
        for (k, &src) in perm.iter().enumerate() {
            let (to, from) = ((i * j + k) * d, (i * j + src) * d);
            pu[to..to + d].copy_from_slice(&u[from..from + d]);
        }
    }
    let pt = Tensor::new(vec![n, j, d], pu).unwrap();
    let (v, s, _) = route_values(&t, r, None, false).unwrap();
    let (pv, ps, _) = route_values(&pt, r, None, false).unwrap();
    for (k, &src) in perm.iter().enumerate() {
        for dd in 0..d {
            prop_assert!(close(pv.data()[k * d + dd], v.data()[src * d + dd], 1e-5));
        }
        for i in 0..n {
            prop_assert!(close(ps.couplings.data()[i * j + k], s.couplings.data()[i * j + src], 1e-5));
        }
    }
    Ok(())
}

/// Relabeling lower capsules together with their weights leaves parents alone.
pub fn lower_relabeling_symmetric(n: usize, k: usize, ws: Vec<f32>, us: Vec<f32>, rot: usize) -> Check {
    let (j, d) = (3, 2);
    let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
    let block = j * d * k;
    let (mut pw, mut pu) = (vec![0.0f32; ws.len()], vec![0.0f32; us.len()]);
    for (i, &src) in perm.iter().enumerate() {
        pw[i * block..(i + 1) * block].copy_from_slice(&ws[src * block..(src + 1) * block]);
        pu[i * k..(i + 1) * k].copy_from_slice(&us[src * k..(src + 1) * k]);
    }
    let lengths = |u: Vec<f32>, w: Vec<f32>| {
        let p =
            predict_values(&Tensor::new(vec![n, k], u).unwrap(), &Tensor::new(vec![n, j, d, k], w).unwrap()).unwrap();
        let (v, _, _) = route_values(&p, 3, None, false).unwrap();
        v.data().chunks(d).map(norm).collect::<Vec<_>>()
    };
    let a = lengths(us, ws);
    let b = lengths(pu, pw);
    for (x, y) in a.iter().zip(&b) {
        prop_assert!(close(*x, *y, 1e-5), "{:?} vs {:?}", a, b);
    }
    Ok(())
}

/// Changing any capsule other than the selected one leaves the
/// reconstruction untouched.
pub fn masking_is_local(model: &CapsNet<f32>, v: Vec<f32>, noise: Vec<f32>, class: usize) -> Check {
    let (classes, dim) = (model.config().num_classes, model.config().digit_dim);
    let mut other = v.clone();
    for (k, x) in other.iter_mut().enumerate() {
        if k / dim != class {
            *x = noise[k];
        }
    }
    let a = model.mask_and_decode(&Tensor::new(vec![classes, dim], v).unwrap(), class).unwrap();
    let b = model.mask_and_decode(&Tensor::new(vec![classes, dim], other).unwrap(), class).unwrap();
    prop_assert_eq!(a, b);
    Ok(())
}
