#![allow(dead_code)]

use plwf::credit::{
    assignment_matrix, combine, extract_conflicts, resolve_conflicts, surgery, ConflictPair,
    GradientSet, ProjectionRole,
};
use plwf::network::{LossSpec, MlpSpec, Network};
use plwf::numerics::{dot, norm, softmax};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

/// Largest deviation between analytic and central-difference gradients,
/// relative to the largest analytic component.
pub fn gradient_rel_error(net: &Network, x: &[f64], loss: &LossSpec) -> f64 {
    let analytic = net.loss_and_gradient(x, loss).unwrap().grad;
    let mut probe = net.clone();
    let base = net.params().to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        probe.set_params(p.clone()).unwrap();
        let up = probe.loss_and_gradient(x, loss).unwrap().loss;
        p[i] = base[i] - FD_STEP;
        probe.set_params(p).unwrap();
        let down = probe.loss_and_gradient(x, loss).unwrap().loss;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max((analytic[i] - numeric).abs());
    }
    let scale = analytic
        .iter()
        .fold(0.0f64, |m, g| m.max(g.abs()))
        .max(1e-8);
    worst / scale
}

/// A random small network, input and loss of the requested kind.
pub fn random_triple(rng: &mut ChaCha8Rng, kl: bool) -> (Network, Vec<f64>, LossSpec) {
    let input = rng.random_range(2..7);
    let hidden: Vec<usize> = (0..rng.random_range(1..3))
        .map(|_| rng.random_range(3..9))
        .collect();
    let classes = rng.random_range(2..7);
    let activation = if rng.random_bool(0.5) {
        plwf::network::Activation::Tanh
    } else {
        plwf::network::Activation::Relu
    };
    let spec = MlpSpec::new(input, hidden, classes).with_activation(activation);
    let mut net = Network::init(spec, rng.random()).unwrap();
    // move biases off zero so relu kinks are not aligned with the origin
    let params: Vec<f64> = net
        .params()
        .iter()
        .map(|p| p + rng.random_range(-0.1..0.1))
        .collect();
    net.set_params(params).unwrap();
    let x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.5..1.5)).collect();
    let end = rng.random_range(2..=classes);
    let start = rng.random_range(0..end - 1);
    let loss = if kl {
        let logits: Vec<f64> = (start..end).map(|_| rng.random_range(-2.0..2.0)).collect();
        let temperature = rng.random_range(0.5..4.0);
        LossSpec::Kl {
            target: softmax(&logits, temperature).unwrap(),
            classes: start..end,
            temperature,
        }
    } else {
        LossSpec::CrossEntropy {
            label: rng.random_range(start..end),
            classes: start..end,
        }
    };
    (net, x, loss)
}

/// Random gradient set. A third of them live in the positive orthant, so no
/// pair conflicts; a few contain an exact zero vector.
pub fn random_gradient_set(rng: &mut ChaCha8Rng, index: usize) -> GradientSet {
    let t = rng.random_range(1..=8);
    let dim = rng.random_range(1..=2048);
    let positive = index.is_multiple_of(3);
    let mut grads: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    if positive {
                        v.abs()
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    if index % 10 == 7 {
        let k = rng.random_range(0..t);
        grads[k].iter_mut().for_each(|v| *v = 0.0);
    }
    GradientSet::new(grads).unwrap()
}

/// Checks symmetry, unit diagonal, per-pair orthogonality, norm monotonicity
/// and the no-conflict identity. Orthogonality is checked by replaying each
/// prefix of the conflict list.
pub fn surgery_invariants(
    set: &GradientSet,
    weights: &[f64],
    role: ProjectionRole,
) -> Result<(), String> {
    let m = assignment_matrix(set);
    let n = set.len();
    for a in 0..n {
        let degenerate = norm(set.get(a)) < 1e-12;
        let diag = m.get(a, a);
        if !degenerate && diag != 1.0 {
            return Err(format!("diagonal {a} is {diag}"));
        }
        for b in 0..n {
            if (m.get(a, b) - m.get(b, a)).abs() > 1e-12 {
                return Err(format!("asymmetric at ({a},{b})"));
            }
        }
    }
    let pairs = extract_conflicts(&m);
    let mut prev = set.clone();
    for k in 0..pairs.len() {
        let ConflictPair { a, b } = pairs[k];
        let (next, _) = resolve_conflicts(set, &pairs[..=k], role).map_err(|e| e.to_string())?;
        let moved: Vec<(usize, usize)> = match role {
            ProjectionRole::ProjectLower => vec![(a, b)],
            ProjectionRole::ProjectUpper => vec![(b, a)],
            ProjectionRole::Symmetric => vec![(a, b), (b, a)],
        };
        for (target, reference) in moved {
            let before = prev.get(target);
            let after = next.get(target);
            let r = prev.get(reference);
            if norm(r) < 1e-12 || norm(before) < 1e-12 {
                continue;
            }
            let d = dot(after, r).abs();
            if d > 1e-9 * norm(before) * norm(r) {
                return Err(format!("pair {k} ({a},{b}) not orthogonal: {d:e}"));
            }
            if norm(after) > norm(before) {
                return Err(format!("pair {k} ({a},{b}) grew the norm"));
            }
        }
        prev = next;
    }
    if pairs.is_empty() {
        let on = surgery(set, weights, true, role).map_err(|e| e.to_string())?;
        let plain = combine(set, weights).map_err(|e| e.to_string())?;
        if on
            .combined
            .iter()
            .zip(&plain)
            .any(|(x, y)| x.to_bits() != y.to_bits())
        {
            return Err("no-conflict surgery differs from plain summation".into());
        }
    }
    Ok(())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
