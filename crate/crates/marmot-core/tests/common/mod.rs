//! Shared helpers for the integration suites: a central finite-difference
//! gradient check that works on any loss built from live parameter tensors.

use marmot_core::{SeedRng, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with an absolute floor, so tiny gradients compare on an
/// absolute scale and large ones on a relative scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check autodiff gradients of `loss` against central differences.
///
/// `leaves` are the parameter tensors the loss reads; `loss` must rebuild its
/// graph from their current values on every call. Gradients come from one
/// backward pass, then every checked coordinate is perturbed in place by
/// `FD_STEP` both ways. With `sample`, at most that many coordinates per leaf
/// are drawn (without replacement) instead of checking all of them. Leaf
/// values are restored on exit.
pub fn assert_grads_match_fd(
    label: &str,
    leaves: &[(&str, &Tensor)],
    loss: &dyn Fn() -> Tensor,
    sample: Option<(&mut SeedRng, usize)>,
) {
    for (_, t) in leaves {
        t.zero_grad();
    }
    let l = loss();
    l.backward()
        .unwrap_or_else(|e| panic!("{label}: backward failed: {e}"));
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|(name, t)| {
            t.grad()
                .unwrap_or_else(|| panic!("{label}: {name} received no gradient"))
        })
        .collect();

    let mut picked: Vec<Vec<usize>> = Vec::with_capacity(leaves.len());
    match sample {
        None => {
            for (_, t) in leaves {
                picked.push((0..t.len()).collect());
            }
        }
        Some((rng, per_leaf)) => {
            for (_, t) in leaves {
                let n = t.len();
                if n <= per_leaf {
                    picked.push((0..n).collect());
                } else {
                    let mut all: Vec<usize> = (0..n).collect();
                    rng.shuffle(&mut all);
                    all.truncate(per_leaf);
                    picked.push(all);
                }
            }
        }
    }

    for ((name, t), (grad, coords)) in leaves.iter().zip(grads.iter().zip(&picked)) {
        let original = t.to_vec();
        for &i in coords {
            let probe = |delta: f64| {
                t.update_values(|w| w[i] = original[i] + delta);
                let v = loss().value();
                t.update_values(|w| w.copy_from_slice(&original));
                v
            };
            let fd = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
            let err = rel_err(fd, grad[i]);
            assert!(
                err < FD_TOL,
                "{label}: {name}[{i}] analytic {} vs finite difference {fd} \
                 (relative error {err:.3e} exceeds {FD_TOL:.0e})",
                grad[i]
            );
        }
    }
}

/// Gaussian draws nudged away from zero, keeping finite differences clear of
/// the ReLU kink.
pub fn kink_safe_values(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gaussian(0.0, 1.0);
            if v.abs() < 0.05 {
                v + 0.1 * v.signum() + if v == 0.0 { 0.1 } else { 0.0 }
            } else {
                v
            }
        })
        .collect()
}
