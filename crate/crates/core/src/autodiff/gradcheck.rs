//! Finite-difference verification of analytic gradients. Used by the op unit
//! tests and by the end-to-end gradient acceptance suite. The probes evaluate
//! the forward function only, so they exercise a path independent of the
//! backward closures under test.

use std::collections::HashMap;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, VarId};

/// Central difference step used by the op-level unit tests.
pub const OP_TEST_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero gradients compare at
/// absolute scale instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Check every input coordinate of an op graph against central differences.
/// `build` maps input variables to a scalar root. Returns the worst relative
/// error over all coordinates of all inputs.
pub fn check_op<F>(build: F, inputs: &[ArrayD<f64>], h: f64) -> f64
where
    F: Fn(&mut Tape, &[VarId]) -> VarId,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::with_grad(false);
        let vars: Vec<VarId> = arrays.iter().map(|a| t.constant(a.clone())).collect();
        let root = build(&mut t, &vars);
        t.scalar(root)
    };

    let mut t = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|a| t.constant(a.clone())).collect();
    let root = build(&mut t, &vars);
    t.backward(root);

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = t
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let flat_len = input.len();
        for idx in 0..flat_len {
            let fd = central_diff(
                |v| {
                    let mut probe: Vec<ArrayD<f64>> = inputs.to_vec();
                    probe[k].as_slice_mut().unwrap()[idx] = v;
                    eval(&probe)
                },
                input.as_slice().unwrap()[idx],
                h,
            );
            let a = analytic.as_slice().unwrap()[idx];
            worst = worst.max(rel_err(a, fd));
        }
    }
    worst
}

/// One checked coordinate of a parameter tensor.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

/// Uniformly sample `n` trainable coordinates for spot checking.
pub fn sample_coords(store: &ParamStore, rng: &mut ChaCha8Rng, n: usize) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    assert!(!ids.is_empty(), "no trainable parameters to sample");
    (0..n)
        .map(|_| {
            let pid = ids[rng.gen_range(0..ids.len())];
            let idx = rng.gen_range(0..store.value(pid).len());
            (pid, idx)
        })
        .collect()
}

/// Compare analytic parameter gradients against central differences of
/// `eval` at the sampled coordinates. `eval` must be a pure function of the
/// store (no RNG draws, no stat updates) for the probes to be meaningful.
pub fn check_param_grads(
    store: &mut ParamStore,
    samples: &[(ParamId, usize)],
    h: f64,
    analytic: &HashMap<usize, ArrayD<f64>>,
    mut eval: impl FnMut(&ParamStore) -> f64,
) -> Vec<CoordCheck> {
    let mut out = Vec::with_capacity(samples.len());
    for &(pid, idx) in samples {
        let x0 = store.value(pid).as_slice().unwrap()[idx];
        store.value_mut(pid).as_slice_mut().unwrap()[idx] = x0 + h;
        let fp = eval(store);
        store.value_mut(pid).as_slice_mut().unwrap()[idx] = x0 - h;
        let fm = eval(store);
        store.value_mut(pid).as_slice_mut().unwrap()[idx] = x0;
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic
            .get(&pid.index())
            .map(|g| g.as_slice().unwrap()[idx])
            .unwrap_or(0.0);
        out.push(CoordCheck {
            param: store.name(pid).to_string(),
            index: idx,
            analytic: a,
            fd,
            rel_err: rel_err(a, fd),
        });
    }
    out
}
