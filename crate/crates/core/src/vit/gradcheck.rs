//! Central finite-difference validation of the analytic gradients.
//!
//! Runs in `f64`; single precision loses too many digits for a 1e-3 check.
//! Checking every coordinate of the desk model is needlessly slow, so the
//! checker samples coordinates: a budget of input pixels plus a budget of
//! parameter coordinates (default 1% of the parameter count), drawn from a
//! seeded stream. Unit tests run the checker exhaustively on a reduced
//! geometry where full coverage is cheap.

use super::{cross_entropy, forward, VitParams};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// How many coordinates to probe and from which stream.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckBudget {
    /// Input pixels to probe; `usize::MAX` for all.
    pub input_coords: usize,
    /// Parameter coordinates to probe; `None` means 1% of the parameter
    /// count, `Some(usize::MAX)` all, `Some(0)` skips the parameter side.
    pub param_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckBudget {
    pub fn exhaustive() -> Self {
        GradCheckBudget { input_coords: usize::MAX, param_coords: Some(usize::MAX), seed: 1 }
    }

    pub fn inputs_only(input_coords: usize) -> Self {
        GradCheckBudget { input_coords, param_coords: Some(0), seed: 1 }
    }
}

impl Default for GradCheckBudget {
    fn default() -> Self {
        GradCheckBudget { input_coords: 96, param_coords: None, seed: 0x6f61 }
    }
}

fn rel_err(fd: f64, an: f64) -> f64 {
    let denom = (fd.abs() + an.abs()).max(1e-8);
    let num = (fd - an).abs();
    if num == 0.0 {
        0.0
    } else {
        num / denom
    }
}

fn sample(count: usize, want: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    if want >= count {
        return (0..count).collect();
    }
    let mut all: Vec<usize> = (0..count).collect();
    all.shuffle(rng);
    all.truncate(want);
    all
}

/// Maximum relative error between analytic and central-difference gradients
/// of the mean loss for `(x, y)`, over the sampled coordinates.
pub fn grad_check(
    params: &VitParams<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    step: f64,
    budget: GradCheckBudget,
) -> Result<f64> {
    let loss_of = |p: &VitParams<f64>, xt: &Tensor<f64>| -> Result<f64> {
        let (logits, _) = forward(p, xt)?;
        cross_entropy(&logits, y)
    };

    let (_, cache) = forward(params, x)?;
    let (grads, input_grad) = super::backward(params, x, y, &cache)?;
    let mut worst = 0.0f64;
    let mut stream = rng::stream(budget.seed);

    // Input coordinates.
    let mut xm = x.clone();
    for c in sample(x.len(), budget.input_coords, &mut stream) {
        let orig = xm.data()[c];
        xm.data_mut()[c] = orig + step;
        let lp = loss_of(params, &xm)?;
        xm.data_mut()[c] = orig - step;
        let lm = loss_of(params, &xm)?;
        xm.data_mut()[c] = orig;
        worst = worst.max(rel_err((lp - lm) / (2.0 * step), input_grad.data()[c]));
    }

    // Parameter coordinates, indexed over the flat visit order.
    let total = params.num_params();
    let want = match budget.param_coords {
        None => (total / 100).max(1),
        Some(w) => w,
    };
    let mut analytic = Vec::with_capacity(total);
    grads.visit(&mut |_, s| analytic.extend_from_slice(s));
    let mut pm = params.clone();
    for c in sample(total, want, &mut stream) {
        let bump = |p: &mut VitParams<f64>, delta: f64| {
            let mut i = 0;
            p.visit_mut(&mut |_, s| {
                if c >= i && c < i + s.len() {
                    s[c - i] += delta;
                }
                i += s.len();
            });
        };
        bump(&mut pm, step);
        let lp = loss_of(&pm, x)?;
        bump(&mut pm, -2.0 * step);
        let lm = loss_of(&pm, x)?;
        bump(&mut pm, step);
        worst = worst.max(rel_err((lp - lm) / (2.0 * step), analytic[c]));
    }

    Ok(worst)
}
