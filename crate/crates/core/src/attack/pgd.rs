//! L2 and Linf projected gradient descent baselines.
//!
//! Deterministic start at the input, `steps` iterations of gradient ascent
//! (normalized gradient for L2, sign for Linf), each followed by projection
//! onto the L_p ball and the optional pixel-range clamp. One forward and one
//! backward pass per step.

use super::config::Objective;
use super::result::AttackResult;
use super::util::{clamp01, sign};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{self, ClassifierModel};
use crate::passes::PassCounter;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy)]
enum PgdNorm {
    L2,
    Linf,
}

fn pgd(
    model: &ClassifierModel,
    x: &Tensor,
    y: usize,
    bound: f64,
    steps: usize,
    step_size: f64,
    norm: PgdNorm,
    objective: Objective,
    clamp_pixels: bool,
) -> Result<AttackResult> {
    if bound < 0.0 || !bound.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "PGD bound must be non-negative, got {bound}"
        )));
    }
    if steps == 0 || step_size <= 0.0 {
        return Err(Error::InvalidConfig(
            "PGD needs steps >= 1 and a positive step size".into(),
        ));
    }
    let mut counter = PassCounter::new();
    let mut x_tilde = x.clone();
    let mut degenerate_steps = 0;

    for _ in 0..steps {
        let mut tape = Tape::new();
        let xv = tape.leaf(x_tilde.clone());
        let rec = model.record_forward(&mut tape, xv, &mut counter)?;
        let loss = match objective {
            Objective::Margin => nn::margin_loss_node(&mut tape, rec.logits, y)?,
            Objective::CrossEntropy => nn::cross_entropy_node(&mut tape, rec.logits, y)?,
        };
        let grads = tape.backward(loss)?;
        counter.record_backward();
        let g = grads.wrt_or_zeros(xv, x.shape());

        let update = match norm {
            PgdNorm::L2 => {
                let n = g.l2_norm();
                if n <= 1e-12 {
                    degenerate_steps += 1;
                    Tensor::zeros(x.shape())
                } else {
                    tensor::scalar_mul(&g, step_size / n)?
                }
            }
            PgdNorm::Linf => tensor::scalar_mul(&sign(&g), step_size)?,
        };
        x_tilde = tensor::add(&x_tilde, &update)?;

        // project onto the L_p ball around x
        let delta = tensor::sub(&x_tilde, x)?;
        let projected = match norm {
            PgdNorm::L2 => {
                let n = delta.l2_norm();
                if n > bound {
                    tensor::scalar_mul(&delta, bound / n)?
                } else {
                    delta
                }
            }
            PgdNorm::Linf => {
                let data = delta
                    .data()
                    .iter()
                    .map(|v| v.clamp(-bound, bound))
                    .collect();
                Tensor::new(delta.shape().to_vec(), data)?
            }
        };
        x_tilde = tensor::add(x, &projected)?;
        if clamp_pixels {
            x_tilde = clamp01(&x_tilde);
        }
    }

    let mut scratch = PassCounter::new();
    let logits = model.logits(&x_tilde, &mut scratch)?;
    let margin = nn::margin_loss(&logits, y)?;
    let delta = tensor::sub(&x_tilde, x)?;
    let distance = match norm {
        PgdNorm::L2 => delta.l2_norm(),
        PgdNorm::Linf => delta.linf_norm(),
    };
    Ok(AttackResult {
        adversarial: x_tilde,
        distance,
        success: margin > 0.0,
        margin,
        passes: counter,
        degenerate_steps,
    })
}

/// L2-ball PGD with normalized-gradient steps.
#[allow(clippy::too_many_arguments)]
pub fn pgd_l2(
    model: &ClassifierModel,
    x: &Tensor,
    y: usize,
    bound: f64,
    steps: usize,
    step_size: f64,
    objective: Objective,
    clamp_pixels: bool,
) -> Result<AttackResult> {
    pgd(
        model,
        x,
        y,
        bound,
        steps,
        step_size,
        PgdNorm::L2,
        objective,
        clamp_pixels,
    )
}

/// Linf-ball PGD with sign steps.
#[allow(clippy::too_many_arguments)]
pub fn pgd_linf(
    model: &ClassifierModel,
    x: &Tensor,
    y: usize,
    bound: f64,
    steps: usize,
    step_size: f64,
    objective: Objective,
    clamp_pixels: bool,
) -> Result<AttackResult> {
    pgd(
        model,
        x,
        y,
        bound,
        steps,
        step_size,
        PgdNorm::Linf,
        objective,
        clamp_pixels,
    )
}
