//! Projection onto the perceptual ball `d(., x) <= eps`.
//!
//! Two routines: bisection root finding along the segment back to the
//! original input (deterministic `n` iterations), and a generalized
//! Newton-Raphson iteration in input space that falls back to bisection when
//! it stalls or exceeds its iteration cap. Both return the input unchanged
//! when it is already inside the ball.

use super::config::ProjectionMethod;
use super::session::PerceptualSession;
use crate::error::Result;
use crate::lpips::{self, FeatureEmbedding};
use crate::nn::ClassifierModel;
use crate::passes::PassCounter;
use crate::tensor::{self, Tensor};

/// Gradient-norm threshold below which the Newton iteration counts as
/// stalled.
pub const NEWTON_STALL_EPS: f64 = 1e-12;

/// Iteration cap for the Newton projection before falling back to bisection.
pub const NEWTON_MAX_ITERATIONS: usize = 50;

/// Distance to a fixed reference point, with and without its gradient.
/// Implemented by [`LpipsBall`] for real extractors and by closed-form mock
/// distances in tests.
pub trait DistanceBall {
    /// `d(point, x)` for the ball's reference `x`.
    fn eval(&mut self, point: &Tensor) -> Result<f64>;
    /// Distance and its gradient with respect to `point`.
    fn eval_with_grad(&mut self, point: &Tensor) -> Result<(f64, Tensor)>;
}

/// LPIPS distance ball around a reference input, with its own counter.
/// Construction computes the reference embedding (one forward pass); `eval`
/// costs one forward pass, `eval_with_grad` one forward and one backward.
pub struct LpipsBall<'a> {
    extractor: &'a ClassifierModel,
    reference: FeatureEmbedding,
    pub counter: PassCounter,
}

impl<'a> LpipsBall<'a> {
    pub fn new(extractor: &'a ClassifierModel, x: &Tensor) -> Result<Self> {
        let mut counter = PassCounter::new();
        let reference = lpips::embed(extractor, x, &mut counter)?;
        Ok(LpipsBall {
            extractor,
            reference,
            counter,
        })
    }
}

impl DistanceBall for LpipsBall<'_> {
    fn eval(&mut self, point: &Tensor) -> Result<f64> {
        let acts = self.extractor.activations(point, &mut self.counter)?;
        let e = lpips::embed_from_activations(&acts)?;
        Ok(tensor::sub(&e.flat, &self.reference.flat)?.l2_norm())
    }

    fn eval_with_grad(&mut self, point: &Tensor) -> Result<(f64, Tensor)> {
        let mut tape = crate::autodiff::Tape::new();
        let xv = tape.leaf(point.clone());
        let (embed, _) =
            lpips::record_embedding(&mut tape, self.extractor, xv, &mut self.counter)?;
        let refv = tape.leaf(self.reference.flat.clone());
        let diff = tape.sub(embed, refv)?;
        let dist = tape.l2_norm(diff)?;
        let d = tape.value(dist).scalar_value()?;
        let grads = tape.backward(dist)?;
        self.counter.record_backward();
        Ok((d, grads.wrt_or_zeros(xv, point.shape())))
    }
}

/// Bisection projection along the segment from `x` to `x_tilde`
/// (`n` iterations on alpha in [0,1], returning the feasible lower end).
/// Returns `x_tilde` unchanged when already inside; pass `current_d` when the
/// caller already knows `d(x_tilde, x)` to skip that evaluation.
pub fn project_bisection(
    ball: &mut dyn DistanceBall,
    x_tilde: &Tensor,
    x: &Tensor,
    eps: f64,
    iterations: usize,
    current_d: Option<f64>,
) -> Result<Tensor> {
    let d0 = match current_d {
        Some(d) => d,
        None => ball.eval(x_tilde)?,
    };
    if d0 <= eps {
        return Ok(x_tilde.clone());
    }
    let delta = tensor::sub(x_tilde, x)?;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        let point = tensor::axpy(x, mid, &delta)?;
        if ball.eval(&point)? > eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // alpha = lo is feasible: either 0 (the original input) or a probed
    // midpoint whose distance was <= eps.
    tensor::axpy(x, lo, &delta)
}

/// Newton-Raphson projection on `r(p) = d(p, x) - eps` with overshoot `s`:
/// `p <- p - grad r * (r + s) / ||grad r||^2`. Returns the first iterate with
/// `r <= 0`; falls back to bisection (never violating the bound) when the
/// gradient stalls while outside or the iteration cap is exceeded.
pub fn project_newton(
    ball: &mut dyn DistanceBall,
    x_tilde: &Tensor,
    x: &Tensor,
    eps: f64,
    overshoot: f64,
    bisection_iterations: usize,
) -> Result<Tensor> {
    let mut current = x_tilde.clone();
    for _ in 0..NEWTON_MAX_ITERATIONS {
        let (d, grad) = ball.eval_with_grad(&current)?;
        if d <= eps {
            return Ok(current);
        }
        let gnorm_sq = grad.data().iter().map(|v| v * v).sum::<f64>();
        if gnorm_sq.sqrt() < NEWTON_STALL_EPS {
            return project_bisection(ball, x_tilde, x, eps, bisection_iterations, Some(d));
        }
        let scale = -(d - eps + overshoot) / gnorm_sq;
        current = tensor::axpy(&current, scale, &grad)?;
    }
    project_bisection(ball, x_tilde, x, eps, bisection_iterations, None)
}

/// Counted in-attack projection. With the bisection method this consumes a
/// fixed budget of `n + 1` gradient-mode distance evaluations (one
/// feasibility check plus `n` segment probes, each one forward and one
/// reverse traversal), independent of the data; the probe gradients are
/// computed and discarded. With the Newton method the cost depends on
/// convergence.
pub(crate) fn project_in_attack(
    session: &mut PerceptualSession<'_>,
    x_tilde: &Tensor,
    x: &Tensor,
    eps: f64,
    method: ProjectionMethod,
    iterations: usize,
    overshoot: f64,
) -> Result<Tensor> {
    match method {
        ProjectionMethod::Bisection => {
            let (d0, _) = session.recorded_distance(x_tilde)?;
            let delta = tensor::sub(x_tilde, x)?;
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..iterations {
                let mid = 0.5 * (lo + hi);
                let point = tensor::axpy(x, mid, &delta)?;
                let (d, _) = session.recorded_distance(&point)?;
                if d > eps {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            if d0 <= eps {
                return Ok(x_tilde.clone());
            }
            tensor::axpy(x, lo, &delta)
        }
        ProjectionMethod::Newton => {
            let mut ball = SessionBall { session };
            project_newton(&mut ball, x_tilde, x, eps, overshoot, iterations)
        }
    }
}

struct SessionBall<'a, 'b> {
    session: &'a mut PerceptualSession<'b>,
}

impl DistanceBall for SessionBall<'_, '_> {
    fn eval(&mut self, point: &Tensor) -> Result<f64> {
        self.session.probe_distance(point)
    }

    fn eval_with_grad(&mut self, point: &Tensor) -> Result<(f64, Tensor)> {
        self.session.recorded_distance(point)
    }
}
