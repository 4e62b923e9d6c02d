//! Perceptual attacks (PPGD, LPA, Fast-LPA), perceptual projections, and
//! L2/Linf PGD baselines, with exact forward/backward pass accounting.
//!
//! # Pass accounting
//!
//! Every attack owns a [`PassCounter`](crate::passes::PassCounter). Network
//! evaluations increment the forward count (one per full evaluation; a
//! self-bounded joint evaluation of logits and embedding is a single pass),
//! and every reverse traversal over a recorded graph increments the backward
//! count. Probe evaluations (finite-difference shifts) run without a graph
//! and cost one forward pass only, with one exception: distance evaluations
//! inside the bound projection run in gradient mode (forward plus reverse
//! traversal) so the projection can use Newton steps; the bisection
//! projection discards those gradients but still performs the traversals.
//!
//! With the default bisection projection the measured counts are exact,
//! data-independent functions of the configuration:
//!
//! | attack   | mode     | forward        | backward       |
//! |----------|----------|----------------|----------------|
//! | PPGD     | self     | T(K+n+4)       | T(K+n+3)       |
//! | PPGD     | external | T(K+n+5)       | T(K+n+3)       |
//! | LPA      | self     | 2ST+n+2        | ST+n+2         |
//! | LPA      | external | 3ST+n+2        | 2ST+n+2        |
//! | Fast-LPA | self     | 2T+1           | T+1            |
//! | Fast-LPA | external | 3T+1           | 2T+1           |
//! | PGD      | either   | T              | T              |
//!
//! The reference embedding of the original input is computed once per attack
//! and cached. LPA and Fast-LPA count it (the `+1`/`+2` constants); PPGD's
//! per-step totals do not include it, so its cache fill runs on a scratch
//! counter. The final success/distance measurement of every attack is
//! bookkeeping outside the optimization budget and is likewise uncounted.
//! Degenerate inputs (vanishing gradients, conjugate-gradient breakdown) and
//! the Newton projection short-circuit, consuming fewer passes than the
//! table; the table assumes the generic case.

mod config;
mod jacobian;
mod lagrangian;
mod pgd;
mod ppgd;
mod projection;
mod result;
mod session;
mod util;

pub use config::{AttackConfig, BoundMode, Objective, ProjectionMethod, LAMBDA_INIT};
pub use jacobian::{
    multiply_jacobian, multiply_jacobian_at, ppgd_first_order_step, EmbeddingJacobian,
    FirstOrderStep,
};
pub use lagrangian::{fast_lpa, lpa, lpa_with_trace, LambdaTrace};
pub use pgd::{pgd_l2, pgd_linf};
pub use ppgd::ppgd;
pub use projection::{project_bisection, project_newton, DistanceBall, LpipsBall};
pub use result::AttackResult;
pub use session::PerceptualSession;
