//! Penalty-based perceptual attacks: LPA and Fast-LPA.
//!
//! Both maximize `L(f(x),y) - lambda * max(0, d(x, x0) - eps)` by normalized
//! gradient ascent with step sizes decaying from eps to eps/10, scaling each
//! step by a finite-difference estimate of the distance's directional
//! derivative. LPA searches lambda over `S` geometric rounds (x10 whenever a
//! round ends outside the bound) and projects at the end; Fast-LPA runs one
//! sweep with lambda growing `10^(t/T)` and skips the projection, so its
//! output may land outside the bound.

use super::config::{AttackConfig, LAMBDA_INIT};
use super::jacobian::DEGENERATE_EPS;
use super::projection::project_in_attack;
use super::result::AttackResult;
use super::session::open_session;
use super::util::{clamp01, gaussian_perturb};
use crate::error::Result;
use crate::nn::ClassifierModel;
use crate::tensor::{self, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lambda value used at every gradient step, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTrace {
    pub per_step: Vec<f64>,
}

struct Schedule {
    rounds: usize,
    escalate: bool,
    exponential: bool,
    project_at_end: bool,
}

fn run(
    classifier: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    schedule: Schedule,
) -> Result<(AttackResult, LambdaTrace)> {
    cfg.validate()?;
    let mut session = open_session(classifier, extractor, cfg.bound_mode)?;
    // Counted reference embedding: the +1 forward / +1 backward constants.
    session.prepare_reference(x, true)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x_tilde = gaussian_perturb(x, 0.01, &mut rng)?;
    if cfg.clamp_pixels {
        x_tilde = clamp01(&x_tilde);
    }

    let steps = cfg.steps;
    let mut lambda = LAMBDA_INIT;
    let mut trace = Vec::with_capacity(schedule.rounds * steps);
    let mut degenerate_steps = 0;

    for round in 0..schedule.rounds {
        for t in 1..=steps {
            let mut step = session.record_step(&x_tilde)?;
            let d_now =
                tensor::sub(step.embed_value(), &session.reference().flat)?.l2_norm();
            // The between-rounds escalation check reuses the distance from
            // this step's evaluation instead of a separate probe.
            if schedule.escalate && round > 0 && t == 1 && d_now > cfg.bound {
                lambda *= 10.0;
            }
            if schedule.exponential {
                lambda = 10f64.powf(t as f64 / steps as f64);
            }
            trace.push(lambda);

            let (_, _, direction) =
                session.lagrangian_grad(&mut step, y, lambda, cfg.bound, cfg.objective)?;
            let dir_norm = direction.l2_norm();
            let unit = if dir_norm > DEGENERATE_EPS {
                tensor::scalar_mul(&direction, 1.0 / dir_norm)?
            } else {
                Tensor::zeros(direction.shape())
            };

            // m ~ directional derivative of d(x_tilde, .) along the unit
            // direction, measured with one probe at x_tilde + h * unit.
            let probe_point = tensor::axpy(&x_tilde, cfg.direction_step, &unit)?;
            let probe = session.probe_embed(&probe_point)?;
            let m = tensor::sub(&probe, step.embed_value())?.l2_norm() / cfg.direction_step;

            let eta = cfg.bound * 0.1f64.powf(t as f64 / steps as f64);
            if dir_norm > DEGENERATE_EPS && m > DEGENERATE_EPS {
                x_tilde = tensor::axpy(&x_tilde, eta / m, &unit)?;
                if cfg.clamp_pixels {
                    x_tilde = clamp01(&x_tilde);
                }
            } else {
                degenerate_steps += 1;
            }
        }
    }

    if schedule.project_at_end {
        x_tilde = project_in_attack(
            &mut session,
            &x_tilde,
            x,
            cfg.bound,
            cfg.projection,
            cfg.bisection_steps,
            cfg.overshoot,
        )?;
    }

    let (margin, success, distance) = session.finalize(&x_tilde, y)?;
    Ok((
        AttackResult {
            adversarial: x_tilde,
            distance,
            success,
            margin,
            passes: session.counter(),
            degenerate_steps,
        },
        LambdaTrace { per_step: trace },
    ))
}

/// Lagrangian perceptual attack: `S` lambda-search rounds of `T` steps each,
/// then a final projection onto the bound.
pub fn lpa(
    classifier: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    Ok(lpa_with_trace(classifier, extractor, x, y, cfg)?.0)
}

/// [`lpa`] returning the lambda schedule actually used (for diagnostics).
pub fn lpa_with_trace(
    classifier: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<(AttackResult, LambdaTrace)> {
    run(
        classifier,
        extractor,
        x,
        y,
        cfg,
        Schedule {
            rounds: cfg.lambda_rounds,
            escalate: true,
            exponential: false,
            project_at_end: true,
        },
    )
}

/// Fast-LPA: a single sweep with exponentially growing lambda and no final
/// projection. The result may lie outside the bound; the distance is
/// recorded, never clipped.
pub fn fast_lpa(
    classifier: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    Ok(fast_lpa_with_trace(classifier, extractor, x, y, cfg)?.0)
}

pub(crate) fn fast_lpa_with_trace(
    classifier: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<(AttackResult, LambdaTrace)> {
    run(
        classifier,
        extractor,
        x,
        y,
        cfg,
        Schedule {
            rounds: 1,
            escalate: false,
            exponential: true,
            project_at_end: false,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::config::BoundMode;
    use crate::nn::{init_model, ModelSpec};
    use crate::testkit::random_tensor;
    use rand::SeedableRng;

    fn tiny(seed: u64) -> crate::nn::ClassifierModel {
        init_model(&ModelSpec::tiny_cnn([1, 8, 8], 3), seed).unwrap()
    }

    #[test]
    fn lpa_self_bounded_pass_counts() {
        // T=10, S=5, n=10: 2*5*10+10+2 = 112 forward, 5*10+10+2 = 62 backward.
        let model = tiny(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let cfg = AttackConfig::new(0.4);
        let out = lpa(&model, None, &x, 0, &cfg).unwrap();
        assert_eq!(out.passes.forward_count(), 112);
        assert_eq!(out.passes.backward_count(), 62);
    }

    #[test]
    fn lpa_external_pass_counts() {
        // 3ST+n+2 forward, 2ST+n+2 backward.
        let model = tiny(3);
        let ext = tiny(4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(0.4);
        cfg.steps = 3;
        cfg.lambda_rounds = 2;
        cfg.bisection_steps = 4;
        cfg.bound_mode = BoundMode::External;
        let out = lpa(&model, Some(&ext), &x, 1, &cfg).unwrap();
        assert_eq!(out.passes.forward_count(), 3 * 2 * 3 + 4 + 2);
        assert_eq!(out.passes.backward_count(), 2 * 2 * 3 + 4 + 2);
    }

    #[test]
    fn lpa_zero_bound_projects_to_the_input() {
        let model = tiny(6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let cfg = AttackConfig::new(0.0);
        let out = lpa(&model, None, &x, 0, &cfg).unwrap();
        assert_eq!(out.adversarial, x);
    }

    #[test]
    fn lambda_escalates_through_the_full_sweep_when_always_outside() {
        // bound 0 can never be satisfied, so every round escalates:
        // 0.01, 0.1, 1, 10, 100.
        let model = tiny(8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(0.0);
        cfg.steps = 3;
        let (_, trace) = lpa_with_trace(&model, None, &x, 0, &cfg).unwrap();
        let per_round: Vec<f64> = (0..5).map(|r| trace.per_step[r * 3]).collect();
        assert_eq!(per_round, vec![0.01, 0.1, 1.0, 10.0, 100.0]);
        // constant within each round
        for r in 0..5 {
            for t in 0..3 {
                assert_eq!(trace.per_step[r * 3 + t], per_round[r]);
            }
        }
    }

    #[test]
    fn lambda_stays_put_when_never_outside() {
        let model = tiny(10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(10.0); // larger than 2*sqrt(L)
        cfg.steps = 2;
        let (_, trace) = lpa_with_trace(&model, None, &x, 0, &cfg).unwrap();
        assert!(trace.per_step.iter().all(|&l| l == 0.01));
    }

    #[test]
    fn fast_lpa_pass_counts_both_modes() {
        let model = tiny(12);
        let ext = tiny(13);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(0.4);
        cfg.steps = 10;
        let out = fast_lpa(&model, None, &x, 0, &cfg).unwrap();
        assert_eq!(out.passes.forward_count(), 21);
        assert_eq!(out.passes.backward_count(), 11);

        cfg.bound_mode = BoundMode::External;
        let out = fast_lpa(&model, Some(&ext), &x, 0, &cfg).unwrap();
        assert_eq!(out.passes.forward_count(), 31);
        assert_eq!(out.passes.backward_count(), 21);
    }

    #[test]
    fn fast_lpa_lambda_schedule_endpoints() {
        let model = tiny(15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(0.4);
        cfg.steps = 10;
        let (_, trace) =
            fast_lpa_with_trace(&model, None, &x, 0, &cfg).unwrap();
        assert_eq!(trace.per_step.len(), 10);
        assert!((trace.per_step[0] - 10f64.powf(0.1)).abs() < 1e-12);
        assert!((trace.per_step[9] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn fast_lpa_can_exceed_the_bound_and_records_it() {
        // With a tiny bound the unprojected sweep ends outside.
        let model = tiny(17);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);
        let mut exceeded = false;
        for seed in 0..10 {
            let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
            let mut cfg = AttackConfig::new(1e-4);
            cfg.seed = seed;
            let out = fast_lpa(&model, None, &x, 0, &cfg).unwrap();
            if out.distance > cfg.bound {
                exceeded = true;
            }
        }
        assert!(exceeded, "no unprojected result exceeded the bound");
    }

    #[test]
    fn lpa_feasibility_and_reproducibility() {
        let model = tiny(19);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        for seed in 0..5 {
            let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
            let mut cfg = AttackConfig::new(0.3);
            cfg.steps = 5;
            cfg.lambda_rounds = 2;
            cfg.seed = seed;
            let a = lpa(&model, None, &x, (seed % 3) as usize, &cfg).unwrap();
            let b = lpa(&model, None, &x, (seed % 3) as usize, &cfg).unwrap();
            assert!(a.distance <= 0.3 * (1.0 + 1e-6));
            assert_eq!(a.adversarial, b.adversarial);
        }
    }
}
