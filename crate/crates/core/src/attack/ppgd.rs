//! Perceptual projected gradient descent.
//!
//! Each step takes the first-order optimal step under the embedding metric
//! (conjugate gradients on `J^T J delta = grad`, rescaled to embedding length
//! eta) and then projects back onto the perceptual ball. The projection is
//! invoked every step; it returns the iterate unchanged when already inside.

use super::config::AttackConfig;
use super::jacobian::{ppgd_first_order_step, SessionJacobian};
use super::projection::project_in_attack;
use super::result::AttackResult;
use super::session::open_session;
use super::util::{clamp01, gaussian_perturb};
use crate::error::Result;
use crate::nn::ClassifierModel;
use crate::tensor;
use crate::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Run PPGD on one example. `extractor = None` selects self-bounded mode.
pub fn ppgd(
    classifier: &ClassifierModel,
    extractor: Option<&ClassifierModel>,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let mut session = open_session(classifier, extractor, cfg.bound_mode)?;
    // Reference embedding cached outside the per-step budget.
    session.prepare_reference(x, false)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x_tilde = gaussian_perturb(x, 0.01, &mut rng)?;
    if cfg.clamp_pixels {
        x_tilde = clamp01(&x_tilde);
    }
    let eta = cfg.effective_step_size();
    let mut degenerate_steps = 0;

    for _ in 0..cfg.steps {
        let mut step = session.record_step(&x_tilde)?;
        let (_, grad_objective) = session.objective_grad(&mut step, y, cfg.objective)?;
        let first_order = {
            let mut jac = SessionJacobian {
                session: &mut session,
                step: &step,
                base: &x_tilde,
            };
            ppgd_first_order_step(
                &mut jac,
                &grad_objective,
                eta,
                cfg.cg_iterations,
                cfg.jacobian_step,
            )?
        };
        if first_order.degenerate {
            degenerate_steps += 1;
        } else {
            x_tilde = tensor::add(&x_tilde, &first_order.delta)?;
            if cfg.clamp_pixels {
                x_tilde = clamp01(&x_tilde);
            }
        }
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
    Ok(AttackResult {
        adversarial: x_tilde,
        distance,
        success,
        margin,
        passes: session.counter(),
        degenerate_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::config::{BoundMode, ProjectionMethod};
    use crate::nn::{init_model, ClassifierModel, LayerParams, LayerSpec, ModelSpec};
    use crate::testkit::random_tensor;
    use rand::SeedableRng;

    fn tiny(seed: u64) -> ClassifierModel {
        init_model(&ModelSpec::tiny_cnn([1, 8, 8], 3), seed).unwrap()
    }

    #[test]
    fn zero_bound_returns_the_original_input() {
        let model = tiny(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(0.0);
        cfg.steps = 3;
        cfg.seed = 5;
        let out = ppgd(&model, None, &x, 0, &cfg).unwrap();
        assert_eq!(out.adversarial, x);
        assert_eq!(out.distance, 0.0);
    }

    #[test]
    fn constant_classifier_cannot_be_fooled() {
        // All logits frozen at the bias: no gradient signal anywhere.
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Identity,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 3 },
            ],
            feature_layers: vec![0],
            input_shape: [1, 4, 4],
            class_count: 3,
        };
        let params = vec![
            None,
            None,
            Some(LayerParams {
                weight: Tensor::zeros(&[3, 16]),
                bias: Tensor::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap(),
            }),
        ];
        let model = ClassifierModel::from_parts(spec, params).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[1, 4, 4], 0.0, 1.0);
        let cfg = AttackConfig::new(0.5);
        let out = ppgd(&model, None, &x, 0, &cfg).unwrap();
        assert!(!out.success);
        assert!(out.distance <= 0.5 * (1.0 + 1e-6));
        assert!(out.degenerate_steps > 0);
    }

    #[test]
    fn self_bounded_pass_counts_match_the_schedule() {
        // T=10, K=5, n=10 self-bounded: 10*(5+10+4) = 190 forward,
        // 10*(5+10+3) = 180 backward.
        let model = tiny(4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(0.4);
        cfg.steps = 10;
        cfg.cg_iterations = 5;
        cfg.bisection_steps = 10;
        cfg.seed = 7;
        let out = ppgd(&model, None, &x, 1, &cfg).unwrap();
        assert_eq!(out.degenerate_steps, 0);
        assert_eq!(out.passes.forward_count(), 190);
        assert_eq!(out.passes.backward_count(), 180);
    }

    #[test]
    fn external_pass_counts_match_the_schedule() {
        // T(K+n+5) forward, T(K+n+3) backward.
        let model = tiny(8);
        let ext = tiny(9);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(0.4);
        cfg.steps = 4;
        cfg.cg_iterations = 2;
        cfg.bisection_steps = 5;
        cfg.bound_mode = BoundMode::External;
        let out = ppgd(&model, Some(&ext), &x, 2, &cfg).unwrap();
        assert_eq!(out.degenerate_steps, 0);
        assert_eq!(out.passes.forward_count(), 4 * (2 + 5 + 5));
        assert_eq!(out.passes.backward_count(), 4 * (2 + 5 + 3));
    }

    #[test]
    fn feasibility_holds_across_seeds_and_projections() {
        let model = tiny(12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for seed in 0..4 {
            for projection in [ProjectionMethod::Bisection, ProjectionMethod::Newton] {
                let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
                let mut cfg = AttackConfig::new(0.25);
                cfg.steps = 4;
                cfg.seed = seed;
                cfg.projection = projection;
                let out = ppgd(&model, None, &x, (seed % 3) as usize, &cfg).unwrap();
                assert!(
                    out.distance <= 0.25 * (1.0 + 1e-6),
                    "d = {} with {:?}",
                    out.distance,
                    projection
                );
            }
        }
    }

    #[test]
    fn measured_embedding_step_length_is_near_eta() {
        // One step, no projection interference (large bound): the embedding
        // displacement of the step should be eta within 10%.
        let model = tiny(20);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        for trial in 0..12 {
            let x = random_tensor(&mut rng, &[1, 8, 8], 0.05, 0.95);
            let mut cfg = AttackConfig::new(10.0);
            cfg.steps = 1;
            cfg.step_size = Some(0.05);
            cfg.seed = trial;
            let noise_rng = &mut rand_chacha::ChaCha8Rng::seed_from_u64(trial);
            let start = super::super::util::gaussian_perturb(&x, 0.01, noise_rng).unwrap();
            let out = ppgd(&model, None, &x, 0, &cfg).unwrap();
            if out.degenerate_steps > 0 {
                continue;
            }
            let moved = crate::lpips::lpips_distance(&model, &start, &out.adversarial).unwrap();
            if moved < 1e-9 {
                continue;
            }
            assert!(
                (moved - 0.05).abs() / 0.05 < 0.10,
                "trial {trial}: step length {moved} vs eta 0.05"
            );
            checked += 1;
        }
        assert!(checked >= 8, "only {checked} non-degenerate trials");
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let model = tiny(30);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let x = random_tensor(&mut rng, &[1, 8, 8], 0.0, 1.0);
        let mut cfg = AttackConfig::new(0.3);
        cfg.steps = 2;
        cfg.seed = 99;
        let a = ppgd(&model, None, &x, 1, &cfg).unwrap();
        let b = ppgd(&model, None, &x, 1, &cfg).unwrap();
        assert_eq!(a.adversarial, b.adversarial);
        assert_eq!(a.distance, b.distance);
    }
}
