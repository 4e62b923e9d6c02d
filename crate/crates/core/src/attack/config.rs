//! Attack hyperparameters.

use crate::error::{Error, Result};

/// Initial Lagrangian penalty weight for the LPA search.
pub const LAMBDA_INIT: f64 = 0.01;

/// Which network defines the perceptual distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMode {
    /// The attacked classifier itself.
    SelfBounded,
    /// A separate fixed network, supplied alongside the classifier.
    External,
}

/// Projection routine used to enforce the perceptual bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMethod {
    /// Root finding along the segment to the original input. Deterministic
    /// iteration count; the default.
    Bisection,
    /// Generalized Newton-Raphson in input space with bisection fallback.
    Newton,
}

/// Loss maximized by the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Margin loss: positive iff misclassified. Used for evaluation.
    Margin,
    /// Cross-entropy. Used as the inner objective during training.
    CrossEntropy,
}

/// Hyperparameters shared by the perceptual attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Perceptual bound epsilon (LPIPS units).
    pub bound: f64,
    /// Gradient steps T.
    pub steps: usize,
    /// Conjugate-gradient iterations K (PPGD).
    pub cg_iterations: usize,
    /// Lambda search rounds S (LPA).
    pub lambda_rounds: usize,
    /// Finite-difference step h for Jacobian products (PPGD).
    pub jacobian_step: f64,
    /// Finite-difference step h for directional derivatives (LPA family).
    pub direction_step: f64,
    /// Newton projection overshoot s.
    pub overshoot: f64,
    /// Bisection iterations n.
    pub bisection_steps: usize,
    /// PPGD step size eta; `None` selects bound/4.
    pub step_size: Option<f64>,
    pub bound_mode: BoundMode,
    pub projection: ProjectionMethod,
    /// Clamp iterates to the [0,1] pixel range after each update.
    pub clamp_pixels: bool,
    pub objective: Objective,
    /// Seed for the initialization noise.
    pub seed: u64,
}

impl AttackConfig {
    /// Defaults: T=10 steps, K=5 CG iterations, S=5 lambda rounds,
    /// h_jac=1e-3, h_dir=0.1, s=1e-2, n=10 bisection iterations.
    pub fn new(bound: f64) -> AttackConfig {
        AttackConfig {
            bound,
            steps: 10,
            cg_iterations: 5,
            lambda_rounds: 5,
            jacobian_step: 1e-3,
            direction_step: 0.1,
            overshoot: 1e-2,
            bisection_steps: 10,
            step_size: None,
            bound_mode: BoundMode::SelfBounded,
            projection: ProjectionMethod::Bisection,
            clamp_pixels: false,
            objective: Objective::Margin,
            seed: 0,
        }
    }

    /// Effective PPGD step size.
    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.bound / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bound < 0.0 || !self.bound.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "bound must be non-negative, got {}",
                self.bound
            )));
        }
        if self.steps == 0 || self.cg_iterations == 0 || self.lambda_rounds == 0
            || self.bisection_steps == 0
        {
            return Err(Error::InvalidConfig(
                "steps, cg_iterations, lambda_rounds, and bisection_steps must all be >= 1".into(),
            ));
        }
        for (name, v) in [
            ("jacobian_step", self.jacobian_step),
            ("direction_step", self.direction_step),
            ("overshoot", self.overshoot),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if let Some(eta) = self.step_size {
            if eta <= 0.0 || !eta.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "step_size must be positive, got {eta}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = AttackConfig::new(0.5);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.cg_iterations, 5);
        assert_eq!(cfg.lambda_rounds, 5);
        assert_eq!(cfg.jacobian_step, 1e-3);
        assert_eq!(cfg.direction_step, 0.1);
        assert_eq!(cfg.overshoot, 1e-2);
        assert_eq!(cfg.bisection_steps, 10);
        assert_eq!(cfg.effective_step_size(), 0.125);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = AttackConfig::new(-1.0);
        assert!(cfg.validate().is_err());
        cfg.bound = 0.5;
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        cfg.steps = 1;
        cfg.direction_step = 0.0;
        assert!(cfg.validate().is_err());
    }
}
