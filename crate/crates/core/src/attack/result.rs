//! Attack outcomes.

use crate::passes::PassCounter;
use crate::tensor::Tensor;

/// Result of one attack invocation.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// The adversarial example.
    pub adversarial: Tensor,
    /// Final distance from the original input: LPIPS for perceptual attacks,
    /// the respective L_p perturbation norm for the PGD baselines.
    pub distance: f64,
    /// True iff the final margin is strictly positive (ties count as
    /// correctly classified).
    pub success: bool,
    /// Final margin loss at the adversarial example.
    pub margin: f64,
    /// Forward/backward passes consumed by the optimization loop.
    pub passes: PassCounter,
    /// Steps skipped because the search direction degenerated.
    pub degenerate_steps: usize,
}
