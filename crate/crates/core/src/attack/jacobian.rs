//! Matrix-free Jacobian products of the embedding map and the CG-based
//! first-order step they enable.
//!
//! For the embedding Jacobian `J` at the iterate, `J v` is approximated by a
//! finite difference of two embeddings and `J^T (J v)` by one reverse
//! traversal of the recorded embedding graph. The first-order step solves
//! `J^T J delta = grad` with conjugate gradients and rescales the solution so
//! its embedding-space length is the requested step size.

use super::session::{PerceptualSession, StepEval};
use crate::error::Result;
use crate::nn::ClassifierModel;
use crate::numerics::conjugate_gradient;
use crate::passes::PassCounter;
use crate::tensor::{self, Tensor};

/// Step directions whose measured embedding displacement falls below this
/// are treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Access to the embedding map and its Jacobian at a fixed base point.
/// Implemented by the attack session (counted) and by dense linear maps in
/// test oracles.
pub trait EmbeddingJacobian {
    /// The base point the Jacobian is taken at.
    fn base_point(&self) -> &Tensor;
    /// Embedding of the base point.
    fn base_embedding(&self) -> &Tensor;
    /// Embedding of an arbitrary probe point.
    fn probe(&mut self, point: &Tensor) -> Result<Tensor>;
    /// Vector-Jacobian product `J^T c` at the base point.
    fn vjp(&mut self, cotangent: &Tensor) -> Result<Tensor>;
}

/// Approximate `J^T J v` at the base point: one probe (forward) for the
/// finite-difference `J v`, one reverse traversal for the transpose product.
pub fn multiply_jacobian(
    jac: &mut dyn EmbeddingJacobian,
    v: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let shifted = tensor::axpy(jac.base_point(), h, v)?;
    let probe = jac.probe(&shifted)?;
    let jv = tensor::scalar_mul(&tensor::sub(&probe, jac.base_embedding())?, 1.0 / h)?;
    jac.vjp(&jv)
}

/// One-shot `J^T J v` for an extractor at a point (builds a temporary
/// recorded embedding; two forward passes plus one backward on `counter`).
pub fn multiply_jacobian_at(
    extractor: &ClassifierModel,
    x_tilde: &Tensor,
    v: &Tensor,
    h: f64,
    counter: &mut PassCounter,
) -> Result<Tensor> {
    let mut session = PerceptualSession::new(extractor, None);
    let step = session.record_step(x_tilde)?;
    let mut jac = SessionJacobian {
        session: &mut session,
        step: &step,
        base: x_tilde,
    };
    let out = multiply_jacobian(&mut jac, v, h)?;
    counter.absorb(session.counter());
    Ok(out)
}

/// Outcome of the CG-based first-order step.
pub struct FirstOrderStep {
    /// The step to add to the iterate (zero when degenerate).
    pub delta: Tensor,
    /// Measured embedding-space length of the unscaled CG solution.
    pub measured_length: f64,
    /// True when the direction degenerated and a zero step was returned.
    pub degenerate: bool,
}

/// Solve `J^T J delta = grad` with `cg_iterations` CG steps, then rescale so
/// the (finite-difference measured) embedding displacement of the step is
/// `eta`. Consumes `cg_iterations + 1` Jacobian products plus one probe.
pub fn ppgd_first_order_step(
    jac: &mut dyn EmbeddingJacobian,
    grad_objective: &Tensor,
    eta: f64,
    cg_iterations: usize,
    h: f64,
) -> Result<FirstOrderStep> {
    let cg = conjugate_gradient(|v| multiply_jacobian(jac, v, h), grad_objective, cg_iterations)?;
    let delta = cg.solution;
    let shifted = tensor::axpy(jac.base_point(), h, &delta)?;
    let probe = jac.probe(&shifted)?;
    let m = tensor::sub(&probe, jac.base_embedding())?.l2_norm() / h;
    if m < DEGENERATE_EPS {
        return Ok(FirstOrderStep {
            delta: Tensor::zeros(delta.shape()),
            measured_length: m,
            degenerate: true,
        });
    }
    Ok(FirstOrderStep {
        delta: tensor::scalar_mul(&delta, eta / m)?,
        measured_length: m,
        degenerate: false,
    })
}

/// Counted adapter: Jacobian access through a recorded step evaluation.
pub(crate) struct SessionJacobian<'a, 'b> {
    pub session: &'a mut PerceptualSession<'b>,
    pub step: &'a StepEval,
    pub base: &'a Tensor,
}

impl EmbeddingJacobian for SessionJacobian<'_, '_> {
    fn base_point(&self) -> &Tensor {
        self.base
    }

    fn base_embedding(&self) -> &Tensor {
        self.step.embed_value()
    }

    fn probe(&mut self, point: &Tensor) -> Result<Tensor> {
        self.session.probe_embed(point)
    }

    fn vjp(&mut self, cotangent: &Tensor) -> Result<Tensor> {
        self.session.vjp(self.step, cotangent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, ModelSpec};
    use crate::testkit::{
        angle_between, dense_inverse, dense_matvec, dense_matvec_t, random_full_rank,
        random_tensor,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dense linear feature map phi(x) = A x with exact probe and vjp.
    pub struct LinearMap {
        pub a: Vec<Vec<f64>>,
        base: Tensor,
        base_embed: Tensor,
    }

    impl LinearMap {
        pub fn new(a: Vec<Vec<f64>>, base: Tensor) -> Self {
            let e = dense_matvec(&a, base.data());
            let base_embed = Tensor::new(vec![e.len()], e).unwrap();
            LinearMap {
                a,
                base,
                base_embed,
            }
        }
    }

    impl EmbeddingJacobian for LinearMap {
        fn base_point(&self) -> &Tensor {
            &self.base
        }
        fn base_embedding(&self) -> &Tensor {
            &self.base_embed
        }
        fn probe(&mut self, point: &Tensor) -> Result<Tensor> {
            let e = dense_matvec(&self.a, point.data());
            Tensor::new(vec![e.len()], e)
        }
        fn vjp(&mut self, cotangent: &Tensor) -> Result<Tensor> {
            let g = dense_matvec_t(&self.a, cotangent.data());
            Tensor::new(vec![g.len()], g)
        }
    }

    /// Identity feature map: J = I, so J^T J v = v and the first-order step
    /// reduces to the normalized gradient.
    struct IdentityMap {
        base: Tensor,
    }

    impl EmbeddingJacobian for IdentityMap {
        fn base_point(&self) -> &Tensor {
            &self.base
        }
        fn base_embedding(&self) -> &Tensor {
            &self.base
        }
        fn probe(&mut self, point: &Tensor) -> Result<Tensor> {
            Ok(point.clone())
        }
        fn vjp(&mut self, cotangent: &Tensor) -> Result<Tensor> {
            Ok(cotangent.clone())
        }
    }

    #[test]
    fn identity_map_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random_tensor(&mut rng, &[6], -1.0, 1.0);
        let v = random_tensor(&mut rng, &[6], -1.0, 1.0);
        let mut jac = IdentityMap { base };
        let out = multiply_jacobian(&mut jac, &v, 1e-6).unwrap();
        for (o, e) in out.data().iter().zip(v.data()) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_map_gives_ata_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 8;
        let a = random_full_rank(&mut rng, n);
        let base = random_tensor(&mut rng, &[n], -1.0, 1.0);
        let v = random_tensor(&mut rng, &[n], -1.0, 1.0);
        let mut jac = LinearMap::new(a.clone(), base);
        let out = multiply_jacobian(&mut jac, &v, 1e-6).unwrap();
        let expected = dense_matvec_t(&a, &dense_matvec(&a, v.data()));
        let num: f64 = out
            .data()
            .iter()
            .zip(&expected)
            .map(|(o, e)| (o - e) * (o - e))
            .sum::<f64>()
            .sqrt();
        let den: f64 = expected.iter().map(|e| e * e).sum::<f64>().sqrt();
        assert!(num / den < 1e-6, "relative error {}", num / den);
    }

    #[test]
    fn cnn_jacobian_product_error_scales_linearly_in_h() {
        // Compare against an explicit J^T J v built column-by-column with
        // central finite differences of the embedding.
        let spec = ModelSpec::tiny_cnn([1, 6, 6], 3);
        let model = init_model(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[1, 6, 6], 0.1, 0.9);
        let v = random_tensor(&mut rng, &[1, 6, 6], -1.0, 1.0);
        let dim = x.numel();
        let mut scratch = PassCounter::new();

        let embed_at = |p: &Tensor| {
            let mut c = PassCounter::new();
            crate::lpips::embed(&model, p, &mut c).unwrap().flat
        };
        // explicit Jacobian via central differences, column by column
        let h0 = 1e-6;
        let base_flat = x.flatten();
        let m = embed_at(&x).numel();
        let mut jac_cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
        for i in 0..dim {
            let mut plus = base_flat.data().to_vec();
            plus[i] += h0;
            let mut minus = base_flat.data().to_vec();
            minus[i] -= h0;
            let ep = embed_at(&Tensor::new(x.shape().to_vec(), plus).unwrap());
            let em = embed_at(&Tensor::new(x.shape().to_vec(), minus).unwrap());
            jac_cols.push(
                ep.data()
                    .iter()
                    .zip(em.data())
                    .map(|(a, b)| (a - b) / (2.0 * h0))
                    .collect(),
            );
        }
        let jv_exact: Vec<f64> = (0..m)
            .map(|r| (0..dim).map(|c| jac_cols[c][r] * v.data()[c]).sum())
            .collect();
        let jtjv_exact: Vec<f64> = (0..dim)
            .map(|c| (0..m).map(|r| jac_cols[c][r] * jv_exact[r]).sum())
            .collect();
        let exact_norm: f64 = jtjv_exact.iter().map(|e| e * e).sum::<f64>().sqrt();

        let mut errs = Vec::new();
        for h in [1e-2, 1e-3, 1e-4] {
            let out = multiply_jacobian_at(&model, &x, &v, h, &mut scratch).unwrap();
            let err: f64 = out
                .data()
                .iter()
                .zip(&jtjv_exact)
                .map(|(o, e)| (o - e) * (o - e))
                .sum::<f64>()
                .sqrt()
                / exact_norm;
            errs.push(err);
        }
        // decreasing h by 10x should decrease the error roughly 10x
        assert!(errs[1] < errs[0] * 0.5, "errors: {errs:?}");
        assert!(errs[2] < errs[1] * 0.5, "errors: {errs:?}");
        assert!(errs[2] < 1e-2, "errors: {errs:?}");
    }

    #[test]
    fn identity_step_is_normalized_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_tensor(&mut rng, &[7], -1.0, 1.0);
        let grad = random_tensor(&mut rng, &[7], -1.0, 1.0);
        let eta = 0.3;
        let mut jac = IdentityMap { base };
        let step = ppgd_first_order_step(&mut jac, &grad, eta, 5, 1e-6).unwrap();
        assert!(!step.degenerate);
        let expected = tensor::scalar_mul(&grad, eta / grad.l2_norm()).unwrap();
        for (s, e) in step.delta.data().iter().zip(expected.data()) {
            assert!((s - e).abs() < 1e-6, "{s} vs {e}");
        }
    }

    #[test]
    fn linear_step_matches_closed_form_at_full_rank() {
        // delta* = eta (A^T A)^{-1} g / ||A (A^T A)^{-1} g|| on full-rank
        // square maps with a linear loss (constant gradient g).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..10 {
            let n = 4 + (trial % 5);
            let a = random_full_rank(&mut rng, n);
            let base = random_tensor(&mut rng, &[n], -1.0, 1.0);
            let g = random_tensor(&mut rng, &[n], -1.0, 1.0);
            let eta = 0.25;

            // dense oracle
            let ata: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| (0..n).map(|k| a[k][i] * a[k][j]).sum())
                        .collect()
                })
                .collect();
            let ata_inv = dense_inverse(&ata).unwrap();
            let sol = dense_matvec(&ata_inv, g.data());
            let denom: f64 = dense_matvec(&a, &sol)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let expected: Vec<f64> = sol.iter().map(|v| eta * v / denom).collect();

            let mut jac = LinearMap::new(a, base);
            let step = ppgd_first_order_step(&mut jac, &g, eta, n, 1e-7).unwrap();
            assert!(!step.degenerate);

            let angle = angle_between(step.delta.data(), &expected);
            let len_ratio = step.delta.l2_norm()
                / expected.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(angle < 0.01, "angular deviation {angle}");
            assert!((len_ratio - 1.0).abs() < 0.01, "length ratio {len_ratio}");
        }
    }

    #[test]
    fn degenerate_direction_returns_zero_step() {
        let base = Tensor::zeros(&[4]);
        let grad = Tensor::zeros(&[4]);
        let mut jac = IdentityMap { base };
        let step = ppgd_first_order_step(&mut jac, &grad, 0.1, 3, 1e-6).unwrap();
        assert!(step.degenerate);
        assert_eq!(step.delta, Tensor::zeros(&[4]));
    }
}
