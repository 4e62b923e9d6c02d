//! Shared numerical routines: finite differences and conjugate gradients.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Rayleigh-quotient threshold below which CG treats the system as rank
/// deficient: breakdown when `p^T A p <= eps * p^T p`.
pub const CG_BREAKDOWN_EPS: f64 = 1e-12;

/// Central-difference gradient estimate of a scalar function.
///
/// Independent oracle for reverse-mode gradients; O(step^2) truncation error.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite difference step must be positive, got {step}"
        )));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Outcome of a conjugate-gradient run.
pub struct CgOutcome {
    pub solution: Tensor,
    /// ||r_k|| after each completed iteration (index 0 is the initial residual).
    pub residual_norms: Vec<f64>,
    /// True when the curvature p^T A p fell below [`CG_BREAKDOWN_EPS`] and the
    /// current iterate was returned early (rank deficiency, not failure).
    pub breakdown: bool,
    /// Number of matvec invocations performed.
    pub matvec_calls: usize,
}

/// Conjugate gradients on `A x = b` for a symmetric PSD operator given only
/// matrix-vector products. Runs exactly `iterations` steps unless the
/// curvature denominator breaks down. The initial iterate is zero, and the
/// initial residual is formed as `b - A*0` with an explicit matvec so the
/// operator is applied `iterations + 1` times on a full run.
pub fn conjugate_gradient<F>(mut matvec: F, b: &Tensor, iterations: usize) -> Result<CgOutcome>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if iterations == 0 {
        return Err(Error::InvalidConfig("CG needs at least one iteration".into()));
    }
    let mut x = Tensor::zeros(b.shape());
    let a0 = matvec(&x)?;
    let mut matvec_calls = 1;
    let mut r = tensor::sub(b, &a0)?;
    let mut p = r.clone();
    let mut rs = r.dot(&r)?;
    let mut residual_norms = vec![rs.sqrt()];
    let mut breakdown = false;

    for _ in 0..iterations {
        let ap = matvec(&p)?;
        matvec_calls += 1;
        let curvature = p.dot(&ap)?;
        if curvature <= CG_BREAKDOWN_EPS * p.dot(&p)? {
            breakdown = true;
            break;
        }
        let alpha = rs / curvature;
        x = tensor::axpy(&x, alpha, &p)?;
        r = tensor::axpy(&r, -alpha, &ap)?;
        let rs_next = r.dot(&r)?;
        residual_norms.push(rs_next.sqrt());
        let beta = rs_next / rs;
        rs = rs_next;
        p = tensor::axpy(&r, beta, &p)?;
    }

    Ok(CgOutcome {
        solution: x,
        residual_norms,
        breakdown,
        matvec_calls,
    })
}

/// Plain CG solve returning only the (approximate) solution.
pub fn conjugate_gradient_solve<F>(matvec: F, b: &Tensor, iterations: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    Ok(conjugate_gradient(matvec, b, iterations)?.solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{dense_solve, random_spd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn finite_diff_matches_analytic_square() {
        // f(x) = x^2 at 3 -> derivative 6 within 1e-8
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(finite_diff_grad(|t| Ok(t.data()[0]), &x, 0.0).is_err());
    }

    #[test]
    fn cg_identity_one_iteration() {
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let x = conjugate_gradient_solve(|v| Ok(v.clone()), &b, 1).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn cg_diagonal_exact_in_rank_iterations() {
        // A = diag(1,2,4), b = [1,2,4] -> x = [1,1,1]
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 4.0]).unwrap();
        let diag = [1.0, 2.0, 4.0];
        let x = conjugate_gradient_solve(
            |v| {
                let data = v.data().iter().zip(diag).map(|(a, d)| a * d).collect();
                Tensor::new(vec![3], data)
            },
            &b,
            3,
        )
        .unwrap();
        for v in x.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_matches_dense_solve_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = 20;
            let (a, _) = random_spd(&mut rng, n);
            let b_data: Vec<f64> = (0..n).map(|i| ((i * 7 + 1) % 11) as f64 / 11.0).collect();
            let b = Tensor::new(vec![n], b_data).unwrap();
            let matvec = |v: &Tensor| {
                let mut out = vec![0.0; n];
                for i in 0..n {
                    out[i] = (0..n).map(|j| a[i][j] * v.data()[j]).sum();
                }
                Tensor::new(vec![n], out)
            };
            let x = conjugate_gradient_solve(matvec, &b, n).unwrap();
            let expected = dense_solve(&a, b.data()).unwrap();
            for (xi, ei) in x.data().iter().zip(&expected) {
                assert!((xi - ei).abs() < 1e-8, "{xi} vs {ei}");
            }
        }
    }

    #[test]
    fn cg_residuals_non_increasing_on_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 12;
        let (a, _) = random_spd(&mut rng, n);
        let b = Tensor::new(vec![n], (0..n).map(|i| (i as f64).sin()).collect()).unwrap();
        let out = conjugate_gradient(
            |v| {
                let mut o = vec![0.0; n];
                for i in 0..n {
                    o[i] = (0..n).map(|j| a[i][j] * v.data()[j]).sum();
                }
                Tensor::new(vec![n], o)
            },
            &b,
            n,
        )
        .unwrap();
        for pair in out.residual_norms.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn cg_breakdown_returns_current_iterate() {
        // Rank-1 operator: A = e0 e0^T. Solving with b = e0 converges in one
        // step, after which curvature collapses and the iterate is returned.
        let b = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let out = conjugate_gradient(
            |v| Tensor::new(vec![2], vec![v.data()[0], 0.0]),
            &b,
            5,
        )
        .unwrap();
        assert!(out.breakdown);
        assert!((out.solution.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(out.solution.data()[1], 0.0);
    }
}

