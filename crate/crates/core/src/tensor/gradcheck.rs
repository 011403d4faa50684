//! Finite-difference verification of analytic gradients.
//!
//! Runs in f64 with deterministic closures (dropout disabled or fixed rng).
//! For each parameter entry the analytic gradient is compared against the
//! central difference (f(x+eps) - f(x-eps)) / 2 eps.

use super::Tensor;
use crate::error::Result;

/// One entry whose analytic and numeric gradients disagree beyond tolerance.
#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with an eps floor in the denominator so near-zero
/// gradient pairs are compared absolutely at scale eps.
fn rel_error(a: f64, n: f64, eps: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()) + eps)
}

/// Check the gradient of `f` with respect to every entry of every tensor in
/// `params`. `f` must be deterministic and must read the parameters only
/// through the slice it is given.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    // Analytic pass: fresh grad leaves, one backward.
    let leaves: Vec<Tensor<f64>> = params.iter().map(|p| p.requiring_grad()).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        tol,
        failures: Vec::new(),
    };

    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = p.data().to_vec();
                data[ei] += delta;
                let mut probe: Vec<Tensor<f64>> = params.to_vec();
                probe[pi] = Tensor::from_vec(p.shape().to_vec(), data)?;
                Ok(f(&probe)?.item())
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ei];
            let err = rel_error(a, numeric, eps);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
            }
            if err > tol {
                report.failures.push(GradCheckFailure {
                    param: pi,
                    index: ei,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_passes() {
        // f(W) = || W x ||^2 on a tiny case
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f64>::uniform(vec![3, 2], 1.0, &mut rng);
        let x = Tensor::<f64>::uniform(vec![2, 1], 1.0, &mut rng);
        let report = grad_check(
            |ps| {
                let y = ps[0].matmul(&x)?;
                Ok(y.mul(&y)?.sum())
            },
            &[w],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        // doubling the loss only in the analytic pass: simulate by checking
        // f against params whose analytic gradient we deliberately break via
        // a mismatched closure (the probe path sees g(x) = x^2, the analytic
        // pass sees 2 x^2).
        let x = Tensor::<f64>::param(vec![1], vec![1.5]).unwrap();
        let report = grad_check(
            |ps| {
                let sq = ps[0].mul(&ps[0])?.sum();
                // Analytic leaves carry requires_grad; scale the recorded
                // graph by 2 there so the analytic gradient is doubled,
                // while numeric probes (requires_grad=false) see x^2.
                if ps[0].requires_grad() {
                    Ok(sq.scale(2.0))
                } else {
                    Ok(sq)
                }
            },
            &[x],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].rel_error > 0.3);
    }

    #[test]
    fn composite_of_engine_ops_passes() {
        // softmax . layer_norm . matmul . relu composed into a scalar
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::uniform(vec![4, 3], 1.0, &mut rng);
        let gamma = Tensor::<f64>::uniform(vec![4], 0.5, &mut rng);
        let beta = Tensor::<f64>::uniform(vec![4], 0.5, &mut rng);
        let x = Tensor::<f64>::uniform(vec![3, 2], 1.0, &mut rng);
        let report = grad_check(
            |ps| {
                let y = ps[0].matmul(&x)?.relu();
                let y = y.layer_norm(&ps[1], &ps[2], 1e-5, 0)?;
                let y = y.softmax(0)?;
                Ok(y.mul(&y)?.mean())
            },
            &[w, gamma, beta],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }
}
