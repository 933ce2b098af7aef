//! Proximal-gradient solvers: ISTA for `1/2 ||F a - y||^2 + lambda ||a||_1`
//! and SITA for the same data term with `lambda (||a||_1 + ||a - w||_1)`.
//!
//! Both run the fixed-step iteration `a <- prox(a - F^T (F a - y) / L)` from
//! `a = 0`, with `L` from [`lipschitz_upper_bound`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::metrics::nmse_db;
use crate::prox::{si_prox_scalar, soft_threshold_scalar};

/// Inflation applied to the power-iteration estimate of `lambda_max(F^T F)`.
pub const LIPSCHITZ_INFLATION: f64 = 1.01;
const POWER_ITER_TOL: f64 = 1e-6;
const POWER_ITER_MAX: usize = 10_000;

/// Upper bound on the Lipschitz constant of `a -> F^T (F a - y)`.
///
/// Power iteration on `F^T F` to a relative tolerance of 1e-6, inflated by
/// [`LIPSCHITZ_INFLATION`]. An all-zero operator yields 1.
pub fn lipschitz_upper_bound(f: ArrayView2<f64>) -> Result<f64> {
    let (m, k) = f.dim();
    if m == 0 || k == 0 {
        return Err(Error::Dimension("lipschitz_upper_bound: empty matrix".into()));
    }
    if f.iter().all(|&v| v == 0.0) {
        return Ok(1.0);
    }
    // Fixed-seed start vector: almost surely not orthogonal to the top eigenvector.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1195);
    let mut v: Array1<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    v /= v.dot(&v).sqrt();
    let mut estimate = 0.0f64;
    for _ in 0..POWER_ITER_MAX {
        let fv = f.dot(&v);
        let mut next = f.t().dot(&fv);
        let rayleigh = fv.dot(&fv);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            break;
        }
        next /= norm;
        v = next;
        let converged = (rayleigh - estimate).abs() <= POWER_ITER_TOL * rayleigh.abs();
        estimate = rayleigh;
        if converged {
            break;
        }
    }
    if estimate <= 0.0 || !estimate.is_finite() {
        return Err(Error::Numerical(format!(
            "lipschitz_upper_bound: power iteration produced {estimate}"
        )));
    }
    Ok(estimate * LIPSCHITZ_INFLATION)
}

/// A sparse coding problem. With side information present it is the l1-l1
/// problem solved by [`sita_solve`], otherwise the lasso solved by
/// [`ista_solve`].
#[derive(Debug, Clone)]
pub struct SparseProblem {
    f: Array2<f64>,
    y: Array1<f64>,
    lambda: f64,
    side_info: Option<Array1<f64>>,
}

impl SparseProblem {
    pub fn new(
        f: Array2<f64>,
        y: Array1<f64>,
        lambda: f64,
        side_info: Option<Array1<f64>>,
    ) -> Result<Self> {
        if f.is_empty() {
            return Err(Error::Dimension("SparseProblem: empty operator".into()));
        }
        check_len("SparseProblem observations", y.len(), f.nrows())?;
        if let Some(w) = &side_info {
            check_len("SparseProblem side information", w.len(), f.ncols())?;
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "SparseProblem: lambda must be positive, got {lambda}"
            )));
        }
        Ok(Self {
            f,
            y,
            lambda,
            side_info,
        })
    }

    pub fn operator(&self) -> ArrayView2<'_, f64> {
        self.f.view()
    }

    pub fn observations(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn side_info(&self) -> Option<ArrayView1<'_, f64>> {
        self.side_info.as_ref().map(|w| w.view())
    }

    pub fn code_len(&self) -> usize {
        self.f.ncols()
    }

    /// Objective value at `alpha`: data term plus the active regularizer.
    pub fn objective(&self, alpha: ArrayView1<f64>) -> f64 {
        let r = self.f.dot(&alpha) - &self.y;
        let data = 0.5 * r.dot(&r);
        let l1: f64 = alpha.iter().map(|a| a.abs()).sum();
        let reg = match &self.side_info {
            None => l1,
            Some(w) => l1 + Zip::from(&alpha).and(w).fold(0.0, |s, &a, &w| s + (a - w).abs()),
        };
        data + self.lambda * reg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub t_max: usize,
    /// Stop when `||a_t - a_{t-1}|| < rel_tol * ||a_t||`.
    pub rel_tol: f64,
    /// Stop once the NMSE against a supplied reference reaches this level.
    pub target_nmse_db: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            rel_tol: 1e-8,
            target_nmse_db: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::InvalidParameter("solver t_max must be >= 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "solver rel_tol must be >= 0, got {}",
                self.rel_tol
            )));
        }
        if self.target_nmse_db.is_some_and(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("solver target NMSE must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    RelativeChange,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub alpha: Array1<f64>,
    pub iterations: usize,
    /// Objective after each iteration; `objective_trace.len() == iterations`.
    pub objective_trace: Vec<f64>,
    pub stop: StopReason,
    /// The Lipschitz bound used for the step size.
    pub lipschitz: f64,
}

pub fn ista_solve(p: &SparseProblem, cfg: &SolverConfig) -> Result<SolverResult> {
    if p.side_info.is_some() {
        return Err(Error::InvalidParameter(
            "ista_solve: problem carries side information, use sita_solve".into(),
        ));
    }
    run(p, cfg, None, None)
}

pub fn sita_solve(p: &SparseProblem, cfg: &SolverConfig) -> Result<SolverResult> {
    if p.side_info.is_none() {
        return Err(Error::InvalidParameter(
            "sita_solve: problem has no side information".into(),
        ));
    }
    run(p, cfg, None, None)
}

/// Runs ISTA or SITA depending on whether side information is present,
/// tracking NMSE against `reference` for the target-error stopping rule.
/// `lipschitz` overrides the power-iteration bound (useful when many
/// problems share one operator).
pub fn solve(
    p: &SparseProblem,
    cfg: &SolverConfig,
    reference: Option<ArrayView1<f64>>,
    lipschitz: Option<f64>,
) -> Result<SolverResult> {
    run(p, cfg, reference, lipschitz)
}

fn run(
    p: &SparseProblem,
    cfg: &SolverConfig,
    reference: Option<ArrayView1<f64>>,
    lipschitz: Option<f64>,
) -> Result<SolverResult> {
    cfg.validate()?;
    if let Some(r) = &reference {
        check_len("solver reference", r.len(), p.code_len())?;
    }
    let l = match lipschitz {
        Some(l) if l > 0.0 => l,
        Some(l) => {
            return Err(Error::InvalidParameter(format!(
                "lipschitz bound must be positive, got {l}"
            )))
        }
        None => lipschitz_upper_bound(p.f.view())?,
    };
    let step = 1.0 / l;
    let threshold = p.lambda / l;

    let k = p.code_len();
    let mut alpha = Array1::<f64>::zeros(k);
    let mut trace = Vec::with_capacity(cfg.t_max.min(4096));
    let mut stop = StopReason::MaxIterations;
    for _ in 0..cfg.t_max {
        let residual = p.f.dot(&alpha) - &p.y;
        let grad = p.f.t().dot(&residual);
        let mut next = &alpha - &(step * &grad);
        match &p.side_info {
            None => next.mapv_inplace(|u| soft_threshold_scalar(u, threshold)),
            Some(w) => Zip::from(&mut next)
                .and(w)
                .for_each(|u, &w| *u = si_prox_scalar(*u, w, threshold)),
        }
        let change = Zip::from(&next)
            .and(&alpha)
            .fold(0.0, |s, &a, &b| s + (a - b) * (a - b))
            .sqrt();
        let size = next.dot(&next).sqrt();
        alpha = next;
        trace.push(p.objective(alpha.view()));
        if !trace.last().is_some_and(|v| v.is_finite()) {
            return Err(Error::Numerical("solver objective diverged".into()));
        }

        if let (Some(target), Some(r)) = (cfg.target_nmse_db, &reference) {
            if nmse_db(&alpha, r)? <= target {
                stop = StopReason::TargetReached;
                break;
            }
        }
        if change == 0.0 || change < cfg.rel_tol * size {
            stop = StopReason::RelativeChange;
            break;
        }
    }
    Ok(SolverResult {
        alpha,
        iterations: trace.len(),
        objective_trace: trace,
        stop,
        lipschitz: l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::Rng;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let s = 1.0 / (rows as f64).sqrt();
        Array::from_shape_fn((rows, cols), |_| {
            let v: f64 = StandardNormal.sample(rng);
            v * s
        })
    }

    fn sparse(k: usize, s: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let mut a = Array1::zeros(k);
        for _ in 0..s {
            let i = rng.random_range(0..k);
            a[i] = StandardNormal.sample(rng);
        }
        a
    }

    #[test]
    fn lipschitz_simple_operators() {
        let l = lipschitz_upper_bound(Array2::eye(4).view()).unwrap();
        assert!((1.0..=1.02).contains(&l), "{l}");
        let l = lipschitz_upper_bound(array![[3.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert!((9.0..=9.1).contains(&l), "{l}");
        assert_eq!(lipschitz_upper_bound(Array2::zeros((3, 2)).view()).unwrap(), 1.0);
        assert!(lipschitz_upper_bound(Array2::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn lipschitz_matches_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let f = gaussian(20, 40, &mut rng);
            let gram = f.t().dot(&f);
            let m = nalgebra::DMatrix::from_fn(40, 40, |i, j| gram[[i, j]]);
            let top = m.symmetric_eigen().eigenvalues.max();
            let l = lipschitz_upper_bound(f.view()).unwrap();
            assert!(l >= top);
            assert!((l - top).abs() / top < 0.011 + 1e-9, "l {l} top {top}");
        }
    }

    #[test]
    fn zero_observations_stop_after_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = gaussian(8, 16, &mut rng);
        let p = SparseProblem::new(f, Array1::zeros(8), 0.1, None).unwrap();
        let r = ista_solve(&p, &SolverConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.alpha.iter().all(|&a| a == 0.0));
        assert_eq!(r.stop, StopReason::RelativeChange);
    }

    #[test]
    fn orthonormal_operator_converges_to_soft_threshold() {
        let y = array![0.0, 1.5, 0.0, -0.7, 0.0, 0.02];
        let lambda = 0.05;
        let p = SparseProblem::new(Array2::eye(6), y.clone(), lambda, None).unwrap();
        let cfg = SolverConfig {
            t_max: 10_000,
            rel_tol: 1e-14,
            target_nmse_db: None,
        };
        let r = ista_solve(&p, &cfg).unwrap();
        let expected = y.mapv(|v| soft_threshold_scalar(v, lambda));
        for (a, e) in r.alpha.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn solver_kind_mismatch_and_dimension_errors() {
        let f = Array2::eye(3);
        let p = SparseProblem::new(f.clone(), Array1::ones(3), 0.1, None).unwrap();
        assert!(sita_solve(&p, &SolverConfig::default()).is_err());
        let p = SparseProblem::new(f.clone(), Array1::ones(3), 0.1, Some(Array1::ones(3))).unwrap();
        assert!(ista_solve(&p, &SolverConfig::default()).is_err());
        assert!(matches!(
            SparseProblem::new(f.clone(), Array1::ones(2), 0.1, None),
            Err(Error::Dimension(_))
        ));
        assert!(SparseProblem::new(f.clone(), Array1::ones(3), 0.1, Some(Array1::ones(4))).is_err());
        assert!(SparseProblem::new(f, Array1::ones(3), 0.0, None).is_err());
    }

    #[test]
    fn zero_side_information_matches_ista_with_doubled_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = gaussian(12, 24, &mut rng);
        let truth = sparse(24, 4, &mut rng);
        let y = f.dot(&truth);
        let cfg = SolverConfig {
            t_max: 60,
            rel_tol: 0.0,
            target_nmse_db: None,
        };
        let sita = SparseProblem::new(f.clone(), y.clone(), 0.03, Some(Array1::zeros(24))).unwrap();
        let ista = SparseProblem::new(f, y, 0.06, None).unwrap();
        for t in [1, 5, 60] {
            let c = SolverConfig { t_max: t, ..cfg };
            let a = sita_solve(&sita, &c).unwrap();
            let b = ista_solve(&ista, &c).unwrap();
            assert_eq!(a.alpha, b.alpha, "iterate {t}");
        }
    }

    #[test]
    fn perfect_side_information_recovers_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Orthonormal F from a QR factorisation.
        let g = gaussian(16, 16, &mut rng);
        let m = nalgebra::DMatrix::from_fn(16, 16, |i, j| g[[i, j]]);
        let q = m.qr().q();
        let f = Array2::from_shape_fn((16, 16), |(i, j)| q[(i, j)]);
        let truth = sparse(16, 4, &mut rng);
        let y = f.dot(&truth);
        let p = SparseProblem::new(f, y, 1e-3, Some(truth.clone())).unwrap();
        let cfg = SolverConfig {
            t_max: 100,
            rel_tol: 0.0,
            target_nmse_db: None,
        };
        let r = sita_solve(&p, &cfg).unwrap();
        assert!(r.iterations <= 100);
        for (a, e) in r.alpha.iter().zip(truth.iter()) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn long_run_reference_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = gaussian(64, 128, &mut rng);
        let truth = sparse(128, 10, &mut rng);
        let y = f.dot(&truth);
        let p = SparseProblem::new(f, y, 0.05, None).unwrap();
        let reference = ista_solve(
            &p,
            &SolverConfig {
                t_max: 100_000,
                rel_tol: 0.0,
                target_nmse_db: None,
            },
        )
        .unwrap();
        let r = ista_solve(&p, &SolverConfig::default()).unwrap();
        let best = *reference.objective_trace.last().unwrap();
        let got = *r.objective_trace.last().unwrap();
        assert!((got - best).abs() < 1e-6, "{got} vs {best}");
    }

    #[test]
    fn descent_and_fixed_point_on_halt() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..10 {
            let f = gaussian(20, 32, &mut rng);
            let truth = sparse(32, 5, &mut rng);
            let y = f.dot(&truth);
            let w = if trial % 2 == 0 {
                Some(&truth + &sparse(32, 3, &mut rng))
            } else {
                None
            };
            let p = SparseProblem::new(f.clone(), y.clone(), 0.05, w.clone()).unwrap();
            let cfg = SolverConfig {
                t_max: 20_000,
                rel_tol: 1e-10,
                target_nmse_db: None,
            };
            let r = solve(&p, &cfg, None, None).unwrap();
            for pair in r.objective_trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-10);
            }
            assert_eq!(r.stop, StopReason::RelativeChange);
            // Fixed point of the prox-gradient map.
            let l = r.lipschitz;
            let u = &r.alpha - &(f.t().dot(&(f.dot(&r.alpha) - &y)) / l);
            let mapped: Array1<f64> = match &w {
                None => u.mapv(|v| soft_threshold_scalar(v, 0.05 / l)),
                Some(w) => Zip::from(&u).and(w).map_collect(|&u, &w| si_prox_scalar(u, w, 0.05 / l)),
            };
            let diff = (&mapped - &r.alpha).mapv(|v| v * v).sum().sqrt();
            let size = r.alpha.dot(&r.alpha).sqrt();
            assert!(diff <= 1e-10 * size.max(1.0) * 10.0, "{diff}");

            // Optimality: 0 in the subdifferential, coordinate-wise.
            let g = f.t().dot(&(f.dot(&r.alpha) - &y));
            for i in 0..32 {
                let a = r.alpha[i];
                let (lo, hi) = subdiff_abs(a);
                let (mut lo, mut hi) = (0.05 * lo, 0.05 * hi);
                if let Some(w) = &w {
                    let (l2, h2) = subdiff_abs(a - w[i]);
                    lo += 0.05 * l2;
                    hi += 0.05 * h2;
                }
                assert!(-g[i] >= lo - 1e-5 && -g[i] <= hi + 1e-5, "coord {i}: {} not in [{lo}, {hi}]", -g[i]);
            }
        }
    }

    fn subdiff_abs(v: f64) -> (f64, f64) {
        const EPS: f64 = 1e-9;
        if v > EPS {
            (1.0, 1.0)
        } else if v < -EPS {
            (-1.0, -1.0)
        } else {
            (-1.0, 1.0)
        }
    }

    #[test]
    fn target_nmse_stops_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = gaussian(40, 64, &mut rng);
        let truth = sparse(64, 5, &mut rng);
        let y = f.dot(&truth);
        let p = SparseProblem::new(f, y, 1e-3, Some(truth.clone() * 0.9)).unwrap();
        let cfg = SolverConfig {
            t_max: 1000,
            rel_tol: 0.0,
            target_nmse_db: Some(-10.0),
        };
        let r = solve(&p, &cfg, Some(truth.view()), None).unwrap();
        assert_eq!(r.stop, StopReason::TargetReached);
        assert!(nmse_db(&r.alpha, &truth).unwrap() <= -10.0);
    }
}
