//! Closed-form proximal operators for the l1 and l1-l1 regularizers.
//!
//! [`soft_threshold`] is the prox of `theta * |v|`. [`si_prox`] is the prox of
//! `mu * (|v| + |v - w|)`, the regularizer that pulls a code towards zero and
//! towards a side-information code `w` at the same time. Both operate
//! coordinate-wise, and both come with the partial derivatives needed to
//! backpropagate through an unfolded network.
//!
//! Thresholds used during training are stored unconstrained and go through
//! [`SoftThresholdParam::clamped`] / [`SiProxParam::clamped`] before use.

use ndarray::{Array1, ArrayView1, Zip};

use crate::error::{check_len, Error, Result};

/// Smallest threshold applied when an unconstrained trainable value is clamped.
pub const THRESHOLD_FLOOR: f64 = 1e-8;

/// Shrinkage threshold of the soft-thresholding operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftThresholdParam(f64);

impl SoftThresholdParam {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta >= 0.0) || !theta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "soft-threshold theta must be finite and >= 0, got {theta}"
            )));
        }
        Ok(Self(theta))
    }

    /// Clamp an unconstrained trainable value to the admissible range.
    pub fn clamped(raw: f64) -> Self {
        Self(raw.max(THRESHOLD_FLOOR))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Threshold of the side-information proximal operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiProxParam(f64);

impl SiProxParam {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "side-information prox mu must be finite and >= 0, got {mu}"
            )));
        }
        Ok(Self(mu))
    }

    pub fn clamped(raw: f64) -> Self {
        Self(raw.max(THRESHOLD_FLOOR))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[inline]
pub fn soft_threshold_scalar(u: f64, theta: f64) -> f64 {
    if u > theta {
        u - theta
    } else if u < -theta {
        u + theta
    } else {
        0.0
    }
}

pub fn soft_threshold(u: ArrayView1<f64>, theta: SoftThresholdParam) -> Array1<f64> {
    let t = theta.get();
    u.mapv(|v| soft_threshold_scalar(v, t))
}

/// Partial derivatives `(d out / d u, d out / d theta)` of soft thresholding.
/// The dead zone `|u| <= theta` (including its edges) has zero derivative.
#[inline]
pub fn soft_threshold_grad_scalar(u: f64, theta: f64) -> (f64, f64) {
    if u > theta {
        (1.0, -1.0)
    } else if u < -theta {
        (1.0, 1.0)
    } else {
        (0.0, 0.0)
    }
}

pub fn soft_threshold_grad(
    u: ArrayView1<f64>,
    theta: SoftThresholdParam,
) -> (Array1<f64>, Array1<f64>) {
    let t = theta.get();
    let mut du = Array1::zeros(u.len());
    let mut dtheta = Array1::zeros(u.len());
    Zip::from(&mut du)
        .and(&mut dtheta)
        .and(&u)
        .for_each(|du, dt, &u| (*du, *dt) = soft_threshold_grad_scalar(u, t));
    (du, dtheta)
}

/// Which of the five pieces of the side-information prox a coordinate lands on.
///
/// For `w >= 0` the pieces, in increasing `u`, are
/// `RaiseBy2Mu (u < -2mu)`, `Zero`, `Identity (0 < u < w)`, `PinnedToW`,
/// `LowerBy2Mu (u > w + 2mu)`. For `w < 0` the roles of `0` and `w` swap.
/// Flat pieces own their endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiBranch {
    RaiseBy2Mu,
    Zero,
    Identity,
    PinnedToW,
    LowerBy2Mu,
}

#[inline]
pub fn si_branch(u: f64, w: f64, mu: f64) -> SiBranch {
    let two_mu = 2.0 * mu;
    if w >= 0.0 {
        if u < -two_mu {
            SiBranch::RaiseBy2Mu
        } else if u <= 0.0 {
            SiBranch::Zero
        } else if u < w {
            SiBranch::Identity
        } else if u <= w + two_mu {
            SiBranch::PinnedToW
        } else {
            SiBranch::LowerBy2Mu
        }
    } else if u < w - two_mu {
        SiBranch::RaiseBy2Mu
    } else if u <= w {
        SiBranch::PinnedToW
    } else if u < 0.0 {
        SiBranch::Identity
    } else if u <= two_mu {
        SiBranch::Zero
    } else {
        SiBranch::LowerBy2Mu
    }
}

#[inline]
pub fn si_prox_scalar(u: f64, w: f64, mu: f64) -> f64 {
    match si_branch(u, w, mu) {
        SiBranch::RaiseBy2Mu => u + 2.0 * mu,
        SiBranch::Zero => 0.0,
        SiBranch::Identity => u,
        SiBranch::PinnedToW => w,
        SiBranch::LowerBy2Mu => u - 2.0 * mu,
    }
}

/// Partial derivatives of [`si_prox_scalar`] with respect to `(u, w, mu)`.
#[inline]
pub fn si_prox_grad_scalar(u: f64, w: f64, mu: f64) -> (f64, f64, f64) {
    match si_branch(u, w, mu) {
        SiBranch::RaiseBy2Mu => (1.0, 0.0, 2.0),
        SiBranch::Zero => (0.0, 0.0, 0.0),
        SiBranch::Identity => (1.0, 0.0, 0.0),
        SiBranch::PinnedToW => (0.0, 1.0, 0.0),
        SiBranch::LowerBy2Mu => (1.0, 0.0, -2.0),
    }
}

/// Prox of `mu * (|v| + |v - w|)`, applied coordinate-wise.
pub fn si_prox(u: ArrayView1<f64>, w: ArrayView1<f64>, mu: SiProxParam) -> Result<Array1<f64>> {
    check_len("si_prox side information", w.len(), u.len())?;
    let m = mu.get();
    Ok(Zip::from(&u).and(&w).map_collect(|&u, &w| si_prox_scalar(u, w, m)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiProxGrad {
    pub du: Array1<f64>,
    pub dw: Array1<f64>,
    pub dmu: Array1<f64>,
}

pub fn si_prox_grad(
    u: ArrayView1<f64>,
    w: ArrayView1<f64>,
    mu: SiProxParam,
) -> Result<SiProxGrad> {
    check_len("si_prox_grad side information", w.len(), u.len())?;
    let m = mu.get();
    let n = u.len();
    let mut g = SiProxGrad {
        du: Array1::zeros(n),
        dw: Array1::zeros(n),
        dmu: Array1::zeros(n),
    };
    Zip::from(&mut g.du)
        .and(&mut g.dw)
        .and(&mut g.dmu)
        .and(&u)
        .and(&w)
        .for_each(|du, dw, dmu, &u, &w| (*du, *dw, *dmu) = si_prox_grad_scalar(u, w, m));
    Ok(g)
}

/// The per-coordinate objective minimized by the side-information prox.
#[inline]
pub fn si_prox_objective(v: f64, u: f64, w: f64, mu: f64) -> f64 {
    0.5 * (v - u) * (v - u) + mu * (v.abs() + (v - w).abs())
}

/// Reference minimizer for [`si_prox_scalar`] by candidate enumeration.
///
/// The objective is piecewise quadratic with unit curvature and breakpoints
/// at `0` and `w`, so its minimizer is either a stationary point of one piece
/// (`u - 2mu`, `u`, `u + 2mu`) or a breakpoint. Ties go to the smaller `|v|`.
pub fn si_prox_oracle(u: f64, w: f64, mu: f64) -> f64 {
    let candidates = [u - 2.0 * mu, u, u + 2.0 * mu, 0.0, w];
    let mut best = candidates[0];
    let mut best_h = si_prox_objective(best, u, w, mu);
    for &v in &candidates[1..] {
        let h = si_prox_objective(v, u, w, mu);
        if h < best_h || (h == best_h && v.abs() < best.abs()) {
            best = v;
            best_h = h;
        }
    }
    best
}
