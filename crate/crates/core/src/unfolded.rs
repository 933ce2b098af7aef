//! Unfolded networks: a fixed number of ISTA (LISTA) or SITA (LeSITA)
//! iterations turned into layers with learnable weights.
//!
//! Layer `t` computes `a_t = prox(S_t a_{t-1} + W_t y)` from `a_0 = 0`. For
//! LISTA the prox is soft thresholding with threshold `theta_t`; for LeSITA
//! it is the side-information prox with threshold `mu_t` and the code `w`
//! supplied alongside the input. Inputs are column-stacked batches: `y` is
//! `m x B`, `w` and the output are `k x B`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{scalar_view, scalar_view_mut, ParamBlocks};
use crate::prox::{si_branch, si_prox_scalar, soft_threshold_scalar, THRESHOLD_FLOOR};
use crate::solvers::lipschitz_upper_bound;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Lista,
    Lesita,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Lista => "lista",
            NetKind::Lesita => "lesita",
        }
    }

    /// Block names used for (recurrent matrix, input matrix, threshold).
    fn block_names(self) -> (&'static str, &'static str, &'static str) {
        match self {
            NetKind::Lista => ("S", "W", "theta"),
            NetKind::Lesita => ("Q", "R", "mu"),
        }
    }
}

impl std::str::FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lista" => Ok(NetKind::Lista),
            "lesita" => Ok(NetKind::Lesita),
            _ => Err(Error::Config(format!("unknown network kind {s:?}"))),
        }
    }
}

/// Weights of one layer: `S, W, theta` for LISTA or `Q, R, mu` for LeSITA.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `k x k`, multiplies the previous code.
    pub recurrent: Array2<f64>,
    /// `k x m`, multiplies the network input.
    pub input: Array2<f64>,
    /// Unconstrained; clamped to `>= THRESHOLD_FLOOR` when applied.
    pub threshold: f64,
}

impl LayerParams {
    pub fn effective_threshold(&self) -> f64 {
        self.threshold.max(THRESHOLD_FLOOR)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedNetwork {
    kind: NetKind,
    depth: usize,
    tied: bool,
    layers: Vec<LayerParams>,
}

impl UnfoldedNetwork {
    pub fn new(kind: NetKind, depth: usize, tied: bool, layers: Vec<LayerParams>) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidParameter("network depth must be >= 1".into()));
        }
        let expected = if tied { 1 } else { depth };
        if layers.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "{} network of depth {depth} (tied = {tied}) needs {expected} parameter blocks, got {}",
                kind.as_str(),
                layers.len()
            )));
        }
        let k = layers[0].recurrent.nrows();
        let m = layers[0].input.ncols();
        if k == 0 || m == 0 {
            return Err(Error::Dimension("network layers must be nonempty".into()));
        }
        for (t, l) in layers.iter().enumerate() {
            if l.recurrent.dim() != (k, k) || l.input.dim() != (k, m) {
                return Err(Error::Dimension(format!(
                    "layer {t}: recurrent {:?} / input {:?} inconsistent with k = {k}, m = {m}",
                    l.recurrent.dim(),
                    l.input.dim()
                )));
            }
            if !l.threshold.is_finite() {
                return Err(Error::InvalidParameter(format!("layer {t}: non-finite threshold")));
            }
        }
        Ok(Self {
            kind,
            depth,
            tied,
            layers,
        })
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn code_len(&self) -> usize {
        self.layers[0].recurrent.nrows()
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input.ncols()
    }

    /// Parameters applied at layer `t` (0-based).
    pub fn layer(&self, t: usize) -> &LayerParams {
        &self.layers[if self.tied { 0 } else { t }]
    }

    /// The distinct parameter blocks (one when tied).
    pub fn param_layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn param_layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    fn check_inputs(&self, y: &ArrayView2<f64>, w: Option<&ArrayView2<f64>>) -> Result<()> {
        if y.nrows() != self.input_len() {
            return Err(Error::Dimension(format!(
                "network input has {} rows, expected {}",
                y.nrows(),
                self.input_len()
            )));
        }
        match (self.kind, w) {
            (NetKind::Lista, Some(_)) => Err(Error::InvalidParameter(
                "LISTA takes no side information".into(),
            )),
            (NetKind::Lesita, None) => Err(Error::InvalidParameter(
                "LeSITA requires side information".into(),
            )),
            (NetKind::Lesita, Some(w)) if w.dim() != (self.code_len(), y.ncols()) => {
                Err(Error::Dimension(format!(
                    "side information is {:?}, expected {:?}",
                    w.dim(),
                    (self.code_len(), y.ncols())
                )))
            }
            _ => Ok(()),
        }
    }

    fn pre_activation(&self, t: usize, y: &ArrayView2<f64>, prev: &Array2<f64>) -> Array2<f64> {
        let layer = self.layer(t);
        let mut u = layer.input.dot(y);
        if t > 0 {
            general_mat_mul(1.0, &layer.recurrent, prev, 1.0, &mut u);
        }
        u
    }

    fn activate(&self, u: &Array2<f64>, w: Option<&ArrayView2<f64>>, thr: f64) -> Array2<f64> {
        match w {
            None => u.mapv(|v| soft_threshold_scalar(v, thr)),
            Some(w) => Zip::from(u).and(w).map_collect(|&u, &w| si_prox_scalar(u, w, thr)),
        }
    }

    /// Forward pass over a batch, recording what backpropagation needs.
    pub fn forward(
        &self,
        y: ArrayView2<f64>,
        w: Option<ArrayView2<f64>>,
    ) -> Result<(Array2<f64>, Tape)> {
        self.check_inputs(&y, w.as_ref())?;
        let mut alpha = Array2::zeros((self.code_len(), y.ncols()));
        let mut pre = Vec::with_capacity(self.depth);
        let mut outputs = Vec::with_capacity(self.depth);
        let mut thresholds = Vec::with_capacity(self.depth);
        for t in 0..self.depth {
            let thr = self.layer(t).effective_threshold();
            let u = self.pre_activation(t, &y, &alpha);
            alpha = self.activate(&u, w.as_ref(), thr);
            pre.push(u);
            outputs.push(alpha.clone());
            thresholds.push(thr);
        }
        let tape = Tape {
            kind: self.kind,
            input: y.to_owned(),
            side_info: w.map(|w| w.to_owned()),
            pre,
            outputs,
            thresholds,
        };
        Ok((alpha, tape))
    }

    /// Forward pass without a tape.
    pub fn infer(&self, y: ArrayView2<f64>, w: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        self.check_inputs(&y, w.as_ref())?;
        let mut alpha = Array2::zeros((self.code_len(), y.ncols()));
        for t in 0..self.depth {
            let u = self.pre_activation(t, &y, &alpha);
            alpha = self.activate(&u, w.as_ref(), self.layer(t).effective_threshold());
        }
        Ok(alpha)
    }

    pub(crate) fn named_blocks<'a>(&'a self, prefix: &str) -> Vec<(String, ArrayViewD<'a, f64>)> {
        let (rn, inn, tn) = self.kind.block_names();
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}layer{i}.");
            out.push((format!("{p}{rn}"), l.recurrent.view().into_dyn()));
            out.push((format!("{p}{inn}"), l.input.view().into_dyn()));
            out.push((format!("{p}{tn}"), scalar_view(&l.threshold)));
        }
        out
    }

    pub(crate) fn named_blocks_mut<'a>(
        &'a mut self,
        prefix: &str,
    ) -> Vec<(String, ArrayViewMutD<'a, f64>)> {
        let (rn, inn, tn) = self.kind.block_names();
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("{prefix}layer{i}.");
            out.push((format!("{p}{rn}"), l.recurrent.view_mut().into_dyn()));
            out.push((format!("{p}{inn}"), l.input.view_mut().into_dyn()));
            out.push((format!("{p}{tn}"), scalar_view_mut(&mut l.threshold)));
        }
        out
    }

    /// Rebuilds a network from named blocks as written by [`ParamBlocks`].
    pub fn from_blocks<'a>(
        kind: NetKind,
        depth: usize,
        tied: bool,
        prefix: &str,
        lookup: impl Fn(&str) -> Option<ArrayViewD<'a, f64>>,
    ) -> Result<Self> {
        let (rn, inn, tn) = kind.block_names();
        let count = if tied { 1 } else { depth };
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let p = format!("{prefix}layer{i}.");
            let get = |n: &str| {
                lookup(&format!("{p}{n}"))
                    .ok_or_else(|| Error::Data(format!("missing parameter block {p}{n}")))
            };
            let mat = |n: &str| -> Result<Array2<f64>> {
                get(n)?
                    .into_dimensionality::<ndarray::Ix2>()
                    .map(|v| v.to_owned())
                    .map_err(|_| Error::Data(format!("parameter block {p}{n} is not a matrix")))
            };
            let thr = get(tn)?;
            if thr.len() != 1 {
                return Err(Error::Data(format!("parameter block {p}{tn} is not a scalar")));
            }
            layers.push(LayerParams {
                recurrent: mat(rn)?,
                input: mat(inn)?,
                threshold: *thr.iter().next().unwrap(),
            });
        }
        Self::new(kind, depth, tied, layers)
    }
}

impl ParamBlocks for UnfoldedNetwork {
    fn blocks(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        self.named_blocks("")
    }

    fn blocks_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        self.named_blocks_mut("")
    }
}

/// Activations recorded by [`UnfoldedNetwork::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    pub(crate) kind: NetKind,
    pub(crate) input: Array2<f64>,
    pub(crate) side_info: Option<Array2<f64>>,
    /// Pre-activation `u_t` of every layer.
    pub(crate) pre: Vec<Array2<f64>>,
    /// Output `a_t` of every layer.
    pub(crate) outputs: Vec<Array2<f64>>,
    /// Thresholds actually applied (after clamping).
    pub(crate) thresholds: Vec<f64>,
}

impl Tape {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn batch_len(&self) -> usize {
        self.input.ncols()
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }

    pub fn layer_outputs(&self) -> &[Array2<f64>] {
        &self.outputs
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Branch taken by each coordinate of each layer, encoded as a small
    /// integer. For LISTA: 0 dead zone, 1 positive, 2 negative.
    pub fn branch_pattern(&self) -> Vec<Vec<u8>> {
        self.pre
            .iter()
            .zip(&self.thresholds)
            .map(|(u, &thr)| match &self.side_info {
                None => u
                    .iter()
                    .map(|&v| {
                        if v > thr {
                            1
                        } else if v < -thr {
                            2
                        } else {
                            0
                        }
                    })
                    .collect(),
                Some(w) => Zip::from(u)
                    .and(w)
                    .map_collect(|&u, &w| si_branch(u, w, thr) as u8)
                    .into_iter()
                    .collect(),
            })
            .collect()
    }

    /// Smallest distance from any recorded pre-activation to a breakpoint of
    /// its activation function.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (u, &thr) in self.pre.iter().zip(&self.thresholds) {
            match &self.side_info {
                None => {
                    for &v in u {
                        best = best.min((v.abs() - thr).abs());
                    }
                }
                Some(w) => Zip::from(u).and(w).for_each(|&u, &w| {
                    let d = kink_distance(u, w, thr);
                    best = best.min(d);
                }),
            }
        }
        best
    }
}

fn kink_distance(u: f64, w: f64, mu: f64) -> f64 {
    let kinks = if w >= 0.0 {
        [-2.0 * mu, 0.0, w, w + 2.0 * mu]
    } else {
        [w - 2.0 * mu, w, 0.0, 2.0 * mu]
    };
    kinks.iter().map(|k| (u - k).abs()).fold(w.abs(), f64::min)
}

/// Initial weights that make the network reproduce the iterative solver:
/// `S = I - F^T F / L`, `W = F^T / L`, threshold `lambda / L`.
pub fn init_from_operator(
    kind: NetKind,
    f: ArrayView2<f64>,
    lambda: f64,
    depth: usize,
    tied: bool,
) -> Result<UnfoldedNetwork> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "init_from_operator: lambda must be positive, got {lambda}"
        )));
    }
    if depth == 0 {
        return Err(Error::InvalidParameter("network depth must be >= 1".into()));
    }
    let l = lipschitz_upper_bound(f)?;
    let step = 1.0 / l;
    let k = f.ncols();
    let mut recurrent = f.t().dot(&f);
    recurrent.mapv_inplace(|v| -(step * v));
    for i in 0..k {
        recurrent[[i, i]] += 1.0;
    }
    let input = f.t().mapv(|v| step * v);
    let layer = LayerParams {
        recurrent,
        input,
        threshold: lambda / l,
    };
    let layers = vec![layer; if tied { 1 } else { depth }];
    UnfoldedNetwork::new(kind, depth, tied, layers)
}

fn column(v: ArrayView1<f64>) -> ArrayView2<f64> {
    v.insert_axis(Axis(1))
}

/// Single-sample LISTA forward pass.
pub fn forward_lista(net: &UnfoldedNetwork, y: ArrayView1<f64>) -> Result<(Array1<f64>, Tape)> {
    if net.kind() != NetKind::Lista {
        return Err(Error::InvalidParameter("forward_lista on a LeSITA network".into()));
    }
    let (a, tape) = net.forward(column(y), None)?;
    Ok((a.remove_axis(Axis(1)), tape))
}

/// Single-sample LeSITA forward pass.
pub fn forward_lesita(
    net: &UnfoldedNetwork,
    y: ArrayView1<f64>,
    w: ArrayView1<f64>,
) -> Result<(Array1<f64>, Tape)> {
    if net.kind() != NetKind::Lesita {
        return Err(Error::InvalidParameter("forward_lesita on a LISTA network".into()));
    }
    let (a, tape) = net.forward(column(y), Some(column(w)))?;
    Ok((a.remove_axis(Axis(1)), tape))
}
