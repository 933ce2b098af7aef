//! Losses, reverse-mode gradients through unfolded networks, and a small
//! first-order training loop.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayBase, ArrayView2, Axis, Data, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{zeros_like, ParamBlocks};
use crate::prox::{si_prox_grad_scalar, soft_threshold_grad_scalar, THRESHOLD_FLOOR};
use crate::unfolded::{NetKind, Tape, UnfoldedNetwork};

fn check_shapes(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: shape {a:?} vs {b:?}")));
    }
    Ok(())
}

fn sq_dist<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> f64
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    Zip::from(a).and(b).fold(0.0, |s, &x, &y| s + (x - y) * (x - y))
}

/// Squared l2 distance between estimated and reference codes, summed over
/// every entry (so over the batch as well when given matrices).
pub fn loss_code_l2<S1, S2, D>(alpha_hat: &ArrayBase<S1, D>, alpha: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(alpha_hat.shape(), alpha.shape(), "loss_code_l2")?;
    Ok(sq_dist(alpha_hat, alpha))
}

/// Squared l2 reconstruction error in signal space.
pub fn loss_recon_l2<S1, S2, D>(x_hat: &ArrayBase<S1, D>, x: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(x_hat.shape(), x.shape(), "loss_recon_l2")?;
    Ok(sq_dist(x_hat, x))
}

/// Gradient of either squared-l2 loss with respect to its first argument.
pub fn l2_loss_grad<S1, S2, D>(
    est: &ArrayBase<S1, D>,
    target: &ArrayBase<S2, D>,
) -> Result<ndarray::Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(est.shape(), target.shape(), "l2_loss_grad")?;
    Ok(Zip::from(est).and(target).map_collect(|&e, &t| 2.0 * (e - t)))
}

/// Which latent coupling constraint the autoencoder is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum L2Variant {
    /// `sum ||alpha - w||_1`
    #[serde(rename = "a", alias = "A")]
    A,
    /// `sum ||alpha||_1 + ||w||_1`
    #[serde(rename = "b", alias = "B")]
    B,
}

impl L2Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            L2Variant::A => "a",
            L2Variant::B => "b",
        }
    }
}

impl std::str::FromStr for L2Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(L2Variant::A),
            "b" | "B" => Ok(L2Variant::B),
            _ => Err(Error::Config(format!("unknown l2 variant {s:?}"))),
        }
    }
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Coupling loss between a code and its side-information code.
pub fn loss_couple_l1<S1, S2, D>(
    alpha: &ArrayBase<S1, D>,
    w: &ArrayBase<S2, D>,
    variant: L2Variant,
) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(alpha.shape(), w.shape(), "loss_couple_l1")?;
    Ok(match variant {
        L2Variant::A => Zip::from(alpha).and(w).fold(0.0, |s, &a, &w| s + (a - w).abs()),
        L2Variant::B => {
            alpha.iter().map(|a| a.abs()).sum::<f64>() + w.iter().map(|v| v.abs()).sum::<f64>()
        }
    })
}

/// Subgradients `(d/d alpha, d/d w)` of [`loss_couple_l1`], with `sign(0) = 0`.
pub fn loss_couple_l1_grad<S1, S2, D>(
    alpha: &ArrayBase<S1, D>,
    w: &ArrayBase<S2, D>,
    variant: L2Variant,
) -> Result<(ndarray::Array<f64, D>, ndarray::Array<f64, D>)>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(alpha.shape(), w.shape(), "loss_couple_l1_grad")?;
    Ok(match variant {
        L2Variant::A => {
            let ga = Zip::from(alpha).and(w).map_collect(|&a, &w| sign0(a - w));
            let gw = ga.mapv(|v| -v);
            (ga, gw)
        }
        L2Variant::B => (alpha.map(|&a| sign0(a)), w.map(|&v| sign0(v))),
    })
}

/// Loss value broken down into named, weighted terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn from_terms(terms: &[(&str, f64, f64)]) -> Self {
        let mut r = LossReport::default();
        for &(name, weight, value) in terms {
            r.components.insert(name.to_string(), value);
            r.weights.insert(name.to_string(), weight);
        }
        r.total = terms.iter().map(|&(_, w, v)| w * v).sum();
        r
    }

    fn accumulate(&mut self, other: &LossReport, scale: f64) {
        self.total += scale * other.total;
        for (k, v) in &other.components {
            *self.components.entry(k.clone()).or_insert(0.0) += scale * v;
        }
        for (k, v) in &other.weights {
            self.weights.insert(k.clone(), *v);
        }
    }
}

/// Gradients produced by [`backward`].
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    /// Same layout as the network (one block when tied).
    pub params: UnfoldedNetwork,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Array2<f64>>,
    /// Gradient with respect to the side-information code (LeSITA only).
    pub side_info: Option<Array2<f64>>,
}

/// Reverse-mode pass through the layers recorded in `tape`.
///
/// `grad_alpha` is the loss gradient with respect to the network output. The
/// input gradient is only formed when `want_input_grad` is set, since it
/// costs one extra product per layer.
pub fn backward(
    net: &UnfoldedNetwork,
    tape: &Tape,
    grad_alpha: ArrayView2<f64>,
    want_input_grad: bool,
) -> Result<NetworkGrads> {
    let depth = net.depth();
    let k = net.code_len();
    let b = tape.batch_len();
    if tape.kind != net.kind()
        || tape.depth() != depth
        || tape.input.nrows() != net.input_len()
        || tape.pre.first().map(|u| u.nrows()) != Some(k)
    {
        return Err(Error::InvalidParameter(
            "backward: tape was recorded by a different network".into(),
        ));
    }
    for t in 0..depth {
        if tape.thresholds[t] != net.layer(t).effective_threshold() {
            return Err(Error::InvalidParameter(format!(
                "backward: stale tape, layer {t} threshold changed since the forward pass"
            )));
        }
    }
    if grad_alpha.dim() != (k, b) {
        return Err(Error::Dimension(format!(
            "backward: output gradient is {:?}, expected {:?}",
            grad_alpha.dim(),
            (k, b)
        )));
    }

    let mut grads = zeros_like(net);
    let mut grad_input = want_input_grad.then(|| Array2::<f64>::zeros(tape.input.dim()));
    let mut grad_side = tape.side_info.as_ref().map(|w| Array2::<f64>::zeros(w.dim()));
    let mut g = grad_alpha.to_owned();
    let mut delta = Array2::<f64>::zeros((k, b));

    for t in (0..depth).rev() {
        let u = &tape.pre[t];
        let thr = tape.thresholds[t];
        let layer = net.layer(t);
        let slot = if net.tied() { 0 } else { t };
        let mut dthr = 0.0;
        match (&tape.side_info, grad_side.as_mut()) {
            (Some(w), Some(gw)) => {
                Zip::from(&mut delta).and(&g).and(u).and(w).and(gw).for_each(
                    |d, &g, &u, &w, gw| {
                        let (du, dw, dmu) = si_prox_grad_scalar(u, w, thr);
                        *d = g * du;
                        *gw += g * dw;
                        dthr += g * dmu;
                    },
                );
            }
            _ => {
                Zip::from(&mut delta).and(&g).and(u).for_each(|d, &g, &u| {
                    let (du, dt) = soft_threshold_grad_scalar(u, thr);
                    *d = g * du;
                    dthr += g * dt;
                });
            }
        }
        let block = &mut grads.param_layers_mut()[slot];
        if layer.threshold > THRESHOLD_FLOOR {
            block.threshold += dthr;
        }
        general_mat_mul(1.0, &delta, &tape.input.t(), 1.0, &mut block.input);
        if let Some(gi) = grad_input.as_mut() {
            general_mat_mul(1.0, &layer.input.t(), &delta, 1.0, gi);
        }
        if t > 0 {
            let prev = &tape.outputs[t - 1];
            general_mat_mul(1.0, &delta, &prev.t(), 1.0, &mut block.recurrent);
            g = layer.recurrent.t().dot(&delta);
        }
    }
    Ok(NetworkGrads {
        params: grads,
        input: grad_input,
        side_info: grad_side,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-epoch multiplier on the learning rate; 1 keeps it constant.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the reconstruction term.
    pub lambda1: f64,
    /// Weight of the latent coupling term.
    pub lambda2: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_decay: 1.0,
            batch_size: 128,
            epochs: 10,
            lambda1: 0.5,
            lambda2: 0.5,
            seed: 0,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config("invalid Adam hyperparameters".into()));
            }
        }
        Ok(())
    }
}

/// First-order optimizer over [`ParamBlocks`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<ndarray::ArrayD<f64>>,
    second: Vec<ndarray::ArrayD<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step<M: ParamBlocks>(&mut self, model: &mut M, grads: &M) -> Result<()> {
        let frozen: Vec<bool> = model.blocks().iter().map(|(n, _)| model.is_frozen(n)).collect();
        let gblocks = grads.blocks();
        let mut pblocks = model.blocks_mut();
        if gblocks.len() != pblocks.len() {
            return Err(Error::Dimension("optimizer: gradient layout mismatch".into()));
        }
        self.step += 1;
        if self.first.is_empty() {
            if let OptimizerKind::Adam { .. } = self.kind {
                self.first = gblocks.iter().map(|(_, g)| ndarray::ArrayD::zeros(g.shape())).collect();
                self.second = self.first.clone();
            }
        }
        for (i, ((_, p), (_, g))) in pblocks.iter_mut().zip(gblocks.iter()).enumerate() {
            if frozen[i] {
                continue;
            }
            if p.shape() != g.shape() {
                return Err(Error::Dimension("optimizer: gradient shape mismatch".into()));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.lr;
                    Zip::from(p).and(g).for_each(|p, &g| *p -= lr * g);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.step as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let lr = self.lr;
                    Zip::from(p)
                        .and(g)
                        .and(&mut self.first[i])
                        .and(&mut self.second[i])
                        .for_each(|p, &g, m, v| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }
}

/// A collection of training samples addressed by index.
pub trait TrainData {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A model that can report a mean batch loss and its gradient.
pub trait Trainable: ParamBlocks + Clone {
    type Data: TrainData;

    /// Mean loss over the samples `idx` of `data`; the gradient, when
    /// requested, has the same layout as `self`.
    fn batch_loss(
        &self,
        data: &Self::Data,
        idx: &[usize],
        cfg: &TrainConfig,
        want_grad: bool,
    ) -> Result<(LossReport, Option<Self>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossReport,
    pub validation: LossReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = the initial parameters).
    pub best_epoch: usize,
}

impl TrainingHistory {
    /// CSV with header `epoch,train_loss,val_loss,train_<term>...,val_<term>...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let names: Vec<String> = self
            .records
            .first()
            .map(|r| r.train.components.keys().cloned().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_loss".into()];
        header.extend(names.iter().map(|n| format!("train_{n}")));
        header.extend(names.iter().map(|n| format!("val_{n}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                format!("{:e}", r.train.total),
                format!("{:e}", r.validation.total),
            ];
            for n in &names {
                row.push(format!("{:e}", r.train.components.get(n).copied().unwrap_or(f64::NAN)));
            }
            for n in &names {
                row.push(format!(
                    "{:e}",
                    r.validation.components.get(n).copied().unwrap_or(f64::NAN)
                ));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Mean loss over a whole dataset, evaluated in chunks.
pub fn evaluate<M: Trainable>(model: &M, data: &M::Data, cfg: &TrainConfig) -> Result<LossReport> {
    let n = data.len();
    let mut total = LossReport::default();
    if n == 0 {
        return Ok(total);
    }
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.batch_size.max(256)) {
        let (r, _) = model.batch_loss(data, chunk, cfg, false)?;
        total.accumulate(&r, chunk.len() as f64 / n as f64);
    }
    Ok(total)
}

pub struct TrainOutcome<M> {
    /// Parameters with the lowest validation loss seen.
    pub model: M,
    pub history: TrainingHistory,
}

/// Minibatch training with per-epoch validation. The returned model is the
/// best-validation snapshot (the training loss stands in when `val` is empty).
pub fn train<M: Trainable>(
    model: &M,
    train_data: &M::Data,
    val_data: &M::Data,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("train: empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut current = model.clone();
    let mut best = model.clone();
    let mut history = TrainingHistory::default();
    let score = |r: &LossReport, t: &LossReport| if val_data.is_empty() { t.total } else { r.total };
    let mut best_score = if val_data.is_empty() {
        f64::INFINITY
    } else {
        evaluate(&current, val_data, cfg)?.total
    };

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        opt.set_learning_rate(cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1));
        let mut running = LossReport::default();
        for chunk in order.chunks(cfg.batch_size) {
            let (report, grad) = current.batch_loss(train_data, chunk, cfg, true)?;
            if !report.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}; the learning rate ({}) is likely too high",
                    cfg.learning_rate
                )));
            }
            let grad = grad.ok_or_else(|| Error::Numerical("model returned no gradient".into()))?;
            opt.step(&mut current, &grad)?;
            running.accumulate(&report, chunk.len() as f64 / order.len() as f64);
        }
        let validation = evaluate(&current, val_data, cfg)?;
        let s = score(&validation, &running);
        if !s.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        if s < best_score {
            best_score = s;
            best = current.clone();
            history.best_epoch = epoch;
        }
        history.records.push(EpochRecord {
            epoch,
            train: running,
            validation,
        });
    }
    Ok(TrainOutcome {
        model: best,
        history,
    })
}

/// Column-stacked sparse-coding samples: inputs, optional side-information
/// codes, and target codes.
#[derive(Debug, Clone)]
pub struct CodeDataset {
    pub inputs: Array2<f64>,
    pub side_info: Option<Array2<f64>>,
    pub codes: Array2<f64>,
}

impl CodeDataset {
    pub fn new(inputs: Array2<f64>, side_info: Option<Array2<f64>>, codes: Array2<f64>) -> Result<Self> {
        if inputs.ncols() != codes.ncols() {
            return Err(Error::Dimension("CodeDataset: sample counts differ".into()));
        }
        if let Some(w) = &side_info {
            if w.dim() != codes.dim() {
                return Err(Error::Dimension("CodeDataset: side information shape".into()));
            }
        }
        Ok(Self {
            inputs,
            side_info,
            codes,
        })
    }

    pub fn select(&self, idx: &[usize]) -> CodeDataset {
        CodeDataset {
            inputs: self.inputs.select(Axis(1), idx),
            side_info: self.side_info.as_ref().map(|w| w.select(Axis(1), idx)),
            codes: self.codes.select(Axis(1), idx),
        }
    }
}

impl TrainData for CodeDataset {
    fn len(&self) -> usize {
        self.codes.ncols()
    }
}

/// An unfolded network trained to regress sparse codes with the squared l2
/// code loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeRegression {
    pub net: UnfoldedNetwork,
}

impl ParamBlocks for CodeRegression {
    fn blocks(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
        self.net.blocks()
    }

    fn blocks_mut(&mut self) -> Vec<(String, ndarray::ArrayViewMutD<'_, f64>)> {
        self.net.blocks_mut()
    }
}

impl CodeRegression {
    pub fn predict(&self, data: &CodeDataset) -> Result<Array2<f64>> {
        let w = match self.net.kind() {
            NetKind::Lista => None,
            NetKind::Lesita => Some(
                data.side_info
                    .as_ref()
                    .ok_or_else(|| Error::Data("LeSITA needs side-information codes".into()))?
                    .view(),
            ),
        };
        self.net.infer(data.inputs.view(), w)
    }
}

impl Trainable for CodeRegression {
    type Data = CodeDataset;

    fn batch_loss(
        &self,
        data: &CodeDataset,
        idx: &[usize],
        _cfg: &TrainConfig,
        want_grad: bool,
    ) -> Result<(LossReport, Option<Self>)> {
        let y = data.inputs.select(Axis(1), idx);
        let target = data.codes.select(Axis(1), idx);
        let w = match self.net.kind() {
            NetKind::Lista => None,
            NetKind::Lesita => Some(
                data.side_info
                    .as_ref()
                    .ok_or_else(|| Error::Data("LeSITA needs side-information codes".into()))?
                    .select(Axis(1), idx),
            ),
        };
        let scale = 1.0 / idx.len() as f64;
        if !want_grad {
            let out = self.net.infer(y.view(), w.as_ref().map(|w| w.view()))?;
            let loss = loss_code_l2(&out, &target)? * scale;
            return Ok((LossReport::from_terms(&[("code", 1.0, loss)]), None));
        }
        let (out, tape) = self.net.forward(y.view(), w.as_ref().map(|w| w.view()))?;
        let loss = loss_code_l2(&out, &target)? * scale;
        let mut g = l2_loss_grad(&out, &target)?;
        g *= scale;
        let grads = backward(&self.net, &tape, g.view(), false)?;
        Ok((
            LossReport::from_terms(&[("code", 1.0, loss)]),
            Some(CodeRegression { net: grads.params }),
        ))
    }
}
