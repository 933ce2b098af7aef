//! Composite models: the LeSITA autoencoder, which learns coupled codes of a
//! target signal and its side information, and the compressed-sensing
//! reconstructor built from it.
//!
//! Both share the same three parts: a LISTA network (SINET) that maps the
//! side-information signal `z` to a code `w`, a LeSITA encoder guided by `w`,
//! and a free linear decoder `x_hat = D alpha`. The reconstructor adds a
//! measurement matrix `Phi` in front of the encoder.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::ParamBlocks;
use crate::training::{
    backward, l2_loss_grad, loss_couple_l1, loss_couple_l1_grad, loss_recon_l2, L2Variant,
    LossReport, TrainConfig, TrainData, Trainable,
};
use crate::unfolded::{init_from_operator, NetKind, Tape, UnfoldedNetwork};

/// Gaussian matrix with i.i.d. `N(0, scale^2)` entries.
pub(crate) fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

/// Side-information encoder: a LISTA network from `z` (length `d`) to the
/// code `w` (length `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct SiNet {
    pub net: UnfoldedNetwork,
}

impl SiNet {
    pub fn new(net: UnfoldedNetwork) -> Result<Self> {
        if net.kind() != NetKind::Lista {
            return Err(Error::InvalidParameter("SINET must be a LISTA network".into()));
        }
        Ok(Self { net })
    }

    pub fn input_len(&self) -> usize {
        self.net.input_len()
    }

    pub fn code_len(&self) -> usize {
        self.net.code_len()
    }

    pub fn infer(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.infer(z, None)
    }
}

/// Column-stacked pairs of target signals `x` (`n x J`) and side-information
/// signals `z` (`d x J`).
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub x: Array2<f64>,
    pub z: Array2<f64>,
}

impl PairDataset {
    pub fn new(x: Array2<f64>, z: Array2<f64>) -> Result<Self> {
        if x.ncols() != z.ncols() {
            return Err(Error::Dimension(format!(
                "PairDataset: {} targets but {} side-information signals",
                x.ncols(),
                z.ncols()
            )));
        }
        Ok(Self { x, z })
    }

    pub fn select(&self, idx: &[usize]) -> PairDataset {
        PairDataset {
            x: self.x.select(Axis(1), idx),
            z: self.z.select(Axis(1), idx),
        }
    }
}

impl TrainData for PairDataset {
    fn len(&self) -> usize {
        self.x.ncols()
    }
}

/// Outputs of a composite forward pass, column-stacked.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub x_hat: Array2<f64>,
    pub alpha: Array2<f64>,
    pub w: Array2<f64>,
}

/// Tapes of the two unfolded networks inside a composite.
#[derive(Debug, Clone)]
pub struct PipelineTapes {
    pub encoder: Tape,
    pub sinet: Tape,
}

/// Hyperparameters for building a fresh autoencoder.
#[derive(Debug, Clone, Copy)]
pub struct AutoencoderInit {
    /// Target signal length.
    pub n: usize,
    /// Side-information signal length.
    pub d: usize,
    /// Code length.
    pub k: usize,
    pub depth: usize,
    pub si_depth: usize,
    /// Sparsity weight used to set the initial thresholds.
    pub lambda: f64,
    pub l2_variant: L2Variant,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeSITAAutoencoder {
    encoder: UnfoldedNetwork,
    decoder: Array2<f64>,
    sinet: SiNet,
    l2_variant: L2Variant,
}

fn check_chain(encoder: &UnfoldedNetwork, decoder: &Array2<f64>, sinet: &SiNet) -> Result<()> {
    if encoder.kind() != NetKind::Lesita {
        return Err(Error::InvalidParameter("main encoder must be a LeSITA network".into()));
    }
    let k = encoder.code_len();
    if decoder.ncols() != k || sinet.code_len() != k {
        return Err(Error::Dimension(format!(
            "code lengths disagree: encoder {k}, decoder {}, SINET {}",
            decoder.ncols(),
            sinet.code_len()
        )));
    }
    Ok(())
}

impl LeSITAAutoencoder {
    pub fn new(
        encoder: UnfoldedNetwork,
        decoder: Array2<f64>,
        sinet: SiNet,
        l2_variant: L2Variant,
    ) -> Result<Self> {
        check_chain(&encoder, &decoder, &sinet)?;
        if encoder.input_len() != decoder.nrows() {
            return Err(Error::Dimension(format!(
                "autoencoder input length {} differs from decoder output length {}",
                encoder.input_len(),
                decoder.nrows()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            sinet,
            l2_variant,
        })
    }

    /// Random Gaussian dictionaries (entries `N(0, 1/k)`) for both branches;
    /// each network starts as the unfolded solver for its dictionary.
    pub fn init(p: &AutoencoderInit) -> Result<Self> {
        if p.n == 0 || p.d == 0 || p.k == 0 {
            return Err(Error::InvalidParameter("autoencoder dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let scale = 1.0 / (p.k as f64).sqrt();
        let decoder = gaussian_matrix(p.n, p.k, scale, &mut rng);
        let dz = gaussian_matrix(p.d, p.k, scale, &mut rng);
        let encoder = init_from_operator(NetKind::Lesita, decoder.view(), p.lambda, p.depth, false)?;
        let sinet = SiNet::new(init_from_operator(NetKind::Lista, dz.view(), p.lambda, p.si_depth, false)?)?;
        Self::new(encoder, decoder, sinet, p.l2_variant)
    }

    pub fn encoder(&self) -> &UnfoldedNetwork {
        &self.encoder
    }

    pub fn decoder(&self) -> &Array2<f64> {
        &self.decoder
    }

    pub fn sinet(&self) -> &SiNet {
        &self.sinet
    }

    pub fn l2_variant(&self) -> L2Variant {
        self.l2_variant
    }

    pub fn signal_len(&self) -> usize {
        self.decoder.nrows()
    }

    pub fn side_len(&self) -> usize {
        self.sinet.input_len()
    }

    pub fn code_len(&self) -> usize {
        self.decoder.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<PipelineOutput> {
        check_pair(x, z, self.signal_len(), self.side_len())?;
        let w = self.sinet.infer(z)?;
        let alpha = self.encoder.infer(x, Some(w.view()))?;
        let x_hat = self.decoder.dot(&alpha);
        Ok(PipelineOutput { x_hat, alpha, w })
    }

    pub fn forward_taped(
        &self,
        x: ArrayView2<f64>,
        z: ArrayView2<f64>,
    ) -> Result<(PipelineOutput, PipelineTapes)> {
        check_pair(x, z, self.signal_len(), self.side_len())?;
        let (w, sinet) = self.sinet.net.forward(z, None)?;
        let (alpha, encoder) = self.encoder.forward(x, Some(w.view()))?;
        let x_hat = self.decoder.dot(&alpha);
        Ok((PipelineOutput { x_hat, alpha, w }, PipelineTapes { encoder, sinet }))
    }

    pub(crate) fn from_parts_unchecked(
        encoder: UnfoldedNetwork,
        decoder: Array2<f64>,
        sinet: SiNet,
        l2_variant: L2Variant,
    ) -> Self {
        Self {
            encoder,
            decoder,
            sinet,
            l2_variant,
        }
    }
}

fn check_pair(x: ArrayView2<f64>, z: ArrayView2<f64>, n: usize, d: usize) -> Result<()> {
    if x.nrows() != n || z.nrows() != d || x.ncols() != z.ncols() {
        return Err(Error::Dimension(format!(
            "pair batch {:?} / {:?} does not fit signal length {n} and side length {d}",
            x.dim(),
            z.dim()
        )));
    }
    Ok(())
}

fn decoder_blocks<'a>(
    encoder: &'a UnfoldedNetwork,
    decoder: &'a Array2<f64>,
    sinet: &'a SiNet,
) -> Vec<(String, ArrayViewD<'a, f64>)> {
    let mut out = encoder.named_blocks("encoder.");
    out.push(("decoder.D".to_string(), decoder.view().into_dyn()));
    out.extend(sinet.net.named_blocks("sinet."));
    out
}

fn decoder_blocks_mut<'a>(
    encoder: &'a mut UnfoldedNetwork,
    decoder: &'a mut Array2<f64>,
    sinet: &'a mut SiNet,
) -> Vec<(String, ArrayViewMutD<'a, f64>)> {
    let mut out = encoder.named_blocks_mut("encoder.");
    out.push(("decoder.D".to_string(), decoder.view_mut().into_dyn()));
    out.extend(sinet.net.named_blocks_mut("sinet."));
    out
}

impl ParamBlocks for LeSITAAutoencoder {
    fn blocks(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        decoder_blocks(&self.encoder, &self.decoder, &self.sinet)
    }

    fn blocks_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        decoder_blocks_mut(&mut self.encoder, &mut self.decoder, &mut self.sinet)
    }
}

/// Shared backward pass from `x_hat` and the code-space gradients down to
/// the encoder, decoder and SINET parameters. Returns the parameter
/// gradients and, when asked, the gradient with respect to the encoder
/// input.
struct CompositeGrads {
    encoder: UnfoldedNetwork,
    decoder: Array2<f64>,
    sinet: UnfoldedNetwork,
    input: Option<Array2<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn composite_backward(
    encoder: &UnfoldedNetwork,
    decoder: &Array2<f64>,
    sinet: &SiNet,
    out: &PipelineOutput,
    tapes: &PipelineTapes,
    grad_x_hat: &Array2<f64>,
    mut grad_alpha: Array2<f64>,
    grad_w: Option<Array2<f64>>,
    want_input_grad: bool,
) -> Result<CompositeGrads> {
    let grad_decoder = grad_x_hat.dot(&out.alpha.t());
    general_mat_mul(1.0, &decoder.t(), grad_x_hat, 1.0, &mut grad_alpha);
    let enc = backward(encoder, &tapes.encoder, grad_alpha.view(), want_input_grad)?;
    let mut gw = enc
        .side_info
        .ok_or_else(|| Error::Numerical("encoder returned no side-information gradient".into()))?;
    if let Some(extra) = grad_w {
        gw += &extra;
    }
    let si = backward(&sinet.net, &tapes.sinet, gw.view(), false)?;
    Ok(CompositeGrads {
        encoder: enc.params,
        decoder: grad_decoder,
        sinet: si.params,
        input: enc.input,
    })
}

impl Trainable for LeSITAAutoencoder {
    type Data = PairDataset;

    /// `lambda1 * mean ||x - x_hat||^2 + lambda2 * mean L2(alpha, w)`.
    fn batch_loss(
        &self,
        data: &PairDataset,
        idx: &[usize],
        cfg: &TrainConfig,
        want_grad: bool,
    ) -> Result<(LossReport, Option<Self>)> {
        let batch = data.select(idx);
        let scale = 1.0 / idx.len() as f64;
        let (out, tapes) = if want_grad {
            let (o, t) = self.forward_taped(batch.x.view(), batch.z.view())?;
            (o, Some(t))
        } else {
            (self.forward(batch.x.view(), batch.z.view())?, None)
        };
        let recon = loss_recon_l2(&out.x_hat, &batch.x)? * scale;
        let couple = loss_couple_l1(&out.alpha, &out.w, self.l2_variant)? * scale;
        let report = LossReport::from_terms(&[
            ("recon", cfg.lambda1, recon),
            ("couple", cfg.lambda2, couple),
        ]);
        let Some(tapes) = tapes else {
            return Ok((report, None));
        };
        let mut g_xhat = l2_loss_grad(&out.x_hat, &batch.x)?;
        g_xhat *= cfg.lambda1 * scale;
        let (mut ga, mut gw) = loss_couple_l1_grad(&out.alpha, &out.w, self.l2_variant)?;
        ga *= cfg.lambda2 * scale;
        gw *= cfg.lambda2 * scale;
        let g = composite_backward(
            &self.encoder,
            &self.decoder,
            &self.sinet,
            &out,
            &tapes,
            &g_xhat,
            ga,
            Some(gw),
            false,
        )?;
        let grads = LeSITAAutoencoder::from_parts_unchecked(
            g.encoder,
            g.decoder,
            SiNet { net: g.sinet },
            self.l2_variant,
        );
        Ok((report, Some(grads)))
    }
}

/// How the reconstructor's main encoder is initialized from an autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MainInit {
    /// Fresh unfolded solver for the operator `F = Phi D`.
    #[default]
    Reinit,
    /// Copy the autoencoder's trained encoder; requires a square `Phi`.
    Transfer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeSITAReconstructor {
    phi: Array2<f64>,
    phi_trainable: bool,
    encoder: UnfoldedNetwork,
    decoder: Array2<f64>,
    sinet: SiNet,
}

impl LeSITAReconstructor {
    pub fn new(
        phi: Array2<f64>,
        phi_trainable: bool,
        encoder: UnfoldedNetwork,
        decoder: Array2<f64>,
        sinet: SiNet,
    ) -> Result<Self> {
        check_chain(&encoder, &decoder, &sinet)?;
        let (m, n) = phi.dim();
        if m == 0 || m > n {
            return Err(Error::Dimension(format!(
                "measurement matrix is {m} x {n}; need 1 <= m <= n"
            )));
        }
        if encoder.input_len() != m || decoder.nrows() != n {
            return Err(Error::Dimension(format!(
                "measurement matrix {m} x {n} does not fit encoder input {} / decoder output {}",
                encoder.input_len(),
                decoder.nrows()
            )));
        }
        Ok(Self {
            phi,
            phi_trainable,
            encoder,
            decoder,
            sinet,
        })
    }

    pub fn phi(&self) -> &Array2<f64> {
        &self.phi
    }

    pub fn phi_trainable(&self) -> bool {
        self.phi_trainable
    }

    pub fn set_phi_trainable(&mut self, trainable: bool) {
        self.phi_trainable = trainable;
    }

    pub fn encoder(&self) -> &UnfoldedNetwork {
        &self.encoder
    }

    pub fn decoder(&self) -> &Array2<f64> {
        &self.decoder
    }

    pub fn sinet(&self) -> &SiNet {
        &self.sinet
    }

    pub fn signal_len(&self) -> usize {
        self.phi.ncols()
    }

    pub fn measurement_len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn side_len(&self) -> usize {
        self.sinet.input_len()
    }

    /// Noiseless measurements `Phi x`.
    pub fn measure(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.signal_len() {
            return Err(Error::Dimension(format!(
                "signal has {} rows, expected {}",
                x.nrows(),
                self.signal_len()
            )));
        }
        Ok(self.phi.dot(&x))
    }

    /// Reconstruction from measurements `y` (`m x B`) and side information.
    pub fn forward(&self, y: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<PipelineOutput> {
        check_pair(y, z, self.measurement_len(), self.side_len())?;
        let w = self.sinet.infer(z)?;
        let alpha = self.encoder.infer(y, Some(w.view()))?;
        let x_hat = self.decoder.dot(&alpha);
        Ok(PipelineOutput { x_hat, alpha, w })
    }

    pub fn forward_taped(
        &self,
        y: ArrayView2<f64>,
        z: ArrayView2<f64>,
    ) -> Result<(PipelineOutput, PipelineTapes)> {
        check_pair(y, z, self.measurement_len(), self.side_len())?;
        let (w, sinet) = self.sinet.net.forward(z, None)?;
        let (alpha, encoder) = self.encoder.forward(y, Some(w.view()))?;
        let x_hat = self.decoder.dot(&alpha);
        Ok((PipelineOutput { x_hat, alpha, w }, PipelineTapes { encoder, sinet }))
    }
}

impl ParamBlocks for LeSITAReconstructor {
    fn blocks(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![("phi".to_string(), self.phi.view().into_dyn())];
        out.extend(decoder_blocks(&self.encoder, &self.decoder, &self.sinet));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![("phi".to_string(), self.phi.view_mut().into_dyn())];
        out.extend(decoder_blocks_mut(&mut self.encoder, &mut self.decoder, &mut self.sinet));
        out
    }

    fn is_frozen(&self, name: &str) -> bool {
        name == "phi" && !self.phi_trainable
    }
}

impl Trainable for LeSITAReconstructor {
    type Data = PairDataset;

    /// Mean squared reconstruction error of `x` from `Phi x` and `z`.
    fn batch_loss(
        &self,
        data: &PairDataset,
        idx: &[usize],
        _cfg: &TrainConfig,
        want_grad: bool,
    ) -> Result<(LossReport, Option<Self>)> {
        let batch = data.select(idx);
        let scale = 1.0 / idx.len() as f64;
        let y = self.measure(batch.x.view())?;
        if !want_grad {
            let out = self.forward(y.view(), batch.z.view())?;
            let recon = loss_recon_l2(&out.x_hat, &batch.x)? * scale;
            return Ok((LossReport::from_terms(&[("recon", 1.0, recon)]), None));
        }
        let (out, tapes) = self.forward_taped(y.view(), batch.z.view())?;
        let recon = loss_recon_l2(&out.x_hat, &batch.x)? * scale;
        let mut g_xhat = l2_loss_grad(&out.x_hat, &batch.x)?;
        g_xhat *= scale;
        let ga = Array2::zeros(out.alpha.dim());
        let g = composite_backward(
            &self.encoder,
            &self.decoder,
            &self.sinet,
            &out,
            &tapes,
            &g_xhat,
            ga,
            None,
            self.phi_trainable,
        )?;
        let grad_phi = match g.input {
            Some(gy) => gy.dot(&batch.x.t()),
            None => Array2::zeros(self.phi.dim()),
        };
        let grads = LeSITAReconstructor {
            phi: grad_phi,
            phi_trainable: self.phi_trainable,
            encoder: g.encoder,
            decoder: g.decoder,
            sinet: SiNet { net: g.sinet },
        };
        Ok((LossReport::from_terms(&[("recon", 1.0, recon)]), Some(grads)))
    }
}

/// Builds a reconstructor from a trained autoencoder: SINET and the decoder
/// are copied, and the main encoder is set up according to `init`.
pub fn reconstructor_from_autoencoder(
    ae: &LeSITAAutoencoder,
    phi_init: Array2<f64>,
    depth: usize,
    lambda: f64,
    init: MainInit,
) -> Result<LeSITAReconstructor> {
    let (m, n) = phi_init.dim();
    if n != ae.signal_len() {
        return Err(Error::Dimension(format!(
            "measurement matrix has {n} columns but the autoencoder signal length is {}",
            ae.signal_len()
        )));
    }
    let encoder = match init {
        MainInit::Reinit => {
            let f = phi_init.dot(&ae.decoder);
            init_from_operator(NetKind::Lesita, f.view(), lambda, depth, false)?
        }
        MainInit::Transfer => {
            if m != n {
                return Err(Error::Dimension(format!(
                    "encoder transfer needs a square measurement matrix, got {m} x {n}"
                )));
            }
            if depth != ae.encoder.depth() {
                return Err(Error::InvalidParameter(format!(
                    "encoder transfer needs depth {}, got {depth}",
                    ae.encoder.depth()
                )));
            }
            ae.encoder.clone()
        }
    };
    LeSITAReconstructor::new(phi_init, true, encoder, ae.decoder.clone(), ae.sinet.clone())
}

/// Gaussian measurement matrix with `N(0, 1/m)` entries.
pub fn gaussian_measurement(m: usize, n: usize, seed: u64) -> Result<Array2<f64>> {
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!(
            "measurement size m = {m} must satisfy 1 <= m <= n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gaussian_matrix(m, n, 1.0 / (m as f64).sqrt(), &mut rng))
}
