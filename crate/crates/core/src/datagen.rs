//! Synthetic coupled sparse codes, Gaussian dictionaries and measurements,
//! and image patch extraction / reassembly.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipelines::gaussian_matrix;

/// Pairs of sparse codes `(alpha, w)` of length `k` with `s` nonzeros each,
/// `rho` of which sit on shared positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub k: usize,
    pub s: usize,
    pub rho: usize,
    /// Number of samples.
    pub count: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rho > self.s {
            return Err(Error::InvalidParameter(format!(
                "shared support rho = {} exceeds sparsity s = {}",
                self.rho, self.s
            )));
        }
        if self.s > self.k {
            return Err(Error::InvalidParameter(format!(
                "sparsity s = {} exceeds code length k = {}",
                self.s, self.k
            )));
        }
        // The non-shared nonzeros of w avoid the support of alpha entirely.
        if 2 * self.s - self.rho > self.k {
            return Err(Error::InvalidParameter(format!(
                "k = {} leaves no room for {} disjoint side-information nonzeros",
                self.k,
                self.s - self.rho
            )));
        }
        if self.count == 0 {
            return Err(Error::InvalidParameter("sample count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Column-stacked code pairs, `k x count` each.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledCodes {
    pub alpha: Array2<f64>,
    pub w: Array2<f64>,
}

fn nonzero_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v != 0.0 {
            return v;
        }
    }
}

/// Per-sample generator: sample `j` draws from its own ChaCha stream, so the
/// result does not depend on how samples are partitioned.
fn sample_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

/// Generates coupled codes. On a shared position `w[i] = |kappa| alpha[i]`
/// with `kappa ~ N(0, 1)`; the other `s - rho` nonzeros of `w` are standard
/// normal on positions outside the support of `alpha`.
pub fn gen_coupled_codes(spec: &SyntheticSpec) -> Result<CoupledCodes> {
    spec.validate()?;
    let SyntheticSpec { k, s, rho, count, seed } = *spec;
    let mut alpha = Array2::zeros((k, count));
    let mut w = Array2::zeros((k, count));
    for j in 0..count {
        let mut rng = sample_rng(seed, j);
        let pos = sample(&mut rng, k, 2 * s - rho).into_vec();
        for (slot, &i) in pos.iter().enumerate() {
            if slot < s {
                let a = nonzero_normal(&mut rng);
                alpha[[i, j]] = a;
                if slot < rho {
                    w[[i, j]] = nonzero_normal(&mut rng).abs() * a;
                }
            } else {
                w[[i, j]] = nonzero_normal(&mut rng);
            }
        }
    }
    Ok(CoupledCodes { alpha, w })
}

/// Support statistics of a code pair set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportStats {
    pub min_nnz_alpha: usize,
    pub max_nnz_alpha: usize,
    pub min_nnz_w: usize,
    pub max_nnz_w: usize,
    pub min_shared: usize,
    pub max_shared: usize,
    /// Fraction of shared positions where `alpha` and `w` have equal sign.
    pub sign_agreement: f64,
}

pub fn support_stats(codes: &CoupledCodes) -> Result<SupportStats> {
    if codes.alpha.dim() != codes.w.dim() || codes.alpha.ncols() == 0 {
        return Err(Error::Dimension("support_stats: code shapes differ or are empty".into()));
    }
    let mut st = SupportStats {
        min_nnz_alpha: usize::MAX,
        max_nnz_alpha: 0,
        min_nnz_w: usize::MAX,
        max_nnz_w: 0,
        min_shared: usize::MAX,
        max_shared: 0,
        sign_agreement: 1.0,
    };
    let (mut agree, mut shared_total) = (0usize, 0usize);
    for (a, w) in codes.alpha.axis_iter(Axis(1)).zip(codes.w.axis_iter(Axis(1))) {
        let na = a.iter().filter(|v| **v != 0.0).count();
        let nw = w.iter().filter(|v| **v != 0.0).count();
        let mut shared = 0;
        for (&x, &y) in a.iter().zip(w.iter()) {
            if x != 0.0 && y != 0.0 {
                shared += 1;
                if x.signum() == y.signum() {
                    agree += 1;
                }
            }
        }
        shared_total += shared;
        st.min_nnz_alpha = st.min_nnz_alpha.min(na);
        st.max_nnz_alpha = st.max_nnz_alpha.max(na);
        st.min_nnz_w = st.min_nnz_w.min(nw);
        st.max_nnz_w = st.max_nnz_w.max(nw);
        st.min_shared = st.min_shared.min(shared);
        st.max_shared = st.max_shared.max(shared);
    }
    if shared_total > 0 {
        st.sign_agreement = agree as f64 / shared_total as f64;
    }
    Ok(st)
}

/// Random `n x k` dictionary with i.i.d. `N(0, 1/n)` entries (unit expected
/// column norm).
pub fn gen_dictionary(n: usize, k: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 || n > k {
        return Err(Error::InvalidParameter(format!(
            "dictionary must satisfy 1 <= n <= k, got n = {n}, k = {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gaussian_matrix(n, k, 1.0 / (n as f64).sqrt(), &mut rng))
}

/// `y = Phi x + e` with `e ~ N(0, sigma^2)` i.i.d.; `x` is `n x B`.
pub fn measure<R: Rng>(
    x: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if phi.ncols() != x.nrows() {
        return Err(Error::Dimension(format!(
            "measure: Phi is {:?} but the signal has {} rows",
            phi.dim(),
            x.nrows()
        )));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise sigma must be a nonnegative number, got {noise_sigma}"
        )));
    }
    let mut y = phi.dot(&x);
    if noise_sigma > 0.0 {
        y.mapv_inplace(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + noise_sigma * e
        });
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidParameter(format!(
                "patch spec needs 1 <= stride <= patch_size, got stride {} and size {}",
                self.stride, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patch length `patch_size^2`.
    pub fn len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn is_empty(&self) -> bool {
        self.patch_size == 0
    }

    /// Scan geometry for an image of the given size.
    pub fn geometry(&self, height: usize, width: usize) -> Result<PatchGeometry> {
        self.validate()?;
        let p = self.patch_size;
        if height < p || width < p {
            return Err(Error::Data(format!(
                "image {height} x {width} is smaller than the {p} x {p} patch"
            )));
        }
        Ok(PatchGeometry {
            height,
            width,
            patch_size: p,
            row_anchors: anchors(height, p, self.stride),
            col_anchors: anchors(width, p, self.stride),
        })
    }
}

/// Stride-spaced anchors from 0; when the stride does not reach the far edge
/// exactly, one extra anchor at `len - p` covers the remainder.
fn anchors(len: usize, p: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - p).step_by(stride).collect();
    if *out.last().unwrap() != len - p {
        out.push(len - p);
    }
    out
}

/// Top-left corners of the patches covering an image, scanned row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub row_anchors: Vec<usize>,
    pub col_anchors: Vec<usize>,
}

impl PatchGeometry {
    pub fn count(&self) -> usize {
        self.row_anchors.len() * self.col_anchors.len()
    }

    fn corners(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_anchors
            .iter()
            .flat_map(move |&r| self.col_anchors.iter().map(move |&c| (r, c)))
    }
}

/// Patches as columns (`patch_size^2 x count`), each flattened row-major.
pub fn extract_patches(image: ArrayView2<f64>, geom: &PatchGeometry) -> Result<Array2<f64>> {
    if image.dim() != (geom.height, geom.width) {
        return Err(Error::Dimension(format!(
            "image is {:?}, geometry expects {:?}",
            image.dim(),
            (geom.height, geom.width)
        )));
    }
    let p = geom.patch_size;
    let mut out = Array2::zeros((p * p, geom.count()));
    for (j, (r, c)) in geom.corners().enumerate() {
        let patch = image.slice(s![r..r + p, c..c + p]);
        for (dst, &v) in out.column_mut(j).iter_mut().zip(patch.iter()) {
            *dst = v;
        }
    }
    Ok(out)
}

/// Inverse of [`extract_patches`]: every pixel becomes the mean of the
/// patch values covering it. A running mean is used so that identical
/// overlapping values reproduce the pixel exactly.
pub fn assemble_patches(patches: ArrayView2<f64>, geom: &PatchGeometry) -> Result<Array2<f64>> {
    let p = geom.patch_size;
    if patches.dim() != (p * p, geom.count()) {
        return Err(Error::Dimension(format!(
            "patch matrix is {:?}, geometry expects {:?}",
            patches.dim(),
            (p * p, geom.count())
        )));
    }
    let mut img = Array2::<f64>::zeros((geom.height, geom.width));
    let mut cover = Array2::<u32>::zeros((geom.height, geom.width));
    for (j, (r, c)) in geom.corners().enumerate() {
        let col = patches.column(j);
        for a in 0..p {
            for b in 0..p {
                let v = col[a * p + b];
                let n = &mut cover[[r + a, c + b]];
                *n += 1;
                let m = &mut img[[r + a, c + b]];
                *m += (v - *m) / f64::from(*n);
            }
        }
    }
    if cover.iter().any(|&n| n == 0) {
        return Err(Error::Data("patch geometry leaves pixels uncovered".into()));
    }
    Ok(img)
}

/// Patches of two aligned images at the same `count` random offsets.
pub fn sample_patch_pairs<R: Rng>(
    target: ArrayView2<f64>,
    side: ArrayView2<f64>,
    patch_size: usize,
    count: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if target.dim() != side.dim() {
        return Err(Error::Data(format!(
            "image pair is not aligned: {:?} vs {:?}",
            target.dim(),
            side.dim()
        )));
    }
    let (h, w) = target.dim();
    let p = patch_size;
    if p == 0 || h < p || w < p {
        return Err(Error::Data(format!(
            "image {h} x {w} is smaller than the {p} x {p} patch"
        )));
    }
    let mut xs = Array2::zeros((p * p, count));
    let mut zs = Array2::zeros((p * p, count));
    for j in 0..count {
        let r = rng.random_range(0..=h - p);
        let c = rng.random_range(0..=w - p);
        for (dst, &v) in xs.column_mut(j).iter_mut().zip(target.slice(s![r..r + p, c..c + p]).iter()) {
            *dst = v;
        }
        for (dst, &v) in zs.column_mut(j).iter_mut().zip(side.slice(s![r..r + p, c..c + p]).iter()) {
            *dst = v;
        }
    }
    Ok((xs, zs))
}

/// Central `size x size` region.
pub fn center_crop(image: ArrayView2<f64>, size: usize) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if size == 0 || size > h || size > w {
        return Err(Error::Data(format!(
            "cannot crop {size} x {size} from a {h} x {w} image"
        )));
    }
    let (r, c) = ((h - size) / 2, (w - size) / 2);
    Ok(image.slice(s![r..r + size, c..c + size]).to_owned())
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` of an `h x w x 3` image.
pub fn rgb_to_gray(rgb: ArrayView3<f64>) -> Result<Array2<f64>> {
    if rgb.dim().2 != 3 {
        return Err(Error::Dimension(format!(
            "expected 3 colour channels, got {}",
            rgb.dim().2
        )));
    }
    Ok(rgb.map_axis(Axis(2), |px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]))
}

/// Subtracts each column's mean in place and returns the means.
pub fn remove_column_means(patches: &mut Array2<f64>) -> Array1<f64> {
    let means = patches.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(patches.ncols()));
    for (mut col, &m) in patches.axis_iter_mut(Axis(1)).zip(means.iter()) {
        col -= m;
    }
    means
}

pub fn restore_column_means(patches: &mut Array2<f64>, means: &Array1<f64>) -> Result<()> {
    if means.len() != patches.ncols() {
        return Err(Error::Dimension("restore_column_means: mean count".into()));
    }
    for (mut col, &m) in patches.axis_iter_mut(Axis(1)).zip(means.iter()) {
        col += m;
    }
    Ok(())
}

/// A pair of aligned synthetic images standing in for a target modality and
/// its side information: both share the same region layout and edges, but
/// each region has its own, partially correlated, intensity and texture in
/// the two modalities. Values lie in `[0, 1]`.
pub fn synthetic_image_pair(size: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    if size < 8 {
        return Err(Error::InvalidParameter("synthetic images must be at least 8 x 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;
    let mut target = Array2::from_elem((size, size), 0.0);
    let mut side = Array2::from_elem((size, size), 0.0);

    // Background: a gentle ramp with independent slopes per modality.
    let base_t: f64 = rng.random_range(0.2..0.5);
    let base_s: f64 = 0.6 * base_t + rng.random_range(0.05..0.3);
    let (gx, gy): (f64, f64) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let (hx, hy): (f64, f64) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    for ((i, j), v) in target.indexed_iter_mut() {
        *v = base_t + gx * i as f64 / sz + gy * j as f64 / sz;
    }
    for ((i, j), v) in side.indexed_iter_mut() {
        *v = base_s + hx * i as f64 / sz + hy * j as f64 / sz;
    }

    // Overlapping regions painted in order; shapes are shared.
    let regions = 6 + (size / 16);
    for _ in 0..regions {
        let cy = rng.random_range(0.0..sz);
        let cx = rng.random_range(0.0..sz);
        let ry = rng.random_range(0.08..0.3) * sz;
        let rx = rng.random_range(0.08..0.3) * sz;
        let ellipse = rng.random_bool(0.5);
        let it: f64 = rng.random_range(0.1..0.9);
        let is: f64 = (0.7 * it + 0.3 * rng.random_range(0.1..0.9)).clamp(0.0, 1.0);
        let freq: f64 = rng.random_range(0.2..0.8);
        let amp_t: f64 = rng.random_range(0.0..0.06);
        let amp_s: f64 = rng.random_range(0.0..0.06);
        for i in 0..size {
            for j in 0..size {
                let dy = (i as f64 - cy) / ry;
                let dx = (j as f64 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    let tex = (freq * i as f64).sin() * (freq * 0.7 * j as f64).cos();
                    target[[i, j]] = it + amp_t * tex;
                    side[[i, j]] = is + amp_s * tex;
                }
            }
        }
    }
    for v in target.iter_mut().chain(side.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((target, side))
}
