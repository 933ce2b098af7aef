//! NMSE and PSNR in decibels.

use ndarray::{ArrayBase, ArrayView2, Axis, Data, Dimension, Zip};

use crate::error::{Error, Result};

/// Reported value for a perfect estimate, in place of minus infinity.
pub const NMSE_FLOOR_DB: f64 = -200.0;
/// Reported value for a perfect estimate, in place of plus infinity.
pub const PSNR_CAP_DB: f64 = 200.0;

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{what}: shape {a:?} does not match reference shape {b:?}"
        )));
    }
    Ok(())
}

/// `10 log10(||est - ref||^2 / ||ref||^2)`, floored at [`NMSE_FLOOR_DB`].
pub fn nmse_db<S1, S2, D>(est: &ArrayBase<S1, D>, reference: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    same_shape(est.shape(), reference.shape(), "nmse_db")?;
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::InvalidParameter(
            "nmse_db: reference has zero energy".into(),
        ));
    }
    let err = Zip::from(est)
        .and(reference)
        .fold(0.0, |acc, &e, &r| acc + (e - r) * (e - r));
    Ok(ratio_to_db(err / energy, NMSE_FLOOR_DB))
}

fn ratio_to_db(ratio: f64, floor: f64) -> f64 {
    if ratio <= 0.0 {
        floor
    } else {
        (10.0 * ratio.log10()).max(floor)
    }
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_db<S1, S2, D>(
    est: &ArrayBase<S1, D>,
    reference: &ArrayBase<S2, D>,
    peak: f64,
) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    same_shape(est.shape(), reference.shape(), "psnr_db")?;
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "psnr_db: peak must be positive, got {peak}"
        )));
    }
    if reference.is_empty() {
        return Err(Error::Dimension("psnr_db: empty input".into()));
    }
    let sse = Zip::from(est)
        .and(reference)
        .fold(0.0, |acc, &e, &r| acc + (e - r) * (e - r));
    let mse = sse / reference.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Dataset-level NMSE over column-stacked samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmseSummary {
    /// Mean of the per-sample dB values (the reported figure).
    pub mean_db: f64,
    /// dB of the summed error energy over the summed reference energy.
    pub ratio_of_sums_db: f64,
    pub count: usize,
}

/// Per-sample NMSE over the columns of `est` / `reference`.
pub fn nmse_db_columns(est: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<NmseSummary> {
    same_shape(est.shape(), reference.shape(), "nmse_db_columns")?;
    let count = reference.ncols();
    if count == 0 {
        return Err(Error::Dimension("nmse_db_columns: no samples".into()));
    }
    let mut sum_db = 0.0;
    let (mut err_total, mut energy_total) = (0.0, 0.0);
    for (e, r) in est.axis_iter(Axis(1)).zip(reference.axis_iter(Axis(1))) {
        sum_db += nmse_db(&e, &r)?;
        err_total += Zip::from(&e).and(&r).fold(0.0, |a, &x, &y| a + (x - y) * (x - y));
        energy_total += r.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(NmseSummary {
        mean_db: sum_db / count as f64,
        ratio_of_sums_db: ratio_to_db(err_total / energy_total, NMSE_FLOOR_DB),
        count,
    })
}
