use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::bicubic::bicubic_downsample;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10·log10(peak²/MSE)` over every channel jointly, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::shape("psnr", "empty images"));
    }
    // compensated sum keeps constant differences from drifting in the last bits
    let (mut sse, mut comp) = (0f64, 0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64_lossy() - y.to_f64_lossy();
        let term = d * d;
        let t = sse + term;
        comp += if sse.abs() >= term { (sse - t) + term } else { (term - t) + sse };
        sse = t;
    }
    let sse = sse + comp;
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (2.0 * peak.log10() - mse.log10())).min(PSNR_CAP_DB))
}

/// PSNR between the bicubic downsampling of `sr` and the LR input.
pub fn lr_psnr<T: Scalar>(sr: &Tensor<T>, lr: &Tensor<T>, scale: usize) -> Result<f64> {
    let (_, _, h, w) = sr.dims4()?;
    let (_, _, lh, lw) = lr.dims4()?;
    if h != lh * scale || w != lw * scale {
        return Err(Error::shape(
            "lr_psnr",
            format!("{h}x{w} is not {scale}x of {lh}x{lw}"),
        ));
    }
    psnr(&bicubic_downsample(sr, scale)?, lr, 1.0)
}
