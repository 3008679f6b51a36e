//! MATLAB-style bicubic resizing: Keys kernel with `a = −0.5`, kernel
//! widened by the scale factor when shrinking, edge replication, and pixel
//! centres aligned so output `i` samples input `(i + 0.5)·s − 0.5`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Per-output-sample `(source index, weight)` lists along one axis.
///
/// `scale` is `out_len / in_len`. Weights of every row sum to one.
pub fn resize_weights(in_len: usize, out_len: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let antialias = scale < 1.0;
    let kernel_width = if antialias { 4.0 / scale } else { 4.0 };
    let taps = kernel_width.ceil() as i64 + 2;
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let left = (u - kernel_width / 2.0).floor() as i64;
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(taps as usize);
            let mut total = 0.0;
            for j in 0..taps {
                let idx = left + j;
                let w = if antialias {
                    scale * cubic(scale * (u - idx as f64))
                } else {
                    cubic(u - idx as f64)
                };
                if w == 0.0 {
                    continue;
                }
                total += w;
                let clamped = idx.clamp(0, in_len as i64 - 1) as usize;
                match row.iter_mut().find(|(s, _)| *s == clamped) {
                    Some(entry) => entry.1 += w,
                    None => row.push((clamped, w)),
                }
            }
            for entry in &mut row {
                entry.1 /= total;
            }
            row
        })
        .collect()
}

fn resize_axes<T: Scalar>(img: &Tensor<T>, oh: usize, ow: usize, scale: f64) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.dims4()?;
    let wy = resize_weights(h, oh, scale);
    let wx = resize_weights(w, ow, scale);
    let src = img.data();
    // rows first, then columns; accumulate in f64
    let mut tmp = vec![0f64; n * c * oh * w];
    for nc in 0..n * c {
        for (y, row) in wy.iter().enumerate() {
            let out = &mut tmp[(nc * oh + y) * w..(nc * oh + y + 1) * w];
            for &(sy, wt) in row {
                let line = &src[(nc * h + sy) * w..(nc * h + sy + 1) * w];
                for (o, &v) in out.iter_mut().zip(line) {
                    *o += wt * v.to_f64_lossy();
                }
            }
        }
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        for y in 0..oh {
            let line = &tmp[(nc * oh + y) * w..(nc * oh + y + 1) * w];
            for row in &wx {
                out.push(T::of(row.iter().map(|&(sx, wt)| wt * line[sx]).sum()));
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Shrinks an `(N, C, H, W)` image by an integer factor.
pub fn bicubic_downsample<T: Scalar>(img: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.dims4()?;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(
            "bicubic_downsample",
            format!("{h}x{w} is not divisible by {scale}"),
        ));
    }
    resize_axes(img, h / scale, w / scale, 1.0 / scale as f64)
}

/// Enlarges an `(N, C, H, W)` image by an integer factor.
pub fn bicubic_upsample<T: Scalar>(img: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.dims4()?;
    if scale == 0 {
        return Err(Error::shape("bicubic_upsample", "scale must be positive"));
    }
    resize_axes(img, h * scale, w * scale, scale as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_interpolates() {
        assert_eq!(cubic(0.0), 1.0);
        for x in [-2.0, -1.0, 1.0, 2.0, 2.5] {
            assert_eq!(cubic(x), 0.0);
        }
        assert_eq!(cubic(0.5), cubic(-0.5));
    }

    #[test]
    fn weights_partition_unity() {
        for (inl, outl) in [(32, 8), (12, 2), (6, 1), (5, 20), (48, 8)] {
            for row in resize_weights(inl, outl, outl as f64 / inl as f64) {
                let s: f64 = row.iter().map(|e| e.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_and_ramp() {
        let c = Tensor::<f64>::full(&[1, 2, 16, 16], 0.37);
        let d = bicubic_downsample(&c, 4).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        let ramp = Tensor::<f64>::from_fn(&[1, 1, 4, 64], |i| (i % 64) as f64);
        let d = bicubic_downsample(&ramp, 4).unwrap();
        // interior outputs sit at source coordinate 4i + 1.5
        for i in 2..14 {
            assert!((d.data()[i] - (4.0 * i as f64 + 1.5)).abs() < 1e-10);
        }
        assert!(bicubic_downsample(&ramp, 3).is_err());
    }

    #[test]
    fn upsample_then_downsample_is_close() {
        let img = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| ((i % 8) as f64 * 0.3).sin() * 0.5 + 0.5);
        let up = bicubic_upsample(&img, 2).unwrap();
        assert_eq!(up.shape(), &[1, 1, 16, 16]);
        let back = bicubic_downsample(&up, 2).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 0.05);
    }
}
