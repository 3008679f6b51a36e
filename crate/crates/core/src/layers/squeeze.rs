//! Space-to-depth reshaping and channel splitting. Both are permutations,
//! so neither touches the log-determinant.

use std::rc::Rc;

use crate::autodiff::{dims4, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Source index of every output element of a 2×2 space-to-depth.
///
/// Output channel `4c + 2dy + dx` at `(y, x)` reads input channel `c` at
/// `(2y + dy, 2x + dx)`.
fn squeeze_index(n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for oc in 0..4 * c {
            let (ch, dy, dx) = (oc / 4, (oc % 4) / 2, oc % 2);
            for y in 0..oh {
                for x in 0..ow {
                    index.push(((b * c + ch) * h + 2 * y + dy) * w + 2 * x + dx);
                }
            }
        }
    }
    index
}

/// `(N, C, H, W) → (N, 4C, H/2, W/2)`.
pub fn squeeze_forward<T: Scalar>(h: &Var<T>) -> Result<Var<T>> {
    let (n, c, hh, w) = dims4("squeeze", &h.shape())?;
    if hh % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "squeeze",
            format!("spatial extents must be even, got {hh}x{w}"),
        ));
    }
    let index: Rc<[usize]> = squeeze_index(n, c, hh, w).into();
    h.gather(index, &[n, 4 * c, hh / 2, w / 2])
}

/// `(N, 4C, H, W) → (N, C, 2H, 2W)`, the exact inverse of [`squeeze_forward`].
pub fn squeeze_inverse<T: Scalar>(h: &Var<T>) -> Result<Var<T>> {
    let (n, c4, hh, w) = dims4("unsqueeze", &h.shape())?;
    if c4 % 4 != 0 {
        return Err(Error::shape(
            "unsqueeze",
            format!("channels must be a multiple of 4, got {c4}"),
        ));
    }
    let c = c4 / 4;
    let forward = squeeze_index(n, c, 2 * hh, 2 * w);
    let mut index = vec![0usize; forward.len()];
    for (out_pos, &src) in forward.iter().enumerate() {
        index[src] = out_pos;
    }
    h.gather(index.into(), &[n, c, 2 * hh, 2 * w])
}

/// Splits channels in half: `(kept, emitted)`.
pub fn split_forward<T: Scalar>(h: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let (_, c, _, _) = dims4("split", &h.shape())?;
    if c % 2 != 0 {
        return Err(Error::shape(
            "split",
            format!("needs an even channel count, got {c}"),
        ));
    }
    Ok((h.narrow_channels(0, c / 2)?, h.narrow_channels(c / 2, c / 2)?))
}

pub fn split_inverse<T: Scalar>(kept: &Var<T>, emitted: &Var<T>) -> Result<Var<T>> {
    Var::concat_channels(&[kept, emitted])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn squeeze_shapes_and_roundtrip() {
        let tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_fn(&[1, 3, 8, 8], |i| i as f64));
        let s = squeeze_forward(&h).unwrap();
        assert_eq!(s.shape(), vec![1, 12, 4, 4]);
        assert_eq!(s.value().sum(), h.value().sum());
        let back = squeeze_inverse(&s).unwrap();
        assert_eq!(*back.value(), *h.value());
        // channel 4c + 2dy + dx holds pixel (2y+dy, 2x+dx) of channel c
        assert_eq!(s.value().data()[(4 + 3) * 16], h.value().data()[64 + 8 + 1]);
    }

    #[test]
    fn odd_extents_rejected() {
        let tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
        assert!(squeeze_forward(&h).is_err());
        let odd = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(split_forward(&odd).is_err());
    }

    #[test]
    fn split_shapes_and_merge() {
        let tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_fn(&[1, 8, 4, 4], |i| (i as f64).sin()));
        let (kept, emitted) = split_forward(&h).unwrap();
        assert_eq!(kept.shape(), vec![1, 4, 4, 4]);
        assert_eq!(emitted.shape(), vec![1, 4, 4, 4]);
        assert_eq!(*split_inverse(&kept, &emitted).unwrap().value(), *h.value());
    }
}
