use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::scalar::Scalar;

use super::LayerIO;

/// Elementwise `z = (h − g) / b` with `b = exp(a)`, where the embedding
/// carries `g` in its first `C` channels and the log-scale `a` in the
/// remaining `C`. Log-determinant: `−Σ log b`.
///
/// With a Laplace prior this single layer is the flow whose NLL is the
/// scale-adaptive L1 loss.
#[derive(Clone, Debug)]
pub struct ScaleBias {
    pub channels: usize,
}

impl ScaleBias {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }

    fn split<T: Scalar>(&self, io: &LayerIO<T>) -> Result<(crate::autodiff::Var<T>, crate::autodiff::Var<T>)> {
        let e = io.require_conditioning("scale_bias")?;
        let c = self.channels;
        if io.activation.shape()[1] != c || e.shape()[1] != 2 * c {
            return Err(Error::shape(
                "scale_bias",
                format!(
                    "expects {c} activation and {} conditioning channels, got {:?} / {:?}",
                    2 * c,
                    io.activation.shape(),
                    e.shape()
                ),
            ));
        }
        let g = e.narrow_channels(0, c)?;
        let b = e.narrow_channels(c, c)?.exp()?;
        Ok((g, b))
    }

    pub fn forward<T: Scalar>(&self, _cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let (g, b) = self.split(&io)?;
        let z = io.activation.sub(&g)?.div(&b)?;
        let logdet = io.logdet.sub(&b.log()?.sum_per_item()?)?;
        Ok(io.with(z, logdet))
    }

    pub fn inverse<T: Scalar>(&self, _cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let (g, b) = self.split(&io)?;
        let y = io.activation.mul(&b)?.add(&g)?;
        let logdet = io.logdet.add(&b.log()?.sum_per_item()?)?;
        Ok(io.with(y, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::Layer;
    use super::*;
    use crate::gradcheck::numeric_jacobian;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jacobian_is_diagonal_inverse_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = ParamStore::<f64>::new();
        let layer = Layer::ScaleBias(ScaleBias::new(2));
        let h = Tensor::from_fn(&[1, 2, 2, 2], |_| rng.random_range(-1.0..1.0));
        let e = Tensor::from_fn(&[1, 4, 2, 2], |_| rng.random_range(-1.0..1.0));
        let jac = numeric_jacobian(|x: &Tensor<f64>| Ok(run(&layer, &store, x, Some(&e), false).0), &h, 1e-5).unwrap();
        for (i, row) in jac.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { (-e.data()[8 + i]).exp() } else { 0.0 };
                assert!((v - want).abs() < 1e-9);
            }
        }
        let (analytic, numeric) = logdet_pair(&layer, &store, &h, Some(&e));
        assert!((analytic - numeric).abs() < 1e-9);
        assert!(roundtrip_error(&layer, &store, &h, Some(&e)) < 1e-12);
    }
}
