use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{CondNet, Ctx};
use crate::params::ParamStore;
use crate::scalar::Scalar;

use super::{sigmoid_inverse_scale, LayerIO};

/// Affine transform of every channel, `h' = s ⊙ h + t`, where `(s̃, t)` are
/// predicted from the embedding alone. Since nothing depends on `h`, the
/// inverse reuses the exact same `(s, t)`.
#[derive(Clone, Debug)]
pub struct AffineInjector {
    pub net: CondNet,
    pub channels: usize,
    pub cond_channels: usize,
}

impl AffineInjector {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        if cond_channels == 0 {
            return Err(Error::shape("injector", "needs conditioning channels"));
        }
        Ok(Self {
            net: CondNet::new(store, rng, &format!("{name}/net"), cond_channels, hidden, 2 * channels)?,
            channels,
            cond_channels,
        })
    }

    fn affine<T: Scalar>(&self, cx: &Ctx<T>, io: &LayerIO<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
        let c = io.activation.shape()[1];
        if c != self.channels {
            return Err(Error::shape(
                "injector",
                format!("built for {} channels, got {c}", self.channels),
            ));
        }
        let e = io.require_conditioning("injector")?;
        let out = self.net.forward(cx, e)?;
        let (s, log_s) = sigmoid_inverse_scale(&out.narrow_channels(0, c)?)?;
        let t = out.narrow_channels(c, c)?;
        Ok((s, log_s, t))
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let (s, log_s, t) = self.affine(cx, &io)?;
        let out = io.activation.mul(&s)?.add(&t)?;
        let logdet = io.logdet.add(&log_s.sum_per_item()?)?;
        Ok(io.with(out, logdet))
    }

    pub fn inverse<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let (s, log_s, t) = self.affine(cx, &io)?;
        let out = io.activation.sub(&t)?.div(&s)?;
        let logdet = io.logdet.sub(&log_s.sum_per_item()?)?;
        Ok(io.with(out, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::Layer;
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64, c: usize, ce: usize) -> (ParamStore<f64>, AffineInjector, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let inj = AffineInjector::new(&mut store, &mut rng, "inj", c, ce, 6).unwrap();
        (store, inj, rng)
    }

    #[test]
    fn saturated_logits_are_identity() {
        let (mut store, inj, mut rng) = build(1, 2, 3);
        let mut bias = vec![0.0; 4];
        bias[..2].fill(1e6);
        store
            .set_value(inj.net.layers[2].bias, Tensor::new(&[4], bias).unwrap())
            .unwrap();
        let h = Tensor::from_fn(&[1, 2, 2, 2], |_| rng.random_range(-1.0..1.0));
        let e = Tensor::from_fn(&[1, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let (y, ld) = run(&Layer::Injector(inj), &store, &h, Some(&e), false);
        assert!(y.max_abs_diff(&h).unwrap() < 1e-6);
        assert!(ld.data()[0].abs() < 3e-6);
    }

    #[test]
    fn constant_doubling_logdet() {
        let (store, inj, mut rng) = build(2, 2, 1);
        let h = Tensor::from_fn(&[1, 2, 2, 2], |_| rng.random_range(-1.0..1.0));
        let e = Tensor::from_fn(&[1, 1, 2, 2], |_| rng.random_range(-1.0..1.0));
        let (y, ld) = run(&Layer::Injector(inj), &store, &h, Some(&e), false);
        assert_eq!(y, h.scale(2.0));
        assert!((ld.data()[0] - 8.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_under_random_conditioning() {
        let (mut store, inj, mut rng) = build(3, 4, 2);
        for id in inj.net.param_ids() {
            let shape = store.value(id).shape().to_vec();
            store
                .set_value(id, Tensor::from_fn(&shape, |_| rng.random_range(-0.5..0.5)))
                .unwrap();
        }
        let layer = Layer::Injector(inj);
        let h = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let e = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        assert!(roundtrip_error(&layer, &store, &h, Some(&e)) < 1e-10);
        let h1 = h.batch_item(0).unwrap();
        let e1 = e.batch_item(0).unwrap();
        let (analytic, numeric) = logdet_pair(&layer, &store, &h1, Some(&e1));
        assert!((analytic - numeric).abs() < 1e-6);
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let (store, inj, _) = build(4, 2, 1);
        let tape = crate::autodiff::Tape::new();
        let cx = Ctx::new(&tape, &store);
        let h = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let e = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let io = LayerIO::new(h, Some(e)).unwrap();
        assert!(inj.forward(&cx, io).is_err());
    }
}
