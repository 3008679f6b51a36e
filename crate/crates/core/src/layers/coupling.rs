use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{CondNet, Ctx};
use crate::params::ParamStore;
use crate::scalar::Scalar;

use super::{sigmoid_inverse_scale, LayerIO};

/// Bound applied to the unconstrained scale logits before the sigmoid.
pub const S_TILDE_LIMIT: f64 = 15.0;

/// Conditional affine coupling.
///
/// The lower half of the channels passes through unchanged and, together
/// with the embedding, drives a [`CondNet`] that predicts `(s̃, t)` for the
/// upper half: `h₂' = s ⊙ h₂ + t` with `s = 1/σ(s̃) ∈ (1, ∞)`.
#[derive(Clone, Debug)]
pub struct CondAffineCoupling {
    pub net: CondNet,
    pub channels: usize,
    pub cond_channels: usize,
}

impl CondAffineCoupling {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::shape(
                "coupling",
                format!("needs an even channel count, got {channels}"),
            ));
        }
        let half = channels / 2;
        Ok(Self {
            net: CondNet::new(store, rng, &format!("{name}/net"), half + cond_channels, hidden, channels)?,
            channels,
            cond_channels,
        })
    }

    /// `(s, log s, t)` predicted from the pass-through half.
    fn affine<T: Scalar>(&self, cx: &Ctx<T>, h1: &Var<T>, e: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
        let half = self.channels / 2;
        let input = if self.cond_channels == 0 {
            h1.clone()
        } else {
            Var::concat_channels(&[h1, e])?
        };
        let out = self.net.forward(cx, &input)?;
        let (s, log_s) = sigmoid_inverse_scale(&out.narrow_channels(0, half)?)?;
        let t = out.narrow_channels(half, half)?;
        Ok((s, log_s, t))
    }

    fn check<T: Scalar>(&self, io: &LayerIO<T>) -> Result<Var<T>> {
        let c = io.activation.shape()[1];
        if c != self.channels {
            return Err(Error::shape(
                "coupling",
                format!("built for {} channels, got {c}", self.channels),
            ));
        }
        if self.cond_channels == 0 {
            // unconditional coupling still needs a var for the signature
            return Ok(io.activation.clone());
        }
        let e = io.require_conditioning("coupling")?;
        if e.shape()[1] != self.cond_channels {
            return Err(Error::shape(
                "coupling",
                format!("expects {} conditioning channels, got {}", self.cond_channels, e.shape()[1]),
            ));
        }
        Ok(e.clone())
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let e = self.check(&io)?;
        let half = self.channels / 2;
        let h1 = io.activation.narrow_channels(0, half)?;
        let h2 = io.activation.narrow_channels(half, half)?;
        let (s, log_s, t) = self.affine(cx, &h1, &e)?;
        let h2 = h2.mul(&s)?.add(&t)?;
        let out = Var::concat_channels(&[&h1, &h2])?;
        let logdet = io.logdet.add(&log_s.sum_per_item()?)?;
        Ok(io.with(out, logdet))
    }

    pub fn inverse<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let e = self.check(&io)?;
        let half = self.channels / 2;
        let h1 = io.activation.narrow_channels(0, half)?;
        let h2 = io.activation.narrow_channels(half, half)?;
        let (s, log_s, t) = self.affine(cx, &h1, &e)?;
        let h2 = h2.sub(&t)?.div(&s)?;
        let out = Var::concat_channels(&[&h1, &h2])?;
        let logdet = io.logdet.sub(&log_s.sum_per_item()?)?;
        Ok(io.with(out, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::Layer;
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore<f64>, net: &CondNet, rng: &mut ChaCha8Rng, amp: f64) {
        for id in net.param_ids() {
            let shape = store.value(id).shape().to_vec();
            store
                .set_value(id, Tensor::from_fn(&shape, |_| rng.random_range(-amp..amp)))
                .unwrap();
        }
    }

    #[test]
    fn zero_logits_double_the_coupled_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let c = CondAffineCoupling::new(&mut store, &mut rng, "c", 4, 2, 8).unwrap();
        let layer = Layer::Coupling(c);
        let h = Tensor::from_fn(&[1, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let e = Tensor::from_fn(&[1, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let (y, ld) = run(&layer, &store, &h, Some(&e), false);
        for i in 0..18 {
            assert_eq!(y.data()[i], h.data()[i]);
            assert_eq!(y.data()[18 + i], 2.0 * h.data()[18 + i]);
        }
        assert!((ld.data()[0] - 18.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_logits_approach_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let c = CondAffineCoupling::new(&mut store, &mut rng, "c", 4, 2, 8).unwrap();
        // last layer bias: s̃ channels at +20 (clamped to the limit), t channels at 0
        let bias = c.net.layers[2].bias;
        store
            .set_value(bias, Tensor::new(&[4], vec![20.0, 20.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let layer = Layer::Coupling(c);
        let h = Tensor::from_fn(&[1, 4, 2, 2], |_| rng.random_range(-1.0..1.0));
        let e = Tensor::zeros(&[1, 2, 2, 2]);
        let (y, ld) = run(&layer, &store, &h, Some(&e), false);
        let s = 1.0 + (-S_TILDE_LIMIT).exp();
        assert!(y.max_abs_diff(&h).unwrap() < 1e-6);
        assert!((ld.data()[0] - 8.0 * s.ln()).abs() < 1e-15);
        assert!(ld.data()[0] < 3e-6);
    }

    #[test]
    fn logdet_matches_numeric_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let c = CondAffineCoupling::new(&mut store, &mut rng, "c", 4, 3, 6).unwrap();
        randomize(&mut store, &c.net, &mut rng, 0.5);
        let layer = Layer::Coupling(c);
        let h = Tensor::from_fn(&[1, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let e = Tensor::from_fn(&[1, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let (analytic, numeric) = logdet_pair(&layer, &store, &h, Some(&e));
        assert!((analytic - numeric).abs() < 1e-6, "{analytic} vs {numeric}");
        assert!(roundtrip_error(&layer, &store, &h, Some(&e)) < 1e-12);
    }

    #[test]
    fn odd_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        assert!(CondAffineCoupling::new(&mut store, &mut rng, "c", 3, 2, 4).is_err());
    }

    #[test]
    fn scale_exceeds_one_for_any_logit() {
        let tape = Tape::<f64>::new();
        let st = tape.constant(Tensor::new(&[5], vec![-1e3, -15.0, 0.0, 15.0, 1e3]).unwrap());
        let (s, log_s) = sigmoid_inverse_scale(&st).unwrap();
        assert!(s.value().data().iter().all(|&v| v > 1.0));
        assert!(log_s.value().data().iter().all(|&v| v.is_finite() && v > 0.0));
    }
}
