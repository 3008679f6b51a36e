use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::LayerIO;

/// Per-channel affine normalization `out = scale ⊙ h + bias`.
///
/// A pass run in initialization mode sets `scale = 1/σ_c` and
/// `bias = −μ_c/σ_c` from the batch it sees, so that batch leaves the layer
/// with zero mean and unit (population) variance per channel.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub scale: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl ActNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{name}/scale"), Tensor::ones(&[channels]), true)?,
            bias: store.add(format!("{name}/bias"), Tensor::zeros(&[channels]), true)?,
            channels,
        })
    }

    fn batch_statistics<T: Scalar>(h: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, c, hh, w) = h.dims4()?;
        let plane = hh * w;
        let count = T::of((n * plane) as f64);
        let mut scale = Vec::with_capacity(c);
        let mut bias = Vec::with_capacity(c);
        for ch in 0..c {
            let values = (0..n).flat_map(|b| {
                let base = (b * c + ch) * plane;
                h.data()[base..base + plane].iter().copied()
            });
            let mean = values.clone().fold(T::zero(), |a, x| a + x) / count;
            let var = values.fold(T::zero(), |a, x| a + (x - mean) * (x - mean)) / count;
            let std = var.sqrt();
            let inv = if std > T::zero() { T::one() / std } else { T::one() };
            scale.push(inv);
            bias.push(-mean * inv);
        }
        Ok((Tensor::new(&[c], scale)?, Tensor::new(&[c], bias)?))
    }

    /// Sets scale and bias so that `batch` leaves this layer standardized.
    pub fn initialize<T: Scalar>(&self, store: &mut ParamStore<T>, batch: &Tensor<T>) -> Result<()> {
        let (s, b) = Self::batch_statistics(batch)?;
        store.set_value(self.scale, s)?;
        store.set_value(self.bias, b)
    }

    fn check_scale<T: Scalar>(scale: &Tensor<T>) -> Result<()> {
        if scale.data().iter().any(|&s| s == T::zero()) {
            return Err(Error::domain("actnorm", "zero scale"));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let h = &io.activation;
        let shape = h.shape();
        let (scale, bias) = match cx.actnorm_init {
            Some(pending) => {
                let (s, b) = Self::batch_statistics(&h.value())?;
                pending.borrow_mut().push((self.scale, s.clone()));
                pending.borrow_mut().push((self.bias, b.clone()));
                (cx.tape.constant(s), cx.tape.constant(b))
            }
            None => (cx.param(self.scale), cx.param(self.bias)),
        };
        Self::check_scale(&scale.value())?;
        let out = h.mul(&scale)?.add(&bias)?;
        let plane = T::of((shape[2] * shape[3]) as f64);
        let contribution = scale.abs()?.log()?.sum()?.mul_scalar(plane)?;
        let logdet = io.logdet.add(&contribution)?;
        Ok(io.with(out, logdet))
    }

    pub fn inverse<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let scale = cx.param(self.scale);
        let bias = cx.param(self.bias);
        Self::check_scale(&scale.value())?;
        let shape = io.activation.shape();
        let h = io.activation.sub(&bias)?.div(&scale)?;
        let plane = T::of((shape[2] * shape[3]) as f64);
        let contribution = scale.abs()?.log()?.sum()?.mul_scalar(plane)?;
        let logdet = io.logdet.sub(&contribution)?;
        Ok(io.with(h, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::Layer;
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    #[test]
    fn unit_scale_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let layer = Layer::ActNorm(ActNorm::new(&mut store, "an", 3).unwrap());
        let h = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 * 0.1);
        let (y, ld) = run(&layer, &store, &h, None, false);
        assert_eq!(y, h);
        assert_eq!(ld.data(), &[0.0, 0.0]);
    }

    #[test]
    fn data_dependent_init_standardizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let an = ActNorm::new(&mut store, "an", 4).unwrap();
        let h = Tensor::from_fn(&[5, 4, 3, 3], |i| rng.random_range(-2.0..5.0) * (1.0 + (i % 4) as f64));
        let pending = RefCell::new(Vec::new());
        let tape = Tape::new();
        let mut cx = Ctx::new(&tape, &store);
        cx.actnorm_init = Some(&pending);
        an.forward(&cx, LayerIO::new(tape.constant(h.clone()), None).unwrap())
            .unwrap();
        drop(cx);
        for (id, v) in pending.into_inner() {
            store.set_value(id, v).unwrap();
        }
        let (y, _) = run(&Layer::ActNorm(an), &store, &h, None, false);
        for ch in 0..4 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|b| y.data()[(b * 4 + ch) * 9..(b * 4 + ch + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn logdet_of_doubling_one_channel() {
        let mut store = ParamStore::<f64>::new();
        let an = ActNorm::new(&mut store, "an", 2).unwrap();
        store
            .set_value(an.scale, Tensor::new(&[2], vec![2.0, 1.0]).unwrap())
            .unwrap();
        let layer = Layer::ActNorm(an);
        let h = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0);
        let (analytic, numeric) = logdet_pair(&layer, &store, &h, None);
        assert!((analytic - 4.0 * 2f64.ln()).abs() < 1e-14);
        assert!((analytic - numeric).abs() < 1e-8);
    }

    #[test]
    fn zero_scale_rejected_and_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let an = ActNorm::new(&mut store, "an", 3).unwrap();
        store
            .set_value(an.scale, Tensor::from_fn(&[3], |_| rng.random_range(0.2..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }))
            .unwrap();
        store
            .set_value(an.bias, Tensor::from_fn(&[3], |_| rng.random_range(-1.0..1.0)))
            .unwrap();
        let layer = Layer::ActNorm(an.clone());
        let h = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        assert!(roundtrip_error(&layer, &store, &h, None) < 1e-12);

        store.set_value(an.scale, Tensor::zeros(&[3])).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let io = LayerIO::new(tape.constant(h), None).unwrap();
        assert!(matches!(an.forward(&cx, io), Err(Error::Domain { .. })));
    }
}
