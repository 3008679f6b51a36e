//! Small building blocks shared by the conditioning networks.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::conv::ConvSpec;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Negative slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Everything a forward pass needs: where to record, where parameters live,
/// and whether those parameters are trainable in this pass.
pub struct Ctx<'a, T> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
    pub frozen: bool,
    pub(crate) actnorm_init: Option<&'a RefCell<Vec<(ParamId, Tensor<T>)>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self {
            tape,
            params,
            frozen: false,
            actnorm_init: None,
        }
    }

    /// Same store, parameters recorded as constants.
    pub fn frozen(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self {
            frozen: true,
            ..Self::new(tape, params)
        }
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        if self.frozen {
            self.tape.frozen(self.params, id)
        } else {
            self.tape.param(self.params, id)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±gain/√fan_in`.
    Uniform { gain: u32 },
    Zero,
}

impl Init {
    pub const DEFAULT: Init = Init::Uniform { gain: 1 };
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Result<Self> {
        let shape = [cout, cin, ksize, ksize];
        let kernel = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::Uniform { gain } => {
                let bound = gain as f64 / ((cin * ksize * ksize) as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)))
            }
        };
        Ok(Self {
            kernel: store.add(format!("{name}/kernel"), kernel, true)?,
            bias: store.add(format!("{name}/bias"), Tensor::zeros(&[cout]), true)?,
            spec,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let k = cx.param(self.kernel);
        let b = cx.param(self.bias);
        x.conv2d(&k, Some(&b), self.spec)
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.kernel).shape()[0]
    }
}

/// The 3-layer module that predicts affine parameters inside couplings and
/// injectors: 3×3 conv, leaky ReLU, 1×1 conv, leaky ReLU, 3×3 conv.
///
/// The last layer starts at zero, so a fresh module outputs all zeros.
#[derive(Clone, Debug)]
pub struct CondNet {
    pub layers: [Conv2d; 3],
}

impl CondNet {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
    ) -> Result<Self> {
        Ok(Self {
            layers: [
                Conv2d::new(store, rng, &format!("{name}/conv0"), cin, hidden, 3, ConvSpec::SAME3, Init::DEFAULT)?,
                Conv2d::new(store, rng, &format!("{name}/conv1"), hidden, hidden, 1, ConvSpec::POINTWISE, Init::DEFAULT)?,
                Conv2d::new(store, rng, &format!("{name}/conv2"), hidden, cout, 3, ConvSpec::SAME3, Init::Zero)?,
            ],
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let slope = T::of(LEAKY_SLOPE);
        let h = self.layers[0].forward(cx, x)?.leaky_relu(slope)?;
        let h = self.layers[1].forward(cx, &h)?.leaky_relu(slope)?;
        self.layers[2].forward(cx, &h)
    }

    /// Every parameter block, first layer first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|c| [c.kernel, c.bias]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_condnet_outputs_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = CondNet::new(&mut store, &mut rng, "c", 3, 8, 4).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64).sin()));
        let y = net.forward(&cx, &x).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 4, 4]);
        assert_eq!(y.value().max_abs(), 0.0);
        assert_eq!(net.param_ids().len(), 6);
    }

    #[test]
    fn frozen_ctx_blocks_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 2, 3, ConvSpec::SAME3, Init::DEFAULT).unwrap();
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(&[1, 2, 3, 3]));
        let cx = Ctx::frozen(&tape, &store);
        conv.forward(&cx, &x).unwrap().sum().unwrap().backward().unwrap();
        assert!(tape.param_grads().is_empty());
        assert!(x.grad().is_some());
    }
}
