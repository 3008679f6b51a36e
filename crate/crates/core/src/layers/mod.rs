//! Invertible layers. Each one maps encode direction (`forward`) and decode
//! direction (`inverse`) exactly, and adds its log-determinant to the
//! running per-item accumulator carried in [`LayerIO`].

mod actnorm;
mod coupling;
mod injector;
mod orthomix;
mod scale_bias;
mod squeeze;

pub use actnorm::ActNorm;
pub use coupling::{CondAffineCoupling, S_TILDE_LIMIT};
pub use injector::AffineInjector;
pub use orthomix::{random_orthonormal, OrthoMix};
pub use scale_bias::ScaleBias;
pub use squeeze::{split_forward, split_inverse, squeeze_forward, squeeze_inverse};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Activation flowing through the network together with its log-det tally.
#[derive(Clone)]
pub struct LayerIO<T> {
    /// `(N, C, H, W)`
    pub activation: Var<T>,
    /// Per-item log-determinant accumulated so far, shape `[N]`, in nats.
    pub logdet: Var<T>,
    /// Embedding at this activation's resolution, if the layer needs one.
    pub conditioning: Option<Var<T>>,
}

impl<T: Scalar> std::fmt::Debug for LayerIO<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerIO")
            .field("activation", &self.activation)
            .field("logdet", &self.logdet)
            .field("conditioning", &self.conditioning)
            .finish()
    }
}

impl<T: Scalar> LayerIO<T> {
    /// Wraps an activation with a zero log-det accumulator.
    pub fn new(activation: Var<T>, conditioning: Option<Var<T>>) -> Result<Self> {
        let n = activation.shape()[0];
        let logdet = activation.tape().constant(Tensor::zeros(&[n]));
        Ok(Self {
            activation,
            logdet,
            conditioning,
        })
    }

    pub(crate) fn with(&self, activation: Var<T>, logdet: Var<T>) -> Self {
        Self {
            activation,
            logdet,
            conditioning: self.conditioning.clone(),
        }
    }

    pub(crate) fn require_conditioning(&self, op: &'static str) -> Result<&Var<T>> {
        let e = self
            .conditioning
            .as_ref()
            .ok_or_else(|| Error::shape(op, "layer needs a conditioning embedding"))?;
        let a = self.activation.shape();
        let s = e.shape();
        if s.len() != 4 || s[0] != a[0] || s[2] != a[2] || s[3] != a[3] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a,
                rhs: s,
            });
        }
        Ok(e)
    }
}

/// One invertible transformation inside a flow step.
#[derive(Clone, Debug)]
pub enum Layer {
    ActNorm(ActNorm),
    OrthoMix(OrthoMix),
    Coupling(CondAffineCoupling),
    Injector(AffineInjector),
    ScaleBias(ScaleBias),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::ActNorm(_) => "actnorm",
            Layer::OrthoMix(_) => "orthomix",
            Layer::Coupling(_) => "coupling",
            Layer::Injector(_) => "injector",
            Layer::ScaleBias(_) => "scale_bias",
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        match self {
            Layer::ActNorm(l) => l.forward(cx, io),
            Layer::OrthoMix(l) => l.forward(cx, io),
            Layer::Coupling(l) => l.forward(cx, io),
            Layer::Injector(l) => l.forward(cx, io),
            Layer::ScaleBias(l) => l.forward(cx, io),
        }
    }

    pub fn inverse<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        match self {
            Layer::ActNorm(l) => l.inverse(cx, io),
            Layer::OrthoMix(l) => l.inverse(cx, io),
            Layer::Coupling(l) => l.inverse(cx, io),
            Layer::Injector(l) => l.inverse(cx, io),
            Layer::ScaleBias(l) => l.inverse(cx, io),
        }
    }
}

/// `s = 1/σ(s̃) = 1 + e^{−s̃}` and `log s = −log σ(s̃)` after clamping `s̃`.
pub(crate) fn sigmoid_inverse_scale<T: Scalar>(s_tilde: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let limit = T::of(S_TILDE_LIMIT);
    let st = s_tilde.clamp(-limit, limit)?;
    let s = st.neg()?.exp()?.add_scalar(T::one())?;
    let log_s = st.log_sigmoid()?.neg()?;
    Ok((s, log_s))
}

#[cfg(test)]
pub(crate) mod test_support {
    //! Shared oracle checks: exact round trip and log-det vs the numeric
    //! Jacobian of the forward map.

    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{log_abs_det, numeric_jacobian};
    use crate::params::ParamStore;

    pub fn run(
        layer: &Layer,
        store: &ParamStore<f64>,
        h: &Tensor<f64>,
        e: Option<&Tensor<f64>>,
        inverse: bool,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let io = LayerIO::new(tape.constant(h.clone()), e.map(|e| tape.constant(e.clone()))).unwrap();
        let out = if inverse {
            layer.inverse(&cx, io)
        } else {
            layer.forward(&cx, io)
        }
        .unwrap();
        let a = (*out.activation.value()).clone();
        let l = (*out.logdet.value()).clone();
        (a, l)
    }

    pub fn roundtrip_error(layer: &Layer, store: &ParamStore<f64>, h: &Tensor<f64>, e: Option<&Tensor<f64>>) -> f64 {
        let (y, ld_f) = run(layer, store, h, e, false);
        let (back, ld_i) = run(layer, store, &y, e, true);
        // inverse contributes the negated log-det
        for (a, b) in ld_f.data().iter().zip(ld_i.data()) {
            assert!((a + b).abs() < 1e-9, "forward {a} inverse {b}");
        }
        back.max_abs_diff(h).unwrap()
    }

    /// (analytic, numeric) log|det J| for a single-item input.
    pub fn logdet_pair(layer: &Layer, store: &ParamStore<f64>, h: &Tensor<f64>, e: Option<&Tensor<f64>>) -> (f64, f64) {
        assert_eq!(h.shape()[0], 1);
        let (_, ld) = run(layer, store, h, e, false);
        let jac = numeric_jacobian(|x: &Tensor<f64>| Ok(run(layer, store, x, e, false).0), h, 1e-5).unwrap();
        (ld.data()[0], log_abs_det(&jac))
    }
}
