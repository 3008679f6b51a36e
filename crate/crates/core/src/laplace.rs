//! The L1 loss, its Laplace likelihood, and the same likelihood computed as a
//! one-layer flow.

use crate::autodiff::Var;
use crate::conditioning::LrEmbedding;
use crate::error::{Error, Result};
use crate::flow::{FlowNetwork, Prior};
use crate::nn::Ctx;
use crate::scalar::Scalar;

/// Predicted Laplace location `g` and log-scale `a`; `b = exp(a)`.
#[derive(Clone)]
pub struct LaplaceHead<T> {
    pub g: Var<T>,
    pub a: Var<T>,
}

impl<T: Scalar> LaplaceHead<T> {
    pub fn b(&self) -> Result<Var<T>> {
        self.a.exp()
    }
}

/// `Σ |y − g|` over every element.
pub fn l1_loss<T: Scalar>(y: &Var<T>, g: &Var<T>) -> Result<Var<T>> {
    if y.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            lhs: y.shape(),
            rhs: g.shape(),
        });
    }
    y.sub(g)?.abs()?.sum()
}

/// Full Laplace NLL `Σ |y − g|/b + Σ log b + D·log 2`, constants included.
pub fn laplace_nll<T: Scalar>(y: &Var<T>, g: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if y.shape() != g.shape() || y.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "laplace_nll",
            lhs: y.shape(),
            rhs: if y.shape() != g.shape() { g.shape() } else { b.shape() },
        });
    }
    if b.value().data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::domain("laplace_nll", "scale must be positive"));
    }
    let d = T::of(y.value().len() as f64);
    y.sub(g)?
        .abs()?
        .div(b)?
        .sum()?
        .add(&b.log()?.sum()?)?
        .add_scalar(d * T::of(2f64.ln()))
}

/// The same NLL, evaluated by a Laplace-prior flow with a single scale-bias
/// layer `z = (y − g)/b`. Summed over the batch.
pub fn one_layer_flow_nll<T: Scalar>(cx: &Ctx<T>, y: &Var<T>, head: &LaplaceHead<T>) -> Result<Var<T>> {
    let b = head.b()?;
    if b.value().data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::domain("one_layer_flow_nll", "scale must be positive"));
    }
    let c = y.shape().get(1).copied().unwrap_or(0);
    let flow = FlowNetwork::one_layer(Prior::Laplace, c);
    let e = LrEmbedding::single(Var::concat_channels(&[&head.g, &head.a])?);
    flow.encode(cx, y, Some(&e))?.nll.sum()
}

/// Splits a `2C`-channel prediction into location and log-scale halves.
pub fn adaptive_variance_head<T: Scalar>(out: &Var<T>) -> Result<LaplaceHead<T>> {
    let shape = out.shape();
    let c2 = *shape.get(1).ok_or_else(|| Error::shape("adaptive_variance_head", "expected NCHW"))?;
    if c2 % 2 != 0 {
        return Err(Error::shape(
            "adaptive_variance_head",
            format!("needs an even channel count, got {c2}"),
        ));
    }
    Ok(LaplaceHead {
        g: out.narrow_channels(0, c2 / 2)?,
        a: out.narrow_channels(c2 / 2, c2 / 2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn closed_form_values() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let ln2 = 2f64.ln();
        assert_eq!(laplace_nll(&y, &y, &b).unwrap().item().unwrap(), 4.0 * ln2);
        let g = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!((laplace_nll(&y, &g, &b).unwrap().item().unwrap() - (4.0 + 4.0 * ln2)).abs() < 1e-15);
        let y12 = tape.constant(Tensor::ones(&[1, 3, 2, 2]));
        let g12 = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert_eq!(l1_loss(&y12, &g12).unwrap().item().unwrap(), 12.0);
        assert_eq!(l1_loss(&y12, &y12).unwrap().item().unwrap(), 0.0);
        let bad = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(laplace_nll(&y, &g, &bad).is_err());
    }

    #[test]
    fn l1_gradient_is_negative_sign() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::new(&[4], vec![1.0, -1.0, 0.5, 0.0]).unwrap());
        let g = tape.var(Tensor::new(&[4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        l1_loss(&y, &g).unwrap().backward().unwrap();
        assert_eq!(g.grad().unwrap().data(), &[-1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn flow_path_agrees() {
        let store = ParamStore::new();
        let tape = Tape::<f64>::new();
        let cx = Ctx::new(&tape, &store);
        let y = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.7).sin()));
        let out = tape.constant(Tensor::from_fn(&[2, 6, 2, 2], |i| (i as f64 * 1.3).cos() * 0.5));
        let head = adaptive_variance_head(&out).unwrap();
        let a = laplace_nll(&y, &head.g, &head.b().unwrap()).unwrap().item().unwrap();
        let b = one_layer_flow_nll(&cx, &y, &head).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn log_scale_gradient_at_zero_residual() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.3));
        let a = tape.var(Tensor::zeros(&[1, 1, 2, 2]));
        laplace_nll(&y, &y, &a.exp().unwrap()).unwrap().backward().unwrap();
        assert!(a.grad().unwrap().data().iter().all(|&v| v == 1.0));
    }
}
