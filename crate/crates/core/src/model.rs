//! Complete super-resolution models: the conditional flow with its LR
//! encoder, and the one-layer L1 baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::conditioning::{resize_to, EncoderConfig, LrEmbedding, LrEncoder};
use crate::conv::ConvSpec;
use crate::data::bicubic_upsample;
use crate::error::{Error, Result};
use crate::flow::{Encoded, FlowConfig, FlowNetwork};
use crate::laplace::{adaptive_variance_head, l1_loss, laplace_nll};
use crate::nn::{Conv2d, Ctx, Init};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn hr_size<T: Scalar>(x: &Var<T>, scale: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape("model", format!("expected NCHW LR input, got {shape:?}")));
    }
    Ok((shape[2] * scale, shape[3] * scale))
}

fn check_pair<T: Scalar>(y: &Var<T>, x: &Var<T>, scale: usize) -> Result<()> {
    let (ys, xs) = (y.shape(), x.shape());
    if ys.len() != 4 || xs.len() != 4 || ys[0] != xs[0] || ys[2] != xs[2] * scale || ys[3] != xs[3] * scale {
        return Err(Error::shape(
            "model",
            format!("HR {ys:?} is not the {scale}x partner of LR {xs:?}"),
        ));
    }
    Ok(())
}

/// Conditional flow `p(y | x)` with its LR encoder.
#[derive(Clone, Debug)]
pub struct SrFlow {
    pub encoder: LrEncoder,
    pub flow: FlowNetwork,
    pub scale: usize,
}

impl SrFlow {
    pub fn new<T: Scalar, R: Rng>(
        flow: &FlowConfig,
        encoder: &EncoderConfig,
        scale: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = LrEncoder::new(encoder, flow.image_channels, store, rng)?;
        let flow = FlowNetwork::new(flow, encoder.out_channels(), store, rng)?;
        Ok(Self { encoder, flow, scale })
    }

    /// `E(x)` on the grid of every flow level.
    pub fn embed<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<LrEmbedding<T>> {
        let (h, w) = hr_size(x, self.scale)?;
        self.encoder.encode_lr(cx, x, &self.flow.level_sizes(h, w))
    }

    pub fn encode<T: Scalar>(&self, cx: &Ctx<T>, y: &Var<T>, x: &Var<T>) -> Result<Encoded<T>> {
        check_pair(y, x, self.scale)?;
        let e = self.embed(cx, x)?;
        self.flow.encode(cx, y, Some(&e))
    }

    /// Batch mean of the per-item NLL in nats per dimension.
    pub fn nll_loss<T: Scalar>(&self, cx: &Ctx<T>, y: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
        self.encode(cx, y, x)?.nll_per_dim()?.mean()
    }

    /// One SR sample per LR input at temperature `τ`.
    pub fn sample<T: Scalar, R: Rng>(&self, cx: &Ctx<T>, x: &Var<T>, temperature: f64, rng: &mut R) -> Result<Var<T>> {
        let e = self.embed(cx, x)?;
        let hr = hr_size(x, self.scale)?;
        self.flow.sample(cx, Some(&e), x.shape()[0], hr, temperature, rng)
    }

    pub fn is_initialized<T: Scalar>(&self, store: &ParamStore<T>) -> bool {
        self.flow.is_initialized(store)
    }

    /// Data-dependent ActNorm initialization on one batch.
    pub fn initialize<T: Scalar>(&self, store: &mut ParamStore<T>, y: &Tensor<T>, x: &Tensor<T>) -> Result<()> {
        self.flow.initialize_actnorm(store, y, |cx| {
            let x = cx.tape.constant(x.clone());
            self.embed(cx, &x).map(Some)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    /// Plain L1.
    #[default]
    L1,
    /// Laplace NLL with a predicted per-pixel scale.
    Adaptive,
}

/// Deterministic regressor `g(x) = bicubic↑(x) + head(E(x))`.
#[derive(Clone, Debug)]
pub struct L1Baseline {
    pub encoder: LrEncoder,
    pub head: Conv2d,
    pub scale: usize,
    pub fidelity: Fidelity,
    pub channels: usize,
}

impl L1Baseline {
    pub fn new<T: Scalar, R: Rng>(
        encoder: &EncoderConfig,
        channels: usize,
        scale: usize,
        fidelity: Fidelity,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = LrEncoder::new(encoder, channels, store, rng)?;
        let out = match fidelity {
            Fidelity::L1 => channels,
            Fidelity::Adaptive => 2 * channels,
        };
        let head = Conv2d::new(store, rng, "l1/head", encoder.out_channels(), out, 3, ConvSpec::SAME3, Init::Zero)?;
        Ok(Self {
            encoder,
            head,
            scale,
            fidelity,
            channels,
        })
    }

    /// Raw head output plus the bicubic upsampling added to its first `C` channels.
    fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, Option<Var<T>>)> {
        let (h, w) = hr_size(x, self.scale)?;
        let f = resize_to(&self.encoder.features(cx, x)?, h, w)?;
        let out = self.head.forward(cx, &f)?;
        let up = cx.tape.constant(bicubic_upsample(&x.value(), self.scale)?);
        let c = self.channels;
        match self.fidelity {
            Fidelity::L1 => Ok((out.add(&up)?, None)),
            Fidelity::Adaptive => Ok((out.narrow_channels(0, c)?.add(&up)?, Some(out.narrow_channels(c, c)?))),
        }
    }

    /// The SR prediction `g(x)`.
    pub fn predict<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward(cx, x)?.0)
    }

    /// Training loss per element: L1 or the adaptive Laplace NLL, divided by `N·D`.
    pub fn loss<T: Scalar>(&self, cx: &Ctx<T>, y: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
        check_pair(y, x, self.scale)?;
        let (g, a) = self.forward(cx, x)?;
        let per = T::one() / T::of(y.value().len() as f64);
        let total = match a {
            None => l1_loss(y, &g)?,
            Some(a) => {
                let both = Var::concat_channels(&[&g, &a])?;
                let head = adaptive_variance_head(&both)?;
                laplace_nll(y, &head.g, &head.b()?)?
            }
        };
        total.mul_scalar(per)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (FlowConfig, EncoderConfig) {
        (
            FlowConfig {
                levels: 2,
                steps: 2,
                hidden: 4,
                ..FlowConfig::default()
            },
            EncoderConfig {
                width: 4,
                blocks: 2,
                taps: vec![1, 2],
            },
        )
    }

    #[test]
    fn encode_decode_roundtrip_with_embedding() {
        let (fc, ec) = small();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = SrFlow::new(&fc, &ec, 4, &mut store, &mut rng).unwrap();
        let y = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 31 % 17) as f64) / 17.0);
        let x = crate::data::bicubic_downsample(&y, 4).unwrap();
        model.initialize(&mut store, &y, &x).unwrap();
        assert!(model.is_initialized(&store));
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let (yv, xv) = (tape.constant(y.clone()), tape.constant(x));
        let enc = model.encode(&cx, &yv, &xv).unwrap();
        let e = model.embed(&cx, &xv).unwrap();
        let back = model.flow.decode(&cx, &enc.latents, Some(&e)).unwrap();
        assert!(back.value().max_abs_diff(&y).unwrap() < 1e-9);
        let loss = model.nll_loss(&cx, &yv, &xv).unwrap();
        let manual = enc.nll_per_dim().unwrap().value().mean();
        assert_eq!(loss.item().unwrap(), manual);
    }

    #[test]
    fn fresh_l1_baseline_is_bicubic() {
        let (_, ec) = small();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = L1Baseline::new(&ec, 3, 2, Fidelity::Adaptive, &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let x = Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.2).sin() * 0.5 + 0.5);
        let g = net.predict(&cx, &tape.constant(x.clone())).unwrap();
        assert_eq!(*g.value(), bicubic_upsample(&x, 2).unwrap());
    }
}
