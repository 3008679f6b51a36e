//! The conditional flow pyramid and its exact negative log-likelihood.
//!
//! Encode direction, for each of the `L` levels:
//!
//! ```text
//! squeeze → K × [actnorm → orthomix → coupling → injector] → split (all but the last level)
//! ```
//!
//! Split halves go straight to the prior; the final activation is scored
//! in full. The NLL of one item is
//! `−Σ log p_z(z) − Σ_layers log|det J|`, in nats.

use std::cell::RefCell;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::conditioning::LrEmbedding;
use crate::error::{Error, Result};
use crate::layers::{
    split_forward, split_inverse, squeeze_forward, squeeze_inverse, ActNorm, AffineInjector,
    CondAffineCoupling, Layer, LayerIO, OrthoMix, ScaleBias,
};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    #[default]
    Gaussian,
    Laplace,
}

impl Prior {
    /// Per-item `log p_z(z)` summed over every element.
    pub fn log_density<T: Scalar>(self, z: &Var<T>) -> Result<Var<T>> {
        let per_element = match self {
            Prior::Gaussian => z
                .square()?
                .mul_scalar(T::of(-0.5))?
                .add_scalar(T::of(-0.5 * (2.0 * PI).ln()))?,
            Prior::Laplace => z.abs()?.neg()?.add_scalar(T::of(-(2f64.ln())))?,
        };
        per_element.sum_per_item()
    }

    /// One draw with variance `temperature` (Gaussian) or the same rescaling
    /// `√τ` applied to a standard Laplace draw.
    pub fn sample<T: Scalar, R: Rng>(self, shape: &[usize], temperature: f64, rng: &mut R) -> Tensor<T> {
        let std = temperature.sqrt();
        Tensor::from_fn(shape, |_| {
            let u = match self {
                Prior::Gaussian => rng.sample::<f64, _>(StandardNormal),
                Prior::Laplace => {
                    // inverse CDF on (−½, ½)
                    let p: f64 = rng.random::<f64>() - 0.5;
                    -p.signum() * (1.0 - 2.0 * p.abs()).ln()
                }
            };
            T::of(std * u)
        })
    }
}

impl std::fmt::Display for Prior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Prior::Gaussian => "gaussian",
            Prior::Laplace => "laplace",
        })
    }
}

impl std::str::FromStr for Prior {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Prior::Gaussian),
            "laplace" => Ok(Prior::Laplace),
            other => Err(format!("unknown prior `{other}` (gaussian|laplace)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Pyramid levels `L`.
    pub levels: usize,
    /// Flow steps per level `K`.
    pub steps: usize,
    /// Hidden width of the conditioning modules inside couplings and injectors.
    pub hidden: usize,
    pub prior: Prior,
    pub image_channels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            steps: 4,
            hidden: 16,
            prior: Prior::Gaussian,
            image_channels: 3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.levels == 0 {
            errs.push("flow.levels: must be at least 1".into());
        }
        if self.steps == 0 {
            errs.push("flow.steps: must be at least 1".into());
        }
        if self.hidden == 0 {
            errs.push("flow.hidden: must be positive".into());
        }
        if self.image_channels == 0 {
            errs.push("flow.image_channels: must be positive".into());
        }
        errs
    }
}

#[derive(Clone, Debug)]
pub enum FlowOp {
    Squeeze,
    Split,
    Layer { level: usize, name: String, layer: Layer },
}

/// Latent representation: one tensor per split plus the final activation.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample<T> {
    pub z: Vec<Tensor<T>>,
    pub prior: Prior,
    pub temperature: f64,
}

impl<T: Scalar> LatentSample<T> {
    pub fn element_count(&self) -> usize {
        self.z.iter().map(Tensor::len).sum()
    }
}

/// Output of [`FlowNetwork::encode`].
pub struct Encoded<T> {
    /// Split latents in encode order, final activation last.
    pub latents: Vec<Var<T>>,
    /// Per-item NLL in nats, shape `[N]`.
    pub nll: Var<T>,
    pub logdet: Var<T>,
    pub log_prior: Var<T>,
    /// Elements per item (`D = C·H·W` of `y`).
    pub dims: usize,
    /// Per-layer log-det contributions (values only), in encode order.
    pub contributions: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Encoded<T> {
    /// Per-item NLL divided by `D`.
    pub fn nll_per_dim(&self) -> Result<Var<T>> {
        self.nll.mul_scalar(T::one() / T::of(self.dims as f64))
    }

    pub fn latent_sample(&self, prior: Prior) -> LatentSample<T> {
        LatentSample {
            z: self.latents.iter().map(|v| (*v.value()).clone()).collect(),
            prior,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowNetwork {
    pub config: FlowConfig,
    pub ops: Vec<FlowOp>,
    pub cond_channels: usize,
    init_flag: Option<ParamId>,
}

impl FlowNetwork {
    /// Builds the `L`-level, `K`-step pyramid, registering its parameters
    /// under `flow/…` in `store`.
    pub fn new<T: Scalar, R: Rng>(
        config: &FlowConfig,
        cond_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut ops = Vec::new();
        let mut c = config.image_channels;
        for level in 0..config.levels {
            ops.push(FlowOp::Squeeze);
            c *= 4;
            for step in 0..config.steps {
                let base = format!("flow/level{level}/step{step}");
                let mut push = |kind: &str, layer: Layer| {
                    ops.push(FlowOp::Layer {
                        level,
                        name: format!("{base}/{kind}"),
                        layer,
                    })
                };
                push("actnorm", Layer::ActNorm(ActNorm::new(store, &format!("{base}/actnorm"), c)?));
                push(
                    "orthomix",
                    Layer::OrthoMix(OrthoMix::random(store, rng, &format!("{base}/orthomix"), c)?),
                );
                push(
                    "coupling",
                    Layer::Coupling(CondAffineCoupling::new(
                        store,
                        rng,
                        &format!("{base}/coupling"),
                        c,
                        cond_channels,
                        config.hidden,
                    )?),
                );
                if cond_channels > 0 {
                    push(
                        "injector",
                        Layer::Injector(AffineInjector::new(
                            store,
                            rng,
                            &format!("{base}/injector"),
                            c,
                            cond_channels,
                            config.hidden,
                        )?),
                    );
                }
            }
            if level + 1 < config.levels {
                ops.push(FlowOp::Split);
                c /= 2;
            }
        }
        let init_flag = Some(store.add("flow/actnorm_initialized", Tensor::zeros(&[1]), false)?);
        Ok(Self {
            config: config.clone(),
            ops,
            cond_channels,
            init_flag,
        })
    }

    /// The flow with no layers: `z = y`.
    pub fn empty(prior: Prior, image_channels: usize) -> Self {
        Self {
            config: FlowConfig {
                levels: 0,
                steps: 0,
                prior,
                image_channels,
                ..FlowConfig::default()
            },
            ops: Vec::new(),
            cond_channels: 0,
            init_flag: None,
        }
    }

    /// The single [`ScaleBias`] layer `z = (y − g)/b`, conditioned on a
    /// one-level embedding holding `(g, log b)`.
    pub fn one_layer(prior: Prior, image_channels: usize) -> Self {
        let mut net = Self::empty(prior, image_channels);
        net.cond_channels = 2 * image_channels;
        net.ops.push(FlowOp::Layer {
            level: 0,
            name: "scale_bias".into(),
            layer: Layer::ScaleBias(ScaleBias::new(image_channels)),
        });
        net
    }

    pub fn prior(&self) -> Prior {
        self.config.prior
    }

    /// Spatial size of the embedding each level consumes, for an HR input of `h×w`.
    pub fn level_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let squeezes = self
            .ops
            .iter()
            .filter(|op| matches!(op, FlowOp::Squeeze))
            .count();
        if squeezes == 0 {
            return vec![(h, w)];
        }
        (1..=squeezes).map(|l| (h >> l, w >> l)).collect()
    }

    /// Checks `(C, H, W)` of an input against the pyramid.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::shape("flow", format!("expected NCHW, got {shape:?}")));
        };
        if *c != self.config.image_channels {
            return Err(Error::shape(
                "flow",
                format!("expected {} channels, got {c}", self.config.image_channels),
            ));
        }
        let factor = 1usize << self.config.levels;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "flow",
                format!("{h}x{w} is not divisible by 2^L = {factor}"),
            ));
        }
        Ok(())
    }

    /// Shapes of the latent tensors for an `(n, C, h, w)` input.
    pub fn latent_shapes(&self, n: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
        let mut shape = [n, self.config.image_channels, h, w];
        let mut out = Vec::new();
        for op in &self.ops {
            match op {
                FlowOp::Squeeze => shape = [n, shape[1] * 4, shape[2] / 2, shape[3] / 2],
                FlowOp::Split => {
                    shape[1] /= 2;
                    out.push(shape);
                }
                FlowOp::Layer { .. } => {}
            }
        }
        out.push(shape);
        out
    }

    fn level_embedding<T: Scalar>(&self, e: Option<&LrEmbedding<T>>, level: usize) -> Result<Option<Var<T>>> {
        match e {
            None if self.cond_channels == 0 => Ok(None),
            None => Err(Error::shape("flow", "conditioning embedding required")),
            Some(e) => e
                .levels
                .get(level)
                .cloned()
                .map(Some)
                .ok_or_else(|| Error::shape("flow", format!("embedding has no level {level}"))),
        }
    }

    /// `y → z` with the exact per-item NLL.
    pub fn encode<T: Scalar>(&self, cx: &Ctx<T>, y: &Var<T>, e: Option<&LrEmbedding<T>>) -> Result<Encoded<T>> {
        let shape = y.shape();
        if self.config.levels > 0 {
            self.check_input(&shape)?;
        }
        let dims: usize = shape[1..].iter().product();
        let prior = self.prior();
        let mut io = LayerIO::new(y.clone(), None)?;
        let mut log_prior = cx.tape.constant(Tensor::zeros(&[shape[0]]));
        let mut latents = Vec::new();
        let mut contributions = Vec::new();
        for op in &self.ops {
            match op {
                FlowOp::Squeeze => io.activation = squeeze_forward(&io.activation)?,
                FlowOp::Split => {
                    let (kept, z) = split_forward(&io.activation)?;
                    log_prior = log_prior.add(&prior.log_density(&z)?)?;
                    latents.push(z);
                    io.activation = kept;
                }
                FlowOp::Layer { level, name, layer } => {
                    io.conditioning = self.level_embedding(e, *level)?;
                    let before = io.logdet.value();
                    io = layer.forward(cx, io)?;
                    let after = io.logdet.value();
                    contributions.push((name.clone(), after.zip_map(&before, "logdet", |a, b| a - b)?));
                }
            }
        }
        log_prior = log_prior.add(&prior.log_density(&io.activation)?)?;
        latents.push(io.activation.clone());
        let nll = log_prior.add(&io.logdet)?.neg()?;
        Ok(Encoded {
            latents,
            nll,
            logdet: io.logdet,
            log_prior,
            dims,
            contributions,
        })
    }

    /// `z → y`, the exact inverse of [`encode`](Self::encode).
    pub fn decode<T: Scalar>(&self, cx: &Ctx<T>, z: &[Var<T>], e: Option<&LrEmbedding<T>>) -> Result<Var<T>> {
        let splits = self.ops.iter().filter(|op| matches!(op, FlowOp::Split)).count();
        if z.len() != splits + 1 {
            return Err(Error::shape(
                "decode",
                format!("expected {} latent tensors, got {}", splits + 1, z.len()),
            ));
        }
        let mut remaining = z.len() - 1;
        let mut io = LayerIO::new(z[remaining].clone(), None)?;
        for op in self.ops.iter().rev() {
            match op {
                FlowOp::Layer { level, layer, .. } => {
                    io.conditioning = self.level_embedding(e, *level)?;
                    io = layer.inverse(cx, io)?;
                }
                FlowOp::Split => {
                    remaining -= 1;
                    let emitted = &z[remaining];
                    if emitted.shape() != io.activation.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "decode",
                            lhs: io.activation.shape(),
                            rhs: emitted.shape(),
                        });
                    }
                    io.activation = split_inverse(&io.activation, emitted)?;
                }
                FlowOp::Squeeze => io.activation = squeeze_inverse(&io.activation)?,
            }
        }
        Ok(io.activation)
    }

    /// Decodes a stored latent sample after checking its shapes.
    pub fn decode_sample<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        sample: &LatentSample<T>,
        e: Option<&LrEmbedding<T>>,
        hr_size: (usize, usize),
    ) -> Result<Var<T>> {
        let n = sample.z.first().map_or(0, |z| z.shape()[0]);
        let want = self.latent_shapes(n, hr_size.0, hr_size.1);
        if want.len() != sample.z.len() || want.iter().zip(&sample.z).any(|(w, z)| w[..] != *z.shape()) {
            return Err(Error::shape(
                "decode",
                format!(
                    "latent shapes {:?} do not match {want:?}",
                    sample.z.iter().map(|z| z.shape().to_vec()).collect::<Vec<_>>()
                ),
            ));
        }
        let vars: Vec<Var<T>> = sample.z.iter().map(|z| cx.tape.constant(z.clone())).collect();
        self.decode(cx, &vars, e)
    }

    /// Draws `z ~ p_z` at temperature `τ` for `n` items of HR size `h×w`.
    pub fn draw_latent<T: Scalar, R: Rng>(&self, n: usize, h: usize, w: usize, temperature: f64, rng: &mut R) -> LatentSample<T> {
        let z = self
            .latent_shapes(n, h, w)
            .iter()
            .map(|s| self.prior().sample(s, temperature, rng))
            .collect();
        LatentSample {
            z,
            prior: self.prior(),
            temperature,
        }
    }

    /// `decode(z)` with `z ~ p_z` at temperature `τ`.
    pub fn sample<T: Scalar, R: Rng>(
        &self,
        cx: &Ctx<T>,
        e: Option<&LrEmbedding<T>>,
        n: usize,
        hr_size: (usize, usize),
        temperature: f64,
        rng: &mut R,
    ) -> Result<Var<T>> {
        if !(temperature >= 0.0) {
            return Err(Error::domain("sample", format!("temperature {temperature} < 0")));
        }
        let latent = self.draw_latent(n, hr_size.0, hr_size.1, temperature, rng);
        self.decode_sample(cx, &latent, e, hr_size)
    }

    pub fn is_initialized<T: Scalar>(&self, store: &ParamStore<T>) -> bool {
        self.init_flag
            .is_none_or(|id| store.value(id).data()[0] != T::zero())
    }

    /// Data-dependent ActNorm initialization from one batch.
    ///
    /// Runs an encode pass in which every ActNorm standardizes its own input
    /// and records the resulting scale and bias, then writes them back.
    pub fn initialize_actnorm<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        y: &Tensor<T>,
        embed: impl FnOnce(&Ctx<T>) -> Result<Option<LrEmbedding<T>>>,
    ) -> Result<()> {
        let pending = RefCell::new(Vec::new());
        {
            let tape = crate::autodiff::Tape::new();
            let mut cx = Ctx::new(&tape, store);
            cx.actnorm_init = Some(&pending);
            let e = embed(&cx)?;
            let y = tape.constant(y.clone());
            self.encode(&cx, &y, e.as_ref())?;
        }
        for (id, value) in pending.into_inner() {
            store.set_value(id, value)?;
        }
        if let Some(id) = self.init_flag {
            store.set_value(id, Tensor::ones(&[1]))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_flow_gaussian_and_laplace_at_zero() {
        let store = ParamStore::<f64>::new();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let y = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let g = FlowNetwork::empty(Prior::Gaussian, 1).encode(&cx, &y, None).unwrap();
        assert!((g.nll.item().unwrap() - 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((g.nll.item().unwrap() - 3.6758).abs() < 1e-4);
        let l = FlowNetwork::empty(Prior::Laplace, 1).encode(&cx, &y, None).unwrap();
        assert!((l.nll.item().unwrap() - 4.0 * 2f64.ln()).abs() < 1e-12);
        let per_dim = g.nll_per_dim().unwrap().item().unwrap();
        assert_eq!(per_dim * 4.0, g.nll.item().unwrap());
    }

    #[test]
    fn latent_shapes_cover_every_element() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = FlowConfig {
            levels: 2,
            steps: 1,
            hidden: 4,
            ..FlowConfig::default()
        };
        let flow = FlowNetwork::new(&cfg, 2, &mut store, &mut rng).unwrap();
        let shapes = flow.latent_shapes(1, 8, 8);
        assert_eq!(shapes, vec![[1, 6, 4, 4], [1, 24, 2, 2]]);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, 3 * 64);
        assert_eq!(flow.level_sizes(8, 8), vec![(4, 4), (2, 2)]);
        assert!(flow.check_input(&[1, 3, 6, 8]).is_err());
    }

    #[test]
    fn prior_samples_have_requested_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Tensor<f64> = Prior::Gaussian.sample(&[100_000], 0.81, &mut rng);
        let var = z.data().iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        assert!((var - 0.81).abs() < 0.0081, "{var}");
        let zero: Tensor<f64> = Prior::Laplace.sample(&[10], 0.0, &mut rng);
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn invalid_config_lists_every_field() {
        let cfg = FlowConfig {
            levels: 0,
            steps: 0,
            ..FlowConfig::default()
        };
        let errs = cfg.validate();
        assert_eq!(errs.len(), 2);
        assert!(errs[0].starts_with("flow.levels"));
    }
}
