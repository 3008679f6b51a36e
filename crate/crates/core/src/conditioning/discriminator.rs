use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, LEAKY_SLOPE};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Channels of the first block; block `i` has `width·2^i`.
    pub width: usize,
    pub blocks: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width: 16, blocks: 4 }
    }
}

const STRIDE2: ConvSpec = ConvSpec { stride: 2, padding: 1 };

/// Strided conv classifier producing one logit per image.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub channels: usize,
    pub size: (usize, usize),
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    /// Builds the classifier for `channels`-channel images of exactly `size`.
    pub fn new<T: Scalar, R: Rng>(
        config: &DiscriminatorConfig,
        channels: usize,
        size: (usize, usize),
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.width == 0 || config.blocks == 0 {
            return Err(Error::Config(vec!["discriminator: width and blocks must be positive".into()]));
        }
        let mut blocks = Vec::new();
        let mut cin = channels;
        for i in 0..config.blocks {
            let cout = config.width << i;
            blocks.push(Conv2d::new(store, rng, &format!("disc/block{i}"), cin, cout, 3, STRIDE2, Init::DEFAULT)?);
            cin = cout;
        }
        let head = Conv2d::new(store, rng, "disc/head", cin, 1, 1, ConvSpec::POINTWISE, Init::Zero)?;
        Ok(Self {
            config: config.clone(),
            channels,
            size,
            blocks,
            head,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|c| [c.kernel, c.bias])
            .collect()
    }

    /// Logits, shape `[N]`.
    pub fn logits<T: Scalar>(&self, cx: &Ctx<T>, img: &Var<T>) -> Result<Var<T>> {
        let shape = img.shape();
        if shape.len() != 4 || shape[1] != self.channels || (shape[2], shape[3]) != self.size {
            return Err(Error::shape(
                "discriminator",
                format!(
                    "expects (N, {}, {}, {}), got {shape:?}",
                    self.channels, self.size.0, self.size.1
                ),
            ));
        }
        let slope = T::of(LEAKY_SLOPE);
        let mut h = img.clone();
        for b in &self.blocks {
            h = b.forward(cx, &h)?.leaky_relu(slope)?;
        }
        let pooled = h.mean_spatial()?;
        self.head.forward(cx, &pooled)?.reshape(&[shape[0]])
    }

    /// `d_φ(img) ∈ (0, 1)` per image.
    pub fn discriminate<T: Scalar>(&self, cx: &Ctx<T>, img: &Var<T>) -> Result<Var<T>> {
        self.logits(cx, img)?.sigmoid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_discriminator_is_undecided() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::new(&DiscriminatorConfig::default(), 3, (16, 16), &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let img = tape.constant(Tensor::from_fn(&[5, 3, 16, 16], |i| (i as f64).cos()));
        let p = d.discriminate(&cx, &img).unwrap();
        assert_eq!(p.shape(), vec![5]);
        assert!(p.value().data().iter().all(|&v| v == 0.5));
        let wrong = tape.constant(Tensor::zeros(&[1, 3, 8, 16]));
        assert!(d.discriminate(&cx, &wrong).is_err());
    }
}
