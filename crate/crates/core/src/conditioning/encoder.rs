use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dims4, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, LEAKY_SLOPE};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

use super::LrEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channels of every residual block.
    pub width: usize,
    pub blocks: usize,
    /// 1-based block indices whose outputs are concatenated.
    pub taps: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 4,
            taps: vec![1, 2, 3, 4],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.width == 0 {
            errs.push("encoder.width: must be positive".into());
        }
        if self.taps.is_empty() {
            errs.push("encoder.taps: at least one block must be tapped".into());
        }
        for &t in &self.taps {
            if t == 0 || t > self.blocks {
                errs.push(format!("encoder.taps: block {t} outside 1..={}", self.blocks));
            }
        }
        errs
    }

    pub fn out_channels(&self) -> usize {
        self.taps.len() * self.width
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

/// Residual-block encoder `E(x)`.
#[derive(Clone, Debug)]
pub struct LrEncoder {
    pub config: EncoderConfig,
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
}

impl LrEncoder {
    pub fn new<T: Scalar, R: Rng>(
        config: &EncoderConfig,
        in_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let w = config.width;
        let conv_in = Conv2d::new(store, rng, "encoder/conv_in", in_channels, w, 3, ConvSpec::SAME3, Init::DEFAULT)?;
        let blocks = (1..=config.blocks)
            .map(|b| {
                Ok(ResBlock {
                    conv_a: Conv2d::new(store, rng, &format!("encoder/block{b}/conv_a"), w, w, 3, ConvSpec::SAME3, Init::DEFAULT)?,
                    conv_b: Conv2d::new(store, rng, &format!("encoder/block{b}/conv_b"), w, w, 3, ConvSpec::SAME3, Init::DEFAULT)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            conv_in,
            blocks,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv_in.kernel, self.conv_in.bias];
        for b in &self.blocks {
            ids.extend([b.conv_a.kernel, b.conv_a.bias, b.conv_b.kernel, b.conv_b.bias]);
        }
        ids
    }

    /// Concatenated tapped features at LR resolution.
    pub fn features<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let slope = T::of(LEAKY_SLOPE);
        let mut h = self.conv_in.forward(cx, x)?;
        let mut tapped = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let r = b.conv_a.forward(cx, &h)?.leaky_relu(slope)?;
            h = h.add(&b.conv_b.forward(cx, &r)?)?;
            if self.config.taps.contains(&(i + 1)) {
                tapped.push(h.clone());
            }
        }
        let refs: Vec<&Var<T>> = tapped.iter().collect();
        Var::concat_channels(&refs)
    }

    /// `E(x)` resampled to each `(h, w)` in `sizes`.
    pub fn encode_lr<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>, sizes: &[(usize, usize)]) -> Result<LrEmbedding<T>> {
        let f = self.features(cx, x)?;
        let levels = sizes
            .iter()
            .map(|&(h, w)| resize_to(&f, h, w))
            .collect::<Result<_>>()?;
        Ok(LrEmbedding {
            levels,
            sources: self.config.taps.clone(),
        })
    }
}

/// Brings a feature map to `th×tw`: identity, average pooling when shrinking
/// by a whole factor, nearest-neighbour replication otherwise.
pub fn resize_to<T: Scalar>(v: &Var<T>, th: usize, tw: usize) -> Result<Var<T>> {
    let (n, c, h, w) = dims4("resize", &v.shape())?;
    if th == 0 || tw == 0 {
        return Err(Error::shape("resize", "target extent is zero"));
    }
    if (h, w) == (th, tw) {
        return Ok(v.clone());
    }
    if th < h && h % th == 0 && w % tw == 0 && h / th == w / tw {
        return v.avg_pool(h / th);
    }
    let rows: Vec<usize> = (0..th).map(|i| ((2 * i + 1) * h / (2 * th)).min(h - 1)).collect();
    let cols: Vec<usize> = (0..tw).map(|j| ((2 * j + 1) * w / (2 * tw)).min(w - 1)).collect();
    let mut index = Vec::with_capacity(n * c * th * tw);
    for nc in 0..n * c {
        for &r in &rows {
            for &s in &cols {
                index.push((nc * h + r) * w + s);
            }
        }
    }
    let index: Rc<[usize]> = index.into();
    v.gather(index, &[n, c, th, tw])
}
