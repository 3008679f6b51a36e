use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::bicubic::bicubic_downsample;
use super::png_io::{load_png, save_png};

pub const BICUBIC: &str = "bicubic";

/// An HR image and the LR image derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// `(1, C, H, W)`
    pub hr: Tensor<f64>,
    /// `(1, C, H/s, W/s)`
    pub lr: Tensor<f64>,
    pub scale: usize,
    pub kernel: String,
}

impl ImagePair {
    /// Crops `hr` to a multiple of `scale` and derives the LR image.
    pub fn from_hr(id: impl Into<String>, hr: &Tensor<f64>, scale: usize) -> Result<Self> {
        let (n, c, h, w) = hr.dims4()?;
        if n != 1 || scale == 0 || h < scale || w < scale {
            return Err(Error::shape(
                "image_pair",
                format!("cannot build a {scale}x pair from {:?}", hr.shape()),
            ));
        }
        let (ch, cw) = (h - h % scale, w - w % scale);
        let hr = crop(hr, 0, 0, ch, cw)?;
        debug_assert_eq!(c, hr.shape()[1]);
        let lr = bicubic_downsample(&hr, scale)?;
        Ok(Self {
            id: id.into(),
            hr,
            lr,
            scale,
            kernel: BICUBIC.into(),
        })
    }
}

fn crop(img: &Tensor<f64>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<f64>> {
    let (n, c, ih, iw) = img.dims4()?;
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::shape("crop", format!("{h}x{w}+{y0}+{x0} outside {ih}x{iw}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for nc in 0..n * c {
        for y in 0..h {
            let start = (nc * ih + y0 + y) * iw + x0;
            out.extend_from_slice(&d[start..start + w]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub scale: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Moves the last `holdout` pairs into a second dataset.
    pub fn split_holdout(mut self, holdout: usize) -> Result<(Dataset, Dataset)> {
        if holdout >= self.pairs.len() {
            return Err(Error::Config(vec![format!(
                "data.holdout: {holdout} leaves no training images out of {}",
                self.pairs.len()
            )]));
        }
        let held = self.pairs.split_off(self.pairs.len() - holdout);
        let val = Dataset {
            pairs: held,
            scale: self.scale,
            seed: self.seed,
        };
        Ok((self, val))
    }

    /// Random aligned HR/LR patches: `(y, x)` of shapes `(B, C, p, p)` and
    /// `(B, C, p/s, p/s)`. The draw sequence depends only on `rng`.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch: usize, patch: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let s = self.scale;
        if patch == 0 || patch % s != 0 {
            return Err(Error::Config(vec![format!(
                "train.patch: {patch} is not a positive multiple of the scale {s}"
            )]));
        }
        if self.pairs.is_empty() {
            return Err(Error::Config(vec!["data: dataset is empty".into()]));
        }
        let lp = patch / s;
        let mut ys = Vec::with_capacity(batch);
        let mut xs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
            let (_, _, lh, lw) = pair.lr.dims4()?;
            if lh < lp || lw < lp {
                return Err(Error::shape(
                    "sample_batch",
                    format!("image `{}` is smaller than the {patch}px patch", pair.id),
                ));
            }
            let ly = rng.random_range(0..=lh - lp);
            let lx = rng.random_range(0..=lw - lp);
            ys.push(crop(&pair.hr, ly * s, lx * s, patch, patch)?);
            xs.push(crop(&pair.lr, ly, lx, lp, lp)?);
        }
        Ok((
            Tensor::concat_batch(&ys.iter().collect::<Vec<_>>())?,
            Tensor::concat_batch(&xs.iter().collect::<Vec<_>>())?,
        ))
    }
}

/// One procedural RGB image: a smooth gradient, a few low-frequency
/// sinusoids, and hard-edged half-planes, mapped into `[0.1, 0.9]` so the
/// bicubic LR stays inside `[0, 1]`.
fn synthetic_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f64> {
    let mut img = vec![0f64; 3 * size * size];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let gx: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let max_freq = (size as f64 / 8.0).max(1.5);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let f = rng.random_range(1.0..max_freq);
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
            (f * theta.cos(), f * theta.sin(), phase, amp)
        })
        .collect();
    let edges: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=2))
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            let offset = rng.random_range(-0.3..0.3);
            let step: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
            (theta.cos(), theta.sin(), offset, step)
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5;
            let v = (y as f64 + 0.5) / size as f64 - 0.5;
            for c in 0..3 {
                let mut val = base[c] + gx[c] * u + gy[c] * v;
                for (fx, fy, ph, amp) in &waves {
                    val += amp[c] * (2.0 * PI * (fx * u + fy * v) + ph).sin();
                }
                for (nx, ny, off, step) in &edges {
                    if nx * u + ny * v > *off {
                        val += step[c];
                    }
                }
                img[(c * size + y) * size + x] = 0.1 + 0.8 * val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[1, 3, size, size], img).expect("sized buffer")
}

/// `n` procedural HR images of `size×size` with their bicubic LR partners.
pub fn make_synthetic_dataset(n: usize, size: usize, scale: usize, seed: u64) -> Result<Dataset> {
    if scale == 0 || size % scale != 0 {
        return Err(Error::Config(vec![format!(
            "data.synthetic_size: {size} is not a multiple of the scale {scale}"
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|i| ImagePair::from_hr(format!("synth{i:04}"), &synthetic_image(&mut rng, size), scale))
        .collect::<Result<_>>()?;
    Ok(Dataset { pairs, scale, seed })
}

/// Key-value description of an on-disk dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// HR image paths, relative to the manifest file.
    pub images: Vec<PathBuf>,
    pub scale: usize,
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_kernel() -> String {
    BICUBIC.into()
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(vec![format!("data.manifest: cannot read {}: {e}", path.display())])
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("data.manifest: {}: {e}", path.display())]))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(vec![e.to_string()]))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads every listed image and rebuilds its LR partner.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        if self.kernel != BICUBIC {
            return Err(Error::Config(vec![format!(
                "data.kernel: only `{BICUBIC}` is supported, got `{}`",
                self.kernel
            )]));
        }
        let pairs = self
            .images
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let full = base.join(p);
                if !full.exists() {
                    return Err(Error::Config(vec![format!(
                        "data.images[{i}]: {} does not exist",
                        full.display()
                    )]));
                }
                let id = p.file_stem().map_or_else(|| format!("img{i}"), |s| s.to_string_lossy().into_owned());
                ImagePair::from_hr(id, &load_png(&full)?, self.scale)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            pairs,
            scale: self.scale,
            seed: self.seed,
        })
    }
}

/// Writes HR images as PNGs under `dir/hr/` plus a `manifest.toml`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let hr_dir = dir.join("hr");
    std::fs::create_dir_all(&hr_dir)?;
    let mut images = Vec::with_capacity(dataset.len());
    for pair in &dataset.pairs {
        let rel = PathBuf::from("hr").join(format!("{}.png", pair.id));
        save_png(&dir.join(&rel), &pair.hr)?;
        images.push(rel);
    }
    let manifest = DatasetManifest {
        images,
        scale: dataset.scale,
        kernel: BICUBIC.into(),
        seed: dataset.seed,
    };
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::lr_psnr;
    use crate::data::PSNR_CAP_DB;

    #[test]
    fn synthetic_is_deterministic_and_consistent() {
        let a = make_synthetic_dataset(6, 32, 4, 9).unwrap();
        let b = make_synthetic_dataset(6, 32, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(6, 32, 4, 10).unwrap();
        assert_ne!(a.pairs[0].hr, c.pairs[0].hr);
        for p in &a.pairs {
            assert!(p.hr.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(p.lr.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(p.lr.shape(), &[1, 3, 8, 8]);
            assert_eq!(lr_psnr(&p.hr, &p.lr, 4).unwrap(), PSNR_CAP_DB);
        }
    }

    #[test]
    fn patches_are_aligned() {
        let ds = make_synthetic_dataset(3, 32, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (y, x) = ds.sample_batch(&mut rng, 4, 16).unwrap();
        assert_eq!(y.shape(), &[4, 3, 16, 16]);
        assert_eq!(x.shape(), &[4, 3, 4, 4]);
        let mut again = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(ds.sample_batch(&mut again, 4, 16).unwrap(), (y, x));
        assert!(ds.sample_batch(&mut rng, 1, 18).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_dataset(2, 16, 2, 3).unwrap();
        let path = write_dataset(&ds, dir.path()).unwrap();
        let m = DatasetManifest::read(&path).unwrap();
        let loaded = m.load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded.pairs[0].hr.max_abs_diff(&ds.pairs[0].hr).unwrap() <= 1.0 / 510.0 + 1e-12);
        let mut broken = m.clone();
        broken.images.push("hr/missing.png".into());
        let err = broken.load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data.images[2]"), "{err}");
    }
}
