use rand::Rng;
use rand_distr::StandardNormal;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::LayerIO;

const ORTHO_TOL: f64 = 1e-12;

/// Haar-distributed `n×n` orthonormal matrix (row-major).
///
/// QR of an i.i.d. standard-normal matrix with the signs of `R`'s diagonal
/// folded into `Q`. Gram–Schmidt is run twice per column so orthogonality
/// holds to machine precision.
pub fn random_orthonormal<T: Scalar, R: Rng>(n: usize, rng: &mut R) -> Tensor<T> {
    loop {
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        // columns of a
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a[i][j]).collect()).collect();
        let mut ok = true;
        for j in 0..n {
            for _ in 0..2 {
                for k in 0..j {
                    let dot: f64 = (0..n).map(|i| cols[k][i] * cols[j][i]).sum();
                    for i in 0..n {
                        cols[j][i] -= dot * cols[k][i];
                    }
                }
            }
            // positive norm here is R's diagonal, which fixes the sign convention
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for v in cols[j].iter_mut() {
                *v /= norm;
            }
        }
        if ok {
            return Tensor::from_fn(&[n, n], |idx| T::of(cols[idx % n][idx / n]));
        }
    }
}

fn transpose<T: Scalar>(q: &Tensor<T>, n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n, 1, 1], |idx| q.data()[(idx % n) * n + idx / n])
}

/// `max |QᵀQ − I|` of a row-major square matrix.
pub(crate) fn orthonormality_error<T: Scalar>(q: &[T], n: usize) -> T {
    let mut worst = T::zero();
    for i in 0..n {
        for j in 0..n {
            let dot = (0..n).fold(T::zero(), |acc, k| acc + q[k * n + i] * q[k * n + j]);
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Fixed per-pixel channel mixing `h' = Q h` with orthonormal `Q`.
///
/// `Q` is stored as a non-trainable block so checkpoints carry it.
#[derive(Clone, Debug)]
pub struct OrthoMix {
    pub matrix: ParamId,
    pub channels: usize,
}

impl OrthoMix {
    pub fn random<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        let q = random_orthonormal(channels, rng);
        Self::from_matrix(store, name, &q)
    }

    /// Builds the layer from an explicit `C×C` matrix, rejecting anything
    /// that is not square and orthonormal.
    pub fn from_matrix<T: Scalar>(store: &mut ParamStore<T>, name: &str, q: &Tensor<T>) -> Result<Self> {
        let n = match q.shape() {
            &[r, c] if r == c => r,
            &[r, c, 1, 1] if r == c => r,
            s => {
                return Err(Error::shape(
                    "orthomix",
                    format!("mixing matrix must be square, got {s:?}"),
                ))
            }
        };
        let err = orthonormality_error(q.data(), n);
        if err > T::of(ORTHO_TOL) {
            return Err(Error::domain(
                "orthomix",
                format!("matrix is not orthonormal (max |QᵀQ − I| = {err:e})"),
            ));
        }
        let kernel = q.reshape(&[n, n, 1, 1])?;
        Ok(Self {
            matrix: store.add(format!("{name}/q"), kernel, false)?,
            channels: n,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let q = cx.tape.constant(cx.params.value(self.matrix).clone());
        let out = io.activation.conv2d(&q, None, ConvSpec::POINTWISE)?;
        let logdet = io.logdet.clone();
        Ok(io.with(out, logdet))
    }

    pub fn inverse<T: Scalar>(&self, cx: &Ctx<T>, io: LayerIO<T>) -> Result<LayerIO<T>> {
        let qt = cx
            .tape
            .constant(transpose(cx.params.value(self.matrix), self.channels));
        let out = io.activation.conv2d(&qt, None, ConvSpec::POINTWISE)?;
        let logdet = io.logdet.clone();
        Ok(io.with(out, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::Layer;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matrix_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let layer = Layer::OrthoMix(OrthoMix::from_matrix(&mut store, "m", &eye).unwrap());
        let h = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64).cos());
        let (y, ld) = run(&layer, &store, &h, None, false);
        assert_eq!(y, h);
        assert_eq!(ld.data(), &[0.0, 0.0]);
    }

    #[test]
    fn random_matrices_are_orthonormal() {
        for c in [2, 4, 8, 12] {
            for seed in 0..20 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q: Tensor<f64> = random_orthonormal(c, &mut rng);
                assert!(orthonormality_error(q.data(), c) < 1e-12);
            }
        }
    }

    #[test]
    fn roundtrip_and_zero_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let layer = Layer::OrthoMix(OrthoMix::random(&mut store, &mut rng, "m", 4).unwrap());
        let h = Tensor::from_fn(&[3, 4, 3, 2], |_| rng.random_range(-1.0..1.0));
        assert!(roundtrip_error(&layer, &store, &h, None) < 1e-12);
        let (_, ld) = run(&layer, &store, &h, None, false);
        assert!(ld.data().iter().all(|&v| v == 0.0));
        let (analytic, numeric) = logdet_pair(&layer, &store, &h.batch_item(0).unwrap(), None);
        assert!((analytic - numeric).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_matrices() {
        let mut store = ParamStore::<f64>::new();
        let rect = Tensor::zeros(&[2, 3]);
        assert!(OrthoMix::from_matrix(&mut store, "a", &rect).is_err());
        let skew = Tensor::new(&[2, 2], vec![1.0, 0.1, 0.0, 1.0]).unwrap();
        assert!(OrthoMix::from_matrix(&mut store, "b", &skew).is_err());
    }
}
