//! Numerical oracles: central finite differences, dense Jacobians and
//! log-determinants. They only evaluate forward maps and never touch the
//! tape, so they stay independent of the code they check.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `at`.
pub fn finite_difference_oracle<T, F>(f: F, at: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.len());
    let two_h = h + h;
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_h);
    }
    Tensor::new(at.shape(), grad)
}

/// Dense `out_len × in_len` Jacobian (row-major) by central differences.
pub fn numeric_jacobian<T, F>(f: F, at: &Tensor<T>, h: T) -> Result<Vec<Vec<T>>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut probe = at.clone();
    let mut columns = Vec::with_capacity(at.len());
    let two_h = h + h;
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        columns.push(
            up.data()
                .iter()
                .zip(down.data())
                .map(|(&u, &d)| (u - d) / two_h)
                .collect::<Vec<T>>(),
        );
    }
    let rows = columns.first().map_or(0, Vec::len);
    Ok((0..rows)
        .map(|r| columns.iter().map(|c| c[r]).collect())
        .collect())
}

/// `log|det A|` by LU decomposition with partial pivoting.
///
/// Returns `-inf` for a singular matrix.
pub fn log_abs_det<T: Scalar>(matrix: &[Vec<T>]) -> T {
    let n = matrix.len();
    let mut a: Vec<Vec<T>> = matrix.to_vec();
    let mut acc = T::zero();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i][col]
                    .abs()
                    .partial_cmp(&a[j][col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("non-empty range");
        if a[pivot][col] == T::zero() {
            return T::neg_infinity();
        }
        a.swap(col, pivot);
        let p = a[col][col];
        acc += p.abs().ln();
        for row in col + 1..n {
            let factor = a[row][col] / p;
            if factor == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= factor * v;
            }
        }
    }
    acc
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error<T: Scalar>(a: T, b: T, floor: T) -> T {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between two gradient tensors.
///
/// Entries whose magnitude is below `floor` are compared absolutely
/// against `floor`, so exact zeros do not blow the ratio up.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: T) -> Result<T> {
    a.check_same_shape(b, "max_relative_error")?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .fold(T::zero(), |acc, (&x, &y)| acc.max(relative_error(x, y, floor))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let at = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let g = finite_difference_oracle(|t: &Tensor<f64>| Ok(t.sum()), &at, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cube_derivative() {
        let at = Tensor::<f64>::scalar(2.0);
        let g = finite_difference_oracle(|t: &Tensor<f64>| Ok(t.data()[0].powi(3)), &at, 1e-5)
            .unwrap();
        assert!((g.data()[0] - 12.0).abs() < 1e-6);
    }

    #[test]
    fn log_det_of_known_matrices() {
        let m = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        assert!((log_abs_det(&m) - 5.0f64.ln()).abs() < 1e-14);
        let perm = vec![vec![0.0f64, 1.0], vec![1.0, 0.0]];
        assert!(log_abs_det(&perm).abs() < 1e-15);
        let singular = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert_eq!(log_abs_det(&singular), f64::NEG_INFINITY);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let at = Tensor::<f64>::new(&[2], vec![0.3, -0.4]).unwrap();
        let j = numeric_jacobian(
            |t: &Tensor<f64>| {
                let d = t.data();
                Tensor::new(&[3], vec![d[0] + 2.0 * d[1], 3.0 * d[0], -d[1]])
            },
            &at,
            1e-5,
        )
        .unwrap();
        let want = [[1.0, 2.0], [3.0, 0.0], [0.0, -1.0]];
        for (r, row) in j.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!((v - want[r][c]).abs() < 1e-9);
            }
        }
    }
}
