use super::linalg::symmetric_eigen;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Eigenvalues below `-NEGATIVE_EIGEN_TOLERANCE * max(1, largest |eigenvalue|)`
/// mean the matrix is not positive semi-definite; smaller negatives are
/// rounding noise and are clamped to zero.
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-8;

/// Mean and maximum-likelihood covariance (divided by `n`) of feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl Gaussian {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Contract("cannot fit a Gaussian to zero rows".into()));
        };
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("feature rows differ in length".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= n;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        Ok(Gaussian { dim: d, mean, cov })
    }

    /// Rows of a `[N, d]` feature tensor.
    pub fn fit_tensor(features: &Tensor<f32>) -> Result<Self> {
        Self::fit(&tensor_rows(features)?)
    }
}

pub fn tensor_rows(features: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    if features.rank() != 2 {
        return Err(Error::Contract(format!(
            "features must be [N, d], got {:?}",
            features.shape()
        )));
    }
    let d = features.shape()[1];
    Ok(features
        .data()
        .chunks(d)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect())
}

fn psd_eigenvalues(values: &[f64], what: &str) -> Result<Vec<f64>> {
    let top = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    values
        .iter()
        .map(|&v| {
            if v < -NEGATIVE_EIGEN_TOLERANCE * top {
                Err(Error::Numerical(format!(
                    "{what} has negative eigenvalue {v:e}"
                )))
            } else {
                Ok(v.max(0.0))
            }
        })
        .collect()
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of
/// the square root taken as `tr sqrtm(sqrt(S_a) S_b sqrt(S_a))`.
pub fn fid_from_gaussians(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape("fid", &[a.dim], &[b.dim]));
    }
    let d = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let ea = symmetric_eigen(&a.cov, d)?;
    let la = psd_eigenvalues(&ea.values, "covariance")?;
    let ea = super::linalg::SymmetricEigen { values: la, ..ea };
    let sqrt_a = ea.reconstruct_with(f64::sqrt);
    let mut m = matmul(&matmul(&sqrt_a, &b.cov, d), &sqrt_a, d);
    // restore exact symmetry lost to rounding
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = v;
            m[j * d + i] = v;
        }
    }
    let em = symmetric_eigen(&m, d)?;
    let tr_sqrt: f64 = psd_eigenvalues(&em.values, "covariance product")?
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_sqrt)
}

/// Fréchet distance between Gaussian fits of two feature sets. Each set
/// needs more rows than feature dimensions.
pub fn feature_fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, Vec::len);
    if d > 64 {
        return Err(Error::Contract(format!("feature dimension {d} exceeds 64")));
    }
    if a.len() <= d || b.len() <= d {
        return Err(Error::Contract(format!(
            "feature sets of size {} and {} must exceed the dimension {d}",
            a.len(),
            b.len()
        )));
    }
    fid_from_gaussians(&Gaussian::fit(a)?, &Gaussian::fit(b)?)
}
