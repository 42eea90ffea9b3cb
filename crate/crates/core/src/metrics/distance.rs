//! Distribution distances between two sets of feature vectors.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{HarmonError, Result};

/// Largest block used by the KID estimator.
pub const KID_BLOCK: usize = 256;

fn check_set(set: &[Vec<f32>], name: &str, min: usize) -> Result<usize> {
    if set.len() < min {
        return Err(HarmonError::invalid_arg(format!("feature set {name} has {} samples, need >= {min}", set.len())));
    }
    let dim = set[0].len();
    if dim == 0 || set.iter().any(|v| v.len() != dim) {
        return Err(HarmonError::invalid_arg(format!("feature set {name} has ragged or empty vectors")));
    }
    if set.iter().flatten().any(|v| !v.is_finite()) {
        return Err(HarmonError::Numerical { term: format!("features {name}"), detail: "non-finite value".into() });
    }
    Ok(dim)
}

/// Total order on feature sets; lets symmetric distances evaluate both
/// argument orders with the identical sequence of floating-point operations.
fn set_order(a: &[Vec<f32>], b: &[Vec<f32>]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Sample mean and unbiased covariance.
pub fn moments(set: &[Vec<f32>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let d = set[0].len();
    let mut mean = DVector::zeros(d);
    for v in set {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += *x as f64;
        }
    }
    mean /= n as f64;
    let mut centred = DMatrix::zeros(n, d);
    for (i, v) in set.iter().enumerate() {
        for j in 0..d {
            centred[(i, j)] = v[j] as f64 - mean[j];
        }
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to 0.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(HarmonError::Numerical { term: "sqrtm".into(), detail: "non-finite matrix".into() });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `Tr((S_a S_b)^{1/2})` evaluated as `Tr((A^{1/2} S_b A^{1/2})^{1/2})`.
fn trace_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> Result<f64> {
    let ra = sqrtm_psd(sa)?;
    let inner = &ra * sb * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
pub fn fid(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let da = check_set(a, "A", 2)?;
    let db = check_set(b, "B", 2)?;
    if da != db {
        return Err(HarmonError::invalid_arg(format!("feature dims differ: {da} vs {db}")));
    }
    let (a, b) = if set_order(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let (ma, sa) = moments(a);
    let (mb, sb) = moments(b);
    let dmu = (&ma - &mb).norm_squared();
    let value = dmu + sa.trace() + sb.trace() - 2.0 * trace_sqrt_product(&sa, &sb)?;
    if !value.is_finite() {
        return Err(HarmonError::Numerical { term: "fid".into(), detail: "non-finite distance".into() });
    }
    Ok(value.max(0.0))
}

fn poly_kernel(x: &[f32], y: &[f32]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD^2 with the cubic polynomial kernel.
fn mmd2_unbiased(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let (m, n) = (a.len() as f64, b.len() as f64);
    let within = |s: &[Vec<f32>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                t += poly_kernel(&s[i], &s[j]);
            }
        }
        2.0 * t
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += poly_kernel(x, y);
        }
    }
    within(a) / (m * (m - 1.0)) + within(b) / (n * (n - 1.0)) - 2.0 * cross / (m * n)
}

fn chunks(set: &[Vec<f32>], parts: usize) -> Vec<&[Vec<f32>]> {
    let base = set.len() / parts;
    let extra = set.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&set[start..start + len]);
        start += len;
    }
    out
}

/// Kernel distance: unbiased MMD^2 with `k(x, y) = (x.y / F + 1)^3`. Sets
/// larger than [`KID_BLOCK`] are split into the same number of contiguous
/// blocks and the per-block estimates averaged.
pub fn kid(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let da = check_set(a, "A", 2)?;
    let db = check_set(b, "B", 2)?;
    if da != db {
        return Err(HarmonError::invalid_arg(format!("feature dims differ: {da} vs {db}")));
    }
    let (a, b) = if set_order(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let parts = a.len().max(b.len()).div_ceil(KID_BLOCK);
    if a.len() / parts < 2 || b.len() / parts < 2 {
        return Err(HarmonError::invalid_arg("KID blocks would hold fewer than 2 samples"));
    }
    let value = chunks(a, parts)
        .into_iter()
        .zip(chunks(b, parts))
        .map(|(x, y)| mmd2_unbiased(x, y))
        .sum::<f64>()
        / parts as f64;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_set(n: usize, d: usize, shift: f32, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.sample::<f32, _>(StandardNormal) + shift).collect()).collect()
    }

    #[test]
    fn fid_identical_sets_is_zero() {
        let a = gaussian_set(50, 8, 0.0, 1);
        assert!(fid(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn fid_symmetric_and_order_invariant() {
        let a = gaussian_set(40, 6, 0.0, 2);
        let b = gaussian_set(30, 6, 0.5, 3);
        assert_eq!(fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        let mut rev = a.clone();
        rev.reverse();
        assert!((fid(&rev, &b).unwrap() - fid(&a, &b).unwrap()).abs() < 1e-9);
        assert!(fid(&a[..1], &b).is_err());
    }

    #[test]
    fn sqrtm_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [2, 5, 16] {
            let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let spd = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
            let r = sqrtm_psd(&spd).unwrap();
            let err = (&r * &r - &spd).norm() / spd.norm();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn kid_identical_points_and_symmetry() {
        let p = vec![vec![0.3f32, -0.2, 0.9]; 4];
        assert!(kid(&p, &p).unwrap().abs() < 1e-12);
        let a = gaussian_set(20, 4, 0.0, 5);
        let b = gaussian_set(25, 4, 0.3, 6);
        assert_eq!(kid(&a, &b).unwrap(), kid(&b, &a).unwrap());
    }

    #[test]
    fn kid_blocks_large_sets() {
        let a = gaussian_set(600, 4, 0.0, 7);
        let b = gaussian_set(520, 4, 0.0, 8);
        let v = kid(&a, &b).unwrap();
        assert!(v.abs() < 0.05, "{v}");
    }
}
