//! Full-reference fidelity metrics for aligned images in [-1, 1].

use crate::error::{HarmonError, Result};

/// Dynamic range of [-1, 1] images.
pub const DYNAMIC_RANGE: f64 = 2.0;
/// PSNR reported for identical images.
pub const PSNR_CEILING_DB: f64 = 100.0;
/// Published per-scale exponents of the five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

/// Shape `[channels, height, width]` of a flat image buffer.
pub type Shape = [usize; 3];

fn check(x: &[f32], y: &[f32], shape: Shape) -> Result<()> {
    let n = shape.iter().product::<usize>();
    if x.len() != n || y.len() != n {
        return Err(HarmonError::invalid_arg(format!(
            "image sizes {} and {} do not match shape {shape:?}",
            x.len(),
            y.len()
        )));
    }
    if n == 0 {
        return Err(HarmonError::invalid_arg("empty image"));
    }
    Ok(())
}

pub fn mae(x: &[f32], y: &[f32]) -> Result<f64> {
    check(x, y, [1, 1, x.len()])?;
    Ok(x.iter().zip(y).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / x.len() as f64)
}

pub fn mse(x: &[f32], y: &[f32]) -> Result<f64> {
    check(x, y, [1, 1, x.len()])?;
    Ok(x.iter().zip(y).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / x.len() as f64)
}

/// `10 log10(R^2 / MSE)` with `R = 2`, capped at [`PSNR_CEILING_DB`].
pub fn psnr(x: &[f32], y: &[f32]) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CEILING_DB);
    }
    Ok((10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / m).log10()).min(PSNR_CEILING_DB))
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filter of an `h x w` plane.
fn filter(img: &[f64], h: usize, w: usize, win: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|k| win[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance-contrast-structure SSIM and mean contrast-structure term of one scale.
fn ssim_terms(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let c1 = (0.01 * DYNAMIC_RANGE).powi(2);
    let c2 = (0.03 * DYNAMIC_RANGE).powi(2);
    let win = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, oh, ow) = filter(x, h, w, &win);
    let (my, ..) = filter(y, h, w, &win);
    let (sxx, ..) = filter(&prod(x, x), h, w, &win);
    let (syy, ..) = filter(&prod(y, y), h, w, &win);
    let (sxy, ..) = filter(&prod(x, y), h, w, &win);
    let n = (oh * ow) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cxy = sxy[i] - mx[i] * my[i];
        let c = (2.0 * cxy + c2) / (vx + vy + c2);
        let l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (img[i] + img[i + 1] + img[i + w] + img[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Number of scales usable for an `h x w` image (each scale needs a full window).
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    (0..MS_SSIM_WEIGHTS.len()).take_while(|&k| (h >> k) >= WINDOW && (w >> k) >= WINDOW).count()
}

/// Multi-scale SSIM averaged over channels.
///
/// Images are shifted from [-1, 1] to [0, 2] so luminance is nonnegative, and
/// each per-scale term is clamped at 0, which keeps the result in [0, 1].
/// Images too small for five scales use as many as fit, with the exponents
/// renormalized to sum to one.
pub fn ms_ssim(x: &[f32], y: &[f32], shape: Shape) -> Result<f64> {
    check(x, y, shape)?;
    let [c, h, w] = shape;
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(HarmonError::invalid_arg(format!("{h}x{w} is smaller than the {WINDOW}x{WINDOW} SSIM window")));
    }
    if scales < MS_SSIM_WEIGHTS.len() {
        log::warn!("MS-SSIM on {h}x{w} images uses {scales} of {} scales", MS_SSIM_WEIGHTS.len());
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let mut a: Vec<f64> = x[ch * plane..(ch + 1) * plane].iter().map(|v| *v as f64 + 1.0).collect();
        let mut b: Vec<f64> = y[ch * plane..(ch + 1) * plane].iter().map(|v| *v as f64 + 1.0).collect();
        let (mut hh, mut ww) = (h, w);
        let mut value = 1.0;
        for (k, wk) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_terms(&a, &b, hh, ww);
            let term = if k + 1 == scales { ssim } else { cs };
            value *= term.max(0.0).powf(wk / wsum);
            if k + 1 < scales {
                let (na, nh, nw) = downsample(&a, hh, ww);
                let (nb, ..) = downsample(&b, hh, ww);
                a = na;
                b = nb;
                hh = nh;
                ww = nw;
            }
        }
        total += value;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_images() {
        let x = noise(3 * 64 * 64, 1);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CEILING_DB);
        assert!((ms_ssim(&x, &x, [3, 64, 64]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset() {
        let x: Vec<f32> = noise(1000, 2).iter().map(|v| v * 0.5).collect();
        let y: Vec<f32> = x.iter().map(|v| v + 0.1).collect();
        assert!((mae(&x, &y).unwrap() - 0.1).abs() < 1e-6);
        assert!((psnr(&x, &y).unwrap() - 10.0 * (4.0f64 / 0.01).log10()).abs() < 1e-4);
        assert!((psnr(&x, &y).unwrap() - 26.0206).abs() < 1e-3);
    }

    #[test]
    fn psnr_decreases_with_error() {
        let x = noise(256, 3);
        let mut last = f64::INFINITY;
        for k in 1..6 {
            let y: Vec<f32> = x.iter().map(|v| v + 0.05 * k as f32).collect();
            let p = psnr(&x, &y).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn scale_count_and_errors() {
        assert_eq!(ms_ssim_scales(256, 256), 5);
        assert_eq!(ms_ssim_scales(176, 176), 5);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(10, 10), 0);
        assert!(ms_ssim(&[0.0; 100], &[0.0; 100], [1, 10, 10]).is_err());
        assert!(mae(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn ms_ssim_in_unit_interval() {
        for seed in 0..5 {
            let x = noise(2 * 48 * 48, seed);
            let y = noise(2 * 48 * 48, seed + 100);
            let v = ms_ssim(&x, &y, [2, 48, 48]).unwrap();
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }
}
