//! 2-D convolution and transposed convolution as im2col + sgemm custom ops.
//!
//! Three primitives share one geometry: the forward convolution, its
//! input-gradient (which is also the transposed convolution) and its
//! weight-gradient. Each is the backward of the others, so both layer kinds
//! are differentiable. Results are deterministic: batch elements are
//! processed in order and every reduction runs in a fixed order.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use crate::error::{HarmonError, Result};

/// Geometry of a convolution from an image `[c, h, w]` to `[c_out, ho, wo]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(HarmonError::invalid_arg(format!("conv: {k}x{k} kernel does not fit {h}x{w} with pad {pad}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c, h, w, c_out, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn output_len(&self) -> usize {
        self.c_out * self.pixels()
    }

    /// Input coordinate hit by output `o` through tap `t`, if inside the image.
    fn source(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < n)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the image row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx { ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// `[c, h, w]` -> `[c * k * k, ho * wo]`.
    fn im2col(&self, img: &[f32], cols: &mut [f32]) {
        let (k, s) = (self.k, self.stride);
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx);
                    let row = &mut cols[((c * k + ky) * k + kx) * self.pixels()..][..self.pixels()];
                    for oy in 0..self.ho {
                        let out = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            out.fill(0.0);
                            continue;
                        };
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        if lo < hi {
                            let line = &plane[iy * self.w..(iy + 1) * self.w];
                            let start = lo * s + kx - self.pad;
                            if s == 1 {
                                out[lo..hi].copy_from_slice(&line[start..start + hi - lo]);
                            } else {
                                for (j, v) in out[lo..hi].iter_mut().enumerate() {
                                    *v = line[start + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: scatter-add columns back into `[c, h, w]`.
    fn col2im(&self, cols: &[f32], img: &mut [f32]) {
        let (k, s) = (self.k, self.stride);
        img.fill(0.0);
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let row = &cols[((c * k + ky) * k + kx) * self.pixels()..][..self.pixels()];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        let line = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let src = &row[oy * self.wo + lo..oy * self.wo + hi];
                        let start = lo * s + kx - self.pad;
                        if s == 1 {
                            for (d, v) in line[start..start + hi - lo].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in src.iter().enumerate() {
                                line[start + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op` chosen by the transpose flags.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the m x k, k x n and m x n extents addressed by these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout, what: &str) -> candle_core::Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(d) => d,
        _ => candle_core::bail!("conv {what}: only f32 is supported"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv {what}: operand must be contiguous"),
    }
}

/// `(x [B, c, h, w], w [c_out, c, k, k]) -> y [B, c_out, ho, wo]`
struct ConvFwd(Geom);
/// `(gy [B, c_out, ho, wo], w [c_out, c, k, k]) -> gx [B, c, h, w]`
struct ConvBwdInput(Geom);
/// `(x [B, c, h, w], gy [B, c_out, ho, wo]) -> gw [c_out, c, k, k]`
struct ConvBwdWeight(Geom);

impl CustomOp2 for ConvFwd {
    fn name(&self) -> &'static str {
        "harmon-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = f32_slice(s1, l1, "input")?;
        let w = f32_slice(s2, l2, "weight")?;
        let b = l1.dims()[0];
        let mut cols = vec![0f32; g.rows() * g.pixels()];
        let mut y = vec![0f32; b * g.output_len()];
        for i in 0..b {
            g.im2col(&x[i * g.image_len()..(i + 1) * g.image_len()], &mut cols);
            let out = &mut y[i * g.output_len()..(i + 1) * g.output_len()];
            gemm(g.c_out, g.rows(), g.pixels(), w, false, &cols, false, 0.0, out);
        }
        Ok((CpuStorage::F32(y), Shape::from((b, g.c_out, g.ho, g.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _: &Tensor, gy: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gy = gy.contiguous()?;
        let gx = gy.apply_op2_no_bwd(w, &ConvBwdInput(self.0))?;
        let gw = x.apply_op2_no_bwd(&gy, &ConvBwdWeight(self.0))?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for ConvBwdInput {
    fn name(&self) -> &'static str {
        "harmon-conv2d-transpose"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let gy = f32_slice(s1, l1, "input")?;
        let w = f32_slice(s2, l2, "weight")?;
        let b = l1.dims()[0];
        let mut cols = vec![0f32; g.rows() * g.pixels()];
        let mut gx = vec![0f32; b * g.image_len()];
        for i in 0..b {
            let src = &gy[i * g.output_len()..(i + 1) * g.output_len()];
            gemm(g.rows(), g.c_out, g.pixels(), w, true, src, false, 0.0, &mut cols);
            g.col2im(&cols, &mut gx[i * g.image_len()..(i + 1) * g.image_len()]);
        }
        Ok((CpuStorage::F32(gx), Shape::from((b, g.c, g.h, g.w))))
    }

    fn bwd(&self, gy: &Tensor, w: &Tensor, _: &Tensor, g_out: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g_out = g_out.contiguous()?;
        let d_gy = g_out.apply_op2_no_bwd(w, &ConvFwd(self.0))?;
        let d_w = g_out.apply_op2_no_bwd(gy, &ConvBwdWeight(self.0))?;
        Ok((Some(d_gy), Some(d_w)))
    }
}

impl CustomOp2 for ConvBwdWeight {
    fn name(&self) -> &'static str {
        "harmon-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = f32_slice(s1, l1, "input")?;
        let gy = f32_slice(s2, l2, "output gradient")?;
        let b = l1.dims()[0];
        let mut cols = vec![0f32; g.rows() * g.pixels()];
        let mut gw = vec![0f32; g.c_out * g.rows()];
        for i in 0..b {
            g.im2col(&x[i * g.image_len()..(i + 1) * g.image_len()], &mut cols);
            let src = &gy[i * g.output_len()..(i + 1) * g.output_len()];
            gemm(g.c_out, g.pixels(), g.rows(), src, false, &cols, true, if i == 0 { 0.0 } else { 1.0 }, &mut gw);
        }
        Ok((CpuStorage::F32(gw), Shape::from((g.c_out, g.c, g.k, g.k))))
    }
}

/// Square-kernel convolution of `x [B, C, H, W]` with `weight [C_out, C, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (c_out, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(HarmonError::invalid_arg(format!("conv2d: weight {:?} does not fit input {:?}", weight.dims(), x.dims())));
    }
    let g = Geom::new(c, h, w, c_out, k, stride, pad)?;
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, ConvFwd(g))?)
}

/// Transposed convolution of `x [B, C_in, H, W]` with `weight [C_in, C_out, k, k]`;
/// the output side is `(H - 1) * stride + k - 2 * pad`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, c_in, h, w) = x.dims4()?;
    let (wc, c_out, k, k2) = weight.dims4()?;
    if wc != c_in || k != k2 || (h - 1) * stride + k < 2 * pad + 1 {
        return Err(HarmonError::invalid_arg(format!(
            "conv_transpose2d: weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let (oh, ow) = ((h - 1) * stride + k - 2 * pad, (w - 1) * stride + k - 2 * pad);
    let g = Geom::new(c_out, oh, ow, c_in, k, stride, pad)?;
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, ConvBwdInput(g))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1f32..1.0)).collect::<Vec<_>>(), shape, &Device::Cpu).unwrap()
    }

    fn assert_close(a: &Tensor, b: &Tensor) {
        assert_eq!(a.dims(), b.dims());
        let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-4, "{p} vs {q}");
        }
    }

    #[test]
    fn matches_reference_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand(&mut rng, &[2, 3, 9, 8]);
        for (k, stride, pad) in [(7, 1, 3), (4, 2, 1), (3, 1, 1), (1, 1, 0), (3, 2, 0)] {
            let w = rand(&mut rng, &[5, 3, k, k]);
            assert_close(&conv2d(&x, &w, stride, pad).unwrap(), &x.conv2d(&w, pad, stride, 1, 1).unwrap());
        }
        let w = rand(&mut rng, &[3, 4, 4, 4]);
        assert_close(&conv_transpose2d(&x, &w, 2, 1).unwrap(), &x.conv_transpose2d(&w, 1, 0, 2, 1).unwrap());
    }

    #[test]
    fn gradients_match_reference_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Var::from_tensor(&rand(&mut rng, &[2, 3, 8, 8])).unwrap();
        for (k, stride, pad) in [(4, 2, 1), (3, 1, 1), (7, 1, 3), (1, 1, 0), (3, 2, 0)] {
            let w = Var::from_tensor(&rand(&mut rng, &[4, 3, k, k])).unwrap();
            let out = (8 + 2 * pad - k) / stride + 1;
            let probe = rand(&mut rng, &[2, 4, out, out]);
            let ours = (conv2d(&x, &w, stride, pad).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let theirs =
                (x.conv2d(&w, pad, stride, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert_close(ours.get(&x).unwrap(), theirs.get(&x).unwrap());
            assert_close(ours.get(&w).unwrap(), theirs.get(&w).unwrap());
        }

        let wt = Var::from_tensor(&rand(&mut rng, &[3, 2, 4, 4])).unwrap();
        let probe = rand(&mut rng, &[2, 2, 16, 16]);
        let ours = (conv_transpose2d(&x, &wt, 2, 1).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let theirs =
            (x.conv_transpose2d(&wt, 1, 0, 2, 1).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        assert_close(ours.get(&x).unwrap(), theirs.get(&x).unwrap());
        assert_close(ours.get(&wt).unwrap(), theirs.get(&wt).unwrap());
    }
}
