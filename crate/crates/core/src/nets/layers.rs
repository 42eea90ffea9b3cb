//! Parameter storage and the handful of layers the five networks are built from.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::conv::{conv2d, conv_transpose2d};
use crate::error::{HarmonError, Result};

pub const LRELU_SLOPE: f64 = 0.2;
const IN_EPS: f64 = 1e-5;

/// Named trainable tensors. Iteration order is the lexicographic name order,
/// which keeps initialization, optimization and serialization deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(HarmonError::invalid_arg(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// He (fan-in) normal initialization.
    pub fn he<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                (g * std) as f32
            })
            .collect();
        self.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<Tensor> {
        self.insert(name, Tensor::zeros(shape, candle_core::DType::F32, &Device::Cpu)?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrite a parameter in place (shape must match).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| HarmonError::invalid_data(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(HarmonError::invalid_data(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(value)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = ps.he(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng)?;
        let bias = ps.zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Stride-2 transposed convolution that exactly doubles the spatial size.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    weight: Tensor,
    bias: Tensor,
}

impl Deconv2d {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        // each output pixel sees k*k/stride^2 = 4 taps per input channel
        let weight = ps.he(format!("{name}.weight"), &[c_in, c_out, 4, 4], c_in * 4, rng)?;
        let bias = ps.zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, &self.weight, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let weight = ps.he(format!("{name}.weight"), &[d_out, d_in], d_in, rng)?;
        let bias = ps.zeros(format!("{name}.bias"), &[d_out])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LRELU_SLOPE)?)?)
}

/// Instance normalization over the spatial dims of `[B, C, H, W]`, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(centred.broadcast_div(&(var + IN_EPS)?.sqrt()?)?)
}

/// Adaptive instance normalization: `(1 + gamma) * IN(x) + beta`, where
/// `gamma`/`beta` are `[B, C]` modulation deltas derived from a style code.
pub fn adain(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, c) = gamma.dims2()?;
    let g = (gamma.reshape((b, c, 1, 1))? + 1.0)?;
    let bt = beta.reshape((b, c, 1, 1))?;
    Ok(instance_norm(x)?.broadcast_mul(&g)?.broadcast_add(&bt)?)
}

/// Global average pooling `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// One linear head per site; sample `b` is routed through head `sites[b]`.
/// Every head takes part in the graph (unused ones receive zero gradient).
#[derive(Clone, Debug)]
pub struct SiteHeads {
    heads: Vec<Linear>,
}

impl SiteHeads {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        n_sites: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let heads = (0..n_sites)
            .map(|k| Linear::new(ps, &format!("{name}.head{k}"), d_in, d_out, rng))
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }

    pub fn n_sites(&self) -> usize {
        self.heads.len()
    }

    pub fn check_sites(&self, sites: &[usize]) -> Result<()> {
        match sites.iter().find(|&&s| s >= self.heads.len()) {
            Some(s) => Err(HarmonError::invalid_arg(format!(
                "site {s} out of range for {} sites",
                self.heads.len()
            ))),
            None => Ok(()),
        }
    }

    pub fn forward(&self, x: &Tensor, sites: &[usize]) -> Result<Tensor> {
        self.check_sites(sites)?;
        let b = x.dim(0)?;
        if b != sites.len() {
            return Err(HarmonError::invalid_arg(format!("{b} inputs but {} site labels", sites.len())));
        }
        let n = self.heads.len();
        let mut onehot = vec![0f32; b * n];
        for (i, &s) in sites.iter().enumerate() {
            onehot[i * n + s] = 1.0;
        }
        let mask = Tensor::from_vec(onehot, (b, n, 1), x.device())?;
        let outs = self.heads.iter().map(|h| h.forward(x)).collect::<Result<Vec<_>>>()?;
        let stacked = Tensor::stack(&outs, 1)?;
        Ok(stacked.broadcast_mul(&mask)?.sum(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let x = Tensor::arange(0f32, 32.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let y = instance_norm(&(x * 3.0).unwrap()).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        for ch in v.chunks(16) {
            let mean: f32 = ch.iter().sum::<f32>() / 16.0;
            let var: f32 = ch.iter().map(|a| (a - mean).powi(2)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_modulation_is_plain_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..2 * 3 * 5 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(data, (2, 3, 5, 5), &Device::Cpu).unwrap();
        let z = Tensor::zeros((2, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        let a = adain(&x, &z, &z).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = instance_norm(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn site_heads_route_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let heads = SiteHeads::new(&mut ps, "h", 3, 4, 2, &mut rng).unwrap();
        let x = Tensor::ones((2, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        let routed = heads.forward(&x, &[2, 0]).unwrap();
        let direct2 = heads.heads[2].forward(&x).unwrap().get(0).unwrap();
        let direct0 = heads.heads[0].forward(&x).unwrap().get(1).unwrap();
        assert_eq!(routed.get(0).unwrap().to_vec1::<f32>().unwrap(), direct2.to_vec1::<f32>().unwrap());
        assert_eq!(routed.get(1).unwrap().to_vec1::<f32>().unwrap(), direct0.to_vec1::<f32>().unwrap());
        assert!(heads.forward(&x, &[3, 0]).is_err());
    }

    #[test]
    fn deconv_doubles_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let d = Deconv2d::new(&mut ps, "d", 2, 3, &mut rng).unwrap();
        let x = Tensor::ones((1, 2, 5, 7), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[1, 3, 10, 14]);
    }
}
