use candle_core::Tensor;
use rand::Rng;

use super::layers::{adain, instance_norm, lrelu, Conv2d, Deconv2d, Linear, ParamStore};
use super::{ModelConfig, STYLE_DIM};
use crate::error::{HarmonError, Result};

/// Affine map from a style code to per-channel `(gamma, beta)` deltas for one
/// normalization layer.
#[derive(Clone, Debug)]
struct StyleAffine {
    fc: Linear,
    channels: usize,
}

impl StyleAffine {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { fc: Linear::new(ps, &format!("{name}.style"), STYLE_DIM, 2 * channels, rng)?, channels })
    }

    /// Normalize `x` and, when a style is given, modulate it.
    fn norm(&self, x: &Tensor, style: Option<&Tensor>) -> Result<Tensor> {
        match style {
            Some(s) => {
                let p = self.fc.forward(s)?;
                let gamma = p.narrow(1, 0, self.channels)?;
                let beta = p.narrow(1, self.channels, self.channels)?;
                adain(x, &gamma, &beta)
            }
            None => instance_norm(x),
        }
    }
}

#[derive(Clone, Debug)]
struct AdaResBlock {
    conv1: Conv2d,
    norm1: StyleAffine,
    conv2: Conv2d,
    norm2: StyleAffine,
}

impl AdaResBlock {
    fn forward(&self, x: &Tensor, s: Option<&Tensor>) -> Result<Tensor> {
        let h = lrelu(&self.norm1.norm(&self.conv1.forward(x)?, s)?)?;
        let h = self.norm2.norm(&self.conv2.forward(&h)?, s)?;
        Ok((x + h)?)
    }
}

/// deconv -> AdaIN -> LReLU
#[derive(Clone, Debug)]
struct UpBlock {
    deconv: Deconv2d,
    norm: StyleAffine,
}

/// Site-shared generator: residual blocks and two upsampling blocks whose
/// normalization layers are modulated by the style code, then a tanh conv.
#[derive(Clone, Debug)]
pub struct Generator {
    res: Vec<AdaResBlock>,
    up: [UpBlock; 2],
    out: Conv2d,
    content_channels: usize,
    content_size: usize,
}

impl Generator {
    pub(crate) fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let [c1, c2, c3] = cfg.encoder_channels();
        let res = (0..cfg.res_blocks)
            .map(|k| {
                let name = format!("gen.res{k}");
                Ok(AdaResBlock {
                    conv1: Conv2d::new(ps, &format!("{name}.conv1"), c3, c3, 3, 1, 1, rng)?,
                    norm1: StyleAffine::new(ps, &format!("{name}.norm1"), c3, rng)?,
                    conv2: Conv2d::new(ps, &format!("{name}.conv2"), c3, c3, 3, 1, 1, rng)?,
                    norm2: StyleAffine::new(ps, &format!("{name}.norm2"), c3, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let up = [
            UpBlock {
                deconv: Deconv2d::new(ps, "gen.up0", c3, c2, rng)?,
                norm: StyleAffine::new(ps, "gen.up0.norm", c2, rng)?,
            },
            UpBlock {
                deconv: Deconv2d::new(ps, "gen.up1", c2, c1, rng)?,
                norm: StyleAffine::new(ps, "gen.up1.norm", c1, rng)?,
            },
        ];
        let out = Conv2d::new(ps, "gen.out", c1, 3, 7, 1, 3, rng)?;
        Ok(Self { res, up, out, content_channels: c3, content_size: cfg.content_size() })
    }

    /// `style = None` runs every normalization as plain IN (no modulation).
    pub fn forward(&self, c: &Tensor, style: Option<&Tensor>) -> Result<Tensor> {
        let dims = c.dims();
        if dims.len() != 4
            || dims[1] != self.content_channels
            || dims[2] != self.content_size
            || dims[3] != self.content_size
        {
            return Err(HarmonError::invalid_arg(format!(
                "generator expects content [B, {}, {s}, {s}], got {dims:?}",
                self.content_channels,
                s = self.content_size
            )));
        }
        if let Some(s) = style {
            let sd = s.dims();
            if sd != [dims[0], STYLE_DIM] {
                return Err(HarmonError::invalid_arg(format!(
                    "style code shape {sd:?} does not match batch {} x {STYLE_DIM}",
                    dims[0]
                )));
            }
        }
        let mut h = c.clone();
        for r in &self.res {
            h = r.forward(&h, style)?;
        }
        for u in &self.up {
            h = lrelu(&u.norm.norm(&u.deconv.forward(&h)?, style)?)?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}
