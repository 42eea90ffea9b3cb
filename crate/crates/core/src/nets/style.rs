use candle_core::Tensor;
use rand::Rng;

use super::layers::{global_avg_pool, lrelu, Conv2d, Linear, ParamStore, SiteHeads};
use super::{ModelConfig, HIDDEN_DIM, LATENT_DIM, STYLE_DIM};
use crate::error::{HarmonError, Result};

/// LReLU -> conv -> avg-pool -> LReLU -> conv, with an avg-pool + 1x1 conv shortcut.
/// No normalization: feature means and variances carry the style.
#[derive(Clone, Debug)]
struct PreActResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl PreActResBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_in, 3, 1, 1, rng)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_in, c_out, 3, 1, 1, rng)?,
            shortcut: Conv2d::new(ps, &format!("{name}.shortcut"), c_in, c_out, 1, 1, 0, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&lrelu(x)?)?.avg_pool2d(2)?;
        let h = self.conv2.forward(&lrelu(&h)?)?;
        let s = self.shortcut.forward(&x.avg_pool2d(2)?)?;
        Ok((h + s)?)
    }
}

/// Site-shared trunk (conv, four pre-activation residual blocks, global
/// average pooling) followed by one 64-d linear head per site.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    stem: Conv2d,
    blocks: Vec<PreActResBlock>,
    heads: SiteHeads,
}

impl StyleEncoder {
    pub(crate) fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let widths = cfg.style_encoder_channels();
        let stem = Conv2d::new(ps, "style_enc.stem", 3, widths[0], 3, 1, 1, rng)?;
        let blocks = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| PreActResBlock::new(ps, &format!("style_enc.block{k}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        let heads = SiteHeads::new(ps, "style_enc", cfg.n_sites, widths[widths.len() - 1], STYLE_DIM, rng)?;
        Ok(Self { stem, blocks, heads })
    }

    /// Pooled site-shared features `[B, F]`.
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        global_avg_pool(&h)
    }

    pub fn forward(&self, x: &Tensor, sites: &[usize]) -> Result<Tensor> {
        self.heads.check_sites(sites)?;
        self.heads.forward(&self.trunk(x)?, sites)
    }
}

/// Six shared fully connected layers (16 -> 256 -> ... -> 256) and one 64-d
/// output layer per site.
#[derive(Clone, Debug)]
pub struct StyleGenerator {
    shared: Vec<Linear>,
    heads: SiteHeads,
}

impl StyleGenerator {
    pub(crate) fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let shared = (0..6)
            .map(|k| {
                let d_in = if k == 0 { LATENT_DIM } else { HIDDEN_DIM };
                Linear::new(ps, &format!("style_gen.fc{k}"), d_in, HIDDEN_DIM, rng)
            })
            .collect::<Result<_>>()?;
        let heads = SiteHeads::new(ps, "style_gen", cfg.n_sites, HIDDEN_DIM, STYLE_DIM, rng)?;
        Ok(Self { shared, heads })
    }

    pub fn forward(&self, z: &Tensor, sites: &[usize]) -> Result<Tensor> {
        let (_, d) = z.dims2()?;
        if d != LATENT_DIM {
            return Err(HarmonError::invalid_arg(format!("latent code has length {d}, expected {LATENT_DIM}")));
        }
        self.heads.check_sites(sites)?;
        let mut h = z.clone();
        for fc in &self.shared {
            h = lrelu(&fc.forward(&h)?)?;
        }
        self.heads.forward(&h, sites)
    }
}
