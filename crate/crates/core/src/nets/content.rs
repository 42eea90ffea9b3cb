use candle_core::Tensor;
use rand::Rng;

use super::layers::{instance_norm, lrelu, Conv2d, ParamStore};
use super::ModelConfig;
use crate::error::{HarmonError, Result};

/// conv -> IN -> LReLU
#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    conv: Conv2d,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        lrelu(&instance_norm(&self.conv.forward(x)?)?)
    }
}

/// conv -> IN -> LReLU -> conv -> IN, plus identity shortcut.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub(crate) fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), ch, ch, 3, 1, 1, rng)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), ch, ch, 3, 1, 1, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = lrelu(&instance_norm(&self.conv1.forward(x)?)?)?;
        let h = instance_norm(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}

/// Site-shared content encoder: three conv blocks (the last two halve the
/// resolution) followed by residual blocks. Takes no site argument.
#[derive(Clone, Debug)]
pub struct ContentEncoder {
    blocks: [ConvBlock; 3],
    res: Vec<ResBlock>,
    canvas: usize,
}

impl ContentEncoder {
    pub(crate) fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let [c1, c2, c3] = cfg.encoder_channels();
        let blocks = [
            ConvBlock { conv: Conv2d::new(ps, "content.block1", 3, c1, 7, 1, 3, rng)? },
            ConvBlock { conv: Conv2d::new(ps, "content.block2", c1, c2, 4, 2, 1, rng)? },
            ConvBlock { conv: Conv2d::new(ps, "content.block3", c2, c3, 4, 2, 1, rng)? },
        ];
        let res = (0..cfg.res_blocks)
            .map(|k| ResBlock::new(ps, &format!("content.res{k}"), c3, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, res, canvas: cfg.canvas })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.canvas || dims[3] != self.canvas {
            return Err(HarmonError::invalid_arg(format!(
                "content encoder expects [B, 3, {c}, {c}], got {dims:?}",
                c = self.canvas
            )));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        for r in &self.res {
            h = r.forward(&h)?;
        }
        Ok(h)
    }
}
