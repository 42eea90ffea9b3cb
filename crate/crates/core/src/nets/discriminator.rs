use candle_core::Tensor;
use rand::Rng;

use super::layers::{global_avg_pool, lrelu, Conv2d, ParamStore, SiteHeads};
use super::ModelConfig;
use crate::error::Result;

/// Three shared stride-2 conv blocks and global average pooling, then one
/// real/fake logit head per site. No instance normalization: it would erase
/// exactly the intensity statistics that distinguish sites.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: [Conv2d; 3],
    heads: SiteHeads,
}

impl Discriminator {
    pub(crate) fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let [c1, c2, c3] = cfg.encoder_channels();
        let convs = [
            Conv2d::new(ps, "disc.block1", 3, c1, 4, 2, 1, rng)?,
            Conv2d::new(ps, "disc.block2", c1, c2, 4, 2, 1, rng)?,
            Conv2d::new(ps, "disc.block3", c2, c3, 4, 2, 1, rng)?,
        ];
        let heads = SiteHeads::new(ps, "disc", cfg.n_sites, c3, 1, rng)?;
        Ok(Self { convs, heads })
    }

    /// Logits `[B]`; `sigmoid(logit)` is the probability the input is real.
    pub fn forward(&self, x: &Tensor, sites: &[usize]) -> Result<Tensor> {
        self.heads.check_sites(sites)?;
        let mut h = x.clone();
        for c in &self.convs {
            h = lrelu(&c.forward(&h)?)?;
        }
        Ok(self.heads.forward(&global_avg_pool(&h)?, sites)?.squeeze(1)?)
    }
}
