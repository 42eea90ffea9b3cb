use std::path::Path;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HarmonError, Result};
use crate::nets::container::TensorContainer;
use crate::nets::layers::{global_avg_pool, lrelu, Conv2d, ParamStore};

pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_FEATURE_SEED: u64 = 0x00FE_A7E5;

/// Frozen random convolutional embedder used in place of a pretrained
/// backbone for FID/KID: four 4x4 stride-2 conv + LReLU layers and global
/// average pooling. Fully determined by its seed.
#[derive(Debug)]
pub struct FeatureExtractor {
    params: ParamStore,
    convs: Vec<Conv2d>,
    seed: u64,
    dim: usize,
}

impl FeatureExtractor {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(HarmonError::invalid_arg("feature dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = [3, dim / 4, dim / 2, dim, dim].map(|w| w.max(1));
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Conv2d::new(&mut params, &format!("feat.conv{k}"), w[0], w[1], 4, 2, 1, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { params, convs, seed, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Embed an image batch `[B, 3, H, W]` (H, W multiples of 16).
    pub fn embed(&self, images: &Tensor) -> Result<Vec<Vec<f32>>> {
        let mut h = images.clone();
        for c in &self.convs {
            h = lrelu(&c.forward(&h)?)?;
        }
        Ok(global_avg_pool(&h)?.to_vec2()?)
    }

    /// Embed many images in batches of `batch`.
    pub fn embed_all(&self, images: &[Vec<f32>], canvas: usize, batch: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let flat: Vec<f32> = chunk.iter().flatten().copied().collect();
            let t = Tensor::from_vec(flat, (chunk.len(), 3, canvas, canvas), &candle_core::Device::Cpu)?;
            out.extend(self.embed(&t)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = TensorContainer {
            meta: serde_json::json!({ "feature_extractor": { "seed": self.seed, "dim": self.dim } }),
            ..Default::default()
        };
        for (name, var) in self.params.iter() {
            c.insert(name.clone(), var.dims().to_vec(), var.as_tensor().flatten_all()?.to_vec1()?);
        }
        c.save(path)
    }

    /// Load a persisted extractor; it must match what its seed regenerates.
    pub fn load(path: &Path) -> Result<Self> {
        let c = TensorContainer::load(path)?;
        let meta = c.meta.get("feature_extractor").ok_or_else(|| HarmonError::invalid_data("not a feature extractor"))?;
        let seed = meta["seed"].as_u64().ok_or_else(|| HarmonError::invalid_data("missing seed"))?;
        let dim = meta["dim"].as_u64().ok_or_else(|| HarmonError::invalid_data("missing dim"))? as usize;
        let fe = Self::new(seed, dim)?;
        for (name, var) in fe.params.iter() {
            let rec = c.tensors.get(name).ok_or_else(|| HarmonError::invalid_data(format!("missing {name}")))?;
            let t = Tensor::from_vec(rec.data.clone(), rec.shape.as_slice(), &candle_core::Device::Cpu)?;
            var.set(&t)?;
        }
        Ok(fe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_persistable() {
        let a = FeatureExtractor::new(1, 64).unwrap();
        let b = FeatureExtractor::new(1, 64).unwrap();
        let img: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i % 17) as f32 / 8.0) - 1.0).collect();
        let fa = a.embed_all(&[img.clone()], 32, 4).unwrap();
        assert_eq!(fa[0].len(), 64);
        assert_eq!(fa, b.embed_all(&[img.clone()], 32, 4).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fe.bin");
        a.save(&p).unwrap();
        assert_eq!(fa, FeatureExtractor::load(&p).unwrap().embed_all(&[img], 32, 1).unwrap());
    }
}
