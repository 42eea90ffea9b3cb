//! The five networks: content encoder, per-site style encoder, style
//! generator, generator and per-site discriminator.
//!
//! All networks operate on batched tensors. Per-site networks take a slice of
//! site labels, one per batch element; the content encoder and generator take
//! none.

pub mod container;
pub mod conv;
mod content;
mod discriminator;
mod generator;
pub mod layers;
mod style;

pub use content::ContentEncoder;
pub use discriminator::Discriminator;
pub use generator::Generator;
pub use style::{StyleEncoder, StyleGenerator};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{HarmonError, Result};
use container::TensorContainer;
use layers::ParamStore;

/// Length of a style code.
pub const STYLE_DIM: usize = 64;
/// Length of the latent code fed to the style generator.
pub const LATENT_DIM: usize = 16;
/// Width of the style generator's hidden layers.
pub const HIDDEN_DIM: usize = 256;

/// Prefix shared by all discriminator parameter names.
pub const DISC_PREFIX: &str = "disc.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_sites: usize,
    /// Input canvas side; must be a multiple of 16.
    pub canvas: usize,
    /// Scales every convolutional width (64/128/256 at 1.0).
    pub width_mult: f64,
    #[serde(default = "default_res_blocks")]
    pub res_blocks: usize,
}

fn default_res_blocks() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_sites: 3, canvas: 64, width_mult: 1.0, res_blocks: 4 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 2 {
            return Err(HarmonError::invalid_config(format!("n_sites = {} < 2", self.n_sites)));
        }
        if self.canvas == 0 || self.canvas % 16 != 0 {
            return Err(HarmonError::invalid_config(format!("canvas {} is not a positive multiple of 16", self.canvas)));
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(HarmonError::invalid_config("width_mult must be positive"));
        }
        Ok(())
    }

    fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(1)
    }

    /// Widths of the three content-encoder conv blocks (mirrored by the
    /// generator and reused by the discriminator).
    pub fn encoder_channels(&self) -> [usize; 3] {
        [self.width(64), self.width(128), self.width(256)]
    }

    pub fn style_encoder_channels(&self) -> [usize; 5] {
        [self.width(64), self.width(128), self.width(256), self.width(256), self.width(256)]
    }

    /// Channels of a content code.
    pub fn content_channels(&self) -> usize {
        self.encoder_channels()[2]
    }

    /// Spatial side of a content code (two stride-2 downsamplings).
    pub fn content_size(&self) -> usize {
        self.canvas / 4
    }
}

/// Site-invariant spatial features `[B, C, H/4, W/4]`.
#[derive(Clone, Debug)]
pub struct ContentCode(pub Tensor);

/// Site-specific appearance codes `[B, 64]`.
#[derive(Clone, Debug)]
pub struct StyleCode(pub Tensor);

impl StyleCode {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.dims() {
            [_, d] if *d == STYLE_DIM => Ok(Self(t)),
            other => Err(HarmonError::invalid_arg(format!("style code must be [B, {STYLE_DIM}], got {other:?}"))),
        }
    }

    pub fn from_vec(v: Vec<f32>) -> Result<Self> {
        if v.len() != STYLE_DIM {
            return Err(HarmonError::invalid_arg(format!("style code length {} != {STYLE_DIM}", v.len())));
        }
        Ok(Self(Tensor::from_vec(v, (1, STYLE_DIM), &Device::Cpu)?))
    }

    /// `(1 - beta) * self + beta * other`.
    pub fn lerp(&self, other: &StyleCode, beta: f64) -> Result<StyleCode> {
        Ok(StyleCode(((&self.0 * (1.0 - beta))? + (&other.0 * beta)?)?))
    }

    pub fn to_vecs(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.0.to_vec2()?)
    }
}

/// Latent codes `[B, 16]`, drawn from a standard normal.
#[derive(Clone, Debug)]
pub struct LatentCode(pub Tensor);

impl LatentCode {
    pub fn sample<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Result<Self> {
        Ok(Self(standard_normal(&[batch, LATENT_DIM], rng)?))
    }
}

/// I.i.d. standard normal tensor drawn from `rng` (never from a global RNG).
pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// Stack samples into an image batch `[B, 3, S, S]`.
pub fn batch_tensor(samples: &[&ImageSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| HarmonError::invalid_arg("empty batch"))?;
    let s = first.canvas;
    let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
    for x in samples {
        if x.canvas != s {
            return Err(HarmonError::invalid_arg("batch mixes canvas sizes"));
        }
        data.extend_from_slice(&x.pixels);
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, s, s), &Device::Cpu)?)
}

/// Complete parameter set of the five networks.
#[derive(Debug)]
pub struct HarmonModel {
    cfg: ModelConfig,
    params: ParamStore,
    content: ContentEncoder,
    style_enc: StyleEncoder,
    style_gen: StyleGenerator,
    generator: Generator,
    disc: Discriminator,
}

impl HarmonModel {
    /// Freshly initialized model; identical seeds give identical parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let content = ContentEncoder::new(&mut ps, &cfg, &mut rng)?;
        let style_enc = StyleEncoder::new(&mut ps, &cfg, &mut rng)?;
        let style_gen = StyleGenerator::new(&mut ps, &cfg, &mut rng)?;
        let generator = Generator::new(&mut ps, &cfg, &mut rng)?;
        let disc = Discriminator::new(&mut ps, &cfg, &mut rng)?;
        Ok(Self { cfg, params: ps, content, style_enc, style_gen, generator, disc })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn is_discriminator_param(name: &str) -> bool {
        name.starts_with(DISC_PREFIX)
    }

    pub fn content_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.content.forward(x)
    }

    pub fn style_encode(&self, x: &Tensor, sites: &[usize]) -> Result<Tensor> {
        self.style_enc.forward(x, sites)
    }

    /// Site-shared style-encoder features, before any site head.
    pub fn style_trunk(&self, x: &Tensor) -> Result<Tensor> {
        self.style_enc.trunk(x)
    }

    pub fn style_generate(&self, z: &Tensor, sites: &[usize]) -> Result<Tensor> {
        self.style_gen.forward(z, sites)
    }

    pub fn generate(&self, c: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.generator.forward(c, Some(s))
    }

    /// Generator with every style modulation removed (plain IN throughout).
    pub fn generate_unconditioned(&self, c: &Tensor) -> Result<Tensor> {
        self.generator.forward(c, None)
    }

    pub fn discriminate(&self, x: &Tensor, sites: &[usize]) -> Result<Tensor> {
        self.disc.forward(x, sites)
    }

    /// All parameters as a tensor container (names prefixed with `param/`).
    pub fn write_params(&self, c: &mut TensorContainer) -> Result<()> {
        for (name, var) in self.params.iter() {
            let data = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            c.insert(format!("param/{name}"), var.dims().to_vec(), data);
        }
        Ok(())
    }

    /// Load parameters written by [`write_params`](Self::write_params). Every
    /// parameter must be present with its exact shape.
    pub fn read_params(&self, c: &TensorContainer) -> Result<()> {
        for (name, _) in self.params.iter() {
            let rec = c
                .tensors
                .get(&format!("param/{name}"))
                .ok_or_else(|| HarmonError::invalid_data(format!("checkpoint lacks parameter {name}")))?;
            let t = Tensor::from_vec(rec.data.clone(), rec.shape.as_slice(), &Device::Cpu)?;
            self.params.set(name, &t)?;
        }
        let stored = c.tensors.keys().filter(|k| k.starts_with("param/")).count();
        if stored != self.params.len() {
            return Err(HarmonError::invalid_data(format!(
                "checkpoint holds {stored} parameters, model has {}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Independent deep copy (fresh storage), e.g. a frozen evaluation snapshot.
    pub fn snapshot(&self) -> Result<Self> {
        let copy = Self::new(self.cfg.clone(), 0)?;
        let mut c = TensorContainer::default();
        self.write_params(&mut c)?;
        copy.read_params(&c)?;
        Ok(copy)
    }

    /// Save parameters plus config as a standalone model file.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = TensorContainer { meta: serde_json::json!({ "model": self.cfg }), ..Default::default() };
        self.write_params(&mut c)?;
        c.save(path)
    }

    /// Load a model from a model file or a training checkpoint.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = TensorContainer::load(path)?;
        Self::from_container(&c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            c.meta.get("model").cloned().ok_or_else(|| HarmonError::invalid_data("container has no model config"))?,
        )?;
        let model = Self::new(cfg, 0)?;
        model.read_params(c)?;
        Ok(model)
    }
}
