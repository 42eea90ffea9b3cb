//! Shared setup for the examples: a small synthetic three-site dataset and a
//! model that is either loaded from a checkpoint or trained briefly.

#![allow(dead_code)]

use std::path::Path;

use harmon::data::{
    pair_phantoms, preprocess_volume, synthesize_splits, ImageSample, MultiSiteDataset, PhantomPair, PreprocessConfig,
    SiteSpec, SynthShape,
};
use harmon::nets::{HarmonModel, ModelConfig};
use harmon::train::{train, TrainConfig, Trainer};

pub const CANVAS: usize = 64;

pub struct Splits {
    pub train: MultiSiteDataset,
    pub val: MultiSiteDataset,
    pub phantoms: Vec<PhantomPair>,
}

pub fn shape() -> SynthShape {
    SynthShape { depth: 16, height: 56, width: 56 }
}

pub fn preprocess() -> PreprocessConfig {
    PreprocessConfig { slice_count: 12, stride: 1, canvas: CANVAS }
}

pub fn splits(n_train: usize, n_val: usize, n_phantom: usize) -> harmon::Result<Splits> {
    let (mut tr, mut va, mut ph) = (Vec::new(), Vec::new(), Vec::<ImageSample>::new());
    for (split, v) in synthesize_splits(&SiteSpec::desk_sites(), n_train, n_val, n_phantom, 0, shape())? {
        let samples = preprocess_volume(&v, &preprocess())?;
        match split {
            "train" => tr.extend(samples),
            "val" => va.extend(samples),
            _ => ph.extend(samples),
        }
    }
    let phantoms = pair_phantoms(&ph);
    Ok(Splits { train: MultiSiteDataset::new(3, tr)?, val: MultiSiteDataset::new(3, va)?, phantoms })
}

/// Load `checkpoint` when given, otherwise train `iterations` steps on `data`.
pub fn model(checkpoint: Option<&str>, data: &MultiSiteDataset, iterations: u64) -> harmon::Result<HarmonModel> {
    if let Some(p) = checkpoint {
        println!("loading {p}");
        return HarmonModel::load(Path::new(p));
    }
    println!("no checkpoint given, training {iterations} iterations (pass a checkpoint path to skip)");
    let cfg = TrainConfig {
        model: ModelConfig { n_sites: 3, canvas: CANVAS, width_mult: 0.125, res_blocks: 4 },
        batch_size: 4,
        iterations,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    train(&mut trainer, data, None, None)?;
    trainer.model().snapshot()
}

/// Middle channel of every `[3, S, S]` image in a flattened batch.
pub fn middle_channels(flat: &[f32], canvas: usize) -> Vec<Vec<f32>> {
    let plane = canvas * canvas;
    flat.chunks(3 * plane).map(|img| img[plane..2 * plane].to_vec()).collect()
}
