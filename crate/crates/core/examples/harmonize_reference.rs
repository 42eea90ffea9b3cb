//! Reference-specific harmonization: encode the style of a few reference
//! slices from the target site and apply it to slices from another site.
//!
//! ```text
//! cargo run --release --example harmonize_reference -- [checkpoint]
//! ```

mod common;

use harmon::data::ImageSample;
use harmon::infer::{harmonize_reference, RefAggregation};
use harmon::metrics::{fid, FeatureExtractor, DEFAULT_FEATURE_DIM, DEFAULT_FEATURE_SEED};
use harmon::nets::batch_tensor;

fn main() -> harmon::Result<()> {
    let checkpoint = std::env::args().nth(1);
    let data = common::splits(20, 6, 0)?;
    let model = common::model(checkpoint.as_deref(), &data.train, 300)?;
    let c = model.config().canvas;
    let features = FeatureExtractor::new(DEFAULT_FEATURE_SEED, DEFAULT_FEATURE_DIM)?;
    let embed = |imgs: Vec<Vec<f32>>| features.embed_all(&imgs, c, 16);

    let (source, target) = (2, 0);
    let inputs: Vec<&ImageSample> = data.val.site(source).iter().collect();
    let target_feats = embed(data.val.site(target).iter().map(|s| s.pixels.clone()).collect())?;
    let before = fid(&embed(inputs.iter().map(|s| s.pixels.clone()).collect())?, &target_feats)?;
    println!("site {source} -> {target}, {} slices, FID before {before:.3}", inputs.len());

    for (label, aggregation, n_refs) in
        [("one reference", RefAggregation::First, 1), ("mean of 8 references", RefAggregation::Mean, 8)]
    {
        let refs: Vec<&ImageSample> = data.train.site(target).iter().step_by(17).take(n_refs).collect();
        let y = harmonize_reference(&model, &batch_tensor(&inputs)?, &refs, aggregation)?;
        let flat = y.flatten_all()?.to_vec1::<f32>()?;
        let after = fid(&embed(flat.chunks(3 * c * c).map(<[f32]>::to_vec).collect())?, &target_feats)?;
        println!("  {label:<22} FID after {after:.3}");
    }
    Ok(())
}
