//! Image-quality and distribution metrics on the synthetic sites, followed by
//! the full harmonization evaluation of a model.
//!
//! ```text
//! cargo run --release --example evaluate_metrics -- [checkpoint]
//! ```

mod common;

use harmon::metrics::{
    dice, evaluate_harmonization, fid, kid, mae, ms_ssim, psnr, toy_segment, EvalProtocol, FeatureExtractor,
    SegmentationMap, DEFAULT_FEATURE_DIM, DEFAULT_FEATURE_SEED, N_CLASSES,
};

fn main() -> harmon::Result<()> {
    let checkpoint = std::env::args().nth(1);
    let data = common::splits(20, 6, 3)?;
    let c = common::CANVAS;

    println!("phantom pairs before harmonization");
    for pair in data.phantoms.iter().filter(|p| p.source.subject_id == data.phantoms[0].source.subject_id).step_by(12) {
        let (x, y) = (&pair.source.pixels, &pair.target.pixels);
        let seg = toy_segment(&pair.source.channel_extent(1))?;
        let gt = SegmentationMap::new(pair.source.labels_extent().unwrap_or_default())?;
        let dices: Vec<String> =
            (0..N_CLASSES as u8).map(|k| dice(&seg, &gt, k).map(|d| format!("{d:.3}"))).collect::<harmon::Result<_>>()?;
        println!(
            "  {} -> {}  MAE {:.4}  PSNR {:.2} dB  MS-SSIM {:.4}  Dice(gt) [{}]",
            pair.source.site_id,
            pair.target.site_id,
            mae(x, y)?,
            psnr(x, y)?,
            ms_ssim(x, y, [3, c, c])?,
            dices.join(", ")
        );
    }

    let features = FeatureExtractor::new(DEFAULT_FEATURE_SEED, DEFAULT_FEATURE_DIM)?;
    let sets: Vec<Vec<Vec<f32>>> = (0..3)
        .map(|s| features.embed_all(&data.val.site(s).iter().map(|x| x.pixels.clone()).collect::<Vec<_>>(), c, 16))
        .collect::<harmon::Result<_>>()?;
    println!("\ncross-site distances between validation sets");
    for a in 0..3 {
        for b in a + 1..3 {
            println!("  {a} vs {b}: FID {:.3}  KID {:.5}", fid(&sets[a], &sets[b])?, kid(&sets[a], &sets[b])?);
        }
    }

    let model = common::model(checkpoint.as_deref(), &data.train, 300)?;
    let protocol = EvalProtocol { n_styles: 3, n_refs: 3, max_test_per_site: 36, ..EvalProtocol::default() };
    let report = evaluate_harmonization(&model, &data.train, &data.val, &data.phantoms, &protocol)?;
    println!("\n{}", report.to_text());
    Ok(())
}
