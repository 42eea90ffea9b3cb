//! Site-specific harmonization: translate travelling-phantom slices from one
//! site to every other site with styles drawn from the target's style
//! generator, and compare against the same phantom imaged at the target.
//!
//! ```text
//! cargo run --release --example harmonize_site -- [checkpoint] [montage.png]
//! ```

mod common;

use std::path::PathBuf;

use harmon::data::io::write_montage;
use harmon::data::ImageSample;
use harmon::infer::harmonize_site;
use harmon::metrics::{mae, ms_ssim};
use harmon::nets::batch_tensor;

fn main() -> harmon::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.get(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("harmon-site.png"));
    let data = common::splits(20, 0, 2)?;
    let model = common::model(args.first().map(String::as_str), &data.train, 300)?;
    let c = model.config().canvas;

    let mut rows = Vec::new();
    for target in 1..model.config().n_sites {
        let pairs: Vec<_> = data.phantoms.iter().filter(|p| p.source.site_id == 0 && p.target.site_id == target).collect();
        let sources: Vec<&ImageSample> = pairs.iter().map(|p| &p.source).collect();
        let y = harmonize_site(&model, &batch_tensor(&sources)?, target, 42)?;
        let flat = y.flatten_all()?.to_vec1::<f32>()?;
        let (mut before, mut after, mut ssim_before, mut ssim_after) = (0.0, 0.0, 0.0, 0.0);
        for (k, p) in pairs.iter().enumerate() {
            let h = &flat[k * 3 * c * c..(k + 1) * 3 * c * c];
            before += mae(&p.source.pixels, &p.target.pixels)?;
            after += mae(h, &p.target.pixels)?;
            ssim_before += ms_ssim(&p.source.pixels, &p.target.pixels, [3, c, c])?;
            ssim_after += ms_ssim(h, &p.target.pixels, [3, c, c])?;
        }
        let n = pairs.len() as f64;
        println!(
            "site 0 -> {target}: {} slices  MAE {:.4} -> {:.4}  MS-SSIM {:.4} -> {:.4}",
            pairs.len(),
            before / n,
            after / n,
            ssim_before / n,
            ssim_after / n
        );
        let k = pairs.len() / 2;
        rows.push(vec![
            pairs[k].source.channel(1).to_vec(),
            common::middle_channels(&flat, c)[k].clone(),
            pairs[k].target.channel(1).to_vec(),
        ]);
    }
    write_montage(&out, &rows, c, c)?;
    println!("montage (source | harmonized | target) written to {}", out.display());
    Ok(())
}
