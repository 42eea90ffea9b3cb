//! Interpolate between two site styles and save the resulting sequence, one
//! row per input slice and one column per interpolation weight.
//!
//! ```text
//! cargo run --release --example interpolate_styles -- [checkpoint] [montage.png]
//! ```

mod common;

use std::path::PathBuf;

use harmon::data::io::write_montage;
use harmon::data::ImageSample;
use harmon::infer::{interpolate, site_style};
use harmon::nets::batch_tensor;

fn main() -> harmon::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.get(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("harmon-interp.png"));
    let data = common::splits(20, 2, 0)?;
    let model = common::model(args.first().map(String::as_str), &data.train, 300)?;
    let c = model.config().canvas;

    let inputs: Vec<&ImageSample> = data.val.site(0).iter().step_by(6).take(4).collect();
    let (s_a, s_b) = (site_style(&model, 1, 5)?, site_style(&model, 2, 5)?);
    let betas: Vec<f64> = (0..=6).map(|k| k as f64 / 6.0).collect();
    let frames = interpolate(&model, &batch_tensor(&inputs)?, &s_a, &s_b, &betas)?;

    let mut rows = vec![Vec::new(); inputs.len()];
    for (beta, frame) in betas.iter().zip(&frames) {
        let mids = common::middle_channels(&frame.flatten_all()?.to_vec1::<f32>()?, c);
        let mean = mids.iter().flatten().map(|v| *v as f64).sum::<f64>() / (mids.len() * c * c) as f64;
        println!("beta {beta:.3}: mean intensity {mean:+.4}");
        for (row, m) in rows.iter_mut().zip(mids) {
            row.push(m);
        }
    }
    write_montage(&out, &rows, c, c)?;
    println!("montage written to {}", out.display());
    Ok(())
}
