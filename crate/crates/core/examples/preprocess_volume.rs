//! Turn one synthetic volume into normalized, padded slice triplets and save
//! them as a montage (one row per triplet, one column per channel).
//!
//! ```text
//! cargo run --release --example preprocess_volume -- [montage.png]
//! ```

use std::path::PathBuf;

use harmon::data::io::write_montage;
use harmon::data::{preprocess_volume, synthesize_splits, PreprocessConfig, SiteSpec, SynthShape};

fn main() -> harmon::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("harmon-triplets.png"));
    let shape = SynthShape { depth: 24, height: 50, width: 58 };
    let site = &SiteSpec::desk_sites()[1];
    let (_, volume) = synthesize_splits(std::slice::from_ref(site), 1, 0, 0, 3, shape)?.remove(0);
    println!("volume {} site {}: {}x{}x{}", volume.subject_id, volume.site_id, volume.depth, volume.height, volume.width);

    let cfg = PreprocessConfig { slice_count: 8, stride: 2, canvas: 64 };
    let samples = preprocess_volume(&volume, &cfg)?;
    println!("{} triplets of 3x{c}x{c} (extent {:?})", samples.len(), samples[0].extent, c = cfg.canvas);
    for s in &samples {
        let ranges: Vec<String> = (0..3)
            .map(|c| {
                let ch = s.channel_extent(c);
                let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                format!("[{lo:+.2}, {hi:+.2}]")
            })
            .collect();
        println!("  slices {:>2}..{:>2}  channel ranges {}", s.slice_index, s.slice_index + 3, ranges.join(" "));
    }

    let rows: Vec<Vec<Vec<f32>>> = samples.iter().map(|s| (0..3).map(|c| s.channel(c).to_vec()).collect()).collect();
    write_montage(&out, &rows, cfg.canvas, cfg.canvas)?;
    println!("montage written to {}", out.display());
    Ok(())
}
