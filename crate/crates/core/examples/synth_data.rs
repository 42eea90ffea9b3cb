//! Synthesize the three-site dataset, write it to disk and summarize each
//! site's intensity profile per tissue class.
//!
//! ```text
//! cargo run --release --example synth_data -- [out_dir]
//! ```

use std::path::PathBuf;

use harmon::data::io::{volume_dir, write_volume, Manifest};
use harmon::data::{synthesize_splits, SiteSpec, SynthShape, TissueClass};

fn main() -> harmon::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("harmon-synth"));
    let sites = SiteSpec::desk_sites();
    for s in &sites {
        println!("site {}: {s:?}", s.site_id);
    }

    let volumes = synthesize_splits(&sites, 4, 2, 2, 0, SynthShape::default())?;
    let mut manifest = Manifest::default();
    for (split, v) in &volumes {
        let entry = write_volume(&out, &volume_dir(v.site_id, split, &v.subject_id), v, split)?;
        manifest.volumes.push(entry);
    }
    manifest.save(&out)?;
    println!("wrote {} volumes to {}", volumes.len(), out.display());

    let classes = [TissueClass::Background, TissueClass::Csf, TissueClass::Gray, TissueClass::White];
    println!("\nmean intensity per tissue class (train split)");
    println!("{:>6} {}", "site", classes.map(|c| format!("{:>12}", c.name())).join(""));
    for s in &sites {
        let mut sum = [0.0f64; 4];
        let mut n = [0usize; 4];
        for (_, v) in volumes.iter().filter(|(split, v)| *split == "train" && v.site_id == s.site_id) {
            let labels = v.labels.as_ref().expect("synthetic volumes carry labels");
            for (x, &l) in v.voxels.iter().zip(labels) {
                sum[l as usize] += *x as f64;
                n[l as usize] += 1;
            }
        }
        let means: Vec<String> = (0..4).map(|k| format!("{:>12.3}", sum[k] / n[k].max(1) as f64)).collect();
        println!("{:>6} {}", s.site_id, means.join(""));
    }
    Ok(())
}
