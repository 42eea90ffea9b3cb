//! Command-line front end. Every subcommand resolves a [`RunConfig`] from
//! `--config` plus `--set` overrides (subcommand flags are shorthands for
//! overrides), runs, and writes a run manifest into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{HarmonizeMode, RunConfig};
use crate::data::io::{self, Manifest};
use crate::data::{
    pair_phantoms, preprocess_volume, synthesize_splits, ImageSample, MultiSiteDataset, PhantomPair, Volume,
};
use crate::error::{HarmonError, Result};
use crate::infer::{self, StyleSource};
use crate::metrics::{evaluate_harmonization, EvalReport, FeatureExtractor};
use crate::nets::container::content_hash;
use crate::nets::{batch_tensor, HarmonModel};
use crate::train::{self, Trainer};

#[derive(Debug, Parser)]
#[command(name = "harmon", version, about = "Multi-site image harmonization")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-site dataset.
    SynthData,
    /// Turn dataset volumes into cached slice-triplet samples.
    Preprocess,
    /// Train a model.
    Train {
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Harmonize a dataset split.
    Harmonize(HarmonizeArgs),
    /// Render style interpolations between two sites.
    Interpolate(InterpolateArgs),
    /// Run the evaluation battery.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    /// site | ref | interpolate
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub target: Option<usize>,
    /// Reference volume directory or sample cache (ref mode).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// mean | first
    #[arg(long)]
    pub ref_agg: Option<String>,
    /// Comma-separated interpolation weights.
    #[arg(long)]
    pub betas: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub from_site: Option<usize>,
    #[arg(long)]
    pub to_site: Option<usize>,
    #[arg(long)]
    pub betas: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_override(key: &str, p: &Path) -> String {
    format!("{key}={}", toml_str(&p.to_string_lossy()))
}

fn betas_override(raw: &str) -> Result<String> {
    let betas = raw
        .split(',')
        .map(|b| b.trim().parse::<f64>().map_err(|e| HarmonError::invalid_arg(format!("bad beta {b:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(format!("harmonize.betas=[{}]", betas.iter().map(|b| format!("{b:?}")).collect::<Vec<_>>().join(", ")))
}

/// Subcommand flags as configuration overrides (applied after `--set`).
fn flag_overrides(cmd: &Command) -> Result<Vec<String>> {
    let mut o = Vec::new();
    match cmd {
        Command::Harmonize(a) => {
            if let Some(m) = &a.mode {
                let mode: HarmonizeMode = m.parse()?;
                let name = match mode {
                    HarmonizeMode::Site => "site",
                    HarmonizeMode::Reference => "reference",
                    HarmonizeMode::Interpolate => "interpolate",
                };
                o.push(format!("harmonize.mode={}", toml_str(name)));
            }
            if let Some(t) = a.target {
                o.push(format!("harmonize.target={t}"));
            }
            if let Some(r) = &a.reference {
                o.push(path_override("harmonize.reference", r));
            }
            if let Some(agg) = &a.ref_agg {
                agg.parse::<infer::RefAggregation>()?;
                o.push(format!("harmonize.ref_agg={}", toml_str(agg)));
            }
            if let Some(b) = &a.betas {
                o.push(betas_override(b)?);
            }
            if let Some(s) = a.seed {
                o.push(format!("harmonize.seed={s}"));
            }
            if let Some(c) = &a.checkpoint {
                o.push(path_override("harmonize.checkpoint", c));
            }
        }
        Command::Interpolate(a) => {
            if let Some(s) = a.from_site {
                o.push(format!("harmonize.from_site={s}"));
            }
            if let Some(s) = a.to_site {
                o.push(format!("harmonize.to_site={s}"));
            }
            if let Some(b) = &a.betas {
                o.push(betas_override(b)?);
            }
            if let Some(c) = &a.checkpoint {
                o.push(path_override("harmonize.checkpoint", c));
            }
        }
        Command::Evaluate { checkpoint: Some(c) } => o.push(path_override("eval.checkpoint", c)),
        _ => {}
    }
    Ok(o)
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command)?);
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::SynthData => cmd_synth_data(&cfg).map(|_| ()),
        Command::Preprocess => cmd_preprocess(&cfg).map(|_| ()),
        Command::Train { resume } => cmd_train(&cfg, resume.as_deref()).map(|_| ()),
        Command::Harmonize(_) => cmd_harmonize(&cfg).map(|_| ()),
        Command::Interpolate(_) => cmd_interpolate(&cfg).map(|_| ()),
        Command::Evaluate { .. } => cmd_evaluate(&cfg).map(|_| ()),
    }
}

/// Write `manifest_<command>.json`: resolved configuration, seeds and the
/// content hash of the checkpoint involved.
pub fn write_run_manifest(cfg: &RunConfig, command: &str, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out)?;
    let ckpt = match checkpoint {
        Some(p) => json!({ "path": p, "sha256": content_hash(p)? }),
        None => serde_json::Value::Null,
    };
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "config_toml": cfg.to_toml()?,
        "seeds": {
            "data": cfg.data.seed,
            "train": cfg.train.seeds,
            "harmonize": cfg.harmonize.seed,
            "eval": cfg.eval.seed,
            "features": cfg.eval.feature_seed,
        },
        "checkpoint": ckpt,
    });
    let path = out.join(format!("manifest_{}.json", command.replace('-', "_")));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Generate every split for every site into `data.root`; returns the manifest.
pub fn cmd_synth_data(cfg: &RunConfig) -> Result<Manifest> {
    let d = &cfg.data;
    let root = &d.root;
    fs::create_dir_all(root)?;
    let mut manifest = Manifest::default();
    for (split, v) in synthesize_splits(&d.sites, d.n_train, d.n_val, d.n_phantom, d.seed, d.shape)? {
        let rel = io::volume_dir(v.site_id, split, &v.subject_id);
        manifest.volumes.push(io::write_volume(root, &rel, &v, split)?);
    }
    manifest.save(root)?;
    log::info!("wrote {} volumes to {}", manifest.volumes.len(), root.display());
    write_run_manifest(cfg, "synth-data", None)?;
    Ok(manifest)
}

fn split_volumes(cfg: &RunConfig, split: &str) -> Result<Vec<Volume>> {
    let vols = io::load_split(&cfg.data.root, split)?;
    if vols.is_empty() {
        return Err(HarmonError::invalid_data(format!(
            "split {split:?} of {} holds no volumes",
            cfg.data.root.display()
        )));
    }
    Ok(vols)
}

fn preprocess_all(cfg: &RunConfig, volumes: &[Volume]) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    for v in volumes {
        out.extend(preprocess_volume(v, &cfg.preprocess)?);
    }
    Ok(out)
}

pub fn samples_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.samples_dir().join(format!("{split}.bin"))
}

/// Cached samples of `split` if `preprocess` wrote them, else preprocess now.
pub fn load_split_samples(cfg: &RunConfig, split: &str) -> Result<Vec<ImageSample>> {
    let cache = samples_path(cfg, split);
    if cache.exists() {
        let s = io::read_samples(&cache)?;
        if s.first().is_some_and(|x| x.canvas != cfg.preprocess.canvas) {
            return Err(HarmonError::invalid_config(format!(
                "cached samples in {} use another canvas; rerun preprocess",
                cache.display()
            )));
        }
        return Ok(s);
    }
    preprocess_all(cfg, &split_volumes(cfg, split)?)
}

/// Preprocess every split listed in the dataset manifest into sample caches.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<Vec<(String, usize)>> {
    let manifest = Manifest::load(&cfg.data.root)?;
    let mut splits: Vec<String> = manifest.volumes.iter().map(|e| e.split.clone()).collect();
    splits.sort();
    splits.dedup();
    fs::create_dir_all(cfg.samples_dir())?;
    let mut counts = Vec::new();
    for split in splits {
        let samples = preprocess_all(cfg, &split_volumes(cfg, &split)?)?;
        io::write_samples(&samples_path(cfg, &split), &samples)?;
        log::info!("{split}: {} samples", samples.len());
        counts.push((split, samples.len()));
    }
    write_run_manifest(cfg, "preprocess", None)?;
    Ok(counts)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let samples = load_split_samples(cfg, "train")?;
    let data = MultiSiteDataset::new(cfg.train.model.n_sites, samples)?;
    data.require_all_sites()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.train.clone(), p)?,
        None => Trainer::new(cfg.train.clone())?,
    };
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    train::train(&mut trainer, &data, Some(&out), None)?;
    let ckpt = cfg.final_checkpoint();
    write_run_manifest(cfg, "train", Some(&ckpt))?;
    Ok(ckpt)
}

fn load_model(cfg: &RunConfig, explicit: Option<&Path>) -> Result<(HarmonModel, PathBuf)> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.final_checkpoint());
    if !path.exists() {
        return Err(HarmonError::MissingArtifact(format!("checkpoint {} not found", path.display())));
    }
    let model = HarmonModel::load(&path)?;
    if model.config().canvas != cfg.preprocess.canvas {
        return Err(HarmonError::invalid_config(format!(
            "checkpoint canvas {} != preprocess.canvas {}",
            model.config().canvas,
            cfg.preprocess.canvas
        )));
    }
    Ok((model, path))
}

/// Reference samples from a sample cache (`.bin`) or a volume directory
/// inside a dataset (the manifest is found in a parent directory).
pub fn load_reference(cfg: &RunConfig, path: &Path) -> Result<Vec<ImageSample>> {
    if !path.exists() {
        return Err(HarmonError::MissingArtifact(format!("reference {} not found", path.display())));
    }
    if path.is_file() {
        return io::read_samples(path);
    }
    let abs = fs::canonicalize(path)?;
    let mut root = abs.parent();
    while let Some(r) = root {
        if io::manifest_path(r).exists() {
            let manifest = Manifest::load(r)?;
            let rel = abs.strip_prefix(r).map_err(|e| HarmonError::invalid_data(e.to_string()))?;
            let rel = rel.to_string_lossy().replace('\\', "/");
            let entry = manifest
                .volumes
                .iter()
                .find(|e| e.path.trim_end_matches('/') == rel)
                .ok_or_else(|| HarmonError::invalid_data(format!("{rel} is not listed in {}", r.display())))?;
            return preprocess_volume(&io::read_volume(r, entry)?, &cfg.preprocess);
        }
        root = r.parent();
    }
    Err(HarmonError::invalid_data(format!("no dataset manifest above {}", path.display())))
}

/// Middle slice of the central triplet of each volume, as montage input.
fn montage_inputs(samples: &[ImageSample], rows: usize) -> Vec<&ImageSample> {
    let mut by_subject: Vec<Vec<&ImageSample>> = Vec::new();
    for s in samples {
        match by_subject.last_mut() {
            Some(g) if g[0].subject_id == s.subject_id && g[0].site_id == s.site_id => g.push(s),
            _ => by_subject.push(vec![s]),
        }
    }
    by_subject.into_iter().take(rows.max(1)).map(|g| g[g.len() / 2]).collect()
}

fn middle(s: &ImageSample) -> Vec<f32> {
    s.channel_extent(1)
}

/// Harmonize a split into dataset layout under `<output>/harmonized/<mode>`.
pub fn cmd_harmonize(cfg: &RunConfig) -> Result<PathBuf> {
    let h = &cfg.harmonize;
    if h.mode == HarmonizeMode::Interpolate {
        return cmd_interpolate(cfg);
    }
    let (model, ckpt) = load_model(cfg, h.checkpoint.as_deref())?;
    let (style, tag) = match h.mode {
        HarmonizeMode::Site => (StyleSource::Site { target: h.target, seed: h.seed }, format!("site{}", h.target)),
        _ => {
            let path = h
                .reference
                .as_ref()
                .ok_or_else(|| HarmonError::invalid_config("reference mode needs harmonize.reference"))?;
            let refs = load_reference(cfg, path)?;
            (StyleSource::Reference { references: refs, aggregation: h.ref_agg }, "reference".to_string())
        }
    };
    let out_root = cfg.resolved_output_dir().join("harmonized").join(&tag);
    fs::create_dir_all(&out_root)?;
    let volumes: Vec<Volume> = split_volumes(cfg, &h.split)?
        .into_iter()
        .filter(|v| h.source_site.is_none_or(|s| s == v.site_id))
        .collect();
    let mut manifest = Manifest::default();
    let mut rows = Vec::new();
    for v in &volumes {
        let out = infer::harmonize_volume(&model, v, &style, &cfg.preprocess, h.batch)?;
        let subject = format!("{}-from{}", v.subject_id, v.site_id);
        let rel = io::volume_dir(out.site_id, &h.split, &subject);
        manifest.volumes.push(io::write_volume(&out_root, &rel, &out, &h.split)?);
        if rows.len() < h.montage_rows {
            let input = preprocess_volume(v, &cfg.preprocess)?;
            let src = montage_inputs(&input, 1)[0];
            let first = input.iter().map(|s| s.slice_index).min().unwrap_or(0);
            rows.push(vec![middle(src), out.slice(src.slice_index + 1 - first).into_data()]);
        }
    }
    manifest.save(&out_root)?;
    let [hgt, wdt] = volumes
        .first()
        .map(|v| [v.height, v.width])
        .ok_or_else(|| HarmonError::invalid_data("no input volumes"))?;
    io::write_montage(&out_root.join("montage.png"), &rows, hgt, wdt)?;
    write_run_manifest(cfg, "harmonize", Some(&ckpt))?;
    log::info!("harmonized {} volumes into {}", volumes.len(), out_root.display());
    Ok(out_root)
}

/// Interpolate between the site styles of `from_site` and `to_site`; writes a
/// montage (rows: inputs, columns: input then each beta) and the outputs.
pub fn cmd_interpolate(cfg: &RunConfig) -> Result<PathBuf> {
    let h = &cfg.harmonize;
    let (model, ckpt) = load_model(cfg, h.checkpoint.as_deref())?;
    let samples = load_split_samples(cfg, &h.split)?;
    let filtered: Vec<ImageSample> =
        samples.into_iter().filter(|s| h.source_site.is_none_or(|k| k == s.site_id)).collect();
    let inputs = montage_inputs(&filtered, h.montage_rows);
    if inputs.is_empty() {
        return Err(HarmonError::invalid_data("no inputs to interpolate"));
    }
    let s_a = infer::site_style(&model, h.from_site, h.seed)?;
    let s_b = infer::site_style(&model, h.to_site, h.seed)?;
    let x = batch_tensor(&inputs)?;
    let outs = infer::interpolate(&model, &x, &s_a, &s_b, &h.betas)?;
    let per_beta: Vec<Vec<ImageSample>> =
        outs.iter().map(|t| infer::to_samples(t, &inputs, h.to_site)).collect::<Result<_>>()?;
    let rows: Vec<Vec<Vec<f32>>> = (0..inputs.len())
        .map(|r| std::iter::once(middle(inputs[r])).chain(per_beta.iter().map(|b| middle(&b[r]))).collect())
        .collect();
    let out_dir = cfg.resolved_output_dir().join("interpolate");
    fs::create_dir_all(&out_dir)?;
    let [hgt, wdt] = inputs[0].extent;
    io::write_montage(&out_dir.join("montage.png"), &rows, hgt, wdt)?;
    io::write_samples(&out_dir.join("outputs.bin"), &per_beta.concat())?;
    fs::write(out_dir.join("betas.json"), serde_json::to_string(&h.betas)?)?;
    write_run_manifest(cfg, "interpolate", Some(&ckpt))?;
    Ok(out_dir)
}

/// Phantom pairs for every ordered site pair, from the `phantom` split.
pub fn load_phantom_pairs(cfg: &RunConfig) -> Result<Vec<PhantomPair>> {
    let has_phantoms = samples_path(cfg, "phantom").exists()
        || Manifest::load(&cfg.data.root).is_ok_and(|m| m.entries("phantom").next().is_some());
    if !has_phantoms {
        return Ok(Vec::new());
    }
    Ok(pair_phantoms(&load_split_samples(cfg, "phantom")?))
}

/// Run the evaluation battery; writes `eval/report.txt`, `eval/report.json`
/// and the persisted feature extractor.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let (model, ckpt) = load_model(cfg, cfg.eval.checkpoint.as_deref())?;
    let n = model.config().n_sites;
    let train = MultiSiteDataset::new(n, load_split_samples(cfg, "train")?)?;
    let test = MultiSiteDataset::new(n, load_split_samples(cfg, &cfg.eval.split)?)?;
    let phantoms = load_phantom_pairs(cfg)?;
    let protocol = cfg.eval.protocol();
    let report = evaluate_harmonization(&model, &train, &test, &phantoms, &protocol)?;
    let out = cfg.resolved_output_dir().join("eval");
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    FeatureExtractor::new(protocol.feature_seed, protocol.feature_dim)?.save(&out.join("features.ckpt"))?;
    write_run_manifest(cfg, "evaluate", Some(&ckpt))?;
    println!("{}", report.to_text());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::try_parse_from([
            "harmon",
            "harmonize",
            "--mode",
            "ref",
            "--reference",
            "/tmp/r",
            "--betas",
            "0,0.5,1",
            "--set",
            "train.batch_size=2",
        ])
        .unwrap();
        assert_eq!(cli.overrides, vec!["train.batch_size=2".to_string()]);
        let o = flag_overrides(&cli.command).unwrap();
        let cfg = RunConfig::from_toml_str(None, &o).unwrap();
        assert_eq!(cfg.harmonize.mode, HarmonizeMode::Reference);
        assert_eq!(cfg.harmonize.reference.as_deref(), Some(Path::new("/tmp/r")));
        assert_eq!(cfg.harmonize.betas, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn bad_flags_are_rejected() {
        let cli = Cli::try_parse_from(["harmon", "harmonize", "--mode", "nope"]).unwrap();
        assert!(flag_overrides(&cli.command).is_err());
        let cli = Cli::try_parse_from(["harmon", "interpolate", "--betas", "0,x"]).unwrap();
        assert!(flag_overrides(&cli.command).is_err());
        assert_eq!(main_with_args(["harmon", "frobnicate"]), 2);
    }

    #[test]
    fn missing_checkpoint_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let code = main_with_args([
            "harmon".to_string(),
            "evaluate".into(),
            "--set".into(),
            format!("output_dir={}", toml_str(&dir.path().to_string_lossy())),
        ]);
        assert_eq!(code, 5);
    }
}
