//! Run configuration: one TOML document covering data synthesis,
//! preprocessing, training, harmonization and evaluation.
//!
//! Every key has a default, unknown keys are rejected, and any key can be
//! overridden with a dotted `section.key=value` assignment. Relative output
//! paths are resolved against `$HARMON_OUTPUT_ROOT` when it is set.
//!
//! ```toml
//! schema_version = 1
//! output_dir = "runs/desk"
//!
//! [data]
//! root = "data/synth"      # dataset directory (manifest.json + slice PNGs)
//! seed = 0
//! n_train = 20             # subjects per site
//! n_val = 10
//! n_phantom = 5            # subjects imaged at every site
//! shape = { depth = 64, height = 56, width = 56 }
//! # sites = [{ site_id = 0, gamma = 1.0, ... }, ...]   default: three desk sites
//!
//! [preprocess]
//! slice_count = 60
//! stride = 1
//! canvas = 64
//!
//! [train]
//! batch_size = 8
//! iterations = 20000
//! learning_rate = 1e-4
//! model = { n_sites = 3, canvas = 64, width_mult = 1.0, res_blocks = 4 }
//! weights = { lambda_cont = 10.0, lambda_ca = 0.01, lambda_sty = 10.0, lambda_cyc = 10.0, lambda_g = 0.1, lambda_id = 10.0 }
//!
//! [harmonize]
//! mode = "site"            # site | reference | interpolate
//! target = 0
//! split = "val"
//!
//! [eval]
//! n_styles = 10
//! n_refs = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, SiteSpec, SynthShape};
use crate::error::{HarmonError, Result};
use crate::infer::RefAggregation;
use crate::metrics::EvalProtocol;
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the root for relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "HARMON_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_phantom: usize,
    pub shape: SynthShape,
    pub sites: Vec<SiteSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synth"),
            seed: 0,
            n_train: 20,
            n_val: 10,
            n_phantom: 5,
            shape: SynthShape::default(),
            sites: SiteSpec::desk_sites(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarmonizeMode {
    #[default]
    Site,
    #[serde(alias = "ref")]
    Reference,
    Interpolate,
}

impl std::str::FromStr for HarmonizeMode {
    type Err = HarmonError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "site" => Ok(Self::Site),
            "ref" | "reference" => Ok(Self::Reference),
            "interpolate" => Ok(Self::Interpolate),
            other => Err(HarmonError::invalid_arg(format!("unknown mode {other:?} (site|ref|interpolate)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizeConfig {
    pub mode: HarmonizeMode,
    /// Target site for site-specific mode.
    pub target: usize,
    /// Seed of the latent code in site-specific mode.
    pub seed: u64,
    /// Reference volume directory or sample cache for reference mode.
    pub reference: Option<PathBuf>,
    pub ref_agg: RefAggregation,
    /// Interpolation endpoints: site styles of `from_site` and `to_site`.
    pub from_site: usize,
    pub to_site: usize,
    pub betas: Vec<f64>,
    /// Dataset split to harmonize.
    pub split: String,
    /// Restrict inputs to one source site.
    pub source_site: Option<usize>,
    /// Checkpoint to load (default: the final training checkpoint).
    pub checkpoint: Option<PathBuf>,
    pub batch: usize,
    /// Inputs shown in comparison montages.
    pub montage_rows: usize,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            mode: HarmonizeMode::Site,
            target: 0,
            seed: 0,
            reference: None,
            ref_agg: RefAggregation::Mean,
            from_site: 0,
            to_site: 2,
            betas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            split: "val".into(),
            source_site: None,
            checkpoint: None,
            batch: 16,
            montage_rows: 4,
        }
    }
}

/// Evaluation protocol fields plus what to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_styles: usize,
    pub n_refs: usize,
    pub max_test_per_site: usize,
    pub seed: u64,
    pub feature_seed: u64,
    pub feature_dim: usize,
    pub batch: usize,
    pub checkpoint: Option<PathBuf>,
    /// Split used as the test set.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = EvalProtocol::default();
        Self {
            n_styles: p.n_styles,
            n_refs: p.n_refs,
            max_test_per_site: p.max_test_per_site,
            seed: p.seed,
            feature_seed: p.feature_seed,
            feature_dim: p.feature_dim,
            batch: p.batch,
            checkpoint: None,
            split: "val".into(),
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            n_styles: self.n_styles,
            n_refs: self.n_refs,
            max_test_per_site: self.max_test_per_site,
            seed: self.seed,
            feature_seed: self.feature_seed,
            feature_dim: self.feature_dim,
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub harmonize: HarmonizeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            train: TrainConfig::default(),
            harmonize: HarmonizeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parse a `--set` value as a TOML value; bare words fall back to strings.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarmonError::invalid_config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarmonError::invalid_config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarmonError::invalid_config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Build from optional TOML text plus overrides; validates the result.
    pub fn from_toml_str(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => t.parse().map_err(|e| HarmonError::invalid_config(format!("config parse error: {e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarmonError::invalid_config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                HarmonError::invalid_config(format!("cannot read config {}: {e}", p.display()))
            })?),
            None => None,
        };
        Self::from_toml_str(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarmonError::invalid_config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train.validate()?;
        if self.preprocess.canvas != self.train.model.canvas {
            return Err(HarmonError::invalid_config(format!(
                "preprocess.canvas {} != train.model.canvas {}",
                self.preprocess.canvas, self.train.model.canvas
            )));
        }
        if self.data.sites.len() != self.train.model.n_sites {
            return Err(HarmonError::invalid_config(format!(
                "{} site specs for {} model sites",
                self.data.sites.len(),
                self.train.model.n_sites
            )));
        }
        for (k, s) in self.data.sites.iter().enumerate() {
            s.validate()?;
            if s.site_id != k {
                return Err(HarmonError::invalid_config(format!("site spec {k} has site_id {}", s.site_id)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarmonError::Serde(e.to_string()))
    }

    /// Output directory, resolved against the output-root variable if relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.resolved_output_dir().join("samples")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.resolved_output_dir().join(crate::train::CHECKPOINT_DIR).join(crate::train::FINAL_CHECKPOINT)
    }
}

fn resolve_output(dir: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(Some(&text), &[]).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.train.learning_rate, 1e-4);
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str(Some(""), &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str(Some("bogus = 1"), &[]), Err(HarmonError::InvalidConfig(_))));
        assert!(RunConfig::from_toml_str(Some("[train]\nbatchsize = 4"), &[]).is_err());
        assert!(RunConfig::from_toml_str(None, &["train.model.depth=3".into()]).is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = RunConfig::from_toml_str(
            Some("[train]\nbatch_size = 4"),
            &[
                "train.batch_size=2".into(),
                "train.weights.lambda_id=5.5".into(),
                "harmonize.mode=interpolate".into(),
                "harmonize.betas=[0.0, 1.0]".into(),
                "output_dir=runs/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.weights.lambda_id, 5.5);
        assert_eq!(cfg.harmonize.mode, HarmonizeMode::Interpolate);
        assert_eq!(cfg.harmonize.betas, vec![0.0, 1.0]);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn inconsistent_values_are_config_errors() {
        for o in ["schema_version=2", "train.model.n_sites=1", "preprocess.canvas=32", "train.beta1=1.5"] {
            assert!(matches!(RunConfig::from_toml_str(None, &[o.into()]), Err(HarmonError::InvalidConfig(_))), "{o}");
        }
        assert!(RunConfig::from_toml_str(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn relative_output_uses_root() {
        assert_eq!(resolve_output(Path::new("a/b"), Some("/r".into())), PathBuf::from("/r/a/b"));
        assert_eq!(resolve_output(Path::new("/abs"), Some("/r".into())), PathBuf::from("/abs"));
        assert_eq!(resolve_output(Path::new("a"), None), PathBuf::from("a"));
    }
}
