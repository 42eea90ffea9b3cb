//! Training: the forward/backward translation pass, alternating
//! discriminator/generator updates, checkpoints and exact resumption.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiSiteDataset;
use crate::error::{HarmonError, Result};
use crate::losses::{self, LossReport, LossTerms, LossToggles, LossWeights};
use crate::nets::container::TensorContainer;
use crate::nets::layers::ParamStore;
use crate::nets::{batch_tensor, HarmonModel, LatentCode, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Parameter initialization.
    pub init: u64,
    /// Batch composition and target-site sampling.
    pub data: u64,
    /// Content perturbation and latent codes.
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { init: 0, data: 1, noise: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub seeds: Seeds,
    /// Write a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: u64,
    /// Run the evaluation hook every this many iterations (0: never).
    pub eval_every: u64,
    /// Compare the re-encoded style with the source style `s_i` instead of
    /// the sampled target style `s_j`.
    pub style_target_source: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 8,
            iterations: 20_000,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            toggles: LossToggles::default(),
            seeds: Seeds::default(),
            checkpoint_every: 1000,
            eval_every: 0,
            style_target_source: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(HarmonError::invalid_config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HarmonError::invalid_config("learning_rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(HarmonError::invalid_config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Adam over a fixed subset of the parameter store. Moments are created on
/// the first step that gives a parameter a gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    names: Vec<String>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, names: Vec<String>) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, names, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for name in &self.names {
            let var = params.get(name).ok_or_else(|| HarmonError::invalid_arg(format!("unknown parameter {name}")))?;
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = (((&m / bc1)? / denom)? * self.lr)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    fn write(&self, prefix: &str, c: &mut TensorContainer) -> Result<()> {
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in map {
                c.insert(format!("{prefix}/{kind}/{name}"), t.dims().to_vec(), t.flatten_all()?.to_vec1()?);
            }
        }
        Ok(())
    }

    fn read(&mut self, prefix: &str, c: &TensorContainer, step: u64) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (key, rec) in &c.tensors {
            let Some(rest) = key.strip_prefix(prefix).and_then(|r| r.strip_prefix('/')) else { continue };
            let (kind, name) = rest.split_once('/').ok_or_else(|| HarmonError::invalid_data(format!("bad key {key}")))?;
            if !self.names.iter().any(|n| n == name) {
                return Err(HarmonError::invalid_data(format!("optimizer state for unknown parameter {name}")));
            }
            let t = Tensor::from_vec(rec.data.clone(), rec.shape.as_slice(), &Device::Cpu)?;
            match kind {
                "m" => self.m.insert(name.to_string(), t),
                "v" => self.v.insert(name.to_string(), t),
                _ => return Err(HarmonError::invalid_data(format!("bad key {key}"))),
            };
        }
        Ok(())
    }
}

/// Draw a target site for every source site, uniformly over the other sites.
pub fn sample_sites<R: Rng + ?Sized>(sources: &[usize], n_sites: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_sites < 2 {
        return Err(HarmonError::invalid_arg("need at least two sites"));
    }
    sources
        .iter()
        .map(|&i| {
            if i >= n_sites {
                return Err(HarmonError::invalid_arg(format!("site {i} outside 0..{n_sites}")));
            }
            let j = rng.random_range(0..n_sites - 1);
            Ok(if j >= i { j + 1 } else { j })
        })
        .collect()
}

/// Every intermediate tensor of one forward/backward translation.
#[derive(Clone, Debug)]
pub struct TranslationInstance {
    pub x_i: Tensor,
    pub site_i: Vec<usize>,
    pub site_j: Vec<usize>,
    pub z: Tensor,
    pub s_j: Tensor,
    pub s_i: Tensor,
    /// `E^C(x_i)` before perturbation.
    pub c_clean: Tensor,
    /// Content code fed to the forward translation (perturbed in training).
    pub c_i: Tensor,
    pub x_tilde: Tensor,
    pub c_tilde: Tensor,
    pub s_tilde: Tensor,
    pub x_hat: Tensor,
    pub x_bar: Tensor,
}

/// Translate `x_i` to the sampled sites `site_j` and back.
pub fn cs_dct_forward<R: Rng + ?Sized>(
    model: &HarmonModel,
    x_i: &Tensor,
    site_i: &[usize],
    site_j: &[usize],
    training: bool,
    rng: &mut R,
) -> Result<TranslationInstance> {
    let b = x_i.dim(0)?;
    if site_i.len() != b || site_j.len() != b {
        return Err(HarmonError::invalid_arg("one source and one target site per sample"));
    }
    if let Some(k) = site_i.iter().zip(site_j).position(|(i, j)| i == j) {
        return Err(HarmonError::invalid_arg(format!("sample {k}: source and target site are both {}", site_i[k])));
    }
    let c_clean = model.content_encode(x_i)?;
    let c_i = losses::perturb_content(&c_clean, training, rng)?;
    let s_i = model.style_encode(x_i, site_i)?;
    let z = LatentCode::sample(b, rng)?.0;
    let s_j = model.style_generate(&z, site_j)?;
    let x_tilde = model.generate(&c_i, &s_j)?;
    let c_tilde = model.content_encode(&x_tilde)?;
    let s_tilde = model.style_encode(&x_tilde, site_j)?;
    let x_hat = model.generate(&c_tilde, &s_i)?;
    let x_bar = model.generate(&c_clean, &s_i)?;
    Ok(TranslationInstance {
        x_i: x_i.clone(),
        site_i: site_i.to_vec(),
        site_j: site_j.to_vec(),
        z,
        s_j,
        s_i,
        c_clean,
        c_i,
        x_tilde,
        c_tilde,
        s_tilde,
        x_hat,
        x_bar,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(term: &str, v: f64, iteration: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(HarmonError::Numerical { term: term.to_string(), detail: format!("value {v} at iteration {iteration}") })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    iteration: u64,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    adam_g_steps: u64,
    adam_d_steps: u64,
}

/// Complete training state: model, both optimizers, both RNG streams and the
/// iteration counter. Saving and reloading it continues the run bit-exactly.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: HarmonModel,
    opt_g: Adam,
    opt_d: Adam,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    iteration: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = HarmonModel::new(cfg.model.clone(), cfg.seeds.init)?;
        let (d_names, g_names): (Vec<String>, Vec<String>) =
            model.params().iter().map(|(n, _)| n.clone()).partition(|n| HarmonModel::is_discriminator_param(n));
        Ok(Self {
            opt_g: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, g_names),
            opt_d: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, d_names),
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seeds.data),
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.seeds.noise),
            iteration: 0,
            model,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &HarmonModel {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Change the iteration budget (e.g. when resuming with a larger one).
    pub fn set_iterations(&mut self, iterations: u64) {
        self.cfg.iterations = iterations;
    }

    /// One discriminator update followed by one generator-side update.
    pub fn step(&mut self, data: &MultiSiteDataset) -> Result<LossReport> {
        let n = self.cfg.model.n_sites;
        if data.n_sites() != n {
            return Err(HarmonError::invalid_config(format!("dataset has {} sites, model {n}", data.n_sites())));
        }
        data.require_all_sites()?;
        if data.canvas() != self.cfg.model.canvas {
            return Err(HarmonError::invalid_config(format!(
                "dataset canvas {} != model canvas {}",
                data.canvas(),
                self.cfg.model.canvas
            )));
        }
        let it = self.iteration + 1;
        let toggles = self.cfg.toggles.clone();
        let w = self.cfg.weights.clone();

        let batch = data.sample_batch(self.cfg.batch_size, &mut self.data_rng);
        let site_i: Vec<usize> = batch.iter().map(|s| s.site_id).collect();
        let site_j = sample_sites(&site_i, n, &mut self.data_rng)?;
        let x = batch_tensor(&batch)?;
        let inst = cs_dct_forward(&self.model, &x, &site_i, &site_j, true, &mut self.noise_rng)?;

        let mut report = LossReport { iteration: it, ..Default::default() };

        if toggles.adv {
            let real = self.model.discriminate(&x, &site_i)?;
            let fake = self.model.discriminate(&inst.x_tilde.detach(), &site_j)?;
            let loss_d = losses::adversarial_d_loss(&real, &fake)?;
            report.adv_d = scalar(&loss_d)?;
            check_finite("adv_d", report.adv_d, it)?;
            let grads = loss_d.backward()?;
            self.opt_d.step(self.model.params(), &grads)?;
        }

        let mut terms: LossTerms<Option<Tensor>> = LossTerms::default();
        if toggles.adv {
            let fake = self.model.discriminate(&inst.x_tilde, &site_j)?;
            report.nash = scalar(&candle_core::Tensor::mean_all(&sigmoid(&fake.detach())?)?)?;
            terms.adv_g = Some(losses::adversarial_g_loss(&fake)?);
        }
        if toggles.cont {
            terms.cont = Some(losses::content_consistency_loss(&inst.c_clean, &inst.c_tilde)?);
        }
        if toggles.ca {
            terms.ca = Some(losses::content_alignment_loss(&inst.c_clean)?);
        }
        if toggles.sty {
            let target = if self.cfg.style_target_source { &inst.s_i } else { &inst.s_j };
            terms.sty = Some(losses::style_consistency_loss(target, &inst.s_tilde)?);
        }
        if toggles.cyc {
            terms.cyc = Some(losses::cycle_loss(&x, &inst.x_hat, w.lambda_g)?);
        }
        if toggles.id {
            terms.id = Some(losses::identity_loss(&x, &inst.x_bar)?);
        }
        for (name, t, slot) in [
            ("adv_g", &terms.adv_g, &mut report.adv_g),
            ("cont", &terms.cont, &mut report.cont),
            ("ca", &terms.ca, &mut report.ca),
            ("sty", &terms.sty, &mut report.sty),
            ("cyc", &terms.cyc, &mut report.cyc),
            ("id", &terms.id, &mut report.id),
        ] {
            if let Some(t) = t {
                *slot = scalar(t)?;
                check_finite(name, *slot, it)?;
            }
        }
        let total = losses::total_generator_loss(&terms, &w)?;
        report.total_g = scalar(&total)?;
        report.total_d = report.adv_d;
        check_finite("total_g", report.total_g, it)?;
        let grads = total.backward()?;
        self.opt_g.step(self.model.params(), &grads)?;

        self.iteration = it;
        Ok(report)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.cfg.model.clone(),
            train: self.cfg.clone(),
            iteration: self.iteration,
            data_rng: self.data_rng.clone(),
            noise_rng: self.noise_rng.clone(),
            adam_g_steps: self.opt_g.steps(),
            adam_d_steps: self.opt_d.steps(),
        };
        let mut c = TensorContainer { meta: serde_json::to_value(&meta)?, ..Default::default() };
        self.model.write_params(&mut c)?;
        self.opt_g.write("adam_g", &mut c)?;
        self.opt_d.write("adam_d", &mut c)?;
        c.save(path)
    }

    /// Restore a training state written by [`save_checkpoint`](Self::save_checkpoint).
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let c = TensorContainer::load(path)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| HarmonError::invalid_data(format!("{} is not a training checkpoint: {e}", path.display())))?;
        let mut t = Self::new(meta.train)?;
        t.model.read_params(&c)?;
        t.opt_g.read("adam_g", &c, meta.adam_g_steps)?;
        t.opt_d.read("adam_d", &c, meta.adam_d_steps)?;
        t.data_rng = meta.data_rng;
        t.noise_rng = meta.noise_rng;
        t.iteration = meta.iteration;
        Ok(t)
    }

    /// Resume from `path` under `cfg`. The architecture must match; the
    /// iteration budget and cadences are taken from `cfg`.
    pub fn resume(cfg: TrainConfig, path: &Path) -> Result<Self> {
        let mut t = Self::load_checkpoint(path)?;
        if t.cfg.model != cfg.model {
            return Err(HarmonError::invalid_config(format!(
                "checkpoint architecture {:?} differs from configured {:?}",
                t.cfg.model, cfg.model
            )));
        }
        t.cfg.iterations = cfg.iterations;
        t.cfg.checkpoint_every = cfg.checkpoint_every;
        t.cfg.eval_every = cfg.eval_every;
        Ok(t)
    }
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// File written in the output directory; one JSON `LossReport` per line.
pub const LOG_FILE: &str = "train_log.jsonl";
/// Checkpoint subdirectory of the output directory.
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Name of the checkpoint written when training finishes.
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("iter_{iteration:08}.ckpt"))
}

/// Keep only log records up to `iteration`, so a resumed run does not
/// duplicate lines written after the checkpoint.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let rec: LossReport = serde_json::from_str(&line)?;
        if rec.iteration <= iteration {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

pub type EvalHook<'a> = dyn FnMut(u64, &HarmonModel) -> Result<()> + 'a;

/// Run `trainer` up to its iteration budget. With an output directory, every
/// report is appended to the log and checkpoints are written at the configured
/// cadence plus once at the end. The hook receives a frozen snapshot.
pub fn train(
    trainer: &mut Trainer,
    data: &MultiSiteDataset,
    out_dir: Option<&Path>,
    mut hook: Option<&mut EvalHook<'_>>,
) -> Result<Vec<LossReport>> {
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
            let path = dir.join(LOG_FILE);
            truncate_log(&path, trainer.iteration())?;
            Some(fs::OpenOptions::new().create(true).append(true).open(path)?)
        }
        None => None,
    };
    let mut reports = Vec::new();
    let start = std::time::Instant::now();
    while trainer.iteration() < trainer.config().iterations {
        let report = trainer.step(data)?;
        let it = report.iteration;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", report.to_json_line()?)?;
        }
        if it % 100 == 0 {
            log::info!(
                "iter {it}: total_g {:.4} adv_d {:.4} cyc {:.4} id {:.4} nash {:.3} ({:.1}s)",
                report.total_g,
                report.adv_d,
                report.cyc,
                report.id,
                report.nash,
                start.elapsed().as_secs_f64()
            );
        }
        reports.push(report);
        let cadence = trainer.config().checkpoint_every;
        if let Some(dir) = out_dir {
            if cadence > 0 && it % cadence == 0 {
                trainer.save_checkpoint(&checkpoint_path(dir, it))?;
            }
        }
        let eval_every = trainer.config().eval_every;
        if let Some(h) = hook.as_mut() {
            if eval_every > 0 && it % eval_every == 0 {
                let frozen = trainer.model().snapshot()?;
                h(it, &frozen)?;
            }
        }
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = out_dir {
        trainer.save_checkpoint(&dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT))?;
    }
    Ok(reports)
}
