use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dice, fid, kid, mae, ms_ssim, psnr, toy_segment, FeatureExtractor, SegmentationMap, N_CLASSES};
use crate::data::{ImageSample, MultiSiteDataset, PhantomPair};
use crate::error::{HarmonError, Result};
use crate::infer::{apply_style, reference_style, site_style, RefAggregation};
use crate::nets::{batch_tensor, HarmonModel, StyleCode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Random style codes per target site (site-specific mode).
    pub n_styles: usize,
    /// Reference images per target site (reference-specific mode).
    pub n_refs: usize,
    /// Cap on test images per source site (0: all).
    pub max_test_per_site: usize,
    pub seed: u64,
    pub feature_seed: u64,
    pub feature_dim: usize,
    pub batch: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_styles: 10,
            n_refs: 10,
            max_test_per_site: 0,
            seed: 7,
            feature_seed: super::DEFAULT_FEATURE_SEED,
            feature_dim: super::DEFAULT_FEATURE_DIM,
            batch: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Standard error of the mean (0 for a single value).
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }
}

/// Train vs test distance within one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRow {
    pub site: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub fid: f64,
    pub kid: f64,
}

/// Distances of source-site test images to target-site training images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub source: usize,
    pub target: usize,
    pub n_images: usize,
    pub unharmonized_fid: f64,
    pub unharmonized_kid: f64,
    /// One value per random style code.
    pub site_fid: MeanSe,
    pub site_kid: MeanSe,
    /// One value per reference image.
    pub ref_fid: MeanSe,
    pub ref_kid: MeanSe,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub mae: f64,
    pub ms_ssim: f64,
    pub psnr: f64,
}

/// Aligned phantom pairs for one direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomRow {
    pub source: usize,
    pub target: usize,
    pub n_pairs: usize,
    /// Source image against the target-site image.
    pub pre: Fidelity,
    /// Site-specific harmonization (averaged over style codes) against the target image.
    pub site: Fidelity,
    /// Reference-specific harmonization (averaged over references).
    pub reference: Fidelity,
    /// `MAE(x_hat, x)` of the forward/backward translation.
    pub cycle_mae: f64,
    /// `MAE(x_bar, x)` of the identity pass.
    pub identity_mae: f64,
    /// Per-class Dice of the source segmentation against ground truth.
    pub dice_gt_pre: [f64; N_CLASSES],
    /// Per-class Dice of the harmonized segmentation against ground truth.
    pub dice_gt_post: [f64; N_CLASSES],
    /// Per-class Dice of the source segmentation against the target-image segmentation.
    pub dice_target_pre: [f64; N_CLASSES],
    pub dice_target_post: [f64; N_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub n_sites: usize,
    pub reference: Vec<SiteRow>,
    pub pairs: Vec<PairRow>,
    pub phantoms: Vec<PhantomRow>,
}

const SITE_NAMES: [&str; 3] = ["G", "P", "S"];

fn site_letter(s: usize) -> String {
    SITE_NAMES.get(s).map(|n| n.to_string()).unwrap_or_else(|| format!("#{s}"))
}

impl EvalReport {
    /// Plain-text rendering: protocol header, then one table per metric group.
    pub fn to_text(&self) -> String {
        let p = &self.protocol;
        let mut out = String::new();
        let _ = writeln!(out, "# harmonization evaluation");
        let _ = writeln!(
            out,
            "protocol: sites={} styles={} refs={} max_test_per_site={} seed={} features=random-conv(seed={}, dim={})",
            self.n_sites, p.n_styles, p.n_refs, p.max_test_per_site, p.seed, p.feature_seed, p.feature_dim
        );
        let _ = writeln!(out, "\n## reference (train vs test, same site)");
        let _ = writeln!(out, "{:<6} {:>7} {:>7} {:>10} {:>10}", "site", "n_train", "n_test", "FID", "KID");
        for r in &self.reference {
            let _ = writeln!(out, "{:<6} {:>7} {:>7} {:>10.4} {:>10.5}", r.site, r.n_train, r.n_test, r.fid, r.kid);
        }
        let _ = writeln!(out, "\n## FID (source -> target, mean ± se)");
        let _ = writeln!(out, "{:<8} {:>6} {:>12} {:>20} {:>20}", "pair", "n", "unharmonized", "site-specific", "reference");
        for r in &self.pairs {
            let _ = writeln!(
                out,
                "{:<8} {:>6} {:>12.4} {:>20} {:>20}",
                format!("{}->{}", r.source, r.target),
                r.n_images,
                r.unharmonized_fid,
                format!("{:.4} ± {:.4}", r.site_fid.mean, r.site_fid.se),
                format!("{:.4} ± {:.4}", r.ref_fid.mean, r.ref_fid.se)
            );
        }
        let _ = writeln!(out, "\n## KID (source -> target, mean ± se)");
        let _ = writeln!(out, "{:<8} {:>12} {:>22} {:>22}", "pair", "unharmonized", "site-specific", "reference");
        for r in &self.pairs {
            let _ = writeln!(
                out,
                "{:<8} {:>12.5} {:>22} {:>22}",
                format!("{}->{}", r.source, r.target),
                r.unharmonized_kid,
                format!("{:.5} ± {:.5}", r.site_kid.mean, r.site_kid.se),
                format!("{:.5} ± {:.5}", r.ref_kid.mean, r.ref_kid.se)
            );
        }
        let _ = writeln!(out, "\n## phantom fidelity (pre / site-specific / reference)");
        let _ = writeln!(
            out,
            "{:<5} {:>5} {:>26} {:>26} {:>26} {:>8} {:>8}",
            "dir", "n", "MAE", "MS-SSIM", "PSNR", "cycle", "ident"
        );
        for r in &self.phantoms {
            let trio = |f: fn(&Fidelity) -> f64, prec: usize| {
                format!("{:.prec$}/{:.prec$}/{:.prec$}", f(&r.pre), f(&r.site), f(&r.reference))
            };
            let _ = writeln!(
                out,
                "{:<5} {:>5} {:>26} {:>26} {:>26} {:>8.4} {:>8.4}",
                format!("{}{}", site_letter(r.source), site_letter(r.target)),
                r.n_pairs,
                trio(|f| f.mae, 4),
                trio(|f| f.ms_ssim, 4),
                trio(|f| f.psnr, 2),
                r.cycle_mae,
                r.identity_mae
            );
        }
        let _ = writeln!(out, "\n## segmentation Dice per class (bg/csf/gm/wm), pre -> post");
        for r in &self.phantoms {
            let fmt = |a: &[f64; N_CLASSES]| a.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/");
            let _ = writeln!(
                out,
                "{}{}  vs truth {} -> {}   vs target {} -> {}",
                site_letter(r.source),
                site_letter(r.target),
                fmt(&r.dice_gt_pre),
                fmt(&r.dice_gt_post),
                fmt(&r.dice_target_pre),
                fmt(&r.dice_target_post)
            );
        }
        out
    }
}

/// Apply one style code to every sample; returns the output pixels per sample.
fn stylize(model: &HarmonModel, inputs: &[&ImageSample], style: &StyleCode, batch: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let y = apply_style(model, &batch_tensor(chunk)?, style)?;
        out.extend(y.flatten(1, 3)?.to_vec2::<f32>()?);
    }
    Ok(out)
}

fn pixels(samples: &[&ImageSample]) -> Vec<Vec<f32>> {
    samples.iter().map(|s| s.pixels.clone()).collect()
}

fn pick<'a, R: Rng>(items: &'a [ImageSample], cap: usize, rng: &mut R) -> Vec<&'a ImageSample> {
    if cap == 0 || cap >= items.len() {
        return items.iter().collect();
    }
    let mut idx = sample_indices(rng, items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &items[i]).collect()
}

fn channel_extent(px: &[f32], like: &ImageSample, c: usize) -> Vec<f32> {
    let n = like.canvas * like.canvas;
    crate::data::crop_canvas(&px[c * n..(c + 1) * n], like.canvas, like.extent)
}

fn segment_middle(px: &[f32], like: &ImageSample) -> Result<SegmentationMap> {
    toy_segment(&channel_extent(px, like, 1))
}

fn fidelity(a: &[f32], b: &[f32], like: &ImageSample) -> Result<Fidelity> {
    let crop = |p: &[f32]| -> Vec<f32> { (0..3).flat_map(|c| channel_extent(p, like, c)).collect() };
    let (a, b) = (crop(a), crop(b));
    let [h, w] = like.extent;
    Ok(Fidelity { mae: mae(&a, &b)?, ms_ssim: ms_ssim(&a, &b, [3, h, w])?, psnr: psnr(&a, &b)? })
}

fn mean_fidelity(rows: &[Fidelity]) -> Fidelity {
    let n = rows.len().max(1) as f64;
    Fidelity {
        mae: rows.iter().map(|f| f.mae).sum::<f64>() / n,
        ms_ssim: rows.iter().map(|f| f.ms_ssim).sum::<f64>() / n,
        psnr: rows.iter().map(|f| f.psnr).sum::<f64>() / n,
    }
}

fn dice_all(seg: &SegmentationMap, truth: &SegmentationMap) -> Result<[f64; N_CLASSES]> {
    let mut d = [0.0; N_CLASSES];
    for (c, v) in d.iter_mut().enumerate() {
        *v = dice(seg, truth, c as u8)?;
    }
    Ok(d)
}

fn add_into(acc: &mut [f64; N_CLASSES], v: [f64; N_CLASSES], scale: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b * scale;
    }
}

/// The evaluation battery on a frozen model.
///
/// * reference rows: FID/KID between the training and test images of each site;
/// * for every ordered pair `(i, j)`: FID/KID of site-`i` test images against
///   site-`j` training images, unharmonized and after harmonization with
///   `n_styles` random style codes and with `n_refs` site-`j` test references;
/// * for every phantom direction: fidelity of the source image to its aligned
///   target-site image before and after harmonization, forward/backward and
///   identity reconstruction error, and toy-segmentation Dice before and after.
pub fn evaluate_harmonization(
    model: &HarmonModel,
    train: &MultiSiteDataset,
    test: &MultiSiteDataset,
    phantoms: &[PhantomPair],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let n = model.config().n_sites;
    if train.n_sites() != n || test.n_sites() != n {
        return Err(HarmonError::invalid_config("dataset site count does not match the model"));
    }
    train.require_all_sites()?;
    test.require_all_sites()?;
    if protocol.n_styles == 0 || protocol.n_refs == 0 {
        return Err(HarmonError::invalid_config("n_styles and n_refs must be positive"));
    }
    let fe = FeatureExtractor::new(protocol.feature_seed, protocol.feature_dim)?;
    let canvas = model.config().canvas;
    let batch = protocol.batch.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);

    let train_feats: Vec<Vec<Vec<f32>>> = (0..n)
        .map(|s| fe.embed_all(&pixels(&train.site(s).iter().collect::<Vec<_>>()), canvas, batch))
        .collect::<Result<_>>()?;
    let tests: Vec<Vec<&ImageSample>> = (0..n).map(|s| pick(test.site(s), protocol.max_test_per_site, &mut rng)).collect();
    let test_feats: Vec<Vec<Vec<f32>>> =
        tests.iter().map(|t| fe.embed_all(&pixels(t), canvas, batch)).collect::<Result<_>>()?;

    let mut reference = Vec::with_capacity(n);
    for s in 0..n {
        reference.push(SiteRow {
            site: s,
            n_train: train_feats[s].len(),
            n_test: test_feats[s].len(),
            fid: fid(&train_feats[s], &test_feats[s])?,
            kid: kid(&train_feats[s], &test_feats[s])?,
        });
    }

    let style_seeds: Vec<Vec<u64>> = (0..n).map(|_| (0..protocol.n_styles).map(|_| rng.random()).collect()).collect();
    let site_styles: Vec<Vec<StyleCode>> = style_seeds
        .iter()
        .enumerate()
        .map(|(j, seeds)| seeds.iter().map(|&seed| site_style(model, j, seed)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let ref_styles: Vec<Vec<StyleCode>> = (0..n)
        .map(|j| {
            pick(test.site(j), protocol.n_refs, &mut rng)
                .into_iter()
                .map(|r| Ok(reference_style(model, &[r], RefAggregation::First)?.1))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let distances = |styles: &[StyleCode]| -> Result<(MeanSe, MeanSe)> {
                let (mut f, mut k) = (Vec::new(), Vec::new());
                for s in styles {
                    let feats = fe.embed_all(&stylize(model, &tests[i], s, batch)?, canvas, batch)?;
                    f.push(fid(&feats, &train_feats[j])?);
                    k.push(kid(&feats, &train_feats[j])?);
                }
                Ok((MeanSe::of(&f), MeanSe::of(&k)))
            };
            let (site_fid, site_kid) = distances(&site_styles[j])?;
            let (ref_fid, ref_kid) = distances(&ref_styles[j])?;
            pairs.push(PairRow {
                source: i,
                target: j,
                n_images: tests[i].len(),
                unharmonized_fid: fid(&test_feats[i], &train_feats[j])?,
                unharmonized_kid: kid(&test_feats[i], &train_feats[j])?,
                site_fid,
                site_kid,
                ref_fid,
                ref_kid,
            });
        }
    }

    let mut directions: BTreeMap<(usize, usize), Vec<&PhantomPair>> = BTreeMap::new();
    for p in phantoms {
        directions.entry((p.source.site_id, p.target.site_id)).or_default().push(p);
    }
    let mut phantom_rows = Vec::new();
    for ((i, j), list) in directions {
        if i >= n || j >= n || i == j {
            return Err(HarmonError::invalid_data(format!("phantom direction {i}->{j} invalid for {n} sites")));
        }
        phantom_rows.push(phantom_row(model, i, j, &list, &site_styles[j], &ref_styles[j], batch)?);
    }

    Ok(EvalReport { protocol: protocol.clone(), n_sites: n, reference, pairs, phantoms: phantom_rows })
}

fn phantom_row(
    model: &HarmonModel,
    i: usize,
    j: usize,
    list: &[&PhantomPair],
    site_styles: &[StyleCode],
    ref_styles: &[StyleCode],
    batch: usize,
) -> Result<PhantomRow> {
    let sources: Vec<&ImageSample> = list.iter().map(|p| &p.source).collect();
    let n_pairs = list.len();
    let inv = 1.0 / n_pairs as f64;

    let mut pre = Vec::with_capacity(n_pairs);
    let mut dice_gt_pre = [0.0; N_CLASSES];
    let mut dice_target_pre = [0.0; N_CLASSES];
    let mut truths = Vec::with_capacity(n_pairs);
    let mut target_segs = Vec::with_capacity(n_pairs);
    for p in list {
        pre.push(fidelity(&p.source.pixels, &p.target.pixels, &p.source)?);
        let labels = p
            .source
            .labels_extent()
            .ok_or_else(|| HarmonError::invalid_data("phantom samples need ground-truth labels"))?;
        let truth = SegmentationMap::new(labels)?;
        let seg = segment_middle(&p.source.pixels, &p.source)?;
        let tseg = segment_middle(&p.target.pixels, &p.target)?;
        add_into(&mut dice_gt_pre, dice_all(&seg, &truth)?, inv);
        add_into(&mut dice_target_pre, dice_all(&seg, &tseg)?, inv);
        truths.push(truth);
        target_segs.push(tseg);
    }

    let mut site_fid = Vec::new();
    let mut dice_gt_post = [0.0; N_CLASSES];
    let mut dice_target_post = [0.0; N_CLASSES];
    let per_style = inv / site_styles.len() as f64;
    let mut cycle = Vec::new();
    let x = batch_tensor(&sources)?;
    let own_styles = model.style_encode(&x, &vec![i; n_pairs])?;
    for s in site_styles {
        let out = stylize(model, &sources, s, batch)?;
        for (k, px) in out.iter().enumerate() {
            site_fid.push(fidelity(px, &list[k].target.pixels, &list[k].source)?);
            let seg = segment_middle(px, &list[k].source)?;
            add_into(&mut dice_gt_post, dice_all(&seg, &truths[k])?, per_style);
            add_into(&mut dice_target_post, dice_all(&seg, &target_segs[k])?, per_style);
        }
        let flat: Vec<f32> = out.into_iter().flatten().collect();
        let x_tilde = candle_core::Tensor::from_vec(flat, x.dims(), x.device())?;
        let x_hat = model.generate(&model.content_encode(&x_tilde)?, &own_styles)?;
        cycle.push((x_hat - &x)?.abs()?.mean_all()?.to_scalar::<f32>()? as f64);
    }
    let x_bar = model.generate(&model.content_encode(&x)?, &own_styles)?;
    let identity_mae = (x_bar - &x)?.abs()?.mean_all()?.to_scalar::<f32>()? as f64;

    let mut ref_fid = Vec::new();
    for s in ref_styles {
        for (k, px) in stylize(model, &sources, s, batch)?.iter().enumerate() {
            ref_fid.push(fidelity(px, &list[k].target.pixels, &list[k].source)?);
        }
    }

    Ok(PhantomRow {
        source: i,
        target: j,
        n_pairs,
        pre: mean_fidelity(&pre),
        site: mean_fidelity(&site_fid),
        reference: mean_fidelity(&ref_fid),
        cycle_mae: cycle.iter().sum::<f64>() / cycle.len() as f64,
        identity_mae,
        dice_gt_pre,
        dice_gt_post,
        dice_target_pre,
        dice_target_post,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_pairs, generate_synthetic_site_dataset, preprocess_volume, PreprocessConfig, SiteSpec, SynthShape};
    use crate::nets::ModelConfig;

    #[test]
    fn mean_and_standard_error() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m.mean - 2.5).abs() < 1e-12);
        // sample sd = sqrt(5/3), se = sd / 2
        assert!((m.se - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
        assert_eq!(MeanSe::of(&[3.0]).se, 0.0);
    }

    fn tiny_sets() -> (MultiSiteDataset, MultiSiteDataset, Vec<PhantomPair>) {
        let shape = SynthShape { depth: 6, height: 16, width: 16 };
        let pre = PreprocessConfig { slice_count: 4, stride: 1, canvas: 16 };
        let sites = SiteSpec::desk_sites();
        let build = |seed| {
            let mut v = Vec::new();
            for spec in &sites {
                for vol in generate_synthetic_site_dataset(spec, 2, seed, shape).unwrap() {
                    v.extend(preprocess_volume(&vol, &pre).unwrap());
                }
            }
            MultiSiteDataset::new(3, v).unwrap()
        };
        let phantoms = generate_phantom_pairs(&sites[0], &sites[1], 1, 99, shape, &pre).unwrap();
        (build(1), build(2), phantoms)
    }

    #[test]
    fn report_echoes_protocol_and_counts() {
        let (train, test, phantoms) = tiny_sets();
        let model = HarmonModel::new(ModelConfig { n_sites: 3, canvas: 16, width_mult: 0.0625, res_blocks: 1 }, 0).unwrap();
        let protocol = EvalProtocol { n_styles: 2, n_refs: 3, max_test_per_site: 3, batch: 4, ..Default::default() };
        let r = evaluate_harmonization(&model, &train, &test, &phantoms, &protocol).unwrap();
        assert_eq!(r.protocol, protocol);
        assert_eq!(r.reference.len(), 3);
        assert_eq!(r.pairs.len(), 6);
        for p in &r.pairs {
            assert_eq!(p.n_images, 3);
            assert_eq!(p.site_fid.n, 2);
            assert_eq!(p.ref_fid.n, 3);
        }
        assert_eq!(r.phantoms.len(), 1);
        assert_eq!(r.phantoms[0].n_pairs, phantoms.len());
        let text = r.to_text();
        assert!(text.contains("styles=2 refs=3"));
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.pairs.len(), 6);
    }
}
