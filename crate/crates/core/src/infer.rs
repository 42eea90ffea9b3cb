//! Inference: site-specific and reference-specific harmonization, style
//! interpolation, and volume reassembly. Inference never perturbs content
//! codes and never modifies the model.

use std::str::FromStr;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_canvas, preprocess_volume, ImageSample, PreprocessConfig, Volume};
use crate::error::{HarmonError, Result};
use crate::nets::{batch_tensor, HarmonModel, LatentCode, StyleCode};

/// How several reference images are combined into one style code.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefAggregation {
    #[default]
    Mean,
    First,
}

impl FromStr for RefAggregation {
    type Err = HarmonError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "first" => Ok(Self::First),
            other => Err(HarmonError::invalid_arg(format!("unknown reference aggregation {other:?} (mean|first)"))),
        }
    }
}

/// Where the target style comes from.
#[derive(Clone, Debug)]
pub enum StyleSource {
    /// Style generator of `target` fed with a latent code drawn from `seed`.
    Site { target: usize, seed: u64 },
    /// Style encoder of the references' site applied to the references.
    Reference { references: Vec<ImageSample>, aggregation: RefAggregation },
}

/// Images to harmonize plus the requested style.
#[derive(Clone, Debug)]
pub struct HarmonizationRequest {
    pub inputs: Vec<ImageSample>,
    pub style: StyleSource,
    /// Images per forward pass.
    pub batch: usize,
}

fn check_site(model: &HarmonModel, site: usize) -> Result<()> {
    let n = model.config().n_sites;
    if site >= n {
        return Err(HarmonError::invalid_arg(format!("site {site} outside 0..{n}")));
    }
    Ok(())
}

/// `G^S_j(z)` for one latent code drawn from `seed`: a `[1, 64]` style code.
pub fn site_style(model: &HarmonModel, target: usize, seed: u64) -> Result<StyleCode> {
    check_site(model, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = LatentCode::sample(1, &mut rng)?;
    StyleCode::new(model.style_generate(&z.0, &[target])?)
}

/// Style code of the references' site, `[1, 64]`. All references must come
/// from the same site; returns that site with the code.
pub fn reference_style(
    model: &HarmonModel,
    references: &[&ImageSample],
    aggregation: RefAggregation,
) -> Result<(usize, StyleCode)> {
    let first = references.first().ok_or_else(|| HarmonError::invalid_arg("no reference images"))?;
    let site = first.site_id;
    check_site(model, site)?;
    if let Some(r) = references.iter().find(|r| r.site_id != site) {
        return Err(HarmonError::invalid_arg(format!("references mix sites {site} and {}", r.site_id)));
    }
    let used = match aggregation {
        RefAggregation::First => &references[..1],
        RefAggregation::Mean => references,
    };
    let x = batch_tensor(used)?;
    let codes = model.style_encode(&x, &vec![site; used.len()])?;
    Ok((site, StyleCode::new(codes.mean_keepdim(0)?)?))
}

/// `G(E^C(x), s)` with one style code broadcast over the batch.
pub fn apply_style(model: &HarmonModel, x: &Tensor, style: &StyleCode) -> Result<Tensor> {
    let b = x.dim(0)?;
    let s = match style.0.dim(0)? {
        1 => style.0.broadcast_as((b, style.0.dim(1)?))?.contiguous()?,
        n if n == b => style.0.clone(),
        n => return Err(HarmonError::invalid_arg(format!("{n} style codes for a batch of {b}"))),
    };
    let c = model.content_encode(x)?;
    model.generate(&c, &s)
}

/// `G(E^C(x), G^S_j(z))` with `z` drawn from `seed`.
pub fn harmonize_site(model: &HarmonModel, x: &Tensor, target: usize, seed: u64) -> Result<Tensor> {
    let s = site_style(model, target, seed)?;
    apply_style(model, x, &s)
}

/// `G(E^C(x), E^S_j(x_ref))` where `j` is the reference's site.
pub fn harmonize_reference(
    model: &HarmonModel,
    x: &Tensor,
    references: &[&ImageSample],
    aggregation: RefAggregation,
) -> Result<Tensor> {
    let (_, s) = reference_style(model, references, aggregation)?;
    apply_style(model, x, &s)
}

/// `G(E^C(x), (1 - beta) s_a + beta s_b)` for each beta. Betas must be sorted
/// and within [0, 1]; the endpoints use `s_a` and `s_b` unchanged.
pub fn interpolate(
    model: &HarmonModel,
    x: &Tensor,
    s_a: &StyleCode,
    s_b: &StyleCode,
    betas: &[f64],
) -> Result<Vec<Tensor>> {
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(HarmonError::invalid_arg(format!("beta {b} outside [0, 1]")));
    }
    if betas.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarmonError::invalid_arg("betas must be sorted"));
    }
    if s_a.0.dims() != s_b.0.dims() {
        return Err(HarmonError::invalid_arg("interpolation endpoints differ in shape"));
    }
    let b = x.dim(0)?;
    let c = model.content_encode(x)?;
    let expand = |s: &StyleCode| -> Result<Tensor> {
        Ok(match s.0.dim(0)? {
            1 => s.0.broadcast_as((b, s.0.dim(1)?))?.contiguous()?,
            _ => s.0.clone(),
        })
    };
    betas
        .iter()
        .map(|&beta| {
            let s = if beta == 0.0 {
                s_a.clone()
            } else if beta == 1.0 {
                s_b.clone()
            } else {
                s_a.lerp(s_b, beta)?
            };
            model.generate(&c, &expand(&s)?)
        })
        .collect()
}

/// Split a `[B, 3, S, S]` batch back into samples that inherit the metadata
/// of `like` and carry `site`.
pub fn to_samples(images: &Tensor, like: &[&ImageSample], site: usize) -> Result<Vec<ImageSample>> {
    let (b, _, s, _) = images.dims4()?;
    if b != like.len() {
        return Err(HarmonError::invalid_arg("batch and template lengths differ"));
    }
    let flat: Vec<f32> = images.flatten_all()?.to_vec1()?;
    let n = 3 * s * s;
    Ok(like
        .iter()
        .enumerate()
        .map(|(k, t)| ImageSample { pixels: flat[k * n..(k + 1) * n].to_vec(), site_id: site, ..(*t).clone() })
        .collect())
}

/// Harmonize every input of `req` in batches; outputs keep the input metadata
/// except for the site, which becomes the target site.
pub fn harmonize_samples(model: &HarmonModel, req: &HarmonizationRequest) -> Result<Vec<ImageSample>> {
    if req.batch == 0 {
        return Err(HarmonError::invalid_arg("batch must be positive"));
    }
    let (site, style) = match &req.style {
        StyleSource::Site { target, seed } => (*target, site_style(model, *target, *seed)?),
        StyleSource::Reference { references, aggregation } => {
            let refs: Vec<&ImageSample> = references.iter().collect();
            reference_style(model, &refs, *aggregation)?
        }
    };
    let mut out = Vec::with_capacity(req.inputs.len());
    for chunk in req.inputs.chunks(req.batch) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let y = apply_style(model, &batch_tensor(&refs)?, &style)?;
        out.extend(to_samples(&y, &refs, site)?);
    }
    Ok(out)
}

/// Reassemble triplet samples of one volume into `depth` slices, cropping the
/// canvas padding. Slice `z` is the mean of every channel that covers it.
/// `first` is the volume index of slice 0 of the output.
pub fn assemble_volume(samples: &[ImageSample], depth: usize, first: usize, site_id: usize) -> Result<Volume> {
    let head = samples.first().ok_or_else(|| HarmonError::invalid_arg("no samples to assemble"))?;
    let [h, w] = head.extent;
    let plane = h * w;
    let mut sum = vec![0f64; depth * plane];
    let mut count = vec![0u32; depth];
    for s in samples {
        if s.extent != head.extent || s.canvas != head.canvas {
            return Err(HarmonError::invalid_arg("samples of different geometry"));
        }
        for c in 0..ImageSample::CHANNELS {
            let z = (s.slice_index + c)
                .checked_sub(first)
                .filter(|z| *z < depth)
                .ok_or_else(|| HarmonError::invalid_arg(format!("slice {} outside the volume", s.slice_index + c)))?;
            let crop = crop_canvas(s.channel(c), s.canvas, s.extent);
            for (acc, v) in sum[z * plane..(z + 1) * plane].iter_mut().zip(crop) {
                *acc += v as f64;
            }
            count[z] += 1;
        }
    }
    if let Some(z) = count.iter().position(|&c| c == 0) {
        return Err(HarmonError::invalid_arg(format!("slice {z} is not covered by any triplet")));
    }
    let voxels = sum
        .chunks(plane)
        .zip(&count)
        .flat_map(|(chunk, &n)| chunk.iter().map(move |v| (v / n as f64) as f32))
        .collect();
    Volume::new([depth, h, w], voxels, site_id, head.subject_id.clone())
}

/// Preprocess `volume`, harmonize every triplet with `style` and reassemble
/// the central slices. Ground-truth labels of those slices are carried over.
pub fn harmonize_volume(
    model: &HarmonModel,
    volume: &Volume,
    style: &StyleSource,
    preprocess: &PreprocessConfig,
    batch: usize,
) -> Result<Volume> {
    let inputs = preprocess_volume(volume, preprocess)?;
    let first = inputs.iter().map(|s| s.slice_index).min().unwrap_or(0);
    let req = HarmonizationRequest { inputs, style: style.clone(), batch };
    let out = harmonize_samples(model, &req)?;
    let site = out.first().map(|s| s.site_id).unwrap_or(volume.site_id);
    let assembled = assemble_volume(&out, preprocess.slice_count, first, site)?;
    match &volume.labels {
        Some(l) => {
            let plane = volume.height * volume.width;
            assembled.with_labels(l[first * plane..(first + preprocess.slice_count) * plane].to_vec())
        }
        None => Ok(assembled),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelConfig;

    fn model() -> HarmonModel {
        HarmonModel::new(ModelConfig { n_sites: 3, canvas: 16, width_mult: 0.0625, res_blocks: 1 }, 3).unwrap()
    }

    fn ramp_volume(depth: usize, h: usize, w: usize) -> Volume {
        let voxels = (0..depth * h * w).map(|i| ((i * 37) % 101) as f32).collect();
        Volume::new([depth, h, w], voxels, 0, "sub-000").unwrap()
    }

    fn vec_of(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn inputs() -> (Vec<ImageSample>, Tensor) {
        let v = ramp_volume(5, 12, 14);
        let samples = preprocess_volume(&v, &PreprocessConfig { slice_count: 5, stride: 1, canvas: 16 }).unwrap();
        let refs: Vec<&ImageSample> = samples.iter().collect();
        let x = batch_tensor(&refs).unwrap();
        (samples, x)
    }

    #[test]
    fn seeds_change_site_outputs() {
        let m = model();
        let (_, x) = inputs();
        let a = vec_of(&harmonize_site(&m, &x, 2, 1).unwrap());
        let b = vec_of(&harmonize_site(&m, &x, 2, 2).unwrap());
        let a2 = vec_of(&harmonize_site(&m, &x, 2, 1).unwrap());
        assert_eq!(a, a2);
        let mae: f32 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f32>() / a.len() as f32;
        assert!(mae > 0.0);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(harmonize_site(&m, &x, 3, 1).is_err());
    }

    #[test]
    fn reference_mode_is_deterministic_and_reference_dependent() {
        let m = model();
        let (samples, x) = inputs();
        let r = |k: usize| vec_of(&harmonize_reference(&m, &x, &[&samples[k]], RefAggregation::Mean).unwrap());
        assert_eq!(r(0), r(0));
        assert_ne!(r(0), r(2));
        let mut other = samples[1].clone();
        other.site_id = 1;
        assert!(harmonize_reference(&m, &x, &[&samples[0], &other], RefAggregation::Mean).is_err());
        other.site_id = 7;
        assert!(harmonize_reference(&m, &x, &[&other], RefAggregation::First).is_err());
    }

    #[test]
    fn first_aggregation_ignores_later_references() {
        let m = model();
        let (samples, x) = inputs();
        let a = harmonize_reference(&m, &x, &[&samples[0]], RefAggregation::First).unwrap();
        let b = harmonize_reference(&m, &x, &[&samples[0], &samples[2]], RefAggregation::First).unwrap();
        assert_eq!(vec_of(&a), vec_of(&b));
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let m = model();
        let (_, x) = inputs();
        let s_a = site_style(&m, 0, 10).unwrap();
        let s_b = site_style(&m, 2, 11).unwrap();
        let outs = interpolate(&m, &x, &s_a, &s_b, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(vec_of(&outs[0]), vec_of(&apply_style(&m, &x, &s_a).unwrap()));
        assert_eq!(vec_of(&outs[2]), vec_of(&apply_style(&m, &x, &s_b).unwrap()));
        assert!(interpolate(&m, &x, &s_a, &s_b, &[-0.1]).is_err());
        assert!(interpolate(&m, &x, &s_a, &s_b, &[1.5]).is_err());
        assert!(interpolate(&m, &x, &s_a, &s_b, &[0.5, 0.25]).is_err());
    }

    #[test]
    fn inference_leaves_parameters_alone() {
        let m = model();
        let before: Vec<Vec<f32>> = m.params().iter().map(|(_, v)| vec_of(v.as_tensor())).collect();
        let (_, x) = inputs();
        harmonize_site(&m, &x, 1, 0).unwrap();
        let after: Vec<Vec<f32>> = m.params().iter().map(|(_, v)| vec_of(v.as_tensor())).collect();
        assert_eq!(before, after);
    }

    fn sample_with(slice_index: usize, value: f32) -> ImageSample {
        ImageSample {
            pixels: vec![value; 3 * 16],
            canvas: 4,
            site_id: 0,
            subject_id: "s".into(),
            slice_index,
            labels: None,
            extent: [2, 2],
        }
    }

    #[test]
    fn stride_three_is_plain_concatenation() {
        let mut a = sample_with(0, 0.0);
        let mut b = sample_with(3, 0.0);
        for (k, s) in [&mut a, &mut b].into_iter().enumerate() {
            for c in 0..3 {
                for p in &mut s.pixels[c * 16..(c + 1) * 16] {
                    *p = (k * 3 + c) as f32 / 10.0;
                }
            }
        }
        let v = assemble_volume(&[a, b], 6, 0, 1).unwrap();
        assert_eq!([v.depth, v.height, v.width], [6, 2, 2]);
        for z in 0..6 {
            assert!(v.slice(z).data().iter().all(|p| (*p - z as f32 / 10.0).abs() < 1e-7));
        }
        assert_eq!(v.site_id, 1);
    }

    #[test]
    fn overlapping_slices_are_averaged() {
        // triplets start at 0 and 1: slices 1 and 2 are covered twice
        let v = assemble_volume(&[sample_with(0, 0.2), sample_with(1, 0.6)], 4, 0, 0).unwrap();
        let at = |z: usize| v.slice(z).data()[0];
        assert!((at(0) - 0.2).abs() < 1e-6);
        assert!((at(1) - 0.4).abs() < 1e-6);
        assert!((at(2) - 0.4).abs() < 1e-6);
        assert!((at(3) - 0.6).abs() < 1e-6);
        assert!(assemble_volume(&[sample_with(0, 0.2)], 4, 0, 0).is_err());
    }

    #[test]
    fn volume_round_trip_keeps_geometry() {
        let m = model();
        let v = ramp_volume(7, 12, 14);
        let pre = PreprocessConfig { slice_count: 5, stride: 1, canvas: 16 };
        let out = harmonize_volume(&m, &v, &StyleSource::Site { target: 1, seed: 0 }, &pre, 2).unwrap();
        assert_eq!([out.depth, out.height, out.width], [5, 12, 14]);
        assert_eq!(out.site_id, 1);
        assert_eq!(out.subject_id, "sub-000");
    }
}
