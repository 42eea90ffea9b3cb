//! Randomized ellipsoid "brain" phantoms with three tissue classes, rendered
//! through per-site intensity styles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{preprocess_volume, ImageSample, PhantomPair, PreprocessConfig, SiteSpec, Volume};
use crate::error::{HarmonError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum TissueClass {
    Background = 0,
    Csf = 1,
    Gray = 2,
    White = 3,
}

impl TissueClass {
    pub const ALL: [TissueClass; 4] =
        [TissueClass::Background, TissueClass::Csf, TissueClass::Gray, TissueClass::White];

    /// Intensity of the class in the unstyled anatomy image.
    pub fn base_intensity(self) -> f32 {
        match self {
            TissueClass::Background => 0.0,
            TissueClass::Csf => 0.25,
            TissueClass::Gray => 0.55,
            TissueClass::White => 0.85,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Background => "background",
            TissueClass::Csf => "csf",
            TissueClass::Gray => "gm",
            TissueClass::White => "wm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthShape {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthShape {
    fn default() -> Self {
        Self { depth: 64, height: 56, width: 56 }
    }
}

/// Unstyled anatomy: base intensities in [0, 1] plus the label map they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Anatomy {
    pub shape: SynthShape,
    pub intensity: Vec<f32>,
    pub labels: Vec<u8>,
}

pub fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 folded over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

struct Ellipsoid {
    centre: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| ((p[k] - self.centre[k]) / self.axes[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Render the anatomy of subject `subject` under `seed`. Independent of any site.
pub fn render_anatomy(shape: SynthShape, seed: u64, subject: u64) -> Anatomy {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, subject, 0xA7A7]));
    let SynthShape { depth, height, width } = shape;
    let (d, h, w) = (depth as f64, height as f64, width as f64);

    let head = Ellipsoid {
        centre: [
            d / 2.0 + rng.random_range(-0.03..0.03) * d,
            h / 2.0 + rng.random_range(-0.03..0.03) * h,
            w / 2.0 + rng.random_range(-0.03..0.03) * w,
        ],
        axes: [
            d * rng.random_range(0.55..0.7),
            h * rng.random_range(0.38..0.45),
            w * rng.random_range(0.32..0.39),
        ],
    };
    let csf_inner = rng.random_range(0.86..0.92);
    let wm_outer = rng.random_range(0.66..0.74);
    let lobes = rng.random_range(3..8) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let wobble = rng.random_range(0.03..0.07);

    let vent_scale = rng.random_range(0.8..1.2);
    let ventricles: Vec<Ellipsoid> = [-1.0, 1.0]
        .iter()
        .map(|side| Ellipsoid {
            centre: [
                head.centre[0],
                head.centre[1] + rng.random_range(-0.05..0.05) * head.axes[1],
                head.centre[2] + side * 0.14 * head.axes[2],
            ],
            axes: [
                head.axes[0] * 0.35 * vent_scale,
                head.axes[1] * 0.22 * vent_scale,
                head.axes[2] * 0.08 * vent_scale,
            ],
        })
        .collect();
    let deep_gray: Vec<Ellipsoid> = (0..2)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.3..0.45);
            Ellipsoid {
                centre: [
                    head.centre[0],
                    head.centre[1] + r * angle.sin() * head.axes[1],
                    head.centre[2] + r * angle.cos() * head.axes[2],
                ],
                axes: [
                    head.axes[0] * rng.random_range(0.2..0.35),
                    head.axes[1] * rng.random_range(0.08..0.13),
                    head.axes[2] * rng.random_range(0.08..0.13),
                ],
            }
        })
        .collect();

    let n = depth * height * width;
    let mut labels = vec![0u8; n];
    let mut intensity = vec![0f32; n];
    for z in 0..depth {
        for y in 0..height {
            for x in 0..width {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let r = head.radius(p);
                let class = if r > 1.0 {
                    TissueClass::Background
                } else if r > csf_inner {
                    TissueClass::Csf
                } else {
                    let theta = (p[1] - head.centre[1]).atan2(p[2] - head.centre[2]);
                    let boundary = wm_outer + wobble * (lobes * theta + phase).sin();
                    if r > boundary {
                        TissueClass::Gray
                    } else if ventricles.iter().any(|e| e.radius(p) <= 1.0) {
                        TissueClass::Csf
                    } else if deep_gray.iter().any(|e| e.radius(p) <= 1.0) {
                        TissueClass::Gray
                    } else {
                        TissueClass::White
                    }
                };
                let i = (z * height + y) * width + x;
                labels[i] = class as u8;
                intensity[i] = class.base_intensity();
            }
        }
    }
    Anatomy { shape, intensity, labels }
}

/// Apply a site's intensity style (plus its noise) to unstyled anatomy.
pub(crate) fn apply_style(anatomy: &Anatomy, spec: &SiteSpec, noise_seed: u64) -> Vec<f32> {
    let SynthShape { depth, height, width } = anatomy.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma >= 0");
    let (sin, cos) = spec.bias_angle_deg.to_radians().sin_cos();
    let mut out = Vec::with_capacity(anatomy.intensity.len());
    for z in 0..depth {
        for y in 0..height {
            let v = (y as f64 + 0.5) / height as f64 * 2.0 - 1.0;
            for x in 0..width {
                let u = (x as f64 + 0.5) / width as f64 * 2.0 - 1.0;
                let base = anatomy.intensity[(z * height + y) * width + x] as f64;
                let field = 1.0 + spec.bias_field * (u * cos + v * sin);
                let mut value = (spec.gain * base.powf(spec.gamma) + spec.bias) * field;
                if spec.noise_sigma > 0.0 {
                    value += noise.sample(&mut rng);
                }
                out.push(value as f32);
            }
        }
    }
    out
}

fn subject_id(index: u64) -> String {
    format!("sub-{index:03}")
}

/// `n_subjects` volumes of one site. Anatomy depends only on `(seed, subject)`,
/// so two sites generated with the same seed image identical subjects.
pub fn generate_synthetic_site_dataset(
    spec: &SiteSpec,
    n_subjects: usize,
    seed: u64,
    shape: SynthShape,
) -> Result<Vec<Volume>> {
    if n_subjects == 0 {
        return Err(HarmonError::invalid_arg("n_subjects must be >= 1"));
    }
    if shape.depth < 3 || shape.height == 0 || shape.width == 0 {
        return Err(HarmonError::invalid_config(format!("bad synthetic shape {shape:?}")));
    }
    spec.validate()?;
    (0..n_subjects as u64)
        .map(|s| {
            let anatomy = render_anatomy(shape, seed, s);
            let voxels = apply_style(&anatomy, spec, mix_seed(&[seed, s, spec.site_id as u64, 0x5EED]));
            Volume::new(
                [shape.depth, shape.height, shape.width],
                voxels,
                spec.site_id,
                subject_id(s),
            )?
            .with_labels(anatomy.labels)
        })
        .collect()
}

/// The same subjects "scanned" at two sites: voxel-aligned by construction.
pub fn generate_phantom_volumes(
    spec_a: &SiteSpec,
    spec_b: &SiteSpec,
    n_subjects: usize,
    seed: u64,
    shape: SynthShape,
) -> Result<Vec<(Volume, Volume)>> {
    if spec_a.site_id == spec_b.site_id {
        return Err(HarmonError::invalid_arg(format!(
            "phantom pair needs two different sites, both are {}",
            spec_a.site_id
        )));
    }
    let a = generate_synthetic_site_dataset(spec_a, n_subjects, seed, shape)?;
    let b = generate_synthetic_site_dataset(spec_b, n_subjects, seed, shape)?;
    Ok(a.into_iter().zip(b).collect())
}

/// Preprocessed, slice-aligned sample pairs for every subject of a phantom set.
pub fn generate_phantom_pairs(
    spec_a: &SiteSpec,
    spec_b: &SiteSpec,
    n_subjects: usize,
    seed: u64,
    shape: SynthShape,
    preprocess: &PreprocessConfig,
) -> Result<Vec<PhantomPair>> {
    let mut pairs = Vec::new();
    for (va, vb) in generate_phantom_volumes(spec_a, spec_b, n_subjects, seed, shape)? {
        let sa = preprocess_volume(&va, preprocess)?;
        let sb = preprocess_volume(&vb, preprocess)?;
        pairs.extend(sa.into_iter().zip(sb).map(|(source, target)| PhantomPair { source, target }));
    }
    Ok(pairs)
}

/// Split names produced by [`synthesize_splits`].
pub const SPLITS: [&str; 3] = ["train", "val", "phantom"];

/// Train, validation and phantom volumes for every site. Train and
/// validation subjects are drawn independently per site; phantom subjects
/// share their anatomy across all sites (travelling phantoms).
pub fn synthesize_splits(
    sites: &[SiteSpec],
    n_train: usize,
    n_val: usize,
    n_phantom: usize,
    seed: u64,
    shape: SynthShape,
) -> Result<Vec<(&'static str, Volume)>> {
    let mut out = Vec::new();
    for spec in sites {
        let site = spec.site_id as u64;
        for (k, (split, n)) in [("train", n_train), ("val", n_val)].into_iter().enumerate() {
            if n > 0 {
                let split_seed = mix_seed(&[seed, site, k as u64, 0x5A17]);
                out.extend(generate_synthetic_site_dataset(spec, n, split_seed, shape)?.into_iter().map(|v| (split, v)));
            }
        }
        if n_phantom > 0 {
            let phantom_seed = mix_seed(&[seed, 0xFA27]);
            out.extend(
                generate_synthetic_site_dataset(spec, n_phantom, phantom_seed, shape)?
                    .into_iter()
                    .map(|v| ("phantom", v)),
            );
        }
    }
    Ok(out)
}

/// Aligned pairs for every ordered pair of distinct sites among `samples`,
/// matched on subject and slice.
pub fn pair_phantoms(samples: &[ImageSample]) -> Vec<PhantomPair> {
    let mut by_key: std::collections::BTreeMap<(&str, usize), Vec<&ImageSample>> = Default::default();
    for s in samples {
        by_key.entry((s.subject_id.as_str(), s.slice_index)).or_default().push(s);
    }
    let mut pairs = Vec::new();
    for group in by_key.values() {
        for a in group {
            for b in group.iter().filter(|b| b.site_id != a.site_id) {
                pairs.push(PhantomPair { source: (*a).clone(), target: (*b).clone() });
            }
        }
    }
    pairs.sort_by_key(|p| (p.source.site_id, p.target.site_id));
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::toy_segment;

    const SMALL: SynthShape = SynthShape { depth: 6, height: 24, width: 24 };

    #[test]
    fn identity_style_reproduces_anatomy() {
        let spec = SiteSpec::identity(0);
        let vols = generate_synthetic_site_dataset(&spec, 2, 7, SMALL).unwrap();
        let anatomy = render_anatomy(SMALL, 7, 1);
        assert_eq!(vols[1].voxels, anatomy.intensity);
        assert_eq!(vols[1].labels.as_ref().unwrap(), &anatomy.labels);
        assert_eq!(vols[1].subject_id, "sub-001");
    }

    #[test]
    fn anatomy_has_all_classes() {
        let a = render_anatomy(SMALL, 3, 0);
        for class in TissueClass::ALL {
            assert!(a.labels.contains(&(class as u8)), "missing {class:?}");
        }
    }

    #[test]
    fn anatomy_is_shared_across_sites() {
        let specs = SiteSpec::desk_sites();
        let a = generate_synthetic_site_dataset(&specs[0], 3, 11, SMALL).unwrap();
        let b = generate_synthetic_site_dataset(&specs[2], 3, 11, SMALL).unwrap();
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!(va.labels, vb.labels);
            assert_ne!(va.voxels, vb.voxels);
        }
    }

    #[test]
    fn gamma_transform_matches_direct_evaluation() {
        let spec = SiteSpec { gamma: 0.6, ..SiteSpec::identity(1) };
        let v = &generate_synthetic_site_dataset(&spec, 1, 5, SMALL).unwrap()[0];
        let anatomy = render_anatomy(SMALL, 5, 0);
        for (out, base) in v.voxels.iter().zip(&anatomy.intensity) {
            let expect = (*base as f64).powf(0.6) as f32;
            assert_eq!(*out, expect);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = &SiteSpec::desk_sites()[1];
        let a = generate_synthetic_site_dataset(spec, 2, 9, SMALL).unwrap();
        let b = generate_synthetic_site_dataset(spec, 2, 9, SMALL).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_site_dataset(spec, 2, 10, SMALL).unwrap();
        assert_ne!(a[0].voxels, c[0].voxels);
    }

    #[test]
    fn rejects_bad_arguments() {
        let spec = SiteSpec::identity(0);
        assert!(generate_synthetic_site_dataset(&spec, 0, 1, SMALL).is_err());
        let bad = SiteSpec { gamma: -1.0, ..SiteSpec::identity(0) };
        assert!(matches!(
            generate_synthetic_site_dataset(&bad, 1, 1, SMALL),
            Err(HarmonError::InvalidConfig(_))
        ));
        assert!(generate_phantom_volumes(&spec, &spec, 1, 1, SMALL).is_err());
    }

    #[test]
    fn phantom_pairs_share_subjects() {
        let a = SiteSpec::identity(0);
        let b = SiteSpec::identity(1);
        let vols = generate_phantom_volumes(&a, &b, 1, 4, SMALL).unwrap();
        assert_eq!(vols.len(), 1);
        assert_eq!(vols[0].0.subject_id, vols[0].1.subject_id);

        let cfg = PreprocessConfig { slice_count: 4, stride: 1, canvas: 32 };
        let pairs = generate_phantom_pairs(&a, &b, 1, 4, SMALL, &cfg).unwrap();
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_eq!(p.source.pixels, p.target.pixels);
            assert_ne!(p.source.site_id, p.target.site_id);
        }
    }

    #[test]
    fn styled_phantoms_differ_in_pixels_not_segmentation() {
        let a = SiteSpec::identity(0);
        let b = SiteSpec { gamma: 0.6, ..SiteSpec::identity(1) };
        let cfg = PreprocessConfig { slice_count: 4, stride: 1, canvas: 32 };
        let pairs = generate_phantom_pairs(&a, &b, 1, 4, SMALL, &cfg).unwrap();
        for p in &pairs {
            assert_ne!(p.source.pixels, p.target.pixels);
            let sa = toy_segment(&p.source.channel_extent(1)).unwrap();
            let sb = toy_segment(&p.target.channel_extent(1)).unwrap();
            assert_eq!(sa.labels(), sb.labels());
        }
    }
}
