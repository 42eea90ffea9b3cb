//! Site-labelled image data: volumes, preprocessed slice triplets, the
//! synthetic multi-site generator and on-disk layouts.

mod dataset;
pub mod io;
mod preprocess;
mod synth;

pub use dataset::MultiSiteDataset;
pub use preprocess::{
    extract_central_slices, make_triplets, normalize_channel, pad_to_canvas, preprocess_volume,
    PreprocessConfig,
};
pub use synth::{
    generate_phantom_pairs, generate_phantom_volumes, generate_synthetic_site_dataset, mix_seed,
    pair_phantoms, render_anatomy, synthesize_splits, Anatomy, SynthShape, TissueClass, SPLITS,
};

use serde::{Deserialize, Serialize};

use crate::error::{HarmonError, Result};

/// A row-major 2-D real array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(HarmonError::invalid_arg(format!(
                "plane data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// A 3-D intensity volume `[depth, height, width]` acquired at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f32>,
    pub site_id: usize,
    pub subject_id: String,
    /// Ground-truth tissue labels (0 = background, 1..=3 tissue classes) when known.
    pub labels: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        voxels: Vec<f32>,
        site_id: usize,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        let [depth, height, width] = dims;
        if depth < 3 {
            return Err(HarmonError::invalid_arg(format!("volume depth {depth} < 3")));
        }
        if voxels.len() != depth * height * width {
            return Err(HarmonError::invalid_arg(format!(
                "volume has {} voxels, expected {depth}x{height}x{width}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(HarmonError::invalid_data(format!("non-finite voxel at index {i}")));
        }
        Ok(Self { depth, height, width, voxels, site_id, subject_id: subject_id.into(), labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.voxels.len() {
            return Err(HarmonError::invalid_arg("label volume shape mismatch"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn slice(&self, z: usize) -> Plane {
        let n = self.height * self.width;
        Plane {
            height: self.height,
            width: self.width,
            data: self.voxels[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn label_slice(&self, z: usize) -> Option<Vec<u8>> {
        let n = self.height * self.width;
        self.labels.as_ref().map(|l| l[z * n..(z + 1) * n].to_vec())
    }
}

/// One training/inference unit: three adjacent slices stacked as channels,
/// normalized per channel to [-1, 1] and zero-padded to a square canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Vec<f32>,
    pub canvas: usize,
    pub site_id: usize,
    pub subject_id: String,
    /// Volume index of the first slice of the triplet.
    pub slice_index: usize,
    /// Ground-truth labels of the middle slice, padded to the canvas (background outside).
    pub labels: Option<Vec<u8>>,
    /// `[height, width]` of the original slice, centred on the canvas.
    pub extent: [usize; 2],
}

impl ImageSample {
    pub const CHANNELS: usize = 3;

    pub fn new(pixels: Vec<f32>, canvas: usize, site_id: usize) -> Result<Self> {
        if pixels.len() != Self::CHANNELS * canvas * canvas {
            return Err(HarmonError::invalid_arg(format!(
                "sample has {} values, expected 3x{canvas}x{canvas}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(HarmonError::invalid_data("sample pixels must be finite and within [-1, 1]"));
        }
        Ok(Self {
            pixels,
            canvas,
            site_id,
            subject_id: String::new(),
            slice_index: 0,
            labels: None,
            extent: [canvas, canvas],
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.canvas * self.canvas;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// The original (unpadded) region of channel `c`.
    pub fn channel_extent(&self, c: usize) -> Vec<f32> {
        preprocess::crop_from_canvas(self.channel(c), self.canvas, self.extent[0], self.extent[1])
    }

    /// Ground-truth labels cropped to the original region.
    pub fn labels_extent(&self) -> Option<Vec<u8>> {
        self.labels.as_ref().map(|l| crop_canvas(l, self.canvas, self.extent))
    }
}

/// Crop the centred `extent` block out of a `canvas x canvas` buffer.
pub fn crop_canvas<T: Copy>(buf: &[T], canvas: usize, extent: [usize; 2]) -> Vec<T> {
    let [h, w] = extent;
    let top = (canvas - h) / 2;
    let left = (canvas - w) / 2;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let start = (y + top) * canvas + left;
        out.extend_from_slice(&buf[start..start + w]);
    }
    out
}

/// Parameters of a site's intensity "style". The transform is monotone on [0, 1]:
/// `v -> gain * v^gamma + bias`, multiplied by a smooth linear bias field, then
/// additive Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub site_id: usize,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub bias: f64,
    /// Peak relative deviation of the bias field from 1 at the volume edge.
    #[serde(default)]
    pub bias_field: f64,
    /// Direction of the in-plane bias-field gradient, in degrees.
    #[serde(default)]
    pub bias_angle_deg: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

fn one() -> f64 {
    1.0
}

impl SiteSpec {
    pub fn identity(site_id: usize) -> Self {
        Self {
            site_id,
            gamma: 1.0,
            gain: 1.0,
            bias: 0.0,
            bias_field: 0.0,
            bias_angle_deg: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gain > 0.0
            && self.noise_sigma >= 0.0
            && (0.0..1.0).contains(&self.bias_field)
            && [self.gamma, self.gain, self.bias, self.bias_angle_deg].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(HarmonError::invalid_config(format!(
                "site {} transform is not monotone or not finite: {self:?}",
                self.site_id
            )))
        }
    }

    /// Three visibly different sites used by the desk-scale pipeline.
    pub fn desk_sites() -> Vec<SiteSpec> {
        vec![
            SiteSpec { noise_sigma: 0.01, ..SiteSpec::identity(0) },
            SiteSpec {
                gamma: 0.5,
                bias_field: 0.1,
                bias_angle_deg: 30.0,
                noise_sigma: 0.01,
                ..SiteSpec::identity(1)
            },
            SiteSpec {
                gamma: 2.0,
                gain: 0.9,
                bias: 0.05,
                bias_field: 0.1,
                bias_angle_deg: 200.0,
                noise_sigma: 0.01,
                ..SiteSpec::identity(2)
            },
        ]
    }
}

/// Two aligned acquisitions of the same subject at different sites.
#[derive(Clone, Debug)]
pub struct PhantomPair {
    pub source: ImageSample,
    pub target: ImageSample,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_rejects_bad_pixels() {
        assert!(ImageSample::new(vec![0.0; 3 * 16], 4, 0).is_ok());
        assert!(ImageSample::new(vec![0.0; 16], 4, 0).is_err());
        assert!(ImageSample::new(vec![1.5; 3 * 16], 4, 0).is_err());
        assert!(ImageSample::new(vec![f32::NAN; 3 * 16], 4, 0).is_err());
    }

    #[test]
    fn crop_takes_the_centred_block() {
        let buf: Vec<u32> = (0..25).collect();
        assert_eq!(crop_canvas(&buf, 5, [2, 3]), vec![6, 7, 8, 11, 12, 13]);
        assert_eq!(crop_canvas(&buf, 5, [5, 5]), buf);
    }

    #[test]
    fn site_specs_must_be_monotone() {
        for s in SiteSpec::desk_sites() {
            s.validate().unwrap();
        }
        assert!(SiteSpec { gamma: -1.0, ..SiteSpec::identity(0) }.validate().is_err());
        assert!(SiteSpec { bias_field: 1.0, ..SiteSpec::identity(0) }.validate().is_err());
    }

    #[test]
    fn volume_checks_shape() {
        assert!(Volume::new([3, 2, 2], vec![0.0; 12], 0, "s").is_ok());
        assert!(Volume::new([3, 2, 2], vec![0.0; 11], 0, "s").is_err());
        assert!(Volume::new([2, 2, 2], vec![0.0; 8], 0, "s").is_err());
    }
}
