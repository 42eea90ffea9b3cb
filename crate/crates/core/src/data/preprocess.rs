use serde::{Deserialize, Serialize};

use super::{ImageSample, Plane, Volume};
use crate::error::{HarmonError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Number of central axial slices kept per volume.
    pub slice_count: usize,
    /// Step between successive triplet windows.
    pub stride: usize,
    /// Square canvas side every channel is zero-padded to.
    pub canvas: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { slice_count: 60, stride: 1, canvas: 64 }
    }
}

/// Index of the first of `count` slices centred in a stack of `depth`.
/// Odd leftovers go after the kept block.
pub(crate) fn central_start(depth: usize, count: usize) -> usize {
    (depth - count) / 2
}

pub fn extract_central_slices(volume: &Volume, count: usize) -> Result<Vec<Plane>> {
    if count < 3 {
        return Err(HarmonError::invalid_arg(format!("slice count {count} < 3")));
    }
    if count > volume.depth {
        return Err(HarmonError::invalid_arg(format!(
            "slice count {count} exceeds volume depth {}",
            volume.depth
        )));
    }
    let start = central_start(volume.depth, count);
    Ok((start..start + count).map(|z| volume.slice(z)).collect())
}

/// Windows `[k, k+1, k+2]` for `k = 0, stride, 2*stride, ...`.
pub fn make_triplets<T: Clone>(slices: &[T], stride: usize) -> Result<Vec<[T; 3]>> {
    if slices.len() < 3 {
        return Err(HarmonError::invalid_arg(format!(
            "need at least 3 slices for a triplet, got {}",
            slices.len()
        )));
    }
    if stride == 0 {
        return Err(HarmonError::invalid_arg("triplet stride must be >= 1"));
    }
    Ok((0..=slices.len() - 3)
        .step_by(stride)
        .map(|k| [slices[k].clone(), slices[k + 1].clone(), slices[k + 2].clone()])
        .collect())
}

/// Affine map of `[min, max]` onto `[-1, 1]`; constant input maps to zeros.
pub fn normalize_channel(ch: &Plane) -> Result<Plane> {
    if ch.data().iter().any(|v| !v.is_finite()) {
        return Err(HarmonError::invalid_data("channel contains NaN or Inf"));
    }
    let (lo, hi) = ch
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let data = if hi > lo {
        let scale = 2.0 / (hi - lo);
        ch.data()
            .iter()
            .map(|&v| {
                let y = (v as f64 - lo) * scale - 1.0;
                y.clamp(-1.0, 1.0) as f32
            })
            .collect()
    } else {
        vec![0.0; ch.data().len()]
    };
    Plane::new(ch.height(), ch.width(), data)
}

/// Offsets (before, after) that centre `len` inside `size`; the odd element goes after.
pub(crate) fn centre_offsets(len: usize, size: usize) -> (usize, usize) {
    let before = (size - len) / 2;
    (before, size - len - before)
}

fn check_fits(height: usize, width: usize, size: usize) -> Result<()> {
    if height > size || width > size {
        return Err(HarmonError::invalid_arg(format!(
            "{height}x{width} input does not fit a {size}x{size} canvas"
        )));
    }
    Ok(())
}

/// Centre `ch` on a `size x size` canvas filled with zeros.
pub fn pad_to_canvas(ch: &Plane, size: usize) -> Result<Plane> {
    check_fits(ch.height(), ch.width(), size)?;
    let (top, _) = centre_offsets(ch.height(), size);
    let (left, _) = centre_offsets(ch.width(), size);
    let mut out = vec![0.0f32; size * size];
    for (y, row) in ch.data().chunks(ch.width()).enumerate() {
        let start = (y + top) * size + left;
        out[start..start + row.len()].copy_from_slice(row);
    }
    Plane::new(size, size, out)
}

pub(crate) fn pad_labels(labels: &[u8], height: usize, width: usize, size: usize) -> Result<Vec<u8>> {
    check_fits(height, width, size)?;
    let (top, _) = centre_offsets(height, size);
    let (left, _) = centre_offsets(width, size);
    let mut out = vec![0u8; size * size];
    for (y, row) in labels.chunks(width).enumerate() {
        let start = (y + top) * size + left;
        out[start..start + row.len()].copy_from_slice(row);
    }
    Ok(out)
}

/// Inverse of [`pad_to_canvas`]: cut the centred `height x width` block back out.
pub(crate) fn crop_from_canvas(canvas: &[f32], size: usize, height: usize, width: usize) -> Vec<f32> {
    super::crop_canvas(canvas, size, [height, width])
}

/// Full pipeline: central slices, triplet windows, per-channel normalization,
/// zero padding. Deterministic.
pub fn preprocess_volume(volume: &Volume, cfg: &PreprocessConfig) -> Result<Vec<ImageSample>> {
    check_fits(volume.height, volume.width, cfg.canvas)?;
    let first = central_start(volume.depth, cfg.slice_count.min(volume.depth));
    let slices = extract_central_slices(volume, cfg.slice_count)?;
    let indices: Vec<usize> = (0..slices.len()).collect();
    let windows = make_triplets(&indices, cfg.stride)?;
    let plane = cfg.canvas * cfg.canvas;
    windows
        .into_iter()
        .map(|[a, b, c]| {
            let mut pixels = Vec::with_capacity(3 * plane);
            for k in [a, b, c] {
                let normalized = normalize_channel(&slices[k])?;
                pixels.extend_from_slice(pad_to_canvas(&normalized, cfg.canvas)?.data());
            }
            let labels = match volume.label_slice(first + b) {
                Some(l) => Some(pad_labels(&l, volume.height, volume.width, cfg.canvas)?),
                None => None,
            };
            Ok(ImageSample {
                pixels,
                canvas: cfg.canvas,
                site_id: volume.site_id,
                subject_id: volume.subject_id.clone(),
                slice_index: first + a,
                labels,
                extent: [volume.height, volume.width],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_volume(depth: usize) -> Volume {
        let (h, w) = (2, 2);
        let voxels = (0..depth * h * w).map(|i| (i / (h * w)) as f32).collect();
        Volume::new([depth, h, w], voxels, 0, "s").unwrap()
    }

    fn slice_ids(planes: &[Plane]) -> Vec<usize> {
        planes.iter().map(|p| p.get(0, 0) as usize).collect()
    }

    #[test]
    fn central_slices_take_everything_when_count_equals_depth() {
        let v = ramp_volume(60);
        let s = extract_central_slices(&v, 60).unwrap();
        assert_eq!(slice_ids(&s), (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn central_slices_odd_and_even_leftover() {
        assert_eq!(slice_ids(&extract_central_slices(&ramp_volume(5), 3).unwrap()), vec![1, 2, 3]);
        // Both centrings of 3 in 4 are {0,1,2} and {1,2,3}; the floor rule picks the first.
        assert_eq!(slice_ids(&extract_central_slices(&ramp_volume(4), 3).unwrap()), vec![0, 1, 2]);
    }

    #[test]
    fn central_slices_reject_bad_counts() {
        assert!(matches!(
            extract_central_slices(&ramp_volume(4), 5),
            Err(HarmonError::InvalidArgument(_))
        ));
        assert!(extract_central_slices(&ramp_volume(4), 2).is_err());
    }

    fn brute_force_window_count(len: usize, stride: usize) -> usize {
        let mut n = 0;
        let mut k = 0;
        while k + 2 < len {
            n += 1;
            k += stride;
        }
        n
    }

    #[test]
    fn triplet_counts() {
        let s: Vec<usize> = (0..60).collect();
        assert_eq!(brute_force_window_count(60, 1), 58);
        assert_eq!(make_triplets(&s, 1).unwrap().len(), 58);
        assert_eq!(brute_force_window_count(60, 3), 20);
        assert_eq!(make_triplets(&s, 3).unwrap().len(), 20);
        assert_eq!(make_triplets(&s[..3], 1).unwrap(), vec![[0, 1, 2]]);
        assert!(make_triplets(&s[..2], 1).is_err());
        assert!(make_triplets(&s, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let p = Plane::new(1, 3, vec![0.0, 250.0, 500.0]).unwrap();
        assert_eq!(normalize_channel(&p).unwrap().data(), &[-1.0, 0.0, 1.0]);

        let p = Plane::new(1, 3, vec![-1.0, 0.5, 1.0]).unwrap();
        assert_eq!(normalize_channel(&p).unwrap().data(), &[-1.0, 0.5, 1.0]);

        let p = Plane::new(2, 2, vec![7.0; 4]).unwrap();
        assert_eq!(normalize_channel(&p).unwrap().data(), &[0.0; 4]);

        let p = Plane::new(1, 2, vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(normalize_channel(&p), Err(HarmonError::InvalidData(_))));
    }

    #[test]
    fn pad_examples() {
        let p = Plane::new(4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(pad_to_canvas(&p, 4).unwrap(), p);

        let p = Plane::new(250, 250, vec![1.0; 250 * 250]).unwrap();
        let out = pad_to_canvas(&p, 256).unwrap();
        assert_eq!(out.get(2, 2), 0.0);
        assert_eq!(out.get(3, 3), 1.0);
        assert_eq!(out.get(252, 252), 1.0);
        assert_eq!(out.get(253, 253), 0.0);

        let p = Plane::new(255, 255, vec![1.0; 255 * 255]).unwrap();
        let out = pad_to_canvas(&p, 256).unwrap();
        assert_eq!(out.get(0, 0), 1.0);
        assert_eq!(out.get(254, 254), 1.0);
        assert_eq!(out.get(255, 0), 0.0);
        assert_eq!(out.get(0, 255), 0.0);

        let p = Plane::new(5, 3, vec![1.0; 15]).unwrap();
        assert!(pad_to_canvas(&p, 4).is_err());
    }

    #[test]
    fn crop_inverts_pad() {
        let p = Plane::new(3, 5, (0..15).map(|v| v as f32).collect()).unwrap();
        let padded = pad_to_canvas(&p, 8).unwrap();
        assert_eq!(crop_from_canvas(padded.data(), 8, 3, 5), p.data());
    }

    #[test]
    fn preprocess_is_deterministic_and_overlapping() {
        let (d, h, w) = (8, 5, 6);
        let voxels = (0..d * h * w).map(|i| ((i * 37) % 101) as f32).collect();
        let v = Volume::new([d, h, w], voxels, 1, "sub").unwrap();
        let cfg = PreprocessConfig { slice_count: 6, stride: 1, canvas: 8 };
        let a = preprocess_volume(&v, &cfg).unwrap();
        let b = preprocess_volume(&v, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].slice_index, 1);
        assert!(a.iter().all(|s| s.pixels.iter().all(|p| (-1.0..=1.0).contains(p))));
        // Channel 2 of window k is channel 0 of window k+2.
        for k in 0..a.len() - 2 {
            assert_eq!(a[k].channel(2), a[k + 2].channel(0));
        }
    }

    proptest! {
        #[test]
        fn normalize_spans_full_range(values in proptest::collection::vec(-1e3f32..1e3, 2..64)) {
            let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assume!(hi > lo);
            let n = values.len();
            let out = normalize_channel(&Plane::new(1, n, values).unwrap()).unwrap();
            let omin = out.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let omax = out.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!((omin + 1.0).abs() < 1e-6);
            prop_assert!((omax - 1.0).abs() < 1e-6);
        }

        #[test]
        fn pad_preserves_values(h in 1usize..10, w in 1usize..10, extra in 0usize..6) {
            let data: Vec<f32> = (0..h * w).map(|i| i as f32 + 1.0).collect();
            let p = Plane::new(h, w, data.clone()).unwrap();
            let size = h.max(w) + extra;
            let out = pad_to_canvas(&p, size).unwrap();
            let mut nonzero: Vec<f32> = out.data().iter().cloned().filter(|v| *v != 0.0).collect();
            nonzero.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(nonzero, data);
        }
    }
}
