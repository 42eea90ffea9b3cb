use crate::error::{HarmonError, Result};

pub const N_CLASSES: usize = 4;

/// Integer label image with classes 0 (background) to 3, ordered by intensity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if labels.iter().any(|&l| l as usize >= N_CLASSES) {
            return Err(HarmonError::invalid_arg("segmentation labels must be in 0..4"));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Four-class 1-D k-means on intensities.
///
/// Centroids start evenly spaced over `[min, max]` (hence sorted), Lloyd
/// iterations run to a fixed point, and labels are the rank of the final
/// centroid, so class 0 is always the darkest. Ties go to the lower label.
/// A cluster that empties restarts at the pixel farthest from its centroid.
pub fn toy_segment(pixels: &[f32]) -> Result<SegmentationMap> {
    if pixels.is_empty() {
        return Err(HarmonError::invalid_arg("cannot segment an empty image"));
    }
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(HarmonError::invalid_data("cannot segment non-finite pixels"));
    }
    let (lo, hi) = pixels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let mut centroids: [f64; N_CLASSES] =
        std::array::from_fn(|k| lo + (k as f64 + 0.5) / N_CLASSES as f64 * (hi - lo));
    let mut assign = vec![0u8; pixels.len()];
    let nearest = |v: f64, c: &[f64; N_CLASSES]| {
        let mut best = 0;
        for k in 1..N_CLASSES {
            if (v - c[k]).abs() < (v - c[best]).abs() {
                best = k;
            }
        }
        best as u8
    };
    for _ in 0..200 {
        let mut changed = false;
        let mut sum = [0f64; N_CLASSES];
        let mut cnt = [0usize; N_CLASSES];
        for (a, &v) in assign.iter_mut().zip(pixels) {
            let k = nearest(v as f64, &centroids);
            changed |= *a != k;
            *a = k;
            sum[k as usize] += v as f64;
            cnt[k as usize] += 1;
        }
        for k in 0..N_CLASSES {
            if cnt[k] > 0 {
                centroids[k] = sum[k] / cnt[k] as f64;
            }
        }
        // an empty cluster restarts at the pixel worst served by its centroid
        for k in (0..N_CLASSES).filter(|&k| cnt[k] == 0) {
            let mut worst: Option<(f64, f64)> = None;
            for (&a, &v) in assign.iter().zip(pixels) {
                let d = (v as f64 - centroids[a as usize]).abs();
                if d > 0.0 && worst.is_none_or(|(wd, _)| d > wd) && !centroids.contains(&(v as f64)) {
                    worst = Some((d, v as f64));
                }
            }
            if let Some((_, v)) = worst {
                centroids[k] = v;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut order: Vec<usize> = (0..N_CLASSES).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut rank = [0u8; N_CLASSES];
    for (r, &k) in order.iter().enumerate() {
        rank[k] = r as u8;
    }
    SegmentationMap::new(assign.into_iter().map(|k| rank[k as usize]).collect())
}

/// Dice coefficient `2|A and B| / (|A| + |B|)` for one class; 1 when the
/// class is absent from both maps.
pub fn dice(a: &SegmentationMap, b: &SegmentationMap, class: u8) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HarmonError::invalid_arg(format!("dice: {} vs {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == class, y == class);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_site_dataset, SiteSpec, SynthShape, TissueClass};

    fn map(v: &[u8]) -> SegmentationMap {
        SegmentationMap::new(v.to_vec()).unwrap()
    }

    #[test]
    fn recovers_piecewise_constant_levels() {
        let levels = [-1.0f32, -0.3, 0.2, 0.9];
        let truth: Vec<u8> = (0..64).map(|i| ((i * 7) % 4) as u8).collect();
        let pixels: Vec<f32> = truth.iter().map(|&l| levels[l as usize]).collect();
        assert_eq!(toy_segment(&pixels).unwrap().labels(), truth.as_slice());
    }

    #[test]
    fn labels_follow_intensity_order() {
        // the same layout with intensities permuted must still put the darkest at 0
        let pixels = [5.0f32, 1.0, 3.0, 9.0, 9.0, 1.0];
        assert_eq!(toy_segment(&pixels).unwrap().labels(), &[2, 0, 1, 3, 3, 0]);
    }

    #[test]
    fn noisy_phantom_segments_well() {
        let shape = SynthShape { depth: 3, height: 48, width: 48 };
        let spec = SiteSpec { noise_sigma: 0.02, ..SiteSpec::identity(0) };
        let v = &generate_synthetic_site_dataset(&spec, 1, 21, shape).unwrap()[0];
        let plane = v.slice(1);
        let truth = map(&v.label_slice(1).unwrap());
        let seg = toy_segment(plane.data()).unwrap();
        for class in TissueClass::ALL {
            let d = dice(&seg, &truth, class as u8).unwrap();
            assert!(d >= 0.9, "{class:?}: {d}");
        }
    }

    #[test]
    fn dice_fixtures() {
        let a = map(&[1, 1, 0, 0, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = map(&[0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        // 4x4 fixture: A = top two rows' left half (4 px), B shifted one column (4 px), overlap 2
        let a = map(&[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let b = map(&[0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        // hand count: |A and B| = 2, |A| = |B| = 4 -> 4/8
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        // half-overlap of two equal masks of 3 px: |A and B| = 2 -> 4/6
        let a = map(&[1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let b = map(&[0, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!((dice(&a, &b, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&a, &b, 3).unwrap(), 1.0);
        assert!(dice(&a, &map(&[0; 4]), 1).is_err());
        assert!(SegmentationMap::new(vec![4]).is_err());
    }
}
