use rand::Rng;

use super::ImageSample;
use crate::error::{HarmonError, Result};

/// Preprocessed samples grouped by site. Immutable once built.
#[derive(Clone, Debug, Default)]
pub struct MultiSiteDataset {
    sites: Vec<Vec<ImageSample>>,
    canvas: usize,
}

impl MultiSiteDataset {
    pub fn new(n_sites: usize, samples: impl IntoIterator<Item = ImageSample>) -> Result<Self> {
        let mut sites = vec![Vec::new(); n_sites];
        let mut canvas = None;
        for s in samples {
            if s.site_id >= n_sites {
                return Err(HarmonError::invalid_data(format!(
                    "sample site {} outside 0..{n_sites}",
                    s.site_id
                )));
            }
            match canvas {
                None => canvas = Some(s.canvas),
                Some(c) if c != s.canvas => {
                    return Err(HarmonError::invalid_data("samples with mixed canvas sizes"))
                }
                _ => {}
            }
            sites[s.site_id].push(s);
        }
        Ok(Self { sites, canvas: canvas.unwrap_or(0) })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn canvas(&self) -> usize {
        self.canvas
    }

    pub fn site(&self, site: usize) -> &[ImageSample] {
        &self.sites[site]
    }

    pub fn len(&self) -> usize {
        self.sites.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageSample> {
        self.sites.iter().flatten()
    }

    /// Every configured site must have at least one sample.
    pub fn require_all_sites(&self) -> Result<()> {
        match self.sites.iter().position(Vec::is_empty) {
            Some(i) => Err(HarmonError::invalid_config(format!("dataset has no samples for site {i}"))),
            None => Ok(()),
        }
    }

    /// Draw `batch` samples: site uniformly, then a sample uniformly within it.
    /// The sequence depends only on the RNG state.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&ImageSample> {
        let occupied: Vec<usize> = (0..self.sites.len()).filter(|&i| !self.sites[i].is_empty()).collect();
        (0..batch)
            .map(|_| {
                let site = occupied[rng.random_range(0..occupied.len())];
                let list = &self.sites[site];
                &list[rng.random_range(0..list.len())]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(site: usize, canvas: usize, tag: f32) -> ImageSample {
        ImageSample::new(vec![tag; 3 * canvas * canvas], canvas, site).unwrap()
    }

    #[test]
    fn groups_by_site_and_validates() {
        let d = MultiSiteDataset::new(3, [sample(2, 4, 0.1), sample(0, 4, 0.2), sample(2, 4, 0.3)]).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.site(2).len(), 2);
        assert_eq!(d.canvas(), 4);
        assert!(d.require_all_sites().is_err());
        assert!(MultiSiteDataset::new(2, [sample(2, 4, 0.0)]).is_err());
        assert!(MultiSiteDataset::new(3, [sample(0, 4, 0.0), sample(1, 8, 0.0)]).is_err());
    }

    #[test]
    fn batches_follow_the_rng() {
        let d = MultiSiteDataset::new(2, (0..10).map(|k| sample(k % 2, 4, k as f32 / 10.0))).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            d.sample_batch(16, &mut rng).iter().map(|s| s.pixels[0]).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        let empty_site = MultiSiteDataset::new(3, [sample(1, 4, 0.5)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(empty_site.sample_batch(4, &mut rng).iter().all(|s| s.site_id == 1));
    }
}
