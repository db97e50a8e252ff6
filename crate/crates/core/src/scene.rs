//! Seeded synthetic segmentation scenes.
//!
//! Labels come from a Voronoi partition of the image into `K` regions. Each
//! pixel's features are its category's codebook vector plus Gaussian noise,
//! followed by one channel holding a noisy copy of the boundary map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::{self, BinaryMap, LabelMap};
use crate::tensor::{FeatureMap, Tensor};

pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub categories: usize,
    /// Codebook width; the feature map has one extra boundary channel.
    pub feature_dim: usize,
    pub noise: f64,
    pub boundary_radius: usize,
    pub min_site_distance: f64,
    pub codebook_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            categories: 4,
            feature_dim: 4,
            noise: 0.5,
            boundary_radius: metrics::DEFAULT_BOUNDARY_RADIUS,
            min_site_distance: 8.0,
            codebook_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn in_channels(&self) -> usize {
        self.feature_dim + 1
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Invalid("scenes need at least 2 categories".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Invalid(format!(
                "scenes must be at least 8×8, got {}×{}",
                self.height, self.width
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Invalid("feature_dim must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Invalid(format!(
                "noise must be ≥ 0, got {}",
                self.noise
            )));
        }
        if self.boundary_radius < 1 {
            return Err(Error::Invalid("boundary_radius must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub features: FeatureMap,
    pub labels: LabelMap,
    pub boundary: BinaryMap,
}

/// Per-category mean vectors, pairwise at least 1 apart.
pub fn codebook(cfg: &SceneConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.codebook_seed);
    for _ in 0..MAX_ATTEMPTS {
        let book: Vec<Vec<f64>> = (0..cfg.categories)
            .map(|_| {
                (0..cfg.feature_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            })
            .collect();
        let separated = book.iter().enumerate().all(|(a, u)| {
            book[a + 1..]
                .iter()
                .all(|v| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() >= 1.0)
        });
        if separated {
            return Ok(book);
        }
    }
    Err(Error::Generation {
        attempts: MAX_ATTEMPTS,
    })
}

fn voronoi(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Option<Vec<usize>> {
    let sites: Vec<(f64, f64)> = (0..cfg.categories)
        .map(|_| {
            (
                rng.random::<f64>() * cfg.height as f64,
                rng.random::<f64>() * cfg.width as f64,
            )
        })
        .collect();
    let min_sq = cfg.min_site_distance * cfg.min_site_distance;
    for (a, p) in sites.iter().enumerate() {
        for q in &sites[a + 1..] {
            if (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) < min_sq {
                return None;
            }
        }
    }
    let mut labels = Vec::with_capacity(cfg.pixels());
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (k, s) in sites.iter().enumerate() {
                let d = (s.0 - y).powi(2) + (s.1 - x).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            labels.push(best.1);
        }
    }
    let mut seen = vec![false; cfg.categories];
    labels.iter().for_each(|&l| seen[l] = true);
    seen.iter().all(|&s| s).then_some(labels)
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let book = codebook(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..MAX_ATTEMPTS)
        .find_map(|_| voronoi(&mut rng, cfg))
        .ok_or(Error::Generation {
            attempts: MAX_ATTEMPTS,
        })?;
    let labels = LabelMap::new(cfg.height, cfg.width, cfg.categories, labels)?;
    let boundary = metrics::boundary_map(&labels, cfg.boundary_radius)?;

    let hw = cfg.pixels();
    let mut data = Vec::with_capacity(cfg.in_channels() * hw);
    for ch in 0..cfg.in_channels() {
        for i in 0..hw {
            let clean = if ch < cfg.feature_dim {
                book[labels.labels()[i]][ch]
            } else {
                boundary.bits()[i] as f64
            };
            let z: f64 = rng.sample(StandardNormal);
            data.push(clean + cfg.noise * z);
        }
    }
    let features = FeatureMap::new(Tensor::new(
        vec![cfg.in_channels(), cfg.height, cfg.width],
        data,
    )?)?;
    Ok(SceneSample {
        features,
        labels,
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(
            generate_scene(3, &cfg).unwrap(),
            generate_scene(3, &cfg).unwrap()
        );
        assert_ne!(
            generate_scene(3, &cfg).unwrap(),
            generate_scene(4, &cfg).unwrap()
        );
    }

    #[test]
    fn noiseless_features_are_codebook() {
        let cfg = SceneConfig {
            noise: 0.0,
            ..SceneConfig::default()
        };
        let s = generate_scene(1, &cfg).unwrap();
        let book = codebook(&cfg).unwrap();
        for i in 0..cfg.pixels() {
            let px = s.features.pixel(i);
            assert_eq!(&px[..cfg.feature_dim], &book[s.labels.labels()[i]][..]);
            assert_eq!(px[cfg.feature_dim], s.boundary.bits()[i] as f64);
        }
    }

    #[test]
    fn every_category_present() {
        let cfg = SceneConfig::default();
        let s = generate_scene(7, &cfg).unwrap();
        for k in 0..cfg.categories {
            assert!(s.labels.labels().contains(&k));
        }
        assert_eq!(s.boundary, metrics::boundary_map(&s.labels, 5).unwrap());
    }

    #[test]
    fn codebook_separated() {
        let book = codebook(&SceneConfig::default()).unwrap();
        for a in 0..book.len() {
            for b in a + 1..book.len() {
                let d: f64 = book[a]
                    .iter()
                    .zip(&book[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(d.sqrt() >= 1.0);
            }
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let cfg = SceneConfig {
            min_site_distance: 100.0,
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(0, &cfg),
            Err(Error::Generation { attempts: 100 })
        ));
    }

    #[test]
    fn rejects_small_or_single_category() {
        let small = SceneConfig {
            height: 4,
            ..SceneConfig::default()
        };
        assert!(generate_scene(0, &small).is_err());
        let one = SceneConfig {
            categories: 1,
            ..SceneConfig::default()
        };
        assert!(generate_scene(0, &one).is_err());
    }
}
