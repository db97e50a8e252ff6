//! Ground-truth maps and the attention/map consistency statistic.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionDecomposition, Variant};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const DEFAULT_BOUNDARY_RADIUS: usize = 5;

/// Per-pixel category ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    categories: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, categories: usize, labels: Vec<usize>) -> Result<Self> {
        if categories < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 categories, got {categories}"
            )));
        }
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape("label map", &[height, width], &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= categories) {
            return Err(Error::Invalid(format!(
                "label {bad} out of range for {categories} categories"
            )));
        }
        Ok(LabelMap {
            height,
            width,
            categories,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn at(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c]
    }
}

/// A `{0, 1}` map over the pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("binary map", &[height, width], &[bits.len()]));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Invalid("binary map values must be 0 or 1".into()));
        }
        Ok(BinaryMap {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.width + c]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Fraction of pixels set.
    pub fn density(&self) -> f64 {
        self.ones() as f64 / self.bits.len() as f64
    }
}

/// `Σⱼ attnⱼ gⱼ`.
pub fn overlap(attn: &[f64], g: &BinaryMap) -> Result<f64> {
    if attn.len() != g.bits.len() {
        return Err(Error::shape("overlap", &[attn.len()], &[g.height, g.width]));
    }
    Ok(attn
        .iter()
        .zip(&g.bits)
        .map(|(a, &b)| if b == 1 { *a } else { 0.0 })
        .sum())
}

/// Pixels sharing pixel `i`'s category.
pub fn within_category_map(labels: &LabelMap, i: usize) -> Result<BinaryMap> {
    let own = *labels
        .labels
        .get(i)
        .ok_or_else(|| Error::Invalid(format!("pixel {i} outside {} pixels", labels.pixels())))?;
    let bits = labels.labels.iter().map(|&l| (l == own) as u8).collect();
    BinaryMap::new(labels.height, labels.width, bits)
}

/// Pixels with a 4-neighbour of a different category.
pub fn contour(labels: &LabelMap) -> BinaryMap {
    let (h, w) = (labels.height, labels.width);
    let mut bits = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let l = labels.at(r, c);
            let differs = (r > 0 && labels.at(r - 1, c) != l)
                || (r + 1 < h && labels.at(r + 1, c) != l)
                || (c > 0 && labels.at(r, c - 1) != l)
                || (c + 1 < w && labels.at(r, c + 1) != l);
            bits[r * w + c] = differs as u8;
        }
    }
    BinaryMap {
        height: h,
        width: w,
        bits,
    }
}

/// Pixels whose Euclidean distance to the contour is strictly below `radius`.
pub fn boundary_map(labels: &LabelMap, radius: usize) -> Result<BinaryMap> {
    if radius < 1 {
        return Err(Error::Invalid("boundary radius must be at least 1".into()));
    }
    let edge = contour(labels);
    let (h, w) = (labels.height as isize, labels.width as isize);
    let r = radius as isize;
    let mut bits = vec![0u8; edge.bits.len()];
    // stamp an open disc around every contour pixel
    for (idx, _) in edge.bits.iter().enumerate().filter(|(_, &b)| b == 1) {
        let (cr, cc) = ((idx as isize) / w, (idx as isize) % w);
        for dr in -r + 1..r {
            for dc in -r + 1..r {
                let (y, x) = (cr + dr, cc + dc);
                if dr * dr + dc * dc < r * r && (0..h).contains(&y) && (0..w).contains(&x) {
                    bits[(y * w + x) as usize] = 1;
                }
            }
        }
    }
    BinaryMap::new(labels.height, labels.width, bits)
}

/// Columns of the consistency table. `None` marks a term the variant lacks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub label: String,
    pub pair_within: Option<f64>,
    pub pair_boundary: Option<f64>,
    pub unary_boundary: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    pub samples: usize,
    /// How queries are weighted in the average.
    pub weighting: &'static str,
}

pub const CONSISTENCY_HEADER: &str = "variant,pair_within,pair_boundary,unary_boundary";

impl ConsistencyReport {
    pub fn row(&self, label: &str) -> Option<&ConsistencyRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from(CONSISTENCY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.label,
                cell(r.pair_within),
                cell(r.pair_boundary),
                cell(r.unary_boundary)
            );
        }
        out
    }
}

/// Running means of the three overlaps, uniform over queries and samples.
#[derive(Debug, Clone, Default)]
pub struct ConsistencyAccumulator {
    pair_within: f64,
    pair_boundary: f64,
    queries: usize,
    unary_boundary: f64,
    samples: usize,
}

impl ConsistencyAccumulator {
    /// Folds in one sample's pairwise rows (`[HW, HW]`, row = query) and/or
    /// unary map (`[HW]`).
    pub fn add(
        &mut self,
        pairwise: Option<&[f64]>,
        unary: Option<&[f64]>,
        labels: &LabelMap,
        boundary: &BinaryMap,
    ) -> Result<()> {
        let hw = labels.pixels();
        if let Some(p) = pairwise {
            if p.len() != hw * hw {
                return Err(Error::shape("consistency pairwise", &[hw, hw], &[p.len()]));
            }
            for i in 0..hw {
                let row = &p[i * hw..(i + 1) * hw];
                self.pair_within += overlap(row, &within_category_map(labels, i)?)?;
                self.pair_boundary += overlap(row, boundary)?;
            }
            self.queries += hw;
        }
        if let Some(u) = unary {
            self.unary_boundary += overlap(u, boundary)?;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn add_decomposition(
        &mut self,
        d: &AttentionDecomposition,
        labels: &LabelMap,
        boundary: &BinaryMap,
    ) -> Result<()> {
        let pair = d.variant.has_pairwise().then(|| d.pairwise_norm.data());
        let unary = d.variant.has_unary().then(|| d.unary_norm.data());
        self.add(pair, unary, labels, boundary)
    }

    pub fn finish(&self, label: impl Into<String>, pairwise: bool, unary: bool) -> ConsistencyRow {
        let q = self.queries.max(1) as f64;
        let s = self.samples.max(1) as f64;
        ConsistencyRow {
            label: label.into(),
            pair_within: pairwise.then_some(self.pair_within / q),
            pair_boundary: pairwise.then_some(self.pair_boundary / q),
            unary_boundary: unary.then_some(self.unary_boundary / s),
        }
    }
}

/// Anything that yields an attention decomposition for an input feature map.
pub trait AttentionSource {
    fn variant(&self) -> Variant;
    fn decompose(&self, input: &FeatureMap) -> Result<AttentionDecomposition>;
}

/// A labelled input: features, category labels and boundary map.
pub type Truth<'a> = (&'a FeatureMap, &'a LabelMap, &'a BinaryMap);

/// One consistency row per source plus a seeded `random` row.
pub fn consistency_table(
    sources: &[(String, &dyn AttentionSource)],
    truth: &[Truth<'_>],
    random_seed: u64,
) -> Result<ConsistencyReport> {
    let mut rows = Vec::with_capacity(sources.len() + 1);
    for (label, src) in sources {
        let mut acc = ConsistencyAccumulator::default();
        for (x, labels, boundary) in truth {
            acc.add_decomposition(&src.decompose(x)?, labels, boundary)?;
        }
        let v = src.variant();
        rows.push(acc.finish(label.clone(), v.has_pairwise(), v.has_unary()));
    }
    let maps: Vec<_> = truth.iter().map(|(_, l, b)| (*l, *b)).collect();
    rows.push(random_row(&maps, random_seed)?);
    Ok(ConsistencyReport {
        rows,
        samples: truth.len(),
        weighting: "uniform over queries",
    })
}

fn normalized_random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Consistency of uniform-random attention normalised to sum 1.
pub fn random_row(truth: &[(&LabelMap, &BinaryMap)], seed: u64) -> Result<ConsistencyRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = ConsistencyAccumulator::default();
    for (labels, boundary) in truth {
        let hw = labels.pixels();
        let mut pair = Vec::with_capacity(hw * hw);
        for _ in 0..hw {
            pair.extend(normalized_random(&mut rng, hw));
        }
        let unary = normalized_random(&mut rng, hw);
        acc.add(Some(&pair), Some(&unary), labels, boundary)?;
    }
    Ok(acc.finish("random", true, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_plane(n: usize, split: usize) -> LabelMap {
        let labels = (0..n * n).map(|i| (i % n >= split) as usize).collect();
        LabelMap::new(n, n, 2, labels).unwrap()
    }

    fn brute_force(labels: &LabelMap, radius: usize) -> Vec<u8> {
        let edge = contour(labels);
        let w = labels.width();
        let pts: Vec<(f64, f64)> = (0..labels.pixels())
            .filter(|&i| edge.bits()[i] == 1)
            .map(|i| ((i / w) as f64, (i % w) as f64))
            .collect();
        (0..labels.pixels())
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                let d = pts
                    .iter()
                    .map(|(a, b)| ((a - r).powi(2) + (b - c).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                (d < radius as f64) as u8
            })
            .collect()
    }

    #[test]
    fn overlap_examples() {
        let bits: Vec<u8> = (0..64).map(|i| (i < 10) as u8).collect();
        let g = BinaryMap::new(8, 8, bits).unwrap();
        let uniform = vec![1.0 / 64.0; 64];
        assert!((overlap(&uniform, &g).unwrap() - 0.15625).abs() < 1e-12);
        let mut delta = vec![0.0; 64];
        delta[3] = 1.0;
        assert_eq!(overlap(&delta, &g).unwrap(), 1.0);
        let g3 = BinaryMap::new(1, 3, vec![1, 0, 1]).unwrap();
        assert!((overlap(&[0.5, 0.3, 0.2], &g3).unwrap() - 0.7).abs() < 1e-15);
        assert!(overlap(&[0.5], &g3).is_err());
    }

    #[test]
    fn binary_map_rejects_non_bits() {
        assert!(BinaryMap::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn within_category_examples() {
        let l = LabelMap::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(within_category_map(&l, 0).unwrap().bits(), &[1, 0, 0, 1]);
        let one = LabelMap::new(2, 3, 2, vec![1; 6]).unwrap();
        assert_eq!(within_category_map(&one, 4).unwrap().ones(), 6);
        for i in 0..4 {
            assert_eq!(within_category_map(&l, i).unwrap().bits()[i], 1);
        }
        assert!(within_category_map(&l, 4).is_err());
    }

    #[test]
    fn boundary_single_category_empty() {
        let l = LabelMap::new(6, 6, 3, vec![2; 36]).unwrap();
        assert_eq!(boundary_map(&l, 5).unwrap().ones(), 0);
    }

    #[test]
    fn boundary_half_plane() {
        let l = half_plane(16, 8);
        let b = boundary_map(&l, 5).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(b.at(r, c), (3..=12).contains(&c) as u8, "({r},{c})");
            }
        }
    }

    #[test]
    fn boundary_radius_one_is_contour() {
        let l = LabelMap::new(
            4,
            4,
            3,
            vec![0, 0, 1, 1, 0, 2, 2, 1, 0, 2, 2, 1, 0, 0, 1, 1],
        )
        .unwrap();
        assert_eq!(boundary_map(&l, 1).unwrap(), contour(&l));
        assert!(boundary_map(&l, 0).is_err());
    }

    #[test]
    fn boundary_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
            let k = rng.random_range(2..=4);
            // blocky random labels so contours have structure
            let cell = rng.random_range(1..=6);
            let grid: Vec<usize> = (0..(h / cell + 1) * (w / cell + 1))
                .map(|_| rng.random_range(0..k))
                .collect();
            let labels = (0..h * w)
                .map(|i| grid[(i / w / cell) * (w / cell + 1) + (i % w) / cell])
                .collect();
            let l = LabelMap::new(h, w, k, labels).unwrap();
            for radius in [1, 2, 3, 5, 8] {
                assert_eq!(
                    boundary_map(&l, radius).unwrap().bits(),
                    brute_force(&l, radius),
                    "trial {trial} r {radius}"
                );
            }
        }
    }

    #[test]
    fn accumulator_hand_built_attention() {
        let l = LabelMap::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let e = boundary_map(&l, 1).unwrap();
        // each query attends to its own category, normalised
        let mut pair = Vec::new();
        for i in 0..4 {
            let c = within_category_map(&l, i).unwrap();
            let n = c.ones() as f64;
            pair.extend(c.bits().iter().map(|&b| b as f64 / n));
        }
        let mut acc = ConsistencyAccumulator::default();
        acc.add(Some(&pair), Some(&[0.25; 4]), &l, &e).unwrap();
        let row = acc.finish("hand", true, true);
        assert!((row.pair_within.unwrap() - 1.0).abs() < 1e-15);
        assert!((row.unary_boundary.unwrap() - e.density()).abs() < 1e-12);
    }

    #[test]
    fn random_row_matches_density() {
        let l = half_plane(16, 8);
        let e = boundary_map(&l, 2).unwrap();
        let truth: Vec<_> = (0..100).map(|_| (&l, &e)).collect();
        let row = random_row(&truth, 5).unwrap();
        let d = e.density();
        assert!((row.pair_boundary.unwrap() - d).abs() < 0.02);
        assert!((row.unary_boundary.unwrap() - d).abs() < 0.02);
        assert!((row.pair_within.unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn csv_marks_absent_terms() {
        let report = ConsistencyReport {
            rows: vec![ConsistencyRow {
                label: "UnaryNL".into(),
                pair_within: None,
                pair_boundary: None,
                unary_boundary: Some(0.5),
            }],
            samples: 1,
            weighting: "uniform over queries",
        };
        assert_eq!(
            report.to_csv(),
            format!("{CONSISTENCY_HEADER}\nUnaryNL,-,-,0.500000\n")
        );
    }
}
