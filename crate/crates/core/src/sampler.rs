//! Pixel selection for training batches.
//!
//! The global stage draws pixels uniformly over every training image. The
//! focal stage mixes draws proportional to a per-pixel error map with a
//! uniform complement, both restricted to the block's own images.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::geometry::Camera;
use crate::image::Image;
use crate::renderer::{render_image, Field, RenderSettings};

/// Walker/Vose alias table for O(1) categorical draws.
#[derive(Clone, Debug)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    /// `None` when no weight is positive. Negative and non-finite weights
    /// count as zero.
    pub fn new(weights: &[f64]) -> Option<Self> {
        let clean: Vec<f64> = weights.iter().map(|&w| if w.is_finite() && w > 0.0 { w } else { 0.0 }).collect();
        let total: f64 = clean.iter().sum();
        if total <= 0.0 || clean.is_empty() {
            return None;
        }
        let n = clean.len();
        let mut prob: Vec<f64> = clean.iter().map(|w| w * n as f64 / total).collect();
        let mut alias = vec![0u32; n];
        let mut small = Vec::new();
        let mut large = Vec::new();
        for (i, &p) in prob.iter().enumerate() {
            if p < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l as u32;
            prob[l] -= 1.0 - prob[s];
            if prob[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
        }
        Some(Self { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let i = rng.gen_range(0..self.prob.len());
        if rng.gen::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }
}

/// Error map of one training image.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub image_id: usize,
    /// Per-pixel error at render resolution.
    pub low: Image,
    /// `low` upscaled to the training image's resolution.
    pub full: Image,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorMapSet {
    pub maps: Vec<ErrorMap>,
}

impl ErrorMapSet {
    pub fn get(&self, image_id: usize) -> Option<&ErrorMap> {
        self.maps.iter().find(|m| m.image_id == image_id)
    }
}

/// Per-pixel channel-mean absolute difference.
pub fn mae_map(render: &Image, truth: &Image) -> Result<Image> {
    if !render.same_shape(truth) {
        return Err(Error::DimensionMismatch("error map inputs differ in shape".into()));
    }
    let c = render.channels;
    let data = render
        .data
        .chunks_exact(c)
        .zip(truth.data.chunks_exact(c))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>() / c as f32)
        .collect();
    Image::from_data(render.width, render.height, 1, data)
}

/// Error map from an already rendered low-resolution image.
pub fn error_map_from_render(image_id: usize, render: &Image, truth: &Image, downsample: u32) -> Result<ErrorMap> {
    let low = mae_map(render, &truth.downsample(downsample as usize)?)?;
    let full = low.upscale_nearest(truth.width, truth.height);
    Ok(ErrorMap { image_id, low, full })
}

/// Renders every listed image at `1/downsample` resolution and compares it
/// with the box-downsampled ground truth.
pub fn compute_error_maps(
    field: &Field,
    cameras: &[Camera],
    images: &[Image],
    ids: &[usize],
    downsample: u32,
    settings: &RenderSettings,
    exec: Execution,
) -> Result<ErrorMapSet> {
    let mut maps = Vec::with_capacity(ids.len());
    for &id in ids {
        let (cam, truth) = match (cameras.get(id), images.get(id)) {
            (Some(c), Some(i)) => (c, i),
            _ => return Err(invalid(format!("no training image {id}"))),
        };
        let (render, _) = render_image(field, cam, downsample, settings, exec)?;
        maps.push(error_map_from_render(id, &render, truth, downsample)?);
    }
    Ok(ErrorMapSet { maps })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Weighted,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub image: usize,
    pub x: u32,
    pub y: u32,
    pub origin: Origin,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelBatch {
    pub entries: Vec<Pixel>,
}

impl PixelBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.entries.iter().filter(|p| p.origin == origin).count()
    }
}

/// Candidate pixels of a set of images, with an optional error-weighted
/// distribution over them.
#[derive(Clone, Debug)]
pub struct PixelSampler {
    ids: Vec<usize>,
    widths: Vec<u32>,
    /// Prefix sums of pixel counts, one entry per image plus the total.
    starts: Vec<usize>,
    weighted: Option<AliasTable>,
}

impl PixelSampler {
    /// Uniform sampler over images `ids` with sizes `dims` (`(width, height)`).
    pub fn uniform(ids: &[usize], dims: &[(u32, u32)]) -> Result<Self> {
        if ids.len() != dims.len() || ids.is_empty() {
            return Err(invalid("sampler needs one size per image and at least one image"));
        }
        let mut starts = vec![0];
        for &(w, h) in dims {
            if w == 0 || h == 0 {
                return Err(invalid("empty image in sampler"));
            }
            starts.push(starts.last().unwrap() + (w * h) as usize);
        }
        Ok(Self {
            ids: ids.to_vec(),
            widths: dims.iter().map(|d| d.0).collect(),
            starts,
            weighted: None,
        })
    }

    /// Sampler whose weighted draws follow the full-resolution error maps
    /// of `ids`, normalised over all their pixels.
    pub fn from_errors(errs: &ErrorMapSet, ids: &[usize]) -> Result<Self> {
        let mut dims = Vec::with_capacity(ids.len());
        let mut weights = Vec::new();
        for &id in ids {
            let m = errs.get(id).ok_or_else(|| invalid(format!("no error map for image {id}")))?;
            dims.push((m.full.width as u32, m.full.height as u32));
            weights.extend(m.full.data.iter().map(|&v| v as f64));
        }
        let mut s = Self::uniform(ids, &dims)?;
        s.weighted = AliasTable::new(&weights);
        if s.weighted.is_none() {
            log::warn!("error maps carry no mass; weighted sampling falls back to uniform");
        }
        Ok(s)
    }

    pub fn total_pixels(&self) -> usize {
        *self.starts.last().unwrap()
    }

    pub fn has_weights(&self) -> bool {
        self.weighted.is_some()
    }

    fn pixel_at(&self, flat: usize, origin: Origin) -> Pixel {
        let k = self.starts.partition_point(|&s| s <= flat) - 1;
        let local = flat - self.starts[k];
        let w = self.widths[k] as usize;
        Pixel {
            image: self.ids[k],
            x: (local % w) as u32,
            y: (local / w) as u32,
            origin,
        }
    }

    /// Flat index of a pixel within this sampler's candidate set.
    pub fn flat_index(&self, p: &Pixel) -> Option<usize> {
        let k = self.ids.iter().position(|&i| i == p.image)?;
        Some(self.starts[k] + p.y as usize * self.widths[k] as usize + p.x as usize)
    }

    pub fn sample_uniform(&self, n: usize, rng: &mut impl Rng) -> Vec<Pixel> {
        (0..n)
            .map(|_| self.pixel_at(rng.gen_range(0..self.total_pixels()), Origin::Uniform))
            .collect()
    }

    pub fn sample_weighted(&self, n: usize, rng: &mut impl Rng) -> Vec<Pixel> {
        match &self.weighted {
            Some(table) => (0..n).map(|_| self.pixel_at(table.sample(rng), Origin::Weighted)).collect(),
            None => self.sample_uniform(n, rng),
        }
    }

    /// `round(fraction · batch)` weighted draws followed by uniform ones.
    pub fn sample_hybrid(&self, batch: usize, fraction: f64, rng: &mut impl Rng) -> Result<PixelBatch> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(invalid(format!("weighted fraction {fraction} outside [0, 1]")));
        }
        let n_weighted = weighted_count(batch, fraction);
        let mut entries = self.sample_weighted(n_weighted, rng);
        entries.extend(self.sample_uniform(batch - n_weighted, rng));
        Ok(PixelBatch { entries })
    }
}

pub fn weighted_count(batch: usize, fraction: f64) -> usize {
    ((fraction * batch as f64).round() as usize).min(batch)
}

pub fn sample_uniform(ids: &[usize], dims: &[(u32, u32)], n: usize, rng: &mut impl Rng) -> Result<PixelBatch> {
    if n == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    Ok(PixelBatch {
        entries: PixelSampler::uniform(ids, dims)?.sample_uniform(n, rng),
    })
}

pub fn sample_weighted(errs: &ErrorMapSet, ids: &[usize], n: usize, rng: &mut impl Rng) -> Result<PixelBatch> {
    if n == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    Ok(PixelBatch {
        entries: PixelSampler::from_errors(errs, ids)?.sample_weighted(n, rng),
    })
}

pub fn sample_hybrid(
    errs: &ErrorMapSet,
    ids: &[usize],
    batch: usize,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<PixelBatch> {
    PixelSampler::from_errors(errs, ids)?.sample_hybrid(batch, fraction, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_set(maps: Vec<(usize, Image)>) -> ErrorMapSet {
        ErrorMapSet {
            maps: maps
                .into_iter()
                .map(|(id, img)| ErrorMap {
                    image_id: id,
                    low: img.clone(),
                    full: img,
                })
                .collect(),
        }
    }

    /// Upper 1% point of chi-square via the Wilson-Hilferty approximation.
    fn chi2_critical_99(df: f64) -> f64 {
        let z = 2.326_347_874;
        let a = 2.0 / (9.0 * df);
        df * (1.0 - a + z * a.sqrt()).powi(3)
    }

    #[test]
    fn flat_map_is_uniform_by_chi_square() {
        let errs = map_set(vec![(0, Image::filled(10, 10, &[0.5]))]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_weighted(&errs, &[0], 100_000, &mut rng).unwrap();
        let mut counts = [0f64; 100];
        for p in &batch.entries {
            counts[(p.y * 10 + p.x) as usize] += 1.0;
        }
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < chi2_critical_99(99.0), "chi2 {chi2}");
    }

    #[test]
    fn point_mass_always_drawn() {
        let mut img = Image::new(4, 4, 1);
        *img.pixel_mut(2, 3).first_mut().unwrap() = 0.7;
        let errs = map_set(vec![(5, img)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in sample_weighted(&errs, &[5], 1000, &mut rng).unwrap().entries {
            assert_eq!((p.image, p.x, p.y), (5, 2, 3));
        }
    }

    #[test]
    fn two_pixel_frequencies() {
        let errs = map_set(vec![(0, Image::from_data(2, 1, 1, vec![1.0, 3.0]).unwrap())]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let hits = sample_weighted(&errs, &[0], n, &mut rng)
            .unwrap()
            .entries
            .iter()
            .filter(|p| p.x == 1)
            .count() as f64;
        let sd = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((hits - 0.75 * n as f64).abs() < 3.0 * sd);
    }

    #[test]
    fn normalisation_spans_all_block_images() {
        // one pixel of weight 1 in image 0, one of weight 1 in image 1
        let mut a = Image::new(3, 3, 1);
        let mut b = Image::new(3, 3, 1);
        a.data[4] = 1.0;
        b.data[0] = 1.0;
        let errs = map_set(vec![(0, a), (1, b)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let first = sample_weighted(&errs, &[0, 1], n, &mut rng)
            .unwrap()
            .entries
            .iter()
            .filter(|p| p.image == 0)
            .count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((first - n as f64 / 2.0).abs() < 3.0 * sd);
    }

    #[test]
    fn zero_mass_falls_back_to_uniform() {
        let errs = map_set(vec![(0, Image::new(4, 4, 1))]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = sample_weighted(&errs, &[0], 64, &mut rng).unwrap();
        assert_eq!(b.len(), 64);
        assert!(b.entries.iter().all(|p| p.origin == Origin::Uniform));
    }

    #[test]
    fn hybrid_counts_are_exact() {
        let errs = map_set(vec![(0, Image::filled(16, 16, &[0.2]))]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = sample_hybrid(&errs, &[0], 8192, 0.3, &mut rng).unwrap();
        assert_eq!(b.count(Origin::Weighted), 2458);
        assert_eq!(b.count(Origin::Uniform), 5734);
        let b = sample_hybrid(&errs, &[0], 100, 0.0, &mut rng).unwrap();
        assert_eq!(b.count(Origin::Uniform), 100);
        let b = sample_hybrid(&errs, &[0], 100, 1.0, &mut rng).unwrap();
        assert_eq!(b.count(Origin::Weighted), 100);
        assert!(sample_hybrid(&errs, &[0], 100, 1.5, &mut rng).is_err());
    }

    #[test]
    fn uniform_single_pixel_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = sample_uniform(&[3], &[(1, 1)], 50, &mut rng).unwrap();
        assert!(b.entries.iter().all(|p| (p.image, p.x, p.y) == (3, 0, 0)));
    }

    #[test]
    fn uniform_splits_equal_images_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let b = sample_uniform(&[0, 1], &[(8, 8), (8, 8)], n, &mut rng).unwrap();
        let zeros = b.entries.iter().filter(|p| p.image == 0).count() as f64;
        assert!((zeros - n as f64 / 2.0).abs() < 3.0 * (n as f64 * 0.25).sqrt());
    }

    #[test]
    fn sampling_is_reproducible_and_in_bounds() {
        let errs = map_set(vec![(0, Image::filled(7, 5, &[1.0])), (2, Image::filled(3, 9, &[2.0]))]);
        let a = sample_hybrid(&errs, &[0, 2], 500, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_hybrid(&errs, &[0, 2], 500, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for p in &a.entries {
            let (w, h) = if p.image == 0 { (7, 5) } else { (3, 9) };
            assert!(p.x < w && p.y < h);
        }
    }

    #[test]
    fn error_map_identities() {
        let truth = Image::filled(8, 8, &[1.0, 1.0, 1.0]);
        let same = error_map_from_render(0, &truth.downsample(4).unwrap(), &truth, 4).unwrap();
        assert!(same.full.data.iter().all(|&v| v == 0.0));
        let black = Image::new(2, 2, 3);
        let worst = error_map_from_render(0, &black, &truth, 4).unwrap();
        assert_eq!(worst.full.width, 8);
        assert!(worst.full.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mae_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Image::from_data(5, 4, 3, (0..60).map(|_| rng.gen()).collect()).unwrap();
        let b = Image::from_data(5, 4, 3, (0..60).map(|_| rng.gen()).collect()).unwrap();
        let m = mae_map(&a, &b).unwrap();
        for p in 0..20 {
            let want = ((a.data[3 * p] - b.data[3 * p]).abs()
                + (a.data[3 * p + 1] - b.data[3 * p + 1]).abs()
                + (a.data[3 * p + 2] - b.data[3 * p + 2]).abs())
                / 3.0;
            assert!((m.data[p] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn alias_table_exact_probabilities() {
        let w = [0.5, 0.0, 2.0, 1.5];
        let t = AliasTable::new(&w).unwrap();
        // probability of each outcome implied by the table
        let n = w.len() as f64;
        let mut p = [0.0; 4];
        for i in 0..4 {
            p[i] += t.prob[i] / n;
            p[t.alias[i] as usize] += (1.0 - t.prob[i]) / n;
        }
        for i in 0..4 {
            assert!((p[i] - w[i] / 4.0).abs() < 1e-12);
        }
        assert!(AliasTable::new(&[0.0, 0.0]).is_none());
    }
}
