//! Dataset filtering and diversity-stratified sampling.

use crate::raster::{RasterImage, Rasterizer, RenderSpec};
use crate::svg::{lex_svg, token_length, SvgSource};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Per-channel quantization levels of the clustering histogram (4^3 = 64 bins).
const HIST_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurationError {
    #[error("asked for {k} records but only {available} are available")]
    InsufficientRecords { k: usize, available: usize },
    #[error("invalid criteria: {0}")]
    InvalidCriteria(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationCriteria {
    pub min_tokens: usize,
    /// Bits.
    pub min_entropy: f64,
    /// Quantization levels per channel for the entropy histogram.
    pub entropy_bins: usize,
    pub blank_threshold: f64,
    /// Canvas used when a record has no image of its own.
    pub render: RenderSpec,
}

impl Default for CurationCriteria {
    fn default() -> Self {
        Self {
            min_tokens: 500,
            min_entropy: 1.0,
            entropy_bins: 8,
            blank_threshold: 0.98,
            render: RenderSpec::new(256, 256),
        }
    }
}

impl CurationCriteria {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.entropy_bins < 2 {
            return Err(CurationError::InvalidCriteria(
                "entropy_bins must be at least 2".into(),
            ));
        }
        if !(self.blank_threshold > 0.0 && self.blank_threshold <= 1.0) {
            return Err(CurationError::InvalidCriteria(
                "blank_threshold must lie in (0, 1]".into(),
            ));
        }
        if !self.min_entropy.is_finite() {
            return Err(CurationError::InvalidCriteria(
                "min_entropy must be finite".into(),
            ));
        }
        self.render
            .validate()
            .map_err(|e| CurationError::InvalidCriteria(e.to_string()))
    }
}

/// Shannon entropy in bits of the color histogram with `bins` levels per channel.
pub fn color_entropy(img: &RasterImage, bins: usize) -> f64 {
    assert!(bins >= 2, "need at least two bins");
    let ch = img.channels();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for px in img.data().chunks_exact(ch) {
        let key = px.iter().fold(0, |acc, &v| {
            acc * bins + ((v * bins as f64) as usize).min(bins - 1)
        });
        *counts.entry(key).or_default() += 1;
    }
    let n = (img.width() * img.height()) as f64;
    -counts
        .values()
        .map(|&c| c as f64 / n)
        .map(|p| p * p.log2())
        .sum::<f64>()
}

/// Whether at least `threshold` of the pixels are within 2/255 of white in every channel.
pub fn is_blank(img: &RasterImage, threshold: f64) -> bool {
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "threshold must lie in (0, 1]"
    );
    let ch = img.channels();
    let white = img
        .data()
        .chunks_exact(ch)
        .filter(|px| px.iter().all(|&v| v >= 1.0 - 2.0 / 255.0))
        .count();
    white as f64 >= threshold * (img.width() * img.height()) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationRecord {
    pub id: String,
    pub svg: SvgSource,
    pub image: Option<RasterImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Broken,
    Blank,
    LowEntropy,
    TooShort,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub broken: usize,
    pub blank: usize,
    pub low_entropy: usize,
    pub too_short: usize,
}

impl FilterReport {
    fn count(&mut self, r: Rejection) {
        match r {
            Rejection::Broken => self.broken += 1,
            Rejection::Blank => self.blank += 1,
            Rejection::LowEntropy => self.low_entropy += 1,
            Rejection::TooShort => self.too_short += 1,
        }
    }

    pub fn rejected(&self) -> usize {
        self.broken + self.blank + self.low_entropy + self.too_short
    }
}

/// Checks one record; the first failing rule wins. The SVG must render even
/// when an image is supplied; the supplied image, if any, is what the blank
/// and entropy rules look at.
pub fn check_record(
    record: &CurationRecord,
    criteria: &CurationCriteria,
    rasterizer: &dyn Rasterizer,
) -> Result<(), Rejection> {
    let rendered = rasterizer
        .render(&record.svg, &criteria.render)
        .map_err(|_| Rejection::Broken)?;
    let img = record.image.as_ref().unwrap_or(&rendered);
    if is_blank(img, criteria.blank_threshold) {
        return Err(Rejection::Blank);
    }
    if color_entropy(img, criteria.entropy_bins) < criteria.min_entropy {
        return Err(Rejection::LowEntropy);
    }
    if token_length(&lex_svg(&record.svg)) < criteria.min_tokens {
        return Err(Rejection::TooShort);
    }
    Ok(())
}

/// Indices of the records that pass every rule, in input order, and per-rule rejection counts.
pub fn filter_dataset(
    records: &[CurationRecord],
    criteria: &CurationCriteria,
    rasterizer: &dyn Rasterizer,
) -> Result<(Vec<usize>, FilterReport), CurationError> {
    criteria.validate()?;
    let verdicts: Vec<Result<(), Rejection>> = records
        .par_iter()
        .map(|r| check_record(r, criteria, rasterizer))
        .collect();
    let mut report = FilterReport {
        input: records.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (i, v) in verdicts.into_iter().enumerate() {
        match v {
            Ok(()) => kept.push(i),
            Err(r) => report.count(r),
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}

/// Normalized 64-bin color histogram followed by the log aspect ratio.
pub fn cluster_features(img: &RasterImage) -> Vec<f64> {
    let rgb = img.to_rgb();
    let mut hist = vec![0.0; HIST_LEVELS.pow(3) + 1];
    let n = (rgb.width() * rgb.height()) as f64;
    for px in rgb.data().chunks_exact(3) {
        let key = px.iter().fold(0, |acc, &v| {
            acc * HIST_LEVELS + ((v * HIST_LEVELS as f64) as usize).min(HIST_LEVELS - 1)
        });
        hist[key] += 1.0 / n;
    }
    hist[HIST_LEVELS.pow(3)] = (rgb.width() as f64 / rgb.height() as f64).ln();
    hist
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding; returns a cluster label per point.
pub fn kmeans(points: &[Vec<f64>], clusters: usize, seed: u64) -> Vec<usize> {
    assert!(clusters >= 1, "need at least one cluster");
    if points.is_empty() {
        return Vec::new();
    }
    let k = clusters.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| dist2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        if total == 0.0 {
            break;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, di) in d.iter().enumerate() {
            if u < *di {
                pick = i;
                break;
            }
            u -= di;
        }
        centers.push(points[pick].clone());
    }
    let mut labels = vec![0; points.len()];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let d: Vec<f64> = centers.iter().map(|c| dist2(p, c)).collect();
                crate::metrics::argmin(&d).expect("at least one center")
            })
            .collect();
        let changed = next != labels;
        labels = next;
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == j)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Draws `k` record indices spread over `cluster_count` clusters of
/// [`cluster_features`], each cluster contributing in proportion to its size
/// (largest remainders break rounding). Returned indices are sorted.
pub fn stratified_sample(
    images: &[RasterImage],
    k: usize,
    cluster_count: usize,
    seed: u64,
) -> Result<Vec<usize>, CurationError> {
    if k > images.len() {
        return Err(CurationError::InsufficientRecords {
            k,
            available: images.len(),
        });
    }
    if cluster_count == 0 {
        return Err(CurationError::InvalidCriteria(
            "cluster_count must be positive".into(),
        ));
    }
    let feats: Vec<Vec<f64>> = images.par_iter().map(cluster_features).collect();
    let labels = kmeans(&feats, cluster_count, seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cluster_count];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let n = images.len() as f64;
    let quotas: Vec<f64> = members
        .iter()
        .map(|m| k as f64 * m.len() as f64 / n)
        .collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..cluster_count).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = k - take.iter().sum::<usize>();
    for &c in order.iter().cycle().take(cluster_count * 2) {
        if left == 0 {
            break;
        }
        if take[c] < members[c].len() {
            take[c] += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out: Vec<usize> = members
        .iter()
        .zip(&take)
        .flat_map(|(m, &t)| m.choose_multiple(&mut rng, t).copied().collect::<Vec<_>>())
        .collect();
    out.sort_unstable();
    Ok(out)
}
