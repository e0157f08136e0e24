//! Sequence smoothness and plausibility metrics over a frozen feature space.
//!
//! The embedder is a fixed random projection of pooled occupancy and color
//! statistics, so values are only comparable with each other, never with
//! numbers obtained from learned perceptual features.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ColoredVoxelGrid;

pub const FEATURE_DIM: usize = 64;
pub const EMBEDDER_SEED: u64 = 0x5eed_fea7;

/// Pooling scales in blocks per axis.
const SCALES: [usize; 3] = [1, 2, 4];
const STATS: usize = 4;

fn stat_dim() -> usize {
    SCALES.iter().map(|s| s * s * s).sum::<usize>() * STATS
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() != FEATURE_DIM {
            return Err(Error::Shape {
                what: "feature vector",
                expected: FEATURE_DIM,
                found: v.len(),
            });
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// The frozen projection from pooled statistics to features.
#[derive(Clone, Debug)]
pub struct Embedder {
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Default for Embedder {
    fn default() -> Self {
        Self::new(EMBEDDER_SEED)
    }
}

impl Embedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = stat_dim();
        let scale = 1.0 / (n as f64).sqrt();
        let w = (0..n * FEATURE_DIM)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        let b = (0..FEATURE_DIM)
            .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        Self { w, b }
    }

    /// Per block at every scale: occupied fraction and occupancy-weighted
    /// mean RGB, blocks in lexicographic order.
    pub fn statistics(grid: &ColoredVoxelGrid) -> Vec<f64> {
        let g = usize::from(grid.structure.resolution());
        let mut out = Vec::with_capacity(stat_dim());
        for s in SCALES {
            let mut acc = vec![[0.0f64; STATS]; s * s * s];
            for (v, rgb) in grid.structure.voxels().iter().zip(&grid.colors) {
                let b = v.map(|c| usize::from(c) * s / g);
                let a = &mut acc[(b[0] * s + b[1]) * s + b[2]];
                a[0] += 1.0;
                for c in 0..3 {
                    a[1 + c] += rgb[c];
                }
            }
            // Blocks hold `g³ / s³` cells, up to rounding when s does not divide g.
            let cells = (g * g * g) as f64 / (s * s * s) as f64;
            for a in acc {
                out.extend(a.iter().map(|x| x / cells));
            }
        }
        out
    }

    pub fn embed(&self, grid: &ColoredVoxelGrid) -> FeatureVector {
        let stats = Self::statistics(grid);
        let mut f = self.b.clone();
        for (i, &x) in stats.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.w[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
            for (o, w) in f.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        FeatureVector(f)
    }
}

/// Embeds a grid with the default frozen embedder.
pub fn feature_embed(grid: &ColoredVoxelGrid) -> FeatureVector {
    Embedder::default().embed(grid)
}

/// Euclidean distances between consecutive features.
pub fn adjacent_distances(features: &[FeatureVector]) -> Result<Vec<f64>> {
    if features.len() < 2 {
        return Err(Error::invalid("need at least two frames"));
    }
    Ok(features.windows(2).map(|w| w[0].distance(&w[1])).collect())
}

/// Mean adjacent distance.
pub fn path_length(gaps: &[f64]) -> Result<f64> {
    if gaps.is_empty() {
        return Err(Error::invalid("need at least two frames"));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Population variance of the adjacent distances.
pub fn distance_variance(gaps: &[f64]) -> Result<f64> {
    if gaps.len() < 2 {
        return Err(Error::invalid("need at least three frames"));
    }
    let mean = path_length(gaps)?;
    Ok(gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64)
}

pub fn perceptual_path_length(frames: &[ColoredVoxelGrid]) -> Result<f64> {
    let e = Embedder::default();
    let f: Vec<_> = frames.iter().map(|g| e.embed(g)).collect();
    path_length(&adjacent_distances(&f)?)
}

pub fn perceptual_distance_variance(frames: &[ColoredVoxelGrid]) -> Result<f64> {
    if frames.len() < 3 {
        return Err(Error::invalid("need at least three frames"));
    }
    let e = Embedder::default();
    let f: Vec<_> = frames.iter().map(|g| e.embed(g)).collect();
    distance_variance(&adjacent_distances(&f)?)
}

fn moments(set: &[FeatureVector]) -> (Vec<f64>, Vec<f64>) {
    let n = set.len() as f64;
    let mut mean = vec![0.0; FEATURE_DIM];
    for f in set {
        for (m, x) in mean.iter_mut().zip(&f.0) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; FEATURE_DIM];
    for f in set {
        for ((v, x), m) in var.iter_mut().zip(&f.0).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n - 1.0);
    (mean, var)
}

/// Fréchet distance between diagonal Gaussians fitted to the two sets
/// (unbiased per-dimension variances).
pub fn frechet_feature_distance(a: &[FeatureVector], b: &[FeatureVector]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "each feature set needs at least two members",
        ));
    }
    let (ma, va) = moments(a);
    let (mb, vb) = moments(b);
    let mut d = 0.0;
    for i in 0..FEATURE_DIM {
        d += (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2);
    }
    Ok(d)
}

/// Contents of the metrics JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ppl: f64,
    pub pdv: f64,
    pub ffd: Option<f64>,
    pub n_frames: usize,
}

/// Metrics of a sequence, with FFD against `reference` when given.
pub fn evaluate(
    frames: &[ColoredVoxelGrid],
    reference: Option<&[ColoredVoxelGrid]>,
) -> Result<(MetricsReport, Vec<f64>)> {
    if frames.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least three frames, got {}",
            frames.len()
        )));
    }
    let e = Embedder::default();
    let f: Vec<_> = frames.iter().map(|g| e.embed(g)).collect();
    let gaps = adjacent_distances(&f)?;
    let ffd = match reference {
        Some(r) => {
            let rf: Vec<_> = r.iter().map(|g| e.embed(g)).collect();
            Some(frechet_feature_distance(&f, &rf)?)
        }
        None => None,
    };
    let report = MetricsReport {
        ppl: path_length(&gaps)?,
        pdv: distance_variance(&gaps)?,
        ffd,
        n_frames: frames.len(),
    };
    Ok((report, gaps))
}

/// Per-gap CSV: `from,to,distance`.
pub fn gaps_csv(gaps: &[f64]) -> String {
    let mut out = String::from("from,to,distance\n");
    for (i, d) in gaps.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", i, i + 1, d);
    }
    out
}
