//! Procedural stand-in objects: a voxel shape, its condition tokens and its
//! known pose.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::model::layout;
use crate::flow::{ConditionTokens, ModelConfig};
use crate::geometry::{rotate_yaw, squared_distance, to_point_cloud, SparseStructure, Voxel};
use crate::orientation::EulerAngles;
use crate::tensor::TokenMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Bar,
    Ell,
    Tee,
    Cross,
    Blob,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Bar,
        Family::Ell,
        Family::Tee,
        Family::Cross,
        Family::Blob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Bar => "bar",
            Family::Ell => "ell",
            Family::Tee => "tee",
            Family::Cross => "cross",
            Family::Blob => "blob",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown shape family `{s}` (expected bar, ell, tee, cross or blob)"
                ))
            })
    }
}

/// Everything that determines a procedural asset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetDescriptor {
    pub family: Family,
    pub resolution: u16,
    /// Extent of the main arm along x (diameter for `blob`), in voxels.
    pub length: u16,
    /// Arm thickness along the horizontal cross axis.
    pub width: u16,
    /// Arm thickness along z.
    pub height: u16,
    /// Counter-clockwise yaw in quarter turns.
    pub pose: u8,
    pub color_seed: u64,
}

impl AssetDescriptor {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            resolution: 16,
            length: 12,
            width: 4,
            height: 4,
            pose: 0,
            color_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.resolution;
        if self.pose > 3 {
            return Err(Error::invalid(format!(
                "pose must be 0..=3 quarter turns, got {}",
                self.pose
            )));
        }
        if self.length == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("asset sizes must be positive"));
        }
        if self.length > g || self.width > self.length || self.height > g {
            return Err(Error::invalid(format!(
                "asset {}x{}x{} does not fit a {g}^3 grid with width <= length",
                self.length, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Canonical text used for hashing; pose excluded so that a rotated asset
    /// keeps its semantic features.
    fn identity(&self) -> String {
        format!(
            "{};G={};L={};W={};H={};color={}",
            self.family, self.resolution, self.length, self.width, self.height, self.color_seed
        )
    }

    /// The asset's voxels at its pose.
    pub fn structure(&self) -> Result<SparseStructure> {
        self.validate()?;
        let g = i32::from(self.resolution);
        let (l, w, h) = (
            i32::from(self.length),
            i32::from(self.width),
            i32::from(self.height),
        );
        let lo = (g - l) / 2;
        let hi = lo + l;
        let across = (g - w) / 2..(g - w) / 2 + w;
        let up = (g - h) / 2..(g - h) / 2 + h;
        let inside = |x: i32, y: i32, z: i32| -> bool {
            let bar_x = (lo..hi).contains(&x) && across.contains(&y) && up.contains(&z);
            match self.family {
                Family::Bar => bar_x,
                Family::Cross => {
                    bar_x || (across.contains(&x) && (lo..hi).contains(&y) && up.contains(&z))
                }
                Family::Ell => {
                    let foot = (lo..hi).contains(&x) && (lo..lo + w).contains(&y);
                    let leg = (lo..lo + w).contains(&x) && (lo..lo + 2 * l / 3).contains(&y);
                    (foot || leg) && up.contains(&z)
                }
                Family::Tee => {
                    let top = (lo..hi).contains(&x) && (lo..lo + w).contains(&y);
                    let stem = across.contains(&x) && (lo..hi).contains(&y);
                    (top || stem) && up.contains(&z)
                }
                Family::Blob => {
                    let c = f64::from(g) / 2.0;
                    let d2 = [x, y, z]
                        .iter()
                        .map(|&v| (f64::from(v) + 0.5 - c).powi(2))
                        .sum::<f64>();
                    d2 <= (f64::from(l) / 2.0).powi(2)
                }
            }
        };
        let mut voxels: Vec<Voxel> = Vec::new();
        for x in 0..g {
            for y in 0..g {
                for z in 0..g {
                    if inside(x, y, z) {
                        voxels.push([x as u16, y as u16, z as u16]);
                    }
                }
            }
        }
        let base = SparseStructure::new(self.resolution, voxels)?;
        if base.is_empty() {
            return Err(Error::DegenerateStructure);
        }
        rotate_yaw(&base, self.pose)
    }

    /// Constructed pose of the asset.
    pub fn pose_angles(&self) -> EulerAngles {
        EulerAngles::new(90.0 * f64::from(self.pose), 0.0, 0.0)
    }

    /// Condition tokens: farthest-point samples of the asset's voxel centers
    /// with color and descriptor-seeded semantic features. Values are rounded
    /// to `f32` so that they survive a `.ctok` round trip unchanged.
    pub fn condition_tokens(&self, model: &ModelConfig) -> Result<ConditionTokens> {
        if model.resolution != self.resolution {
            return Err(Error::invalid(format!(
                "asset resolution {} differs from model resolution {}",
                self.resolution, model.resolution
            )));
        }
        let structure = self.structure()?;
        let cloud = to_point_cloud(&structure);
        let picks = farthest_points(&cloud.points, model.cond_tokens);

        let mut rng = ChaCha8Rng::seed_from_u64(digest_u64(self.identity().as_bytes()));
        let base_rgb: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
        let features: Vec<f64> = (0..model.cond_dim - layout::COND_FEATURES)
            .map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();

        let mut data = Vec::with_capacity(picks.len() * model.cond_dim);
        for &i in &picks {
            let p = cloud.points[i];
            let mut row = vec![0.0; model.cond_dim];
            row[..3].copy_from_slice(&p);
            row[layout::COND_NORM2] = p.iter().map(|c| c * c).sum();
            row[layout::COND_PRESENCE] = 1.0;
            for c in 0..3 {
                row[layout::COND_RGB + c] =
                    (base_rgb[c] + tint[c] * (p[2] - 0.5) * 2.0).clamp(0.0, 1.0);
            }
            row[layout::COND_FEATURES..].copy_from_slice(&features);
            data.extend(row.into_iter().map(|x| f64::from(x as f32)));
        }
        Ok(ConditionTokens::new(TokenMatrix::new(
            picks.len(),
            model.cond_dim,
            data,
        )?))
    }
}

/// `n` indices by farthest-point sampling starting from index 0; ties go to
/// the lowest index. Indices repeat cyclically when there are fewer points.
fn farthest_points(points: &[[f64; 3]], n: usize) -> Vec<usize> {
    let mut picks = vec![0];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[0]))
        .collect();
    while picks.len() < n.min(points.len()) {
        let mut best = 0;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[best] {
                best = i;
            }
        }
        picks.push(best);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[best]));
        }
    }
    let m = picks.len();
    (0..n).map(|i| picks[i % m]).collect()
}

pub(crate) fn digest_u64(bytes: &[u8]) -> u64 {
    let hash = Sha256::digest(bytes);
    u64::from_le_bytes(hash[..8].try_into().expect("sha256 has 32 bytes"))
}

/// On-disk pose record written next to an asset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub descriptor: AssetDescriptor,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl PoseRecord {
    pub fn of(desc: &AssetDescriptor) -> Self {
        let e = desc.pose_angles();
        Self {
            descriptor: desc.clone(),
            yaw: e.yaw(),
            pitch: e.pitch(),
            roll: e.roll(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orientation::{estimate_orientation, Estimator};

    #[test]
    fn bar_dimensions_and_pose() {
        let d = AssetDescriptor::new(Family::Bar);
        let s = d.structure().unwrap();
        assert_eq!(s.len(), 12 * 4 * 4);
        assert!(s.contains(&[2, 6, 6]) && s.contains(&[13, 9, 9]));
        let turned = AssetDescriptor {
            pose: 1,
            ..d.clone()
        };
        assert_eq!(turned.structure().unwrap(), rotate_yaw(&s, 1).unwrap());
    }

    #[test]
    fn cross_is_four_fold_symmetric() {
        let s = AssetDescriptor::new(Family::Cross).structure().unwrap();
        assert_eq!(rotate_yaw(&s, 1).unwrap(), s);
    }

    #[test]
    fn family_parsing() {
        assert_eq!("tee".parse::<Family>().unwrap(), Family::Tee);
        assert!("cone".parse::<Family>().is_err());
    }

    #[test]
    fn tokens_are_deterministic_and_shaped() {
        let cfg = ModelConfig::default();
        let d = AssetDescriptor::new(Family::Ell);
        let a = d.condition_tokens(&cfg).unwrap();
        assert_eq!(a, d.condition_tokens(&cfg).unwrap());
        assert_eq!((a.matrix().rows(), a.matrix().cols()), (16, 32));
        let other = AssetDescriptor { color_seed: 1, ..d };
        assert_ne!(a, other.condition_tokens(&cfg).unwrap());
        let bytes = a.to_bytes();
        assert_eq!(ConditionTokens::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn farthest_points_spread_and_repeat() {
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(farthest_points(&pts, 2), vec![0, 2]);
        assert_eq!(farthest_points(&pts, 5), vec![0, 2, 1, 0, 2]);
    }

    #[test]
    fn bar_pose_matches_pca() {
        for q in 0..4 {
            let d = AssetDescriptor {
                pose: q,
                length: 12,
                width: 2,
                ..AssetDescriptor::new(Family::Bar)
            };
            let s = d.structure().unwrap();
            let grid =
                crate::geometry::ColoredVoxelGrid::new(s.clone(), vec![[0.5; 3]; s.len()]).unwrap();
            let e = estimate_orientation(&grid, &Estimator::Pca).unwrap();
            // A mirror-symmetric bar only fixes yaw up to a half turn.
            let want = EulerAngles::new(90.0 * f64::from(q % 2), 0.0, 0.0);
            assert!(
                crate::orientation::angular_delta(&e, &want)[0] <= 2.0,
                "q={q}: {e:?}"
            );
        }
    }

    #[test]
    fn blob_is_rejected_by_pca() {
        let s = AssetDescriptor::new(Family::Blob).structure().unwrap();
        let grid =
            crate::geometry::ColoredVoxelGrid::new(s.clone(), vec![[0.5; 3]; s.len()]).unwrap();
        let err = estimate_orientation(&grid, &Estimator::Pca).unwrap_err();
        assert_eq!(err.to_string(), "orientation undefined");
    }
}
