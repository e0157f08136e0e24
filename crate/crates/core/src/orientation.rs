//! Orientation estimation, jump detection and yaw correction.
//!
//! Angles are Z-Y-X Euler angles in degrees: `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.

use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{
    chamfer_distance, rotate_yaw, to_point_cloud, ColoredVoxelGrid, SparseStructure,
};

/// Default jump threshold in degrees.
pub const JUMP_THRESHOLD: f64 = 45.0;

/// Minimum ratio between the two largest principal variances for the PCA
/// estimator to commit to a heading.
pub const ISOTROPY_RATIO: f64 = 1.05;

/// Wraps degrees into `(−180, 180]`.
pub fn wrap_degrees(a: f64) -> f64 {
    let r = a.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerAngles {
    yaw: f64,
    pitch: f64,
    roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self {
            yaw: wrap_degrees(yaw),
            pitch: wrap_degrees(pitch),
            roll: wrap_degrees(roll),
        }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn roll(&self) -> f64 {
        self.roll
    }

    pub fn components(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    /// Angles of a rotation matrix whose columns are the body axes.
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        Self::new(yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
    }
}

/// How to obtain the orientation of a generated object.
#[derive(Clone, Debug, PartialEq)]
pub enum Estimator {
    /// Principal axes of the voxel centers.
    Pca,
    /// The constructed pose of a procedural asset.
    GroundTruth(EulerAngles),
}

/// Flips `v` so that its components sum to a positive value; when the sum
/// vanishes, so that its largest-magnitude component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let s = v.sum();
    let flip = if s.abs() > 1e-9 {
        s < 0.0
    } else {
        let mut k = 0;
        for i in 1..3 {
            if v[i].abs() > v[k].abs() + 1e-12 {
                k = i;
            }
        }
        v[k] < 0.0
    };
    if flip {
        -v
    } else {
        v
    }
}

fn pca_orientation(grid: &ColoredVoxelGrid) -> Result<EulerAngles> {
    let cloud = to_point_cloud(&grid.structure);
    if cloud.points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let n = cloud.points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in &cloud.points {
        mean += Vector3::from(*p);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in &cloud.points {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda = order.map(|i| eig.eigenvalues[i].max(0.0));
    if lambda[1] > 0.0 && lambda[0] / lambda[1] < ISOTROPY_RATIO || lambda[0] == 0.0 {
        return Err(Error::OrientationUndefined);
    }
    let e1 = canonical_sign(eig.eigenvectors.column(order[0]).into_owned());
    // With a round cross-section the second axis is arbitrary; take the
    // horizontal perpendicular so that roll reads as zero.
    let e2 = if lambda[2] > 0.0 && lambda[1] / lambda[2] < ISOTROPY_RATIO || lambda[1] == 0.0 {
        let h = Vector3::z().cross(&e1);
        if h.norm() < 1e-9 {
            Vector3::y()
        } else {
            h.normalize()
        }
    } else {
        canonical_sign(eig.eigenvectors.column(order[1]).into_owned())
    };
    let e3 = e1.cross(&e2);
    Ok(EulerAngles::from_matrix(&Matrix3::from_columns(&[
        e1, e2, e3,
    ])))
}

pub fn estimate_orientation(grid: &ColoredVoxelGrid, est: &Estimator) -> Result<EulerAngles> {
    if grid.structure.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    match est {
        Estimator::Pca => pca_orientation(grid),
        Estimator::GroundTruth(e) => Ok(*e),
    }
}

/// Per-component absolute wrapped difference, each in `[0, 180]`.
pub fn angular_delta(a: &EulerAngles, b: &EulerAngles) -> [f64; 3] {
    let (x, y) = (a.components(), b.components());
    std::array::from_fn(|i| wrap_degrees(y[i] - x[i]).abs())
}

/// Frames `n ≥ 1` whose change from frame `n − 1` exceeds `threshold` in any
/// component.
pub fn detect_jumps(angles: &[EulerAngles], threshold: f64) -> Result<Vec<usize>> {
    if angles.len() < 2 {
        return Err(Error::invalid("jump detection needs at least two frames"));
    }
    Ok((1..angles.len())
        .filter(|&n| {
            angular_delta(&angles[n - 1], &angles[n])
                .iter()
                .any(|&d| d > threshold)
        })
        .collect())
}

/// Picks the yaw quarter turn of `current` closest (Chamfer) to `previous`.
/// Ties resolve to the smaller turn count, so an unrotated candidate wins
/// whenever it is among the best.
pub fn correct_orientation(
    current: &SparseStructure,
    previous: &SparseStructure,
) -> Result<(SparseStructure, u8)> {
    if current.is_empty() || previous.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let reference = to_point_cloud(previous);
    let mut best: Option<(f64, u8, SparseStructure)> = None;
    for q in 0..4u8 {
        let cand = rotate_yaw(current, q)?;
        let cd = chamfer_distance(&to_point_cloud(&cand), &reference)?;
        if best.as_ref().is_none_or(|(b, _, _)| cd < *b) {
            best = Some((cd, q, cand));
        }
    }
    let (_, q, s) = best.expect("four candidates evaluated");
    Ok((s, q))
}

/// One histogram bin of the statistics report.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsRow {
    pub kind: &'static str,
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationStats {
    pub rows: Vec<StatsRow>,
    pub jumps: usize,
}

pub const ALPHA_BINS: usize = 10;
pub const ANGLE_BINS: usize = 12;

impl OrientationStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,bin_low,bin_high,count\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.kind, r.low, r.high, r.count);
        }
        out
    }

    pub fn count(&self, kind: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.count)
            .sum()
    }
}

/// Histograms over morph sequences of `(α, angles)` per frame:
///
/// - `alpha_at_jump`: α of each jump frame, 10 bins `[k/10, (k+1)/10)` with
///   the last bin closed;
/// - `yaw_jump`: signed yaw change at each jump taken modulo 360, bins
///   `[45, 135)`, `[135, 225)`, `[225, 315)` around 90, 180 and 270;
/// - `yaw`, `pitch`, `roll`: all frames' angles in 12 bins of 30° over
///   `(−180, 180]`, each bin `(low, high]`.
pub fn orientation_stats(
    sequences: &[Vec<(f64, EulerAngles)>],
    threshold: f64,
) -> Result<OrientationStats> {
    if sequences.is_empty() {
        return Err(Error::invalid("no sequences to analyze"));
    }
    let mut alpha = [0usize; ALPHA_BINS];
    let mut yaw_jump = [0usize; 3];
    let mut overall = [[0usize; ANGLE_BINS]; 3];
    let mut jumps = 0;
    for seq in sequences {
        let angles: Vec<EulerAngles> = seq.iter().map(|(_, e)| *e).collect();
        for n in detect_jumps(&angles, threshold)? {
            jumps += 1;
            let a = seq[n].0.clamp(0.0, 1.0);
            alpha[((a * ALPHA_BINS as f64) as usize).min(ALPHA_BINS - 1)] += 1;
            let d = (angles[n].yaw() - angles[n - 1].yaw()).rem_euclid(360.0);
            if (45.0..315.0).contains(&d) {
                yaw_jump[((d - 45.0) / 90.0) as usize] += 1;
            }
        }
        for e in &angles {
            for (hist, v) in overall.iter_mut().zip(e.components()) {
                let bin = ((v + 180.0) / 30.0).ceil() as usize;
                hist[bin.clamp(1, ANGLE_BINS) - 1] += 1;
            }
        }
    }

    let mut rows = Vec::new();
    for (k, &count) in alpha.iter().enumerate() {
        rows.push(StatsRow {
            kind: "alpha_at_jump",
            low: k as f64 / ALPHA_BINS as f64,
            high: (k + 1) as f64 / ALPHA_BINS as f64,
            count,
        });
    }
    for (k, &count) in yaw_jump.iter().enumerate() {
        let center = 90.0 * (k + 1) as f64;
        rows.push(StatsRow {
            kind: "yaw_jump",
            low: center - 45.0,
            high: center + 45.0,
            count,
        });
    }
    for (kind, hist) in ["yaw", "pitch", "roll"].into_iter().zip(&overall) {
        for (k, &count) in hist.iter().enumerate() {
            rows.push(StatsRow {
                kind,
                low: -180.0 + 30.0 * k as f64,
                high: -150.0 + 30.0 * k as f64,
                count,
            });
        }
    }
    Ok(OrientationStats { rows, jumps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(s: SparseStructure) -> ColoredVoxelGrid {
        let n = s.len();
        ColoredVoxelGrid::new(s, vec![[0.5; 3]; n]).unwrap()
    }

    fn bar() -> SparseStructure {
        let mut v = Vec::new();
        for x in 2..14 {
            for y in 7..9 {
                v.push([x, y, 7]);
            }
        }
        SparseStructure::new(16, v).unwrap()
    }

    #[test]
    fn wrapping() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(350.0), -10.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
    }

    #[test]
    fn delta_examples() {
        let z = EulerAngles::new(0.0, 0.0, 0.0);
        assert_eq!(angular_delta(&z, &z), [0.0; 3]);
        let a = EulerAngles::new(350.0, 0.0, 0.0);
        let b = EulerAngles::new(10.0, 0.0, 0.0);
        assert!((angular_delta(&a, &b)[0] - 20.0).abs() < 1e-12);
        assert_eq!(
            angular_delta(&z, &EulerAngles::new(180.0, 0.0, 0.0))[0],
            180.0
        );
    }

    #[test]
    fn pca_bar_headings() {
        let e = estimate_orientation(&grid(bar()), &Estimator::Pca).unwrap();
        assert!(e.yaw().abs() <= 2.0, "{e:?}");
        let e =
            estimate_orientation(&grid(rotate_yaw(&bar(), 1).unwrap()), &Estimator::Pca).unwrap();
        assert!((e.yaw() - 90.0).abs() <= 2.0, "{e:?}");
    }

    #[test]
    fn cube_is_isotropic() {
        let mut v = Vec::new();
        for x in 4..8 {
            for y in 4..8 {
                for z in 4..8 {
                    v.push([x, y, z]);
                }
            }
        }
        let err =
            estimate_orientation(&grid(SparseStructure::new(16, v).unwrap()), &Estimator::Pca)
                .unwrap_err();
        assert_eq!(err.to_string(), "orientation undefined");
    }

    #[test]
    fn ground_truth_estimator_returns_pose() {
        let pose = EulerAngles::new(90.0, 0.0, 0.0);
        assert_eq!(
            estimate_orientation(&grid(bar()), &Estimator::GroundTruth(pose)).unwrap(),
            pose
        );
    }

    #[test]
    fn jumps() {
        let flat = vec![EulerAngles::new(10.0, 0.0, 0.0); 5];
        assert!(detect_jumps(&flat, JUMP_THRESHOLD).unwrap().is_empty());
        let mut seq = flat.clone();
        for e in &mut seq[3..] {
            *e = EulerAngles::new(100.0, 0.0, 0.0);
        }
        assert_eq!(detect_jumps(&seq, JUMP_THRESHOLD).unwrap(), vec![3]);
        let mut small = flat;
        small[2] = EulerAngles::new(40.0, 0.0, 0.0);
        assert!(detect_jumps(&small, JUMP_THRESHOLD).unwrap().is_empty());
        assert!(detect_jumps(&small[..1], JUMP_THRESHOLD).is_err());
    }

    fn ell() -> SparseStructure {
        let mut v = Vec::new();
        for x in 2..12 {
            v.push([x, 3, 5]);
        }
        for y in 4..8 {
            v.push([2, y, 5]);
        }
        SparseStructure::new(16, v).unwrap()
    }

    #[test]
    fn correction_inverts_injected_turns() {
        let prev = ell();
        assert_eq!(
            correct_orientation(&prev, &prev).unwrap(),
            (prev.clone(), 0)
        );
        for q in 1..4u8 {
            let cur = rotate_yaw(&prev, q).unwrap();
            let (fixed, chosen) = correct_orientation(&cur, &prev).unwrap();
            assert_eq!(chosen, (4 - q) % 4);
            assert_eq!(fixed, prev);
        }
    }

    #[test]
    fn symmetric_structure_keeps_its_pose() {
        let mut v = Vec::new();
        for i in 2..14 {
            v.push([i, 7, 7]);
            v.push([i, 8, 7]);
            v.push([7, i, 7]);
            v.push([8, i, 7]);
        }
        let s = SparseStructure::new(16, v).unwrap();
        assert_eq!(rotate_yaw(&s, 1).unwrap(), s);
        let other = ell();
        assert_eq!(correct_orientation(&s, &other).unwrap().1, 0);
    }

    #[test]
    fn stats_single_jump() {
        let mut seq: Vec<(f64, EulerAngles)> = (0..11)
            .map(|n| (n as f64 / 10.0, EulerAngles::new(0.0, 0.0, 0.0)))
            .collect();
        for f in &mut seq[5..] {
            f.1 = EulerAngles::new(90.0, 0.0, 0.0);
        }
        let stats = orientation_stats(&[seq], JUMP_THRESHOLD).unwrap();
        assert_eq!(stats.rows.len(), 10 + 3 + 36);
        assert_eq!(stats.jumps, 1);
        let alpha: Vec<_> = stats
            .rows
            .iter()
            .filter(|r| r.kind == "alpha_at_jump")
            .collect();
        assert_eq!(alpha[5].count, 1);
        assert_eq!(stats.count("alpha_at_jump"), 1);
        let yaw: Vec<_> = stats.rows.iter().filter(|r| r.kind == "yaw_jump").collect();
        assert_eq!((yaw[0].low, yaw[0].high, yaw[0].count), (45.0, 135.0, 1));
        assert_eq!(stats.count("yaw"), 11);
        assert!(stats
            .to_csv()
            .starts_with("kind,bin_low,bin_high,count\nalpha_at_jump,0,0.1,0\n"));
        assert!(orientation_stats(&[], JUMP_THRESHOLD).is_err());
    }

    #[test]
    fn negative_yaw_jump_lands_in_270_bin() {
        let seq = vec![
            (0.0, EulerAngles::new(0.0, 0.0, 0.0)),
            (1.0, EulerAngles::new(-90.0, 0.0, 0.0)),
        ];
        let stats = orientation_stats(&[seq], JUMP_THRESHOLD).unwrap();
        let yaw: Vec<_> = stats.rows.iter().filter(|r| r.kind == "yaw_jump").collect();
        assert_eq!(yaw[2].count, 1);
        let alpha: Vec<_> = stats
            .rows
            .iter()
            .filter(|r| r.kind == "alpha_at_jump")
            .collect();
        assert_eq!(alpha[9].count, 1);
    }

    proptest! {
        #[test]
        fn delta_in_range(a in -720.0..720.0f64, b in -720.0..720.0f64, c in -720.0..720.0f64) {
            let x = EulerAngles::new(a, b, c);
            let y = EulerAngles::new(c, a, b);
            for d in angular_delta(&x, &y) {
                prop_assert!((0.0..=180.0).contains(&d));
            }
        }

        #[test]
        fn jumps_invariant_to_global_offset(
            yaws in proptest::collection::vec(-180.0..180.0f64, 2..20),
            offset in -180.0..180.0f64,
        ) {
            let a: Vec<_> = yaws.iter().map(|&y| EulerAngles::new(y, 0.0, 0.0)).collect();
            let b: Vec<_> = yaws.iter().map(|&y| EulerAngles::new(y + offset, 0.0, 0.0)).collect();
            // Offsets shift wrapped differences by at most rounding.
            let ja = detect_jumps(&a, JUMP_THRESHOLD).unwrap();
            let jb = detect_jumps(&b, JUMP_THRESHOLD).unwrap();
            let near = |s: &[EulerAngles], n: usize| (angular_delta(&s[n - 1], &s[n])[0] - JUMP_THRESHOLD).abs() < 1e-9;
            for n in 1..a.len() {
                if !near(&a, n) {
                    prop_assert_eq!(ja.contains(&n), jb.contains(&n));
                }
            }
        }

        #[test]
        fn correction_is_idempotent(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<[u16; 3]> = (0..12).map(|_| [rng.random_range(0..8), rng.random_range(0..8), rng.random_range(0..8)]).collect();
                SparseStructure::new(8, v).unwrap()
            };
            let prev = mk(&mut rng);
            let cur = mk(&mut rng);
            let (fixed, _) = correct_orientation(&cur, &prev).unwrap();
            prop_assert_eq!(correct_orientation(&fixed, &prev).unwrap().1, 0);
        }
    }
}
