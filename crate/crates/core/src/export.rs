//! Wavefront OBJ export of colored voxel grids.
//!
//! Each voxel becomes an axis-aligned cube in normalized `[0, 1]^3`
//! coordinates: 8 vertices carrying the voxel color (`v x y z r g b`) and
//! 12 outward-facing triangles.

use std::fmt::Write;

use crate::geometry::ColoredVoxelGrid;

/// Cube corners as offsets from the lower corner, indexed by bit pattern `zyx`.
const CORNERS: [[u16; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Two counter-clockwise triangles per face, seen from outside.
const TRIANGLES: [[usize; 3]; 12] = [
    [0, 2, 3],
    [0, 3, 1], // z = 0
    [4, 5, 7],
    [4, 7, 6], // z = 1
    [0, 1, 5],
    [0, 5, 4], // y = 0
    [2, 6, 7],
    [2, 7, 3], // y = 1
    [0, 4, 6],
    [0, 6, 2], // x = 0
    [1, 3, 7],
    [1, 7, 5], // x = 1
];

/// Renders `grid` as OBJ text. Output depends only on the grid.
pub fn to_obj(grid: &ColoredVoxelGrid) -> String {
    let s = &grid.structure;
    let g = f64::from(s.resolution());
    let mut out = String::new();
    let _ = writeln!(out, "# {} voxels", s.len());
    for (v, c) in s.voxels().iter().zip(&grid.colors) {
        for k in CORNERS {
            let p = [0, 1, 2].map(|a| f64::from(v[a] + k[a]) / g);
            let _ = writeln!(
                out,
                "v {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                p[0], p[1], p[2], c[0], c[1], c[2]
            );
        }
    }
    for i in 0..s.len() {
        let base = 8 * i + 1;
        for t in TRIANGLES {
            let _ = writeln!(out, "f {} {} {}", base + t[0], base + t[1], base + t[2]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SparseStructure;

    fn grid(voxels: Vec<[u16; 3]>) -> ColoredVoxelGrid {
        let s = SparseStructure::new(4, voxels).unwrap();
        let colors = vec![[0.25, 0.5, 1.0]; s.len()];
        ColoredVoxelGrid::new(s, colors).unwrap()
    }

    fn vertices(obj: &str) -> Vec<[f64; 3]> {
        obj.lines()
            .filter_map(|l| l.strip_prefix("v "))
            .map(|l| {
                let f: Vec<f64> = l.split(' ').map(|x| x.parse().unwrap()).collect();
                [f[0], f[1], f[2]]
            })
            .collect()
    }

    fn faces(obj: &str) -> Vec<[usize; 3]> {
        obj.lines()
            .filter_map(|l| l.strip_prefix("f "))
            .map(|l| {
                let f: Vec<usize> = l.split(' ').map(|x| x.parse().unwrap()).collect();
                [f[0], f[1], f[2]]
            })
            .collect()
    }

    #[test]
    fn one_voxel_is_one_cube() {
        let obj = to_obj(&grid(vec![[1, 2, 3]]));
        assert_eq!(vertices(&obj).len(), 8);
        assert_eq!(faces(&obj).len(), 12);
        assert!(obj.contains("v 0.250000 0.500000 0.750000 0.250000 0.500000 1.000000"));
    }

    #[test]
    fn counts_scale_with_voxels() {
        let obj = to_obj(&grid(vec![[0, 0, 0], [1, 0, 0], [3, 3, 3]]));
        assert_eq!(vertices(&obj).len(), 24);
        assert_eq!(faces(&obj).len(), 36);
        assert!(faces(&obj).iter().flatten().all(|&i| (1..=24).contains(&i)));
    }

    #[test]
    fn normals_point_outward() {
        let obj = to_obj(&grid(vec![[1, 1, 1]]));
        let v = vertices(&obj);
        let center = [0.375; 3];
        for f in faces(&obj) {
            let [a, b, c] = f.map(|i| v[i - 1]);
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            let out = [a[0] - center[0], a[1] - center[1], a[2] - center[2]];
            assert!(n[0] * out[0] + n[1] * out[1] + n[2] * out[2] > 0.0, "{f:?}");
        }
    }

    #[test]
    fn deterministic() {
        let g = grid(vec![[0, 1, 2], [2, 1, 0]]);
        assert_eq!(to_obj(&g), to_obj(&g));
    }
}
