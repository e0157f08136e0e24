//! Sparse voxel structures, quarter-turn yaw rotation, Chamfer distance and
//! positional encodings.
//!
//! Voxel coordinates are integer triples on a cubic grid of `resolution` cells
//! per axis. The vertical (yaw) axis is `+z`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Integer voxel coordinate `(x, y, z)`.
pub type Voxel = [u16; 3];

/// Set of active voxels on a cubic grid, kept sorted and deduplicated.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparseStructure {
    resolution: u16,
    voxels: Vec<Voxel>,
}

impl SparseStructure {
    /// Builds a structure from arbitrary voxels, sorting and deduplicating them.
    pub fn new(resolution: u16, mut voxels: Vec<Voxel>) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("resolution must be positive"));
        }
        if let Some(v) = voxels.iter().find(|v| v.iter().any(|&c| c >= resolution)) {
            return Err(Error::invalid(format!(
                "voxel {v:?} out of bounds for resolution {resolution}"
            )));
        }
        voxels.sort_unstable();
        voxels.dedup();
        Ok(Self { resolution, voxels })
    }

    pub fn empty(resolution: u16) -> Result<Self> {
        Self::new(resolution, Vec::new())
    }

    pub fn resolution(&self) -> u16 {
        self.resolution
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn contains(&self, v: &Voxel) -> bool {
        self.voxels.binary_search(v).is_ok()
    }

    /// Index of `v` in the canonical order.
    pub fn index_of(&self, v: &Voxel) -> Option<usize> {
        self.voxels.binary_search(v).ok()
    }

    /// Renders the `.ssv` text form.
    pub fn to_ssv(&self) -> String {
        let mut out = format!("SSV1 {} {}\n", self.resolution, self.voxels.len());
        for [x, y, z] in &self.voxels {
            let _ = writeln!(out, "{x} {y} {z}");
        }
        out
    }

    /// Parses the `.ssv` text form. Voxel lines must already be sorted.
    pub fn from_ssv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("ssv", "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "SSV1" {
            return Err(Error::format("ssv", format!("bad header {header:?}")));
        }
        let resolution: u16 = fields[1]
            .parse()
            .map_err(|_| Error::format("ssv", "bad resolution"))?;
        let count: usize = fields[2]
            .parse()
            .map_err(|_| Error::format("ssv", "bad count"))?;
        let mut voxels = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<u16>);
            let mut coord = || -> Result<u16> {
                it.next()
                    .and_then(|r| r.ok())
                    .ok_or_else(|| Error::format("ssv", format!("bad voxel on line {}", i + 2)))
            };
            voxels.push([coord()?, coord()?, coord()?]);
        }
        if voxels.len() != count {
            return Err(Error::format(
                "ssv",
                format!("header says {count} voxels, found {}", voxels.len()),
            ));
        }
        if voxels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("ssv", "voxels not in sorted order"));
        }
        Self::new(resolution, voxels)
    }
}

/// Rotates `structure` counter-clockwise about the vertical center line by
/// `quarter_turns` × 90°, using the on-lattice map `(x, y, z) → (G−1−y, x, z)`.
pub fn rotate_yaw(structure: &SparseStructure, quarter_turns: u8) -> Result<SparseStructure> {
    if quarter_turns > 3 {
        return Err(Error::invalid(format!(
            "quarter_turns must be in 0..=3, got {quarter_turns}"
        )));
    }
    let g = structure.resolution;
    let voxels = structure
        .voxels
        .iter()
        .map(|&v| {
            let mut v = v;
            for _ in 0..quarter_turns {
                v = [g - 1 - v[1], v[0], v[2]];
            }
            v
        })
        .collect();
    SparseStructure::new(g, voxels)
}

/// Continuous point set in the unit cube.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Normalized center of a voxel: `(v + 0.5) / G` per axis.
pub fn voxel_center(v: &Voxel, resolution: u16) -> [f64; 3] {
    let g = f64::from(resolution);
    [
        (f64::from(v[0]) + 0.5) / g,
        (f64::from(v[1]) + 0.5) / g,
        (f64::from(v[2]) + 0.5) / g,
    ]
}

pub fn to_point_cloud(structure: &SparseStructure) -> PointCloud {
    PointCloud::new(
        structure
            .voxels
            .iter()
            .map(|v| voxel_center(v, structure.resolution))
            .collect(),
    )
}

#[inline]
pub(crate) fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Point count at which nearest-neighbor queries switch from brute force to
/// the uniform-grid hash.
pub const GRID_SEARCH_THRESHOLD: usize = 4096;

/// Nearest-neighbor index over a fixed point set.
pub(crate) enum NearestIndex<'a> {
    Brute(&'a [[f64; 3]]),
    Grid(UniformGrid<'a>),
}

impl<'a> NearestIndex<'a> {
    pub(crate) fn build(points: &'a [[f64; 3]]) -> Self {
        if points.len() < GRID_SEARCH_THRESHOLD {
            NearestIndex::Brute(points)
        } else {
            NearestIndex::Grid(UniformGrid::build(points))
        }
    }

    /// Squared distance from `q` to its nearest point and that point's index.
    pub(crate) fn nearest(&self, q: &[f64; 3]) -> (f64, usize) {
        match self {
            NearestIndex::Brute(points) => brute_nearest(points, q),
            NearestIndex::Grid(grid) => grid.nearest(q),
        }
    }
}

fn brute_nearest(points: &[[f64; 3]], q: &[f64; 3]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = squared_distance(q, p);
        if d < best.0 {
            best = (d, i);
        }
    }
    best
}

/// Uniform spatial hash over the bounding box of a point set.
pub(crate) struct UniformGrid<'a> {
    points: &'a [[f64; 3]],
    min: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    // CSR layout: points of cell c are order[starts[c]..starts[c + 1]].
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> UniformGrid<'a> {
    fn build(points: &'a [[f64; 3]]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0_f64, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((max[a] - min[a]) / cell).floor() as usize) + 1);
        let mut grid = Self {
            points,
            min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncells + 1];
        let keys: Vec<usize> = points.iter().map(|p| grid.key(grid.cell_of(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &[f64; 3]) -> [isize; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.min[a]) / self.cell).floor() as isize)
    }

    fn key(&self, c: [isize; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    fn nearest(&self, q: &[f64; 3]) -> (f64, usize) {
        let center = self.cell_of(q);
        let mut best = (f64::INFINITY, usize::MAX);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1) as isize
            + 1
            + center.iter().map(|c| c.abs()).max().unwrap_or(0);
        for ring in 0..=max_ring {
            // Every point outside the searched cube is at least this far away.
            let clearance = (ring as f64 - 1.0).max(0.0) * self.cell;
            if best.0.is_finite() && clearance * clearance > best.0 {
                break;
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let c = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if (0..3).any(|a| c[a] < 0 || c[a] >= self.dims[a] as isize) {
                            continue;
                        }
                        let k = self.key(c);
                        for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
                            let d = squared_distance(q, &self.points[i]);
                            if d < best.0 || (d == best.0 && i < best.1) {
                                best = (d, i);
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn mean_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let index = NearestIndex::build(to);
    let total: f64 = from.iter().map(|p| index.nearest(p).0).sum();
    total / from.len() as f64
}

/// Symmetric squared Chamfer distance between two non-empty point clouds.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(mean_nearest(&a.points, &b.points) + mean_nearest(&b.points, &a.points))
}

/// Sinusoidal encoding of a grid position.
///
/// The `d / 2` sine/cosine pairs are dealt round-robin to the x, y and z axes.
/// Frequencies per axis are geometric from `π / G` up to `π / 2`; the lowest
/// one keeps every axis injective on `0..G`.
pub fn positional_encoding(p: &Voxel, d: usize, resolution: u16) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "encoding dimension must be even and positive, got {d}"
        )));
    }
    if p.iter().any(|&c| c >= resolution) {
        return Err(Error::invalid(format!(
            "position {p:?} out of bounds for resolution {resolution}"
        )));
    }
    let pairs = d / 2;
    let g = f64::from(resolution);
    let base = std::f64::consts::PI / g;
    let mut out = vec![0.0; d];
    for pair in 0..pairs {
        let axis = pair % 3;
        let k = pair / 3;
        let per_axis = (pairs - axis).div_ceil(3);
        let freq = if per_axis > 1 {
            base * (g / 2.0).max(1.0).powf(k as f64 / (per_axis - 1) as f64)
        } else {
            base
        };
        let angle = f64::from(p[axis]) * freq;
        out[2 * pair] = angle.sin();
        out[2 * pair + 1] = angle.cos();
    }
    Ok(out)
}

/// Occupancy plus one RGB color per voxel, in canonical voxel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredVoxelGrid {
    pub structure: SparseStructure,
    pub colors: Vec<[f64; 3]>,
}

impl ColoredVoxelGrid {
    pub fn new(structure: SparseStructure, colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() != structure.len() {
            return Err(Error::Shape {
                what: "voxel colors",
                expected: structure.len(),
                found: colors.len(),
            });
        }
        Ok(Self { structure, colors })
    }
}
