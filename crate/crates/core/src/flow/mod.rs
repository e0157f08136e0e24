//! Toy two-stage rectified-flow generator (sparse structure, then structured
//! latents) with injectable attention processors.

pub mod cache;
pub mod interp;
pub mod model;
pub mod processor;
pub mod sampler;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::BlendWeight;
use crate::error::{Error, Result};
use crate::geometry::SparseStructure;
use crate::tensor::TokenMatrix;

pub use cache::{FrameCache, KvPair, Slot, Stage, StageCache};
pub use interp::{alpha_schedule, slerp};
pub use model::{ModelConfig, ToyFlowModel};
pub use processor::{
    AttentionConfig, AttentionProcessor, CrossMode, EndpointCaches, MorphProcessor, SelfMode,
};
pub use sampler::{sample_slat, sample_ss, CondPair, SlatSample, SsSample, StageRequest};

/// Per-patch condition features standing in for image tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTokens(TokenMatrix);

impl ConditionTokens {
    pub fn new(tokens: TokenMatrix) -> Self {
        Self(tokens)
    }

    pub fn matrix(&self) -> &TokenMatrix {
        &self.0
    }

    const MAGIC: &'static [u8; 5] = b"CTOK1";

    /// `.ctok` bytes: magic, u32 rows, u32 cols, then f32 data (little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.0;
        let mut out = Vec::with_capacity(13 + 4 * m.data().len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &x in m.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("ctok", bytes);
        r.magic(Self::MAGIC)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n * 4 == r.remaining())
            .ok_or_else(|| Error::format("ctok", "payload size does not match header"))?;
        let data = (0..n)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(TokenMatrix::new(rows, cols, data)?))
    }

    /// Stable 64-bit digest of the token values, used to derive noise seeds.
    pub fn digest(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(hash[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

/// Structured latent: one `C`-channel vector per active voxel, canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Slat {
    structure: SparseStructure,
    channels: usize,
    latents: Vec<f32>,
}

impl Slat {
    pub fn new(structure: SparseStructure, channels: usize, latents: Vec<f32>) -> Result<Self> {
        if channels == 0 || latents.len() != structure.len() * channels {
            return Err(Error::Shape {
                what: "slat latents (voxels x channels)",
                expected: structure.len() * channels,
                found: latents.len(),
            });
        }
        Ok(Self {
            structure,
            channels,
            latents,
        })
    }

    pub fn from_f64(structure: SparseStructure, latents: &TokenMatrix) -> Result<Self> {
        if latents.rows() != structure.len() {
            return Err(Error::Shape {
                what: "slat latent rows",
                expected: structure.len(),
                found: latents.rows(),
            });
        }
        let data = latents.data().iter().map(|&x| x as f32).collect();
        Self::new(structure, latents.cols(), data)
    }

    pub fn structure(&self) -> &SparseStructure {
        &self.structure
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn latents(&self) -> &[f32] {
        &self.latents
    }

    pub fn latent(&self, i: usize) -> &[f32] {
        &self.latents[i * self.channels..(i + 1) * self.channels]
    }

    const MAGIC: &'static [u8; 5] = b"SLAT1";

    /// `.slat` bytes: magic, u32 G, u32 L, u32 C, L×3 u16 positions, L×C f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let l = self.structure.len();
        let mut out = Vec::with_capacity(17 + 6 * l + 4 * self.latents.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&u32::from(self.structure.resolution()).to_le_bytes());
        out.extend_from_slice(&(l as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in self.structure.voxels() {
            for c in v {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        for x in &self.latents {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("slat", bytes);
        r.magic(Self::MAGIC)?;
        let g = r.u32()?;
        let l = r.u32()? as usize;
        let c = r.u32()? as usize;
        let g = u16::try_from(g).map_err(|_| Error::format("slat", "resolution too large"))?;
        if l.checked_mul(6 + 4 * c) != Some(r.remaining()) {
            return Err(Error::format("slat", "payload size does not match header"));
        }
        let mut voxels = Vec::with_capacity(l);
        for _ in 0..l {
            voxels.push([r.u16()?, r.u16()?, r.u16()?]);
        }
        if voxels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("slat", "positions not in canonical order"));
        }
        let structure = SparseStructure::new(g, voxels)?;
        let latents = (0..l * c).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if latents.iter().any(|x| !x.is_finite()) {
            return Err(Error::format("slat", "non-finite latent"));
        }
        Self::new(structure, c, latents)
    }
}

struct ByteReader<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(kind: &'static str, bytes: &'a [u8]) -> Self {
        Self {
            kind,
            bytes,
            pos: 0,
        }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.kind, "unexpected end of data"))?;
        self.pos = end;
        Ok(chunk.try_into().expect("length checked"))
    }

    fn magic(&mut self, magic: &[u8; 5]) -> Result<()> {
        if &self.take::<5>()? != magic {
            return Err(Error::format(self.kind, "bad magic"));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Initial noise of both stages for one object.
///
/// The SLAT noise is a dense `G³ × C` field; the rows for a given structure
/// are gathered with [`LatentPair::slat_rows`], so interpolation happens on a
/// fixed-size vector no matter which voxels end up active.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub f_ss: TokenMatrix,
    pub f_slat: TokenMatrix,
}

impl LatentPair {
    /// Standard Gaussian noise from `seed`.
    pub fn noise(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = cfg.cells();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let f_ss = TokenMatrix::new(cells, cfg.ss_channels, draw(cells * cfg.ss_channels))
            .expect("noise is finite");
        let f_slat = TokenMatrix::new(
            cells,
            cfg.latent_channels,
            draw(cells * cfg.latent_channels),
        )
        .expect("noise is finite");
        Self { f_ss, f_slat }
    }

    /// Per-stage spherical interpolation toward `other`.
    pub fn slerp(
        &self,
        other: &LatentPair,
        alpha_ss: BlendWeight,
        alpha_slat: BlendWeight,
    ) -> Result<Self> {
        let f_ss = slerp(self.f_ss.data(), other.f_ss.data(), alpha_ss)?;
        let f_slat = slerp(self.f_slat.data(), other.f_slat.data(), alpha_slat)?;
        Ok(Self {
            f_ss: TokenMatrix::new(self.f_ss.rows(), self.f_ss.cols(), f_ss)?,
            f_slat: TokenMatrix::new(self.f_slat.rows(), self.f_slat.cols(), f_slat)?,
        })
    }

    /// Rows of the dense SLAT noise at the voxels of `structure`.
    pub fn slat_rows(&self, structure: &SparseStructure) -> Result<TokenMatrix> {
        gather_cells(&self.f_slat, structure)
    }
}

/// Rows of a dense `G³`-row field at the voxels of `structure`.
pub fn gather_cells(dense: &TokenMatrix, structure: &SparseStructure) -> Result<TokenMatrix> {
    let g = usize::from(structure.resolution());
    if g * g * g != dense.rows() {
        return Err(Error::Shape {
            what: "dense field cells",
            expected: g * g * g,
            found: dense.rows(),
        });
    }
    let idx: Vec<usize> = structure
        .voxels()
        .iter()
        .map(|v| (usize::from(v[0]) * g + usize::from(v[1])) * g + usize::from(v[2]))
        .collect();
    Ok(dense.select_rows(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slat_bytes_round_trip() {
        let s = SparseStructure::new(16, vec![[0, 0, 1], [15, 3, 2]]).unwrap();
        let slat = Slat::new(s, 2, vec![0.5, -1.25, 3.0, 1e-7]).unwrap();
        let bytes = slat.to_bytes();
        assert_eq!(&bytes[..5], b"SLAT1");
        assert_eq!(bytes.len(), 17 + 2 * 6 + 4 * 4);
        assert_eq!(Slat::from_bytes(&bytes).unwrap(), slat);
        assert!(Slat::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Slat::from_bytes(&bad).is_err());
    }

    #[test]
    fn ctok_bytes_round_trip() {
        let m = TokenMatrix::new(2, 3, vec![0.25, -1.0, 2.0, 0.0, 0.5, 8.0]).unwrap();
        let c = ConditionTokens::new(m);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..5], b"CTOK1");
        assert_eq!(ConditionTokens::from_bytes(&bytes).unwrap(), c);
        assert_eq!(
            c.digest(),
            ConditionTokens::from_bytes(&bytes).unwrap().digest()
        );
        assert!(ConditionTokens::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn noise_is_seeded_and_gathered_by_voxel() {
        let cfg = ModelConfig::default();
        let a = LatentPair::noise(&cfg, 3);
        assert_eq!(a, LatentPair::noise(&cfg, 3));
        assert_ne!(a, LatentPair::noise(&cfg, 4));
        let s = SparseStructure::new(16, vec![[0, 0, 1], [1, 0, 0]]).unwrap();
        let rows = a.slat_rows(&s).unwrap();
        assert_eq!(rows.row(0), a.f_slat.row(1));
        assert_eq!(rows.row(1), a.f_slat.row(256));
    }
}
