//! Recorded self-attention keys and values, indexed by (stage, layer, step).

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::TokenMatrix;

/// Generation stage of the two-stage pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ss,
    Slat,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Ss => 0,
            Stage::Slat => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Stage::Ss),
            1 => Ok(Stage::Slat),
            t => Err(Error::format("kv cache", format!("unknown stage tag {t}"))),
        }
    }
}

/// Address of one attention call inside a sampling run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub stage: Stage,
    pub layer: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvPair {
    pub k: TokenMatrix,
    pub v: TokenMatrix,
}

/// Keys and values of every self-attention slot of one stage of one frame,
/// together with the normalized positions of the tokens that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCache {
    stage: Stage,
    layers: usize,
    steps: usize,
    positions: Vec<[f64; 3]>,
    slots: Vec<Option<KvPair>>,
}

impl StageCache {
    pub fn new(stage: Stage, layers: usize, steps: usize, positions: Vec<[f64; 3]>) -> Self {
        Self {
            stage,
            layers,
            steps,
            positions,
            slots: vec![None; layers * steps],
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    fn index(&self, layer: usize, step: usize) -> Result<usize> {
        if layer >= self.layers || step >= self.steps {
            return Err(Error::MissingCache(format!(
                "slot (layer {layer}, step {step}) outside a {}x{} cache",
                self.layers, self.steps
            )));
        }
        Ok(layer * self.steps + step)
    }

    pub fn record(&mut self, layer: usize, step: usize, kv: KvPair) -> Result<()> {
        let i = self.index(layer, step)?;
        self.slots[i] = Some(kv);
        Ok(())
    }

    pub fn get(&self, layer: usize, step: usize) -> Result<&KvPair> {
        let i = self.index(layer, step)?;
        self.slots[i].as_ref().ok_or_else(|| {
            Error::MissingCache(format!(
                "{:?} slot (layer {layer}, step {step}) never recorded",
                self.stage
            ))
        })
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    /// Checks that this cache can serve every slot of a run with the given shape.
    pub fn check_covers(&self, stage: Stage, layers: usize, steps: usize) -> Result<()> {
        if self.stage != stage || self.layers != layers || self.steps != steps {
            return Err(Error::MissingCache(format!(
                "cache for {:?} {}x{} cannot serve {:?} {layers}x{steps}",
                self.stage, self.layers, self.steps, stage
            )));
        }
        if !self.is_complete() {
            return Err(Error::MissingCache(format!(
                "{:?} cache is incomplete",
                self.stage
            )));
        }
        Ok(())
    }

    /// Binary little-endian dump: header then every slot in (layer, step) order.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        if !self.is_complete() {
            return Err(std::io::Error::other(
                "refusing to write an incomplete cache",
            ));
        }
        w.write_all(&[self.stage.tag()])?;
        for n in [self.layers, self.steps, self.positions.len()] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for p in &self.positions {
            for c in p {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for kv in self.slots.iter().flatten() {
            for m in [&kv.k, &kv.v] {
                w.write_all(&(m.rows() as u32).to_le_bytes())?;
                w.write_all(&(m.cols() as u32).to_le_bytes())?;
                for x in m.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::format("kv cache", e.to_string());
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(bad)?;
        let stage = Stage::from_tag(tag[0])?;
        let layers = read_u32(r)? as usize;
        let steps = read_u32(r)? as usize;
        let npos = read_u32(r)? as usize;
        let mut positions = Vec::with_capacity(npos);
        for _ in 0..npos {
            positions.push([read_f64(r)?, read_f64(r)?, read_f64(r)?]);
        }
        let mut cache = StageCache::new(stage, layers, steps, positions);
        for layer in 0..layers {
            for step in 0..steps {
                let k = read_matrix(r)?;
                let v = read_matrix(r)?;
                cache.record(layer, step, KvPair { k, v })?;
            }
        }
        Ok(cache)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("kv cache", e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("kv cache", e.to_string()))?;
    Ok(f64::from_le_bytes(b))
}

fn read_matrix(r: &mut impl Read) -> Result<TokenMatrix> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(Error::format("kv cache", "matrix too large"));
    }
    let data = (0..rows * cols)
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    TokenMatrix::new(rows, cols, data)
}

/// Self-attention caches of both stages of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameCache {
    pub ss: Option<StageCache>,
    pub slat: Option<StageCache>,
}

impl FrameCache {
    pub fn stage(&self, stage: Stage) -> Option<&StageCache> {
        match stage {
            Stage::Ss => self.ss.as_ref(),
            Stage::Slat => self.slat.as_ref(),
        }
    }

    const MAGIC: &'static [u8; 4] = b"KVC1";

    /// Writes the cache with its frame index. Layout (little-endian):
    /// magic `KVC1`, u32 frame, u8 stage mask, then each present stage.
    pub fn write_to(&self, frame: usize, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(frame as u32).to_le_bytes())?;
        let mask = u8::from(self.ss.is_some()) | (u8::from(self.slat.is_some()) << 1);
        w.write_all(&[mask])?;
        for c in [&self.ss, &self.slat].into_iter().flatten() {
            c.write_to(w)?;
        }
        Ok(())
    }

    /// Reads a cache written by [`FrameCache::write_to`], returning the frame index.
    pub fn read_from(r: &mut impl Read) -> Result<(usize, FrameCache)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::format("kv cache", e.to_string()))?;
        if &magic != Self::MAGIC {
            return Err(Error::format("kv cache", "bad magic"));
        }
        let frame = read_u32(r)? as usize;
        let mut mask = [0u8; 1];
        r.read_exact(&mut mask)
            .map_err(|e| Error::format("kv cache", e.to_string()))?;
        let mut cache = FrameCache::default();
        if mask[0] & 1 != 0 {
            cache.ss = Some(StageCache::read_from(r)?);
        }
        if mask[0] & 2 != 0 {
            cache.slat = Some(StageCache::read_from(r)?);
        }
        Ok((frame, cache))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cache() -> StageCache {
        let mut c = StageCache::new(Stage::Slat, 2, 3, vec![[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]]);
        for l in 0..2 {
            for s in 0..3 {
                let k = TokenMatrix::new(2, 2, vec![l as f64, s as f64, 0.1, -0.0]).unwrap();
                let v = TokenMatrix::new(2, 1, vec![1.0 / 3.0, 7.0]).unwrap();
                c.record(l, s, KvPair { k, v }).unwrap();
            }
        }
        c
    }

    #[test]
    fn incomplete_cache_is_detected() {
        let mut c = StageCache::new(Stage::Ss, 1, 2, vec![]);
        assert!(!c.is_complete());
        assert!(c.get(0, 1).is_err());
        assert!(c.get(3, 0).is_err());
        let kv = KvPair {
            k: TokenMatrix::zeros(1, 1),
            v: TokenMatrix::zeros(1, 1),
        };
        c.record(0, 0, kv.clone()).unwrap();
        c.record(0, 1, kv).unwrap();
        assert!(c.check_covers(Stage::Ss, 1, 2).is_ok());
        assert!(c.check_covers(Stage::Slat, 1, 2).is_err());
    }

    #[test]
    fn frame_cache_binary_round_trip_is_bit_exact() {
        let cache = FrameCache {
            ss: None,
            slat: Some(sample_cache()),
        };
        let mut buf = Vec::new();
        cache.write_to(7, &mut buf).unwrap();
        let (frame, back) = FrameCache::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(frame, 7);
        let a = cache.slat.as_ref().unwrap().get(1, 2).unwrap();
        let b = back.slat.as_ref().unwrap().get(1, 2).unwrap();
        let bits = |m: &TokenMatrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.k), bits(&b.k));
        assert_eq!(back, cache);
        assert!(FrameCache::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }
}
