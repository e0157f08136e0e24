//! Attention processors injected into the flow transformer.
//!
//! The model computes projections and hands them to an [`AttentionProcessor`],
//! which decides how queries meet keys and values: plain attention, KV fusion,
//! morphing cross-attention or temporal fusion with the previous frame.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention, kv_fused_attention, morphing_cross_attention, multi_head,
    temporal_fused_self_attention, BlendWeight,
};
use crate::error::{Error, Result};
use crate::flow::cache::{KvPair, Slot, Stage, StageCache};
use crate::geometry::squared_distance;
use crate::tensor::TokenMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMode {
    VanillaSrc,
    VanillaTgt,
    KvFused,
    Mca,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfMode {
    Vanilla,
    KvFused,
    Tfsa,
}

/// Attention-mode selection for a sampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    #[serde(rename = "cross")]
    pub cross_mode: CrossMode,
    #[serde(rename = "self")]
    pub self_mode: SelfMode,
    pub beta: BlendWeight,
    /// Temporal fusion in the sparse-structure stage.
    pub tfsa_ss: bool,
    /// Temporal fusion in the structured-latent stage.
    pub tfsa_slat: bool,
    /// Per-layer toggle for the cross-attention mode. Layers switched off use
    /// KV-fused cross-attention. `None` applies the mode everywhere.
    pub cross_layers: Option<Vec<bool>>,
}

pub const DEFAULT_BETA: f64 = 0.2;

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            cross_mode: CrossMode::Mca,
            self_mode: SelfMode::Tfsa,
            beta: BlendWeight::new(DEFAULT_BETA).expect("default beta in range"),
            tfsa_ss: true,
            tfsa_slat: true,
            cross_layers: None,
        }
    }
}

impl AttentionConfig {
    /// Plain attention conditioned on the source only.
    pub fn source_only() -> Self {
        Self {
            cross_mode: CrossMode::VanillaSrc,
            self_mode: SelfMode::Vanilla,
            ..Self::default()
        }
    }

    /// Plain attention conditioned on the target only.
    pub fn target_only() -> Self {
        Self {
            cross_mode: CrossMode::VanillaTgt,
            self_mode: SelfMode::Vanilla,
            ..Self::default()
        }
    }

    pub fn tfsa_enabled(&self, stage: Stage) -> bool {
        self.self_mode == SelfMode::Tfsa
            && match stage {
                Stage::Ss => self.tfsa_ss,
                Stage::Slat => self.tfsa_slat,
            }
    }

    fn cross_mode_at(&self, layer: usize) -> CrossMode {
        match &self.cross_layers {
            Some(mask) if !mask.get(layer).copied().unwrap_or(true) => CrossMode::KvFused,
            _ => self.cross_mode,
        }
    }
}

/// Strategy for the attention calls of the flow transformer.
pub trait AttentionProcessor {
    /// Self-attention over the current tokens. `q`, `k`, `v` hold all heads.
    fn self_attention(
        &mut self,
        slot: Slot,
        q: &TokenMatrix,
        k: &TokenMatrix,
        v: &TokenMatrix,
    ) -> Result<TokenMatrix>;

    /// Cross-attention against source and target condition keys and values.
    fn cross_attention(
        &mut self,
        slot: Slot,
        q: &TokenMatrix,
        src: &KvPair,
        tgt: &KvPair,
    ) -> Result<TokenMatrix>;
}

/// Source-only and target-only self-attention caches, used by KV-fused
/// self-attention.
#[derive(Clone, Copy, Debug)]
pub struct EndpointCaches<'a> {
    pub src: &'a StageCache,
    pub tgt: &'a StageCache,
}

/// The processor used by the morphing pipeline. Records the current frame's
/// self-attention keys and values as it goes.
pub struct MorphProcessor<'a> {
    heads: usize,
    stage: Stage,
    attn: &'a AttentionConfig,
    alpha: BlendWeight,
    prev: Option<&'a StageCache>,
    endpoints: Option<EndpointCaches<'a>>,
    // Target-cache row for each source-cache row, by nearest token position.
    alignment: Option<Vec<usize>>,
    record: StageCache,
}

impl<'a> MorphProcessor<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        heads: usize,
        stage: Stage,
        layers: usize,
        steps: usize,
        positions: Vec<[f64; 3]>,
        attn: &'a AttentionConfig,
        alpha: BlendWeight,
        prev: Option<&'a StageCache>,
        endpoints: Option<EndpointCaches<'a>>,
    ) -> Result<Self> {
        if attn.tfsa_enabled(stage) {
            let prev = prev.ok_or_else(|| {
                Error::MissingCache(format!(
                    "temporal fusion in {stage:?} stage needs the previous frame"
                ))
            })?;
            prev.check_covers(stage, layers, steps)?;
        }
        let mut alignment = None;
        if attn.self_mode == SelfMode::KvFused {
            let ep = endpoints.ok_or_else(|| {
                Error::MissingCache("KV-fused self-attention needs source and target caches".into())
            })?;
            ep.src.check_covers(stage, layers, steps)?;
            ep.tgt.check_covers(stage, layers, steps)?;
            if ep.src.positions() != ep.tgt.positions() {
                alignment = Some(align_nearest(ep.src.positions(), ep.tgt.positions()));
            }
        }
        Ok(Self {
            heads,
            stage,
            attn,
            alpha,
            prev,
            endpoints,
            alignment,
            record: StageCache::new(stage, layers, steps, positions),
        })
    }

    /// The keys and values recorded so far.
    pub fn into_cache(self) -> StageCache {
        self.record
    }

    fn plain(&self, q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
        multi_head(self.heads, &[q, k, v], |_, p| {
            attention(&p[0], &p[1], &p[2])
        })
    }
}

/// For each source position, the index of the nearest target position
/// (lowest index on ties).
fn align_nearest(src: &[[f64; 3]], tgt: &[[f64; 3]]) -> Vec<usize> {
    src.iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, t) in tgt.iter().enumerate() {
                let d = squared_distance(p, t);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

impl AttentionProcessor for MorphProcessor<'_> {
    fn self_attention(
        &mut self,
        slot: Slot,
        q: &TokenMatrix,
        k: &TokenMatrix,
        v: &TokenMatrix,
    ) -> Result<TokenMatrix> {
        debug_assert_eq!(slot.stage, self.stage);
        self.record.record(
            slot.layer,
            slot.step,
            KvPair {
                k: k.clone(),
                v: v.clone(),
            },
        )?;
        match self.attn.self_mode {
            SelfMode::Tfsa if self.attn.tfsa_enabled(self.stage) => {
                let prev = self
                    .prev
                    .ok_or_else(|| Error::MissingCache("previous frame".into()))?
                    .get(slot.layer, slot.step)?;
                let beta = self.attn.beta;
                multi_head(self.heads, &[q, k, v, &prev.k, &prev.v], |_, p| {
                    temporal_fused_self_attention(&p[0], &p[1], &p[2], &p[3], &p[4], beta)
                })
            }
            SelfMode::KvFused => {
                let ep = self
                    .endpoints
                    .ok_or_else(|| Error::MissingCache("endpoint caches".into()))?;
                let src = ep.src.get(slot.layer, slot.step)?;
                let tgt = ep.tgt.get(slot.layer, slot.step)?;
                let (tk, tv) = match &self.alignment {
                    Some(idx) => (tgt.k.select_rows(idx), tgt.v.select_rows(idx)),
                    None => (tgt.k.clone(), tgt.v.clone()),
                };
                let alpha = self.alpha;
                multi_head(self.heads, &[q, &src.k, &src.v, &tk, &tv], |_, p| {
                    kv_fused_attention(&p[0], &p[1], &p[2], &p[3], &p[4], alpha)
                })
            }
            _ => self.plain(q, k, v),
        }
    }

    fn cross_attention(
        &mut self,
        slot: Slot,
        q: &TokenMatrix,
        src: &KvPair,
        tgt: &KvPair,
    ) -> Result<TokenMatrix> {
        let alpha = self.alpha;
        match self.attn.cross_mode_at(slot.layer) {
            CrossMode::VanillaSrc => self.plain(q, &src.k, &src.v),
            CrossMode::VanillaTgt => self.plain(q, &tgt.k, &tgt.v),
            CrossMode::KvFused => {
                multi_head(self.heads, &[q, &src.k, &src.v, &tgt.k, &tgt.v], |_, p| {
                    kv_fused_attention(&p[0], &p[1], &p[2], &p[3], &p[4], alpha)
                })
            }
            CrossMode::Mca => {
                multi_head(self.heads, &[q, &src.k, &src.v, &tgt.k, &tgt.v], |_, p| {
                    morphing_cross_attention(&p[0], &p[1], &p[2], &p[3], &p[4], alpha)
                })
            }
        }
    }
}
