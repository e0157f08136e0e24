//! Frame-by-frame morph orchestration.
//!
//! Each frame interpolates the initial noise of both stages, samples the
//! sparse structure, optionally snaps its yaw to the previous frame, then
//! samples the structured latents on it. The self-attention keys and values of
//! a frame feed temporal fusion in the next one.

pub mod config;
pub mod output;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::BlendWeight;
use crate::error::{Error, Result};
use crate::flow::{
    alpha_schedule, gather_cells, sample_slat, sample_ss, slerp, AttentionConfig, CondPair,
    ConditionTokens, EndpointCaches, FrameCache, LatentPair, ModelConfig, SelfMode, Slat,
    SlatSample, SsSample, Stage, StageCache, StageRequest, ToyFlowModel,
};
use crate::geometry::SparseStructure;
use crate::orientation::correct_orientation;
use crate::tensor::TokenMatrix;

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_STEPS: usize = 49;

/// A named condition: one source, target or style object.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphObject {
    pub name: String,
    pub cond: ConditionTokens,
}

impl MorphObject {
    pub fn new(name: impl Into<String>, cond: ConditionTokens) -> Self {
        Self {
            name: name.into(),
            cond,
        }
    }

    /// Seed of this object's initial noise. Depends only on the run seed and
    /// the condition values, so identical objects get identical noise.
    pub fn noise_seed(&self, seed: u64) -> u64 {
        let mut bytes = seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(&self.cond.to_bytes());
        crate::assets::digest_u64(&bytes)
    }

    pub fn noise(&self, model: &ModelConfig, seed: u64) -> LatentPair {
        LatentPair::noise(model, self.noise_seed(seed))
    }
}

/// How a stage's α follows the frame schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaMode {
    #[default]
    #[serde(rename = "schedule")]
    Schedule,
    #[serde(rename = "frozen_0")]
    Frozen0,
    #[serde(rename = "frozen_1")]
    Frozen1,
}

impl AlphaMode {
    pub fn apply(self, scheduled: BlendWeight) -> BlendWeight {
        match self {
            AlphaMode::Schedule => scheduled,
            AlphaMode::Frozen0 => BlendWeight::ZERO,
            AlphaMode::Frozen1 => BlendWeight::ONE,
        }
    }

    pub fn is_frozen(self) -> bool {
        self != AlphaMode::Schedule
    }
}

/// Everything that controls a morph besides the objects themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphConfig {
    /// Interpolation steps `N`; the sequence has `N + 1` frames.
    pub steps: usize,
    pub attn: AttentionConfig,
    pub orientation_correction: bool,
    pub ss_alpha: AlphaMode,
    pub slat_alpha: AlphaMode,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            attn: AttentionConfig::default(),
            orientation_correction: true,
            ss_alpha: AlphaMode::Schedule,
            slat_alpha: AlphaMode::Schedule,
            seed: DEFAULT_SEED,
            model: ModelConfig::default(),
        }
    }
}

impl MorphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.ss_alpha.is_frozen() && self.slat_alpha.is_frozen() {
            return Err(Error::NothingMorphs);
        }
        if let Some(mask) = &self.attn.cross_layers {
            if mask.len() != self.model.layers {
                return Err(Error::invalid(format!(
                    "cross_layers has {} entries for {} layers",
                    mask.len(),
                    self.model.layers
                )));
            }
        }
        self.model.validate()
    }

    fn alpha_mode(&self, stage: Stage) -> AlphaMode {
        match stage {
            Stage::Ss => self.ss_alpha,
            Stage::Slat => self.slat_alpha,
        }
    }

    /// Whether frame `n` fuses the previous frame in `stage`. Never at frame
    /// 0, and never in a stage whose α is frozen since nothing moves there.
    fn tfsa_at(&self, stage: Stage, n: usize) -> bool {
        n > 0 && !self.alpha_mode(stage).is_frozen() && self.attn.tfsa_enabled(stage)
    }

    fn frame_attention(&self, n: usize) -> AttentionConfig {
        let mut a = self.attn.clone();
        a.tfsa_ss = self.tfsa_at(Stage::Ss, n);
        a.tfsa_slat = self.tfsa_at(Stage::Slat, n);
        a
    }

    /// Whether any stage keeps keys and values for the next frame.
    pub fn uses_frame_cache(&self) -> bool {
        self.tfsa_at(Stage::Ss, 1) || self.tfsa_at(Stage::Slat, 1)
    }
}

/// The objects of a run. `ss_target` shapes the structure, `slat_target`
/// the latents; both equal the target in a plain morph.
#[derive(Clone, Debug)]
pub struct MorphInputs {
    pub source: MorphObject,
    pub ss_target: MorphObject,
    pub slat_target: MorphObject,
}

impl MorphInputs {
    pub fn pair(source: MorphObject, target: MorphObject) -> Self {
        Self {
            source,
            ss_target: target.clone(),
            slat_target: target,
        }
    }

    fn target(&self, stage: Stage) -> &MorphObject {
        match stage {
            Stage::Ss => &self.ss_target,
            Stage::Slat => &self.slat_target,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub ss_ms: f64,
    pub oc_ms: f64,
    pub slat_ms: f64,
}

/// One generated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub alpha: BlendWeight,
    pub alpha_ss: BlendWeight,
    pub alpha_slat: BlendWeight,
    pub structure: SparseStructure,
    pub slat: Slat,
    /// Yaw quarter turns applied by orientation correction.
    pub rotation: u8,
    pub timings: Timings,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MorphSequence {
    pub frames: Vec<FrameRecord>,
}

/// A plain two-stage generation of one object.
#[derive(Clone, Debug)]
pub struct Generation {
    pub ss: SsSample,
    pub slat: SlatSample,
}

/// Generates `obj` on its own: vanilla attention, its own noise.
pub fn generate(model: &ToyFlowModel, obj: &MorphObject, seed: u64) -> Result<Generation> {
    let noise = obj.noise(model.config(), seed);
    let attn = AttentionConfig::source_only();
    let req = StageRequest {
        conds: CondPair {
            src: &obj.cond,
            tgt: &obj.cond,
        },
        attn: &attn,
        alpha: BlendWeight::ZERO,
        prev: None,
        endpoints: None,
    };
    let ss = sample_ss(model, &noise.f_ss, &req)?;
    let rows = noise.slat_rows(&ss.structure)?;
    let slat = sample_slat(model, &ss.structure, &rows, &req)?;
    Ok(Generation { ss, slat })
}

struct References {
    source: Generation,
    ss_target: Generation,
    slat_target: Generation,
}

impl References {
    fn endpoints(&self, stage: Stage) -> EndpointCaches<'_> {
        match stage {
            Stage::Ss => EndpointCaches {
                src: &self.source.ss.cache,
                tgt: &self.ss_target.ss.cache,
            },
            Stage::Slat => EndpointCaches {
                src: &self.source.slat.cache,
                tgt: &self.slat_target.slat.cache,
            },
        }
    }
}

/// State carried from one frame to the next.
#[derive(Clone, Debug)]
pub struct Carry {
    /// Index of the frame that produced this state.
    pub frame: usize,
    pub structure: SparseStructure,
    pub cache: FrameCache,
}

/// Generates a morph one frame at a time, so callers can persist progress
/// and resume later.
pub struct MorphRunner<'m> {
    model: &'m ToyFlowModel,
    inputs: MorphInputs,
    cfg: MorphConfig,
    schedule: Vec<BlendWeight>,
    noise_src: LatentPair,
    noise_ss_tgt: LatentPair,
    noise_slat_tgt: LatentPair,
    refs: Option<References>,
    ss_memo: Option<SsSample>,
    next: usize,
    carry: Option<Carry>,
}

impl<'m> MorphRunner<'m> {
    pub fn new(model: &'m ToyFlowModel, inputs: MorphInputs, cfg: MorphConfig) -> Result<Self> {
        cfg.validate()?;
        if model.config() != &cfg.model {
            return Err(Error::invalid(
                "model was built from a different configuration",
            ));
        }
        for obj in [&inputs.source, &inputs.ss_target, &inputs.slat_target] {
            model.check_conditions(&obj.cond)?;
        }
        let schedule = alpha_schedule(cfg.steps)?;
        let noise = |o: &MorphObject| o.noise(&cfg.model, cfg.seed);
        let refs = if cfg.attn.self_mode == SelfMode::KvFused {
            Some(References {
                source: generate(model, &inputs.source, cfg.seed)?,
                ss_target: generate(model, &inputs.ss_target, cfg.seed)?,
                slat_target: generate(model, &inputs.slat_target, cfg.seed)?,
            })
        } else {
            None
        };
        Ok(Self {
            model,
            noise_src: noise(&inputs.source),
            noise_ss_tgt: noise(&inputs.ss_target),
            noise_slat_tgt: noise(&inputs.slat_target),
            inputs,
            cfg,
            schedule,
            refs,
            ss_memo: None,
            next: 0,
            carry: None,
        })
    }

    /// Continues a run after frame `carry.frame`.
    pub fn resume(
        model: &'m ToyFlowModel,
        inputs: MorphInputs,
        cfg: MorphConfig,
        carry: Carry,
    ) -> Result<Self> {
        let mut runner = Self::new(model, inputs, cfg)?;
        if carry.frame >= runner.frame_count() {
            return Err(Error::invalid(format!(
                "cannot resume after frame {} of a {}-frame run",
                carry.frame,
                runner.frame_count()
            )));
        }
        for stage in [Stage::Ss, Stage::Slat] {
            if runner.cfg.tfsa_at(stage, carry.frame + 1) && carry.cache.stage(stage).is_none() {
                return Err(Error::MissingCache(format!(
                    "no {stage:?} keys and values saved for frame {}",
                    carry.frame
                )));
            }
        }
        runner.next = carry.frame + 1;
        runner.carry = Some(carry);
        Ok(runner)
    }

    pub fn config(&self) -> &MorphConfig {
        &self.cfg
    }

    pub fn frame_count(&self) -> usize {
        self.schedule.len()
    }

    pub fn next_frame(&self) -> usize {
        self.next
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.schedule.len()
    }

    /// State after the most recent frame.
    pub fn carry(&self) -> Option<&Carry> {
        self.carry.as_ref()
    }

    /// The stage's initial noise at `alpha`, dense over all cells.
    fn stage_noise(&self, stage: Stage, alpha: BlendWeight) -> Result<TokenMatrix> {
        let (a, b) = match stage {
            Stage::Ss => (&self.noise_src.f_ss, &self.noise_ss_tgt.f_ss),
            Stage::Slat => (&self.noise_src.f_slat, &self.noise_slat_tgt.f_slat),
        };
        TokenMatrix::new(a.rows(), a.cols(), slerp(a.data(), b.data(), alpha)?)
    }

    fn run_ss(&mut self, n: usize, alpha: BlendWeight, attn: &AttentionConfig) -> Result<SsSample> {
        let memoizable = self.cfg.ss_alpha.is_frozen();
        if memoizable {
            if let Some(s) = &self.ss_memo {
                return Ok(s.clone());
            }
        }
        let noise = self.stage_noise(Stage::Ss, alpha)?;
        let prev = if attn.tfsa_enabled(Stage::Ss) {
            self.carry.as_ref().and_then(|c| c.cache.ss.as_ref())
        } else {
            None
        };
        let req = StageRequest {
            conds: CondPair {
                src: &self.inputs.source.cond,
                tgt: &self.inputs.target(Stage::Ss).cond,
            },
            attn,
            alpha,
            prev,
            endpoints: self.refs.as_ref().map(|r| r.endpoints(Stage::Ss)),
        };
        let s = sample_ss(self.model, &noise, &req).map_err(|e| e.at_frame(n))?;
        if memoizable {
            self.ss_memo = Some(s.clone());
        }
        Ok(s)
    }

    /// Generates the next frame, or returns `None` when the run is complete.
    pub fn step(&mut self) -> Result<Option<FrameRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let n = self.next;
        let alpha = self.schedule[n];
        let alpha_ss = self.cfg.ss_alpha.apply(alpha);
        let alpha_slat = self.cfg.slat_alpha.apply(alpha);
        let attn = self.cfg.frame_attention(n);

        let t0 = Instant::now();
        let ss = self.run_ss(n, alpha_ss, &attn)?;
        let ss_ms = ms(t0);

        let t0 = Instant::now();
        let (structure, rotation) = match &self.carry {
            Some(c) if self.cfg.orientation_correction => {
                correct_orientation(&ss.structure, &c.structure).map_err(|e| e.at_frame(n))?
            }
            _ => (ss.structure.clone(), 0),
        };
        let oc_ms = ms(t0);

        let t0 = Instant::now();
        let noise = self.stage_noise(Stage::Slat, alpha_slat)?;
        let rows = gather_cells(&noise, &structure).map_err(|e| e.at_frame(n))?;
        let prev = if attn.tfsa_enabled(Stage::Slat) {
            self.carry.as_ref().and_then(|c| c.cache.slat.as_ref())
        } else {
            None
        };
        let req = StageRequest {
            conds: CondPair {
                src: &self.inputs.source.cond,
                tgt: &self.inputs.target(Stage::Slat).cond,
            },
            attn: &attn,
            alpha: alpha_slat,
            prev,
            endpoints: self.refs.as_ref().map(|r| r.endpoints(Stage::Slat)),
        };
        let slat = sample_slat(self.model, &structure, &rows, &req).map_err(|e| e.at_frame(n))?;
        let slat_ms = ms(t0);

        let keep =
            |stage: Stage, cache: StageCache| self.cfg.tfsa_at(stage, n + 1).then_some(cache);
        let cache = FrameCache {
            ss: keep(Stage::Ss, ss.cache),
            slat: keep(Stage::Slat, slat.cache),
        };
        self.carry = Some(Carry {
            frame: n,
            structure: structure.clone(),
            cache,
        });
        self.next += 1;
        Ok(Some(FrameRecord {
            index: n,
            alpha,
            alpha_ss,
            alpha_slat,
            structure,
            slat: slat.slat,
            rotation,
            timings: Timings {
                ss_ms,
                oc_ms,
                slat_ms,
            },
        }))
    }

    /// Runs all remaining frames.
    pub fn run(mut self) -> Result<MorphSequence> {
        let mut seq = MorphSequence::default();
        while let Some(f) = self.step()? {
            seq.frames.push(f);
        }
        Ok(seq)
    }
}

fn ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

/// Morphs `src` into `tgt`.
pub fn morph(
    model: &ToyFlowModel,
    src: &MorphObject,
    tgt: &MorphObject,
    cfg: &MorphConfig,
) -> Result<MorphSequence> {
    MorphRunner::new(
        model,
        MorphInputs::pair(src.clone(), tgt.clone()),
        cfg.clone(),
    )?
    .run()
}

/// Morphs only one stage: the frozen stage keeps α pinned at 0 or 1.
pub fn morph_disentangled(
    model: &ToyFlowModel,
    src: &MorphObject,
    tgt: &MorphObject,
    cfg: &MorphConfig,
) -> Result<MorphSequence> {
    if !cfg.ss_alpha.is_frozen() && !cfg.slat_alpha.is_frozen() {
        return Err(Error::invalid(
            "disentangled morphing needs one stage with a frozen alpha",
        ));
    }
    morph(model, src, tgt, cfg)
}

/// Keeps the source structure and moves the latents toward `style`.
pub fn style_transfer(
    model: &ToyFlowModel,
    src: &MorphObject,
    style: &MorphObject,
    cfg: &MorphConfig,
) -> Result<MorphSequence> {
    let cfg = MorphConfig {
        ss_alpha: AlphaMode::Frozen0,
        slat_alpha: AlphaMode::Schedule,
        ..cfg.clone()
    };
    let inputs = MorphInputs {
        source: src.clone(),
        ss_target: src.clone(),
        slat_target: style.clone(),
    };
    MorphRunner::new(model, inputs, cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_modes() {
        let a = BlendWeight::new(0.3).unwrap();
        assert_eq!(AlphaMode::Schedule.apply(a), a);
        assert_eq!(AlphaMode::Frozen0.apply(a), BlendWeight::ZERO);
        assert_eq!(AlphaMode::Frozen1.apply(a), BlendWeight::ONE);
        let json = serde_json::to_string(&AlphaMode::Frozen1).unwrap();
        assert_eq!(json, "\"frozen_1\"");
    }

    #[test]
    fn both_frozen_is_rejected() {
        let cfg = MorphConfig {
            ss_alpha: AlphaMode::Frozen0,
            slat_alpha: AlphaMode::Frozen1,
            ..MorphConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::NothingMorphs)));
    }

    #[test]
    fn temporal_fusion_starts_at_frame_one() {
        let cfg = MorphConfig::default();
        assert!(!cfg.tfsa_at(Stage::Ss, 0));
        assert!(cfg.tfsa_at(Stage::Slat, 1));
        let frozen = MorphConfig {
            ss_alpha: AlphaMode::Frozen0,
            ..cfg
        };
        assert!(!frozen.tfsa_at(Stage::Ss, 3));
        assert!(frozen.tfsa_at(Stage::Slat, 3));
    }
}
