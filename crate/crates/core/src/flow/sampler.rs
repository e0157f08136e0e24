//! Euler integration of the two stages.
//!
//! Time runs from `t = 0` (noise) to `t = 1` (data) in `T` uniform steps. The
//! model predicts the clean sample `x̂₁`, converted to the rectified-flow
//! velocity `(x̂₁ − x) / (1 − t)`.

use crate::attention::BlendWeight;
use crate::error::{Error, Result};
use crate::flow::cache::{KvPair, Stage, StageCache};
use crate::flow::model::ToyFlowModel;
use crate::flow::processor::{AttentionConfig, AttentionProcessor, EndpointCaches, MorphProcessor};
use crate::flow::{ConditionTokens, Slat};
use crate::geometry::{voxel_center, SparseStructure};
use crate::tensor::TokenMatrix;

/// Source and target conditions of a stage.
#[derive(Clone, Copy, Debug)]
pub struct CondPair<'a> {
    pub src: &'a ConditionTokens,
    pub tgt: &'a ConditionTokens,
}

/// Everything a stage needs besides its initial noise.
#[derive(Clone, Copy, Debug)]
pub struct StageRequest<'a> {
    pub conds: CondPair<'a>,
    pub attn: &'a AttentionConfig,
    pub alpha: BlendWeight,
    /// Previous frame's cache for temporal fusion.
    pub prev: Option<&'a StageCache>,
    /// Source-only and target-only caches for KV-fused self-attention.
    pub endpoints: Option<EndpointCaches<'a>>,
}

#[derive(Clone, Debug)]
pub struct SsSample {
    pub structure: SparseStructure,
    /// Final dense latent, `G³ × ss_channels`, cells in lexicographic order.
    pub field: TokenMatrix,
    pub cache: StageCache,
}

#[derive(Clone, Debug)]
pub struct SlatSample {
    pub slat: Slat,
    pub cache: StageCache,
}

fn integrate(
    model: &ToyFlowModel,
    stage: Stage,
    init: &TokenMatrix,
    base: &TokenMatrix,
    conds: CondPair<'_>,
    processor: &mut dyn AttentionProcessor,
) -> Result<TokenMatrix> {
    let src: Vec<KvPair> = model.condition_kv(stage, conds.src)?;
    let tgt: Vec<KvPair> = model.condition_kv(stage, conds.tgt)?;
    let steps = model.config().timesteps;
    let mut x = init.clone();
    for step in 0..steps {
        let t = step as f64 / steps as f64;
        let pred = model.predict(stage, step, t, &x, base, &src, &tgt, processor)?;
        // Δt / (1 − t) with Δt = 1/T.
        let f = 1.0 / (steps - step) as f64;
        let next: Vec<f64> = x
            .data()
            .iter()
            .zip(pred.data())
            .map(|(&xi, &pi)| xi + f * (pi - xi))
            .collect();
        x = TokenMatrix::new(x.rows(), x.cols(), next)?;
    }
    Ok(x)
}

/// Normalized centers of the SS patch tokens, in lexicographic order.
pub fn ss_token_positions(model: &ToyFlowModel) -> Vec<[f64; 3]> {
    let n = model.config().ss_grid();
    let mut out = Vec::with_capacity(model.config().ss_tokens());
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push(voxel_center(&[i, j, k], n));
            }
        }
    }
    out
}

fn ss_codes(model: &ToyFlowModel) -> Result<TokenMatrix> {
    let n = model.config().ss_grid();
    let mut rows = Vec::with_capacity(model.config().ss_tokens());
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                rows.push(model.voxel_code(&[i, j, k], n)?);
            }
        }
    }
    TokenMatrix::from_rows(&rows)
}

/// Cell-major `G³ × ch` field to patch tokens `(G/p)³ × (p³·ch)`.
fn patchify(model: &ToyFlowModel, field: &TokenMatrix) -> Result<TokenMatrix> {
    let cfg = model.config();
    let (g, p, n) = (
        usize::from(cfg.resolution),
        usize::from(cfg.patch),
        usize::from(cfg.ss_grid()),
    );
    let ch = cfg.ss_channels;
    if field.rows() != g * g * g || field.cols() != ch {
        return Err(Error::Shape {
            what: "dense SS latent (cells x channels)",
            expected: g * g * g * ch,
            found: field.rows() * field.cols(),
        });
    }
    let mut out = Vec::with_capacity(field.data().len());
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for dx in 0..p {
                    for dy in 0..p {
                        for dz in 0..p {
                            let cell = ((i * p + dx) * g + (j * p + dy)) * g + (k * p + dz);
                            out.extend_from_slice(field.row(cell));
                        }
                    }
                }
            }
        }
    }
    TokenMatrix::new(n * n * n, p * p * p * ch, out)
}

fn unpatchify(model: &ToyFlowModel, tokens: &TokenMatrix) -> Result<TokenMatrix> {
    let cfg = model.config();
    let (g, p, n) = (
        usize::from(cfg.resolution),
        usize::from(cfg.patch),
        usize::from(cfg.ss_grid()),
    );
    let ch = cfg.ss_channels;
    let mut out = vec![0.0; g * g * g * ch];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let row = tokens.row((i * n + j) * n + k);
                for dx in 0..p {
                    for dy in 0..p {
                        for dz in 0..p {
                            let cell = ((i * p + dx) * g + (j * p + dy)) * g + (k * p + dz);
                            let off = ((dx * p + dy) * p + dz) * ch;
                            out[cell * ch..(cell + 1) * ch].copy_from_slice(&row[off..off + ch]);
                        }
                    }
                }
            }
        }
    }
    TokenMatrix::new(g * g * g, ch, out)
}

/// Active voxels of a final SS field: cells whose occupancy logit
/// (channel 0) is positive.
pub fn occupancy(model: &ToyFlowModel, field: &TokenMatrix) -> Result<SparseStructure> {
    let g = model.config().resolution;
    let gu = usize::from(g);
    let mut voxels = Vec::new();
    for cell in 0..field.rows() {
        if field.get(cell, 0) > 0.0 {
            let x = cell / (gu * gu);
            let y = (cell / gu) % gu;
            let z = cell % gu;
            voxels.push([x as u16, y as u16, z as u16]);
        }
    }
    if voxels.is_empty() {
        return Err(Error::DegenerateStructure);
    }
    SparseStructure::new(g, voxels)
}

/// Runs the SS stage with a caller-supplied processor and returns the final
/// dense field.
pub fn sample_ss_with(
    model: &ToyFlowModel,
    f_ss_init: &TokenMatrix,
    conds: CondPair<'_>,
    processor: &mut dyn AttentionProcessor,
) -> Result<TokenMatrix> {
    let x0 = patchify(model, f_ss_init)?;
    let base = model.token_base(Stage::Ss, &ss_token_positions(model), &ss_codes(model)?)?;
    let x1 = integrate(model, Stage::Ss, &x0, &base, conds, processor)?;
    unpatchify(model, &x1)
}

/// Sparse-structure stage: dense noise to an occupied voxel set.
pub fn sample_ss(
    model: &ToyFlowModel,
    f_ss_init: &TokenMatrix,
    req: &StageRequest<'_>,
) -> Result<SsSample> {
    let cfg = model.config();
    let mut processor = MorphProcessor::new(
        cfg.heads,
        Stage::Ss,
        cfg.layers,
        cfg.timesteps,
        ss_token_positions(model),
        req.attn,
        req.alpha,
        req.prev,
        req.endpoints,
    )?;
    let field = sample_ss_with(model, f_ss_init, req.conds, &mut processor)?;
    let structure = occupancy(model, &field)?;
    Ok(SsSample {
        structure,
        field,
        cache: processor.into_cache(),
    })
}

fn slat_positions(structure: &SparseStructure) -> Vec<[f64; 3]> {
    structure
        .voxels()
        .iter()
        .map(|v| voxel_center(v, structure.resolution()))
        .collect()
}

/// Runs the SLAT stage with a caller-supplied processor and returns the final
/// `L × C` latents.
pub fn sample_slat_with(
    model: &ToyFlowModel,
    structure: &SparseStructure,
    f_slat_init: &TokenMatrix,
    conds: CondPair<'_>,
    processor: &mut dyn AttentionProcessor,
) -> Result<TokenMatrix> {
    if structure.is_empty() {
        return Err(Error::DegenerateStructure);
    }
    if f_slat_init.rows() != structure.len() || f_slat_init.cols() != model.config().latent_channels
    {
        return Err(Error::Shape {
            what: "SLAT initial latent rows (one per active voxel)",
            expected: structure.len(),
            found: f_slat_init.rows(),
        });
    }
    if structure.resolution() != model.config().resolution {
        return Err(Error::invalid(format!(
            "structure resolution {} differs from model resolution {}",
            structure.resolution(),
            model.config().resolution
        )));
    }
    let codes = structure
        .voxels()
        .iter()
        .map(|v| model.voxel_code(v, structure.resolution()))
        .collect::<Result<Vec<_>>>()?;
    let base = model.token_base(
        Stage::Slat,
        &slat_positions(structure),
        &TokenMatrix::from_rows(&codes)?,
    )?;
    integrate(model, Stage::Slat, f_slat_init, &base, conds, processor)
}

/// Structured-latent stage: per-voxel noise to per-voxel latents on `structure`.
pub fn sample_slat(
    model: &ToyFlowModel,
    structure: &SparseStructure,
    f_slat_init: &TokenMatrix,
    req: &StageRequest<'_>,
) -> Result<SlatSample> {
    let cfg = model.config();
    let mut processor = MorphProcessor::new(
        cfg.heads,
        Stage::Slat,
        cfg.layers,
        cfg.timesteps,
        slat_positions(structure),
        req.attn,
        req.alpha,
        req.prev,
        req.endpoints,
    )?;
    let latents = sample_slat_with(model, structure, f_slat_init, req.conds, &mut processor)?;
    let slat = Slat::from_f64(structure.clone(), &latents)?;
    Ok(SlatSample {
        slat,
        cache: processor.into_cache(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::ModelConfig;

    #[test]
    fn patchify_round_trip() {
        let model = ToyFlowModel::new(ModelConfig {
            resolution: 4,
            ss_channels: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let data: Vec<f64> = (0..64 * 2).map(|i| i as f64).collect();
        let field = TokenMatrix::new(64, 2, data).unwrap();
        let tokens = patchify(&model, &field).unwrap();
        assert_eq!((tokens.rows(), tokens.cols()), (8, 16));
        // First token holds cells (0,0,0),(0,0,1),(0,1,0),... of the first patch.
        assert_eq!(&tokens.row(0)[..6], &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0]);
        assert_eq!(unpatchify(&model, &tokens).unwrap(), field);
    }

    #[test]
    fn empty_field_is_degenerate() {
        let model = ToyFlowModel::new(ModelConfig {
            resolution: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let field = TokenMatrix::new(64, 1, vec![-1.0; 64]).unwrap();
        let err = occupancy(&model, &field).unwrap_err();
        assert_eq!(err.to_string(), "degenerate structure");
        let mut data = vec![-1.0; 64];
        data[4 + 3] = 0.5;
        let s = occupancy(&model, &TokenMatrix::new(64, 1, data).unwrap()).unwrap();
        assert_eq!(s.voxels(), &[[0, 1, 3]]);
    }
}
