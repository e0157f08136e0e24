//! The toy two-stage flow transformer.
//!
//! Weights are drawn from a seeded ChaCha stream on top of a fixed geometric
//! prior. Hidden states share one channel layout across both stages:
//!
//! | channels    | content                                         |
//! |-------------|-------------------------------------------------|
//! | `0..3`      | normalized token position `p`                   |
//! | `3`         | constant 1                                      |
//! | `4`         | `‖p‖²`                                          |
//! | `5`         | presence (occupancy evidence)                   |
//! | `6..9`      | RGB evidence                                    |
//! | `9..width`  | free features: noise, timestep, sinusoidal code |
//!
//! Residual branches never write the first five channels. Head 0 of every
//! attention layer is a distance kernel: its query `s·[p, 1, ‖p‖²]` against
//! the key `[2p', −‖p'‖², 0]` yields logits `s·(‖p‖² − ‖p − p'‖²)`, so the
//! softmax weights are a Gaussian in the token distance. Cross-attention
//! appends a null token whose key carries a radius; presence accumulates
//! positively near condition points and negatively elsewhere. Remaining heads
//! are random.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::cache::{KvPair, Slot, Stage};
use crate::flow::processor::AttentionProcessor;
use crate::flow::{ConditionTokens, Slat};
use crate::geometry::{ColoredVoxelGrid, Voxel};
use crate::tensor::TokenMatrix;

pub(crate) mod layout {
    pub const POS: usize = 0;
    pub const ONE: usize = 3;
    pub const NORM2: usize = 4;
    pub const PRESENCE: usize = 5;
    pub const RGB: usize = 6;
    pub const FREE: usize = 9;
    /// Channels carried through every layer unchanged.
    pub const GEOMETRY: usize = 5;
    /// Channels read by head 0 value projections.
    pub const CONTENT: usize = 4;

    // Condition token channels.
    pub const COND_NULL: usize = 3;
    pub const COND_NORM2: usize = 4;
    pub const COND_PRESENCE: usize = 5;
    pub const COND_RGB: usize = 6;
    pub const COND_FEATURES: usize = 9;
}

use layout::*;

/// Architecture and seed of the toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Grid cells per axis of the sparse structure.
    pub resolution: u16,
    /// Patch edge of the SS-stage tokenizer.
    pub patch: u16,
    /// Channels of the dense SS latent. Channel 0 is the occupancy logit.
    pub ss_channels: usize,
    /// Transformer width, shared by both stages.
    pub width: usize,
    /// Channels `C` of each structured latent.
    pub latent_channels: usize,
    pub layers: usize,
    pub heads: usize,
    /// Euler steps `T` per stage.
    pub timesteps: usize,
    pub cond_tokens: usize,
    pub cond_dim: usize,
    /// Width of the sinusoidal positional code.
    pub pe_dim: usize,
    pub weight_seed: u64,
}

pub const DEFAULT_WEIGHT_SEED: u64 = 20_250_101;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            patch: 2,
            ss_channels: 1,
            width: 32,
            latent_channels: 8,
            layers: 4,
            heads: 2,
            timesteps: 16,
            cond_tokens: 16,
            cond_dim: 32,
            pe_dim: 48,
            weight_seed: DEFAULT_WEIGHT_SEED,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.resolution == 0 || self.patch == 0 || !self.resolution.is_multiple_of(self.patch) {
            return fail(format!(
                "resolution {} must be a positive multiple of patch {}",
                self.resolution, self.patch
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.width / self.heads < GEOMETRY || self.width <= FREE {
            return fail(format!(
                "width {} too small for the channel layout",
                self.width
            ));
        }
        if self.cond_dim <= COND_FEATURES {
            return fail(format!("cond_dim must exceed {COND_FEATURES}"));
        }
        if self.latent_channels < 3 || self.ss_channels == 0 {
            return fail("need at least 3 latent channels and 1 SS channel".into());
        }
        if self.layers == 0 || self.timesteps == 0 || self.cond_tokens == 0 {
            return fail("layers, timesteps and cond_tokens must be positive".into());
        }
        if self.pe_dim == 0 || !self.pe_dim.is_multiple_of(2) {
            return fail(format!("pe_dim must be even, got {}", self.pe_dim));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Patch-grid cells per axis of the SS stage.
    pub fn ss_grid(&self) -> u16 {
        self.resolution / self.patch
    }

    pub fn ss_tokens(&self) -> usize {
        usize::from(self.ss_grid()).pow(3)
    }

    pub fn cells(&self) -> usize {
        usize::from(self.resolution).pow(3)
    }

    pub fn patch_cells(&self) -> usize {
        usize::from(self.patch).pow(3)
    }
}

/// Geometric prior constants of one stage, in voxel units.
#[derive(Clone, Copy, Debug)]
struct StagePrior {
    cross_radius: f64,
    cross_sharpness: f64,
    self_sharpness: f64,
}

const SS_PRIOR: StagePrior = StagePrior {
    cross_radius: 1.7,
    cross_sharpness: 2.0,
    self_sharpness: 0.5,
};

const SLAT_PRIOR: StagePrior = StagePrior {
    cross_radius: 3.0,
    cross_sharpness: 1.0,
    self_sharpness: 0.5,
};

const CROSS_GAIN: f64 = 1.0;
const SELF_GAIN: f64 = 0.5;

/// Total gain of a content signal injected by every cross-attention layer and
/// re-amplified by the self-attention layers that follow.
fn accumulated_gain(layers: usize) -> f64 {
    let mut a = 0.0;
    for _ in 0..layers {
        a += SELF_GAIN * a;
        a += CROSS_GAIN;
    }
    a
}

#[derive(Clone, Debug)]
struct Linear {
    w: TokenMatrix,
    b: Vec<f64>,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: TokenMatrix::zeros(inp, out),
            b: vec![0.0; out],
        }
    }

    fn apply(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        let mut y = x.matmul(&self.w)?;
        if self.b.iter().any(|&b| b != 0.0) {
            for i in 0..y.rows() {
                for (o, b) in y.row_mut(i).iter_mut().zip(&self.b) {
                    *o += b;
                }
            }
        }
        Ok(y)
    }

    /// Fills `w[rows, cols]` with `N(0, std²)` draws.
    fn randomize(
        &mut self,
        rng: &mut ChaCha8Rng,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        std: f64,
    ) {
        for r in rows {
            for c in cols.clone() {
                let z: f64 = StandardNormal.sample(rng);
                self.w.set(r, c, z * std);
            }
        }
    }
}

#[derive(Clone, Debug)]
struct LayerWeights {
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_o: Linear,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_o: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

#[derive(Clone, Debug)]
struct StageWeights {
    input: Linear,
    pe: Linear,
    time: Linear,
    layers: Vec<LayerWeights>,
    readout: Linear,
}

/// Deterministic toy two-stage flow transformer.
#[derive(Clone, Debug)]
pub struct ToyFlowModel {
    config: ModelConfig,
    ss: StageWeights,
    slat: StageWeights,
    decoder: Linear,
    null_token: TokenMatrix,
}

fn distance_query(lin: &mut Linear, scale: f64) {
    for c in 0..3 {
        lin.w.set(POS + c, c, scale);
    }
    lin.w.set(ONE, 3, scale);
    lin.w.set(NORM2, 4, scale);
}

impl ToyFlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let ss_in = config.ss_channels * config.patch_cells();
        let ss = Self::stage(&config, &mut rng, SS_PRIOR, ss_in, ss_in, Stage::Ss);
        let slat = Self::stage(
            &config,
            &mut rng,
            SLAT_PRIOR,
            config.latent_channels,
            config.latent_channels,
            Stage::Slat,
        );
        let mut decoder = Linear::zeros(config.latent_channels, 3);
        decoder.randomize(&mut rng, 0..config.latent_channels, 0..3, 0.05);
        for c in 0..3 {
            let w = decoder.w.get(c, c);
            decoder.w.set(c, c, 1.0 + w);
        }
        let bias = Uniform::new(-0.02, 0.02).expect("valid range");
        decoder.b = (0..3).map(|_| bias.sample(&mut rng)).collect();

        let mut null = vec![0.0; config.cond_dim];
        null[COND_NULL] = 1.0;
        null[COND_PRESENCE] = -1.0;
        let null_token = TokenMatrix::new(1, config.cond_dim, null)?;
        Ok(Self {
            config,
            ss,
            slat,
            decoder,
            null_token,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn stage(
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
        prior: StagePrior,
        in_dim: usize,
        out_dim: usize,
        stage: Stage,
    ) -> StageWeights {
        let w = cfg.width;
        let dh = cfg.head_dim();
        let g2 = f64::from(cfg.resolution).powi(2);
        let sqrt_dh = (dh as f64).sqrt();
        let free = FREE..w;
        let content = PRESENCE..w;

        let mut input = Linear::zeros(in_dim, w);
        input.randomize(rng, 0..in_dim, free.clone(), 0.5 / (in_dim as f64).sqrt());
        let mut pe = Linear::zeros(cfg.pe_dim, w);
        pe.randomize(
            rng,
            0..cfg.pe_dim,
            free.clone(),
            0.3 / (cfg.pe_dim as f64).sqrt(),
        );
        let mut time = Linear::zeros(2, w);
        time.randomize(rng, 0..2, free.clone(), 0.3);

        let random_heads = dh..w;
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut self_q = Linear::zeros(w, w);
            distance_query(&mut self_q, prior.self_sharpness * g2 * sqrt_dh);
            self_q.randomize(
                rng,
                content.clone(),
                random_heads.clone(),
                1.0 / (w as f64).sqrt(),
            );
            let mut self_k = Linear::zeros(w, w);
            for c in 0..3 {
                self_k.w.set(POS + c, c, 2.0);
            }
            self_k.w.set(NORM2, 3, -1.0);
            self_k.randomize(
                rng,
                content.clone(),
                random_heads.clone(),
                1.0 / (w as f64).sqrt(),
            );
            let mut self_v = Linear::zeros(w, w);
            for c in 0..CONTENT {
                self_v.w.set(PRESENCE + c, c, 1.0);
            }
            self_v.randomize(
                rng,
                content.clone(),
                random_heads.clone(),
                1.0 / (w as f64).sqrt(),
            );
            let mut self_o = Linear::zeros(w, w);
            for c in 0..CONTENT {
                self_o.w.set(c, PRESENCE + c, SELF_GAIN);
            }
            self_o.randomize(
                rng,
                random_heads.clone(),
                free.clone(),
                0.3 / (dh as f64).sqrt(),
            );

            let r = prior.cross_radius / f64::from(cfg.resolution);
            let mut cross_q = Linear::zeros(w, w);
            distance_query(&mut cross_q, prior.cross_sharpness * g2 * sqrt_dh);
            cross_q.randomize(
                rng,
                content.clone(),
                random_heads.clone(),
                1.0 / (w as f64).sqrt(),
            );
            let mut cross_k = Linear::zeros(cfg.cond_dim, w);
            for c in 0..3 {
                cross_k.w.set(c, c, 2.0);
            }
            cross_k.w.set(COND_NORM2, 3, -1.0);
            cross_k.w.set(COND_NULL, 3, -r * r);
            cross_k.w.set(COND_NULL, 4, 1.0);
            let cond_rest = COND_PRESENCE..cfg.cond_dim;
            cross_k.randomize(
                rng,
                cond_rest.clone(),
                random_heads.clone(),
                1.0 / (cfg.cond_dim as f64).sqrt(),
            );
            let mut cross_v = Linear::zeros(cfg.cond_dim, w);
            for c in 0..CONTENT {
                cross_v.w.set(COND_PRESENCE + c, c, 1.0);
            }
            cross_v.randomize(
                rng,
                cond_rest,
                random_heads.clone(),
                1.0 / (cfg.cond_dim as f64).sqrt(),
            );
            let mut cross_o = Linear::zeros(w, w);
            for c in 0..CONTENT {
                cross_o.w.set(c, PRESENCE + c, CROSS_GAIN);
            }
            cross_o.randomize(
                rng,
                random_heads.clone(),
                free.clone(),
                0.3 / (dh as f64).sqrt(),
            );

            let hidden = 2 * w;
            let mut mlp_in = Linear::zeros(w, hidden);
            mlp_in.randomize(rng, content.clone(), 0..hidden, 1.0 / (w as f64).sqrt());
            let mut mlp_out = Linear::zeros(hidden, w);
            mlp_out.randomize(rng, 0..hidden, free.clone(), 0.3 / (hidden as f64).sqrt());

            layers.push(LayerWeights {
                self_q,
                self_k,
                self_v,
                self_o,
                cross_q,
                cross_k,
                cross_v,
                cross_o,
                mlp_in,
                mlp_out,
            });
        }

        let mut readout = Linear::zeros(w, out_dim);
        let nfree = (w - FREE) as f64;
        match stage {
            Stage::Ss => {
                readout.randomize(rng, free.clone(), 0..out_dim, 0.1 / nfree.sqrt());
                for c in (0..out_dim).step_by(cfg.ss_channels) {
                    readout.w.set(PRESENCE, c, 1.0);
                }
            }
            Stage::Slat => {
                readout.randomize(rng, free.clone(), 0..3, 0.05 / nfree.sqrt());
                readout.randomize(rng, free, 3..out_dim, 0.5 / nfree.sqrt());
                let g = 1.0 / accumulated_gain(cfg.layers);
                for c in 0..3 {
                    readout.w.set(RGB + c, c, g);
                }
            }
        }
        StageWeights {
            input,
            pe,
            time,
            layers,
            readout,
        }
    }

    fn weights(&self, stage: Stage) -> &StageWeights {
        match stage {
            Stage::Ss => &self.ss,
            Stage::Slat => &self.slat,
        }
    }

    pub(crate) fn check_conditions(&self, cond: &ConditionTokens) -> Result<()> {
        let m = cond.matrix();
        if m.cols() != self.config.cond_dim {
            return Err(Error::Shape {
                what: "condition token dimension",
                expected: self.config.cond_dim,
                found: m.cols(),
            });
        }
        if m.rows() != self.config.cond_tokens {
            return Err(Error::Shape {
                what: "condition token count",
                expected: self.config.cond_tokens,
                found: m.rows(),
            });
        }
        Ok(())
    }

    /// Per-layer cross-attention keys and values of one condition, with the
    /// null token appended.
    pub(crate) fn condition_kv(&self, stage: Stage, cond: &ConditionTokens) -> Result<Vec<KvPair>> {
        self.check_conditions(cond)?;
        let tokens = TokenMatrix::vconcat(&[cond.matrix(), &self.null_token])?;
        self.weights(stage)
            .layers
            .iter()
            .map(|l| {
                Ok(KvPair {
                    k: l.cross_k.apply(&tokens)?,
                    v: l.cross_v.apply(&tokens)?,
                })
            })
            .collect()
    }

    /// Step-independent part of the token embedding: geometry channels plus
    /// the projected sinusoidal code.
    pub(crate) fn token_base(
        &self,
        stage: Stage,
        positions: &[[f64; 3]],
        codes: &TokenMatrix,
    ) -> Result<TokenMatrix> {
        let mut base = self.weights(stage).pe.apply(codes)?;
        for (i, p) in positions.iter().enumerate() {
            let row = base.row_mut(i);
            row[POS..POS + 3].copy_from_slice(p);
            row[ONE] = 1.0;
            row[NORM2] = p.iter().map(|c| c * c).sum();
        }
        Ok(base)
    }

    /// Clean-sample prediction for the current noisy tokens.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn predict(
        &self,
        stage: Stage,
        step: usize,
        t: f64,
        x: &TokenMatrix,
        base: &TokenMatrix,
        src: &[KvPair],
        tgt: &[KvPair],
        processor: &mut dyn AttentionProcessor,
    ) -> Result<TokenMatrix> {
        let sw = self.weights(stage);
        let mut h = sw.input.apply(x)?;
        h.add_assign(base)?;
        let half_pi = std::f64::consts::FRAC_PI_2;
        let temb = sw.time.apply(&TokenMatrix::new(
            1,
            2,
            vec![(half_pi * t).sin(), (half_pi * t).cos()],
        )?)?;
        for i in 0..h.rows() {
            for (o, e) in h.row_mut(i).iter_mut().zip(temb.row(0)) {
                *o += e;
            }
        }
        for (layer, lw) in sw.layers.iter().enumerate() {
            let slot = Slot { stage, layer, step };
            let q = lw.self_q.apply(&h)?;
            let k = lw.self_k.apply(&h)?;
            let v = lw.self_v.apply(&h)?;
            let a = processor.self_attention(slot, &q, &k, &v)?;
            h.add_assign(&lw.self_o.apply(&a)?)?;

            let q = lw.cross_q.apply(&h)?;
            let c = processor.cross_attention(slot, &q, &src[layer], &tgt[layer])?;
            h.add_assign(&lw.cross_o.apply(&c)?)?;

            let m = lw.mlp_in.apply(&h)?.map(gelu);
            h.add_assign(&lw.mlp_out.apply(&m)?)?;
        }
        sw.readout.apply(&h)
    }

    /// Maps structured latents to per-voxel colors with the fixed decoder.
    pub fn decode_slat(&self, slat: &Slat) -> Result<ColoredVoxelGrid> {
        let c = slat.channels();
        if c != self.config.latent_channels {
            return Err(Error::Shape {
                what: "latent channels",
                expected: self.config.latent_channels,
                found: c,
            });
        }
        let colors = (0..slat.structure().len())
            .map(|i| {
                let z = slat.latent(i);
                let mut rgb = [0.0; 3];
                for (ch, out) in rgb.iter_mut().enumerate() {
                    let mut s = self.decoder.b[ch];
                    for (k, &zk) in z.iter().enumerate() {
                        s += f64::from(zk) * self.decoder.w.get(k, ch);
                    }
                    *out = s.clamp(0.0, 1.0);
                }
                rgb
            })
            .collect();
        ColoredVoxelGrid::new(slat.structure().clone(), colors)
    }

    /// Color a zero latent decodes to.
    pub fn decoder_bias_color(&self) -> [f64; 3] {
        [0, 1, 2].map(|c| self.decoder.b[c].clamp(0.0, 1.0))
    }

    pub(crate) fn voxel_code(&self, v: &Voxel, resolution: u16) -> Result<Vec<f64>> {
        crate::geometry::positional_encoding(v, self.config.pe_dim, resolution)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}
