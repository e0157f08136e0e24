//! The TOML morph configuration file.
//!
//! ```toml
//! source = "assets/bar.ctok"
//! target = "assets/cross.ctok"
//! steps = 49
//! beta = 0.2
//! seed = 7
//! orientation_correction = true
//! ss_alpha = "schedule"      # schedule | frozen_0 | frozen_1
//! slat_alpha = "schedule"
//!
//! [attention]
//! cross = "mca"              # vanilla_src | vanilla_tgt | kv_fused | mca
//! self = "tfsa"              # vanilla | kv_fused | tfsa
//! tfsa_ss = true
//! tfsa_slat = true
//! cross_layers = [true, true, true, true]
//!
//! [model]
//! resolution = 16
//! ```
//!
//! Object paths point to `.ctok` files and are resolved relative to the
//! configuration file. `ss_target` and `slat_target` override `target` per
//! stage; `style` replaces the target for style transfer.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attention::BlendWeight;
use crate::error::{Error, Result};
use crate::flow::processor::DEFAULT_BETA;
use crate::flow::{AttentionConfig, ConditionTokens, CrossMode, ModelConfig, SelfMode};
use crate::pipeline::{
    AlphaMode, MorphConfig, MorphInputs, MorphObject, DEFAULT_SEED, DEFAULT_STEPS,
};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionSection {
    #[serde(default = "default_cross")]
    cross: CrossMode,
    #[serde(default = "default_self", rename = "self")]
    self_mode: SelfMode,
    #[serde(default = "yes")]
    tfsa_ss: bool,
    #[serde(default = "yes")]
    tfsa_slat: bool,
    #[serde(default)]
    cross_layers: Option<Vec<bool>>,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self {
            cross: default_cross(),
            self_mode: default_self(),
            tfsa_ss: true,
            tfsa_slat: true,
            cross_layers: None,
        }
    }
}

fn default_cross() -> CrossMode {
    CrossMode::Mca
}

fn default_self() -> SelfMode {
    SelfMode::Tfsa
}

fn yes() -> bool {
    true
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_beta() -> BlendWeight {
    BlendWeight::new(DEFAULT_BETA).expect("default beta in range")
}

/// Raw contents of a morph configuration file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphFile {
    pub source: PathBuf,
    #[serde(default)]
    pub target: Option<PathBuf>,
    #[serde(default)]
    pub ss_target: Option<PathBuf>,
    #[serde(default)]
    pub slat_target: Option<PathBuf>,
    #[serde(default)]
    pub style: Option<PathBuf>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta")]
    pub beta: BlendWeight,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "yes")]
    pub orientation_correction: bool,
    #[serde(default)]
    pub ss_alpha: AlphaMode,
    #[serde(default)]
    pub slat_alpha: AlphaMode,
    #[serde(default)]
    attention: AttentionSection,
    #[serde(default)]
    pub model: ModelConfig,
}

/// A configuration file resolved into objects and a run configuration.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub inputs: MorphInputs,
    pub config: MorphConfig,
    /// Whether the run is a style transfer.
    pub style: bool,
}

impl MorphFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Resolves object paths against `base` and loads the condition tokens.
    /// `seed_override` wins over the file's seed.
    pub fn resolve(&self, base: &Path, seed_override: Option<u64>) -> Result<LoadedConfig> {
        let load = |p: &PathBuf| -> Result<MorphObject> {
            let path = base.join(p);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let cond = ConditionTokens::from_bytes(&bytes)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "object".into());
            Ok(MorphObject::new(name, cond))
        };
        let source = load(&self.source)?;
        let (inputs, style) = match &self.style {
            Some(style) => {
                if self.target.is_some() || self.ss_target.is_some() || self.slat_target.is_some() {
                    return Err(Error::invalid(
                        "`style` cannot be combined with target keys",
                    ));
                }
                let style = load(style)?;
                let inputs = MorphInputs {
                    ss_target: source.clone(),
                    slat_target: style,
                    source,
                };
                (inputs, true)
            }
            None => {
                let target = self.target.as_ref().map(load).transpose()?;
                let pick = |key: &Option<PathBuf>, name: &str| -> Result<MorphObject> {
                    match (key, &target) {
                        (Some(p), _) => load(p),
                        (None, Some(t)) => Ok(t.clone()),
                        (None, None) => {
                            Err(Error::invalid(format!("missing `target` (or `{name}`)")))
                        }
                    }
                };
                let inputs = MorphInputs {
                    ss_target: pick(&self.ss_target, "ss_target")?,
                    slat_target: pick(&self.slat_target, "slat_target")?,
                    source,
                };
                (inputs, false)
            }
        };
        let a = &self.attention;
        let config = MorphConfig {
            steps: self.steps,
            attn: AttentionConfig {
                cross_mode: a.cross,
                self_mode: a.self_mode,
                beta: self.beta,
                tfsa_ss: a.tfsa_ss,
                tfsa_slat: a.tfsa_slat,
                cross_layers: a.cross_layers.clone(),
            },
            orientation_correction: self.orientation_correction,
            ss_alpha: if style {
                AlphaMode::Frozen0
            } else {
                self.ss_alpha
            },
            slat_alpha: self.slat_alpha,
            seed: seed_override.or(self.seed).unwrap_or(DEFAULT_SEED),
            model: self.model.clone(),
        };
        config.validate()?;
        Ok(LoadedConfig {
            inputs,
            config,
            style,
        })
    }
}
