use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioner::{BackboneConfig, CausalConditioner, MaskedConditioner};
use crate::cvae_head::{CvaeConfig, CvaeHead};
use crate::diffcore::{checkpoint, ParamStore, RngStream};
use crate::error::Result;
use crate::shortcut_head::{HeadConfig, Objective, ShortcutHead};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    #[default]
    Masked,
    Causal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    #[default]
    Shortcut,
    /// Same network as `Shortcut`, trained with flow matching only.
    #[serde(alias = "fm")]
    FlowMatchingOnly,
    Cvae,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Masked(MaskedConditioner),
    Causal(CausalConditioner),
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        match self {
            Backbone::Masked(m) => m.config(),
            Backbone::Causal(c) => c.config(),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Masked(_) => BackboneKind::Masked,
            Backbone::Causal(_) => BackboneKind::Causal,
        }
    }
}

#[derive(Debug)]
pub enum Head {
    Shortcut { head: ShortcutHead, objective: Objective },
    Cvae(CvaeHead),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Shortcut { objective: Objective::Shortcut, .. } => HeadKind::Shortcut,
            Head::Shortcut { .. } => HeadKind::FlowMatchingOnly,
            Head::Cvae(_) => HeadKind::Cvae,
        }
    }
}

/// Backbone plus head. Parameter values are kept apart in [`ModelParams`].
#[derive(Debug)]
pub struct FarModel {
    pub backbone: Backbone,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub backbone: ParamStore,
    pub head: ParamStore,
}

/// Architecture of a [`FarModel`]. The head's `token_dim` and `cond_dim`
/// are taken from the backbone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_kind: BackboneKind,
    pub head_kind: HeadKind,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub cvae: CvaeConfig,
}

impl FarModel {
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<(FarModel, ModelParams)> {
        let bc = config.backbone.clone();
        let (backbone, bp) = match config.backbone_kind {
            BackboneKind::Masked => {
                let (m, p) = MaskedConditioner::init(bc.clone(), rng)?;
                (Backbone::Masked(m), p)
            }
            BackboneKind::Causal => {
                let (c, p) = CausalConditioner::init(bc.clone(), rng)?;
                (Backbone::Causal(c), p)
            }
        };
        let (head, hp) = match config.head_kind {
            HeadKind::Cvae => {
                let cfg = CvaeConfig {
                    token_dim: bc.token_dim,
                    cond_dim: bc.embed_dim,
                    ..config.cvae.clone()
                };
                let (h, p) = CvaeHead::init(cfg, rng)?;
                (Head::Cvae(h), p)
            }
            kind => {
                let cfg = HeadConfig {
                    token_dim: bc.token_dim,
                    cond_dim: bc.embed_dim,
                    ..config.head.clone()
                };
                let (h, p) = ShortcutHead::init(cfg, rng)?;
                let objective = if kind == HeadKind::Shortcut {
                    Objective::Shortcut
                } else {
                    Objective::FlowMatching
                };
                (Head::Shortcut { head: h, objective }, p)
            }
        };
        Ok((FarModel { backbone, head }, ModelParams { backbone: bp, head: hp }))
    }

    pub fn tokens(&self) -> usize {
        self.backbone.config().max_sequence
    }

    pub fn token_dim(&self) -> usize {
        self.backbone.config().token_dim
    }
}

impl ModelParams {
    /// Writes `<prefix>.backbone.ckpt` and `<prefix>.head.ckpt` in `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        checkpoint::save(&self.backbone, dir.join(format!("{prefix}.backbone.ckpt")))?;
        checkpoint::save(&self.head, dir.join(format!("{prefix}.head.ckpt")))
    }

    /// Loads both halves into stores with the layout of `self`.
    pub fn load_into(&mut self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        checkpoint::load_into(&mut self.backbone, dir.join(format!("{prefix}.backbone.ckpt")))?;
        checkpoint::load_into(&mut self.head, dir.join(format!("{prefix}.head.ckpt")))
    }
}
