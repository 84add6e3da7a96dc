//! TOML run configuration. Every command reads the same file; flags override
//! single keys after parsing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use farlab::ar_engine::{BackboneKind, GenerateConfig, HeadKind, ModelConfig, OracleSpec, TrainConfig};
use farlab::toylab::{GaussianField, GaussianFieldSpec, Mixture2dSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    GaussianField,
    Mixture2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub height: usize,
    pub width: usize,
    pub token_dim: usize,
    pub length_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            height: 4,
            width: 4,
            token_dim: 2,
            length_scale: 1.5,
        }
    }
}

impl FieldConfig {
    pub fn build(&self) -> Result<GaussianField> {
        let spec = GaussianFieldSpec::squared_exponential(self.height, self.width, self.token_dim, self.length_scale);
        Ok(spec.build()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            modes: 8,
            radius: 2.0,
            std: 0.1,
        }
    }
}

impl MixtureConfig {
    pub fn build(&self) -> Result<Mixture2dSpec> {
        let m = Mixture2dSpec::ring(self.modes, self.radius, self.std);
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub steps: Vec<usize>,
    /// Generated samples per row.
    pub samples: usize,
    /// Reference draws from the task distribution.
    pub reference: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            steps: vec![1, 2, 4, 8, 128],
            samples: 2000,
            reference: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub out: PathBuf,
    /// Class label used for training and sampling; `None` trains and samples
    /// unconditionally.
    pub label: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub field: FieldConfig,
    pub mixture: MixtureConfig,
    pub ablate: AblateConfig,
    pub oracle: OracleSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::default(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            label: Some(0),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            field: FieldConfig::default(),
            mixture: MixtureConfig::default(),
            ablate: AblateConfig::default(),
            oracle: OracleSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Fixes the token layout implied by the task and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        let b = &mut self.model.backbone;
        match self.task {
            Task::GaussianField => {
                b.max_sequence = self.field.height * self.field.width;
                b.token_dim = self.field.token_dim;
                self.field.build()?;
            }
            Task::Mixture2d => {
                b.max_sequence = 1;
                b.token_dim = 2;
                self.generate.ar_iters = 1;
                self.mixture.build()?;
                if self.model.backbone_kind == BackboneKind::Causal {
                    bail!("the mixture task is a single token; use the masked backbone");
                }
            }
        }
        b.validate()?;
        self.train.validate()?;
        self.generate.sampler.validate()?;
        if let Some(l) = self.label {
            if l >= b.num_classes {
                bail!("label {l} out of range for {} classes", b.num_classes);
            }
        }
        if self.model.head_kind == HeadKind::FlowMatchingOnly {
            self.generate.sampler.step_rule = farlab::shortcut_head::StepRule::Zero;
        }
        self.generate.seed = self.seed;
        self.oracle.seed = self.seed;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default().resolve().unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            r#"
            task = "mixture2d"
            seed = 9
            [model]
            head_kind = "fm"
            [model.backbone]
            embed_dim = 16
            [generate.sampler]
            steps = 2
            "#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(c.task, Task::Mixture2d);
        assert_eq!(c.model.head_kind, HeadKind::FlowMatchingOnly);
        assert_eq!(c.model.backbone.embed_dim, 16);
        assert_eq!(c.model.backbone.max_sequence, 1);
        assert_eq!(c.generate.sampler.steps, 2);
        assert_eq!(c.generate.seed, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("[model.backbone]\nwidth = 3").is_err());
        let c = RunConfig::parse("label = 99").unwrap();
        assert!(c.resolve().is_err());
    }
}
