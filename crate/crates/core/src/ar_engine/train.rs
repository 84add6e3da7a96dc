use serde::{Deserialize, Serialize};

use crate::ar_engine::model::{Backbone, FarModel, Head, ModelParams};
use crate::conditioner::{partition_tokens, MaskedQuery, MIN_MASK_RATIO};
use crate::diffcore::{adamw_step, clip_global_norm, AdamWConfig, EmaState, OptimState, RngStream, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::shortcut_head::{consistency_rows, head_loss, FlowDraws, Objective, Teacher};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Linear learning-rate warmup length.
    pub warmup_steps: usize,
    pub optim: AdamWConfig,
    pub ema_decay: f64,
    pub grad_clip: f64,
    /// Probability of replacing a label by the null class.
    pub label_dropout: f64,
    /// Range of the uniformly drawn training mask ratio.
    pub mask_ratio: (f64, f64),
    pub checkpoint_every: usize,
    /// From this (zero-based) step on, the learning rate is `lr * lr_drop_factor`.
    pub lr_drop_step: Option<usize>,
    pub lr_drop_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 20_000,
            warmup_steps: 100,
            optim: AdamWConfig::default(),
            ema_decay: 0.9999,
            grad_clip: 1.0,
            label_dropout: 0.1,
            mask_ratio: (MIN_MASK_RATIO, 1.0),
            checkpoint_every: 5_000,
            lr_drop_step: None,
            lr_drop_factor: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return invalid("grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return invalid("label_dropout must lie in [0, 1]");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return invalid("lr_drop_factor must lie in (0, 1]");
        }
        let (lo, hi) = self.mask_ratio;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return invalid(format!("mask_ratio range ({lo}, {hi})"));
        }
        Ok(())
    }

    /// Learning rate at (zero-based) `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_drop_step.is_some_and(|s| step >= s) {
            return self.optim.lr * self.lr_drop_factor;
        }
        if self.warmup_steps == 0 {
            return self.optim.lr;
        }
        self.optim.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Losses and bookkeeping of one optimizer step. Terms that do not apply to
/// the head are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub fm: f64,
    pub consist: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Live parameters, their EMA shadows and optimizer state.
pub struct Trainer {
    model: FarModel,
    params: ModelParams,
    ema: (EmaState, EmaState),
    optim: (OptimState, OptimState),
    config: TrainConfig,
    step: usize,
}

impl Trainer {
    pub fn new(model: FarModel, params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ema = (
            EmaState::new(config.ema_decay, &params.backbone)?,
            EmaState::new(config.ema_decay, &params.head)?,
        );
        let optim = (
            OptimState::new(config.optim, &params.backbone),
            OptimState::new(config.optim, &params.head),
        );
        Ok(Trainer {
            model,
            params,
            ema,
            optim,
            config,
            step: 0,
        })
    }

    pub fn model(&self) -> &FarModel {
        &self.model
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Copy of the EMA shadows.
    pub fn ema_params(&self) -> ModelParams {
        ModelParams {
            backbone: self.ema.0.shadow().clone(),
            head: self.ema.1.shadow().clone(),
        }
    }

    pub fn into_parts(self) -> (FarModel, ModelParams, ModelParams) {
        let ema = ModelParams {
            backbone: self.ema.0.shadow().clone(),
            head: self.ema.1.shadow().clone(),
        };
        (self.model, self.params, ema)
    }

    /// One optimizer step on token grids (`[T, token_dim]` each).
    ///
    /// Masked backbone: draws a mask per grid and trains on masked positions.
    /// Causal backbone: trains on every position. Gradients flow through head
    /// and backbone jointly; then clip, AdamW and EMA updates follow.
    pub fn train_step(&mut self, grids: &[Tensor], labels: &[Option<usize>], rng: &mut RngStream) -> Result<StepReport> {
        let cfg = self.model.backbone.config().clone();
        let (t, td) = (cfg.max_sequence, cfg.token_dim);
        if grids.is_empty() || grids.len() != labels.len() {
            return invalid("train_step needs one label per grid and a nonempty batch");
        }
        if let Some(i) = grids.iter().position(|g| g.shape() != [t, td]) {
            return invalid(format!("grid {i} has shape {:?}, expected [{t}, {td}]", grids[i].shape()));
        }
        let labels: Vec<Option<usize>> = labels
            .iter()
            .map(|&l| if rng.uniform() < self.config.label_dropout { None } else { l })
            .collect();

        // Consistency rows lead the batch; the teacher sees them through the
        // EMA backbone.
        let lead_fraction = match &self.model.head {
            Head::Shortcut {
                head,
                objective: Objective::Shortcut,
            } => Some(head.config().consistency_fraction),
            _ => None,
        };
        let ema_backbone = self.ema.0.shadow();
        let mut tape = Tape::new();
        let pb = self.params.backbone.bind(&mut tape, true)?;
        let ph = self.params.head.bind(&mut tape, true)?;
        let (cond, z1, teacher_cond) = match &self.model.backbone {
            Backbone::Masked(m) => {
                let masks = grids
                    .iter()
                    .map(|_| partition_tokens(t, self.config.mask_ratio, rng))
                    .collect::<Result<Vec<_>>>()?;
                let known: Vec<Vec<f64>> = grids
                    .iter()
                    .zip(&masks)
                    .map(|(g, m)| m.unmasked.iter().flat_map(|&p| g.row(p).to_vec()).collect())
                    .collect();
                let queries: Vec<MaskedQuery<'_>> = masks
                    .iter()
                    .zip(&known)
                    .zip(&labels)
                    .map(|((m, k), &label)| MaskedQuery {
                        label,
                        known_pos: &m.unmasked,
                        known: k,
                        query_pos: &m.masked,
                    })
                    .collect();
                let cond = m.forward(&mut tape, &pb, &queries)?;
                let rows: Vec<Vec<f64>> = grids
                    .iter()
                    .zip(&masks)
                    .flat_map(|(g, m)| m.masked.iter().map(|&p| g.row(p).to_vec()))
                    .collect();
                let teacher_cond = match lead_fraction {
                    Some(f) => {
                        let nc = consistency_rows(rows.len(), f);
                        let mut covered = 0;
                        let q = 1 + masks.iter().position(|m| {
                            covered += m.masked.len();
                            covered >= nc
                        }).unwrap_or(masks.len() - 1);
                        Some(m.conditions(ema_backbone, &queries[..q])?)
                    }
                    None => None,
                };
                (cond, Tensor::from_rows(&rows)?, teacher_cond)
            }
            Backbone::Causal(c) => {
                let eps: Vec<(Option<usize>, &[f64])> = labels.iter().zip(grids).map(|(&l, g)| (l, g.data())).collect();
                let cond = c.forward(&mut tape, &pb, &eps, t)?;
                let data: Vec<f64> = grids.iter().flat_map(|g| g.data().iter().copied()).collect();
                let teacher_cond = match lead_fraction {
                    Some(f) => {
                        let q = consistency_rows(grids.len() * t, f).div_ceil(t);
                        let mut et = Tape::new();
                        let pe = ema_backbone.bind(&mut et, false)?;
                        let v = c.forward(&mut et, &pe, &eps[..q], t)?;
                        Some(et.value(v).clone())
                    }
                    None => None,
                };
                (cond, Tensor::matrix(grids.len() * t, td, data), teacher_cond)
            }
        };
        let mut report = StepReport {
            step: self.step,
            ..Default::default()
        };
        let total: Var = match &self.model.head {
            Head::Shortcut { head, objective } => {
                let draws = FlowDraws::sample(z1.rows(), td, rng);
                let field = head.eval(self.ema.1.shadow());
                let teacher = match &teacher_cond {
                    Some(c) => Teacher::with_cond(&field, c),
                    None => Teacher::new(&field),
                };
                let terms = head_loss(&mut tape, head, &ph, Some(teacher), cond, &z1, &draws, *objective)?;
                let v = terms.values(&tape);
                report.fm = v.fm;
                report.consist = v.consist;
                terms.total
            }
            Head::Cvae(h) => {
                let l = h.config().latent();
                let eps = Tensor::matrix(z1.rows(), l, rng.normals(z1.rows() * l));
                let terms = h.loss(&mut tape, &ph, &z1, cond, &eps, h.config().kl_weight)?;
                let v = terms.values(&tape);
                report.recon = v.recon;
                report.kl = v.kl;
                terms.total
            }
        };
        report.total = tape.value(total).item();
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { index: self.step });
        }
        let grads = tape.backward(total)?;
        let mut all = pb.collect(&grads);
        let nb = all.len();
        all.extend(ph.collect(&grads));
        report.grad_norm = clip_global_norm(&mut all, self.config.grad_clip);
        let head_grads = all.split_off(nb);

        let lr = self.config.lr_at(self.step);
        report.lr = lr;
        self.optim.0.config.lr = lr;
        self.optim.1.config.lr = lr;
        adamw_step(&mut self.params.backbone, &all, &mut self.optim.0)?;
        adamw_step(&mut self.params.head, &head_grads, &mut self.optim.1)?;
        self.ema.0.update(&self.params.backbone)?;
        self.ema.1.update(&self.params.head)?;
        self.step += 1;
        Ok(report)
    }
}
