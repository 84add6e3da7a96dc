//! Step-size-conditioned velocity head.
//!
//! The head `f(z, t, d, c)` predicts the velocity of the straight noise-to-data
//! path at time `t`, for a jump of size `d`, given condition `c`. Training mixes
//! plain flow matching (`d = 0`) with a self-consistency term that ties one
//! jump of size `d` to two half jumps taken by an EMA teacher.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::exec::{map_range, Parallelism};
use crate::nn::{AdaLnBlock, AdaLnOutput, Init, Linear, ScalarEmbedder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub token_dim: usize,
    pub cond_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub t_embed_dim: usize,
    pub d_embed_dim: usize,
    pub sigma_min: f64,
    /// Fraction of each batch (leading rows) that also gets the consistency term.
    pub consistency_fraction: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            token_dim: 2,
            cond_dim: 64,
            hidden_width: 64,
            depth: 6,
            t_embed_dim: 32,
            d_embed_dim: 32,
            sigma_min: 1e-5,
            consistency_fraction: 1.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return invalid("head depth must be at least 1");
        }
        if [self.token_dim, self.cond_dim, self.hidden_width, self.t_embed_dim, self.d_embed_dim].contains(&0) {
            return invalid("head dimensions must be positive");
        }
        if !(0.0..=1e-3).contains(&self.sigma_min) {
            return invalid(format!("sigma_min {} outside [0, 1e-3]", self.sigma_min));
        }
        if !(0.0..=1.0).contains(&self.consistency_fraction) {
            return invalid("consistency_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Anything that maps `(z, t, d, c)` rows to velocity rows.
pub trait VelocityField: Sync {
    fn token_dim(&self) -> usize;

    /// `z` is `[B, token_dim]`, `c` is `[B, cond_dim]`, `t` and `d` have `B` entries.
    fn velocity(&self, z: &Tensor, t: &[f64], d: &[f64], c: &Tensor) -> Result<Tensor>;
}

/// Layer layout of the head. Parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ShortcutHead {
    config: HeadConfig,
    input: Linear,
    t_embed: ScalarEmbedder,
    d_embed: ScalarEmbedder,
    cond: Linear,
    blocks: Vec<AdaLnBlock>,
    out: AdaLnOutput,
}

fn check_unit(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => invalid(format!("{name}[{i}] = {} outside [0, 1]", values[i])),
        None => Ok(()),
    }
}

impl ShortcutHead {
    /// Builds the layout and freshly initialized parameters. All head
    /// parameters are weight-decay exempt.
    pub fn init(config: HeadConfig, rng: &mut RngStream) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut s = ParamStore::new();
        let w = config.hidden_width;
        let head = ShortcutHead {
            input: Linear::new(&mut s, "head.input", config.token_dim, w, Init::Xavier, true, rng),
            t_embed: ScalarEmbedder::new(&mut s, "head.t_embed", config.t_embed_dim, w, true, rng),
            d_embed: ScalarEmbedder::new(&mut s, "head.d_embed", config.d_embed_dim, w, true, rng),
            cond: Linear::new(&mut s, "head.cond", config.cond_dim, w, Init::Xavier, true, rng),
            blocks: (0..config.depth)
                .map(|i| AdaLnBlock::new(&mut s, &format!("head.block{i}"), w, true, rng))
                .collect(),
            out: AdaLnOutput::new(&mut s, "head.final", w, config.token_dim, true, rng),
            config,
        };
        Ok((head, s))
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Velocity rows for `z` (`[B, token_dim]`) and `c` (`[B, cond_dim]`).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, t: &[f64], d: &[f64], c: Var) -> Result<Var> {
        let cfg = &self.config;
        let (zs, cs) = (tape.shape(z).to_vec(), tape.shape(c).to_vec());
        let b = zs[0];
        if zs != [b, cfg.token_dim] || cs != [b, cfg.cond_dim] || t.len() != b || d.len() != b {
            return invalid(format!(
                "head input z {zs:?}, c {cs:?}, {} t, {} d; expected [B, {}], [B, {}]",
                t.len(),
                d.len(),
                cfg.token_dim,
                cfg.cond_dim
            ));
        }
        check_unit("t", t)?;
        check_unit("d", d)?;
        let x = self.input.forward(tape, p, z)?;
        let te = self.t_embed.forward(tape, p, t)?;
        let de = self.d_embed.forward(tape, p, d)?;
        let ce = self.cond.forward(tape, p, c)?;
        let s = tape.add(te, de)?;
        let s = tape.add(s, ce)?;
        let s = tape.silu(s)?;
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(tape, p, x, s)?;
        }
        self.out.forward(tape, p, x, s)
    }

    /// Read-only evaluator over `params` (live or EMA).
    pub fn eval<'a>(&'a self, params: &'a ParamStore) -> HeadEval<'a> {
        HeadEval {
            head: self,
            params,
            mode: Parallelism::default(),
        }
    }
}

/// Rows per forward pass during inference. Fixed so that results never
/// depend on the parallelism mode.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy)]
pub struct HeadEval<'a> {
    head: &'a ShortcutHead,
    params: &'a ParamStore,
    mode: Parallelism,
}

impl HeadEval<'_> {
    pub fn with_parallelism(mut self, mode: Parallelism) -> Self {
        self.mode = mode;
        self
    }

    fn eval_rows(&self, z: &Tensor, t: &[f64], d: &[f64], c: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let zv = tape.constant(z.clone())?;
        let cv = tape.constant(c.clone())?;
        let out = self.head.forward(&mut tape, &p, zv, t, d, cv)?;
        Ok(tape.value(out).clone())
    }
}

impl VelocityField for HeadEval<'_> {
    fn token_dim(&self) -> usize {
        self.head.config.token_dim
    }

    fn velocity(&self, z: &Tensor, t: &[f64], d: &[f64], c: &Tensor) -> Result<Tensor> {
        let b = z.rows();
        if b <= EVAL_CHUNK {
            return self.eval_rows(z, t, d, c);
        }
        if c.rows() != b || t.len() != b || d.len() != b {
            return invalid("head inputs disagree on batch size");
        }
        let chunks = b.div_ceil(EVAL_CHUNK);
        let parts = map_range(self.mode, chunks, |i| {
            let r = i * EVAL_CHUNK..((i + 1) * EVAL_CHUNK).min(b);
            let idx: Vec<usize> = r.clone().collect();
            self.eval_rows(&z.select_rows(&idx), &t[r.clone()], &d[r], &c.select_rows(&idx))
        });
        let mut data = Vec::with_capacity(b * self.token_dim());
        for part in parts {
            data.extend_from_slice(part?.data());
        }
        Ok(Tensor::matrix(b, self.token_dim(), data))
    }
}

/// `z_t = t·z1 + (1 − (1 − σ)·t)·z0`.
pub fn interpolate(z0: &[f64], z1: &[f64], t: f64, sigma_min: f64) -> Vec<f64> {
    let a = 1.0 - (1.0 - sigma_min) * t;
    z0.iter().zip(z1).map(|(x0, x1)| t * x1 + a * x0).collect()
}

/// `v = z1 − (1 − σ)·z0`, the time derivative of [`interpolate`].
pub fn velocity_target(z0: &[f64], z1: &[f64], sigma_min: f64) -> Vec<f64> {
    z0.iter().zip(z1).map(|(x0, x1)| x1 - (1.0 - sigma_min) * x0).collect()
}

/// `min(u, 1 − t)` with `u ~ U(0, 1)`, so that `t + d ≤ 1`.
pub fn sample_step_size(t: f64, rng: &mut RngStream) -> f64 {
    rng.uniform().min(1.0 - t)
}

/// Per-row noise, timestep and step size for one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraws {
    pub z0: Tensor,
    pub t: Vec<f64>,
    pub d: Vec<f64>,
}

impl FlowDraws {
    pub fn sample(rows: usize, token_dim: usize, rng: &mut RngStream) -> Self {
        let mut z0 = Vec::with_capacity(rows * token_dim);
        let mut t = Vec::with_capacity(rows);
        let mut d = Vec::with_capacity(rows);
        for _ in 0..rows {
            z0.extend(rng.normals(token_dim));
            let ti = rng.uniform();
            t.push(ti);
            d.push(sample_step_size(ti, rng));
        }
        FlowDraws {
            z0: Tensor::matrix(rows, token_dim, z0),
            t,
            d,
        }
    }

    /// Interpolants and velocity targets for data rows `z1`.
    pub fn path(&self, z1: &Tensor, sigma_min: f64) -> (Tensor, Tensor) {
        let (b, k) = (z1.rows(), z1.cols());
        let mut zt = Vec::with_capacity(b * k);
        let mut v = Vec::with_capacity(b * k);
        for i in 0..b {
            zt.extend(interpolate(self.z0.row(i), z1.row(i), self.t[i], sigma_min));
            v.extend(velocity_target(self.z0.row(i), z1.row(i), sigma_min));
        }
        (Tensor::matrix(b, k, zt), Tensor::matrix(b, k, v))
    }
}

/// `(f(z, t, d/2) + f(z + d/2·f(z, t, d/2), t + d/2, d/2)) / 2` under `teacher`.
pub fn consistency_target(
    teacher: &dyn VelocityField,
    z_t: &Tensor,
    t: &[f64],
    d: &[f64],
    c: &Tensor,
) -> Result<Tensor> {
    if let Some(i) = t.iter().zip(d).position(|(t, d)| t + d > 1.0 + 1e-12) {
        return invalid(format!("row {i}: t + d = {} exceeds 1", t[i] + d[i]));
    }
    let half: Vec<f64> = d.iter().map(|d| d / 2.0).collect();
    let v1 = teacher.velocity(z_t, t, &half, c)?;
    let mut z_mid = z_t.clone();
    for i in 0..z_t.rows() {
        for (z, v) in z_mid.row_mut(i).iter_mut().zip(v1.row(i)) {
            *z += half[i] * v;
        }
    }
    let t_mid: Vec<f64> = t.iter().zip(&half).map(|(t, h)| (t + h).min(1.0)).collect();
    let v2 = teacher.velocity(&z_mid, &t_mid, &half, c)?;
    Ok(v1.zip_map(&v2, |a, b| (a + b) / 2.0))
}

/// Which terms the training objective includes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Flow matching plus self-consistency.
    #[default]
    Shortcut,
    /// Plain flow matching; the baseline.
    FlowMatching,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub fm: Var,
    pub consist: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub fm: f64,
    pub consist: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            fm: tape.value(self.fm).item(),
            consist: self.consist.map_or(0.0, |v| tape.value(v).item()),
            total: tape.value(self.total).item(),
        }
    }
}

fn check_rows_finite(z1: &Tensor) -> Result<()> {
    match (0..z1.rows()).find(|&i| z1.row(i).iter().any(|x| !x.is_finite())) {
        Some(index) => Err(Error::NonFiniteLoss { index }),
        None => Ok(()),
    }
}

/// Rows that receive the consistency term.
pub fn consistency_rows(batch: usize, fraction: f64) -> usize {
    if fraction <= 0.0 {
        0
    } else {
        ((fraction * batch as f64).round() as usize).clamp(1, batch)
    }
}

/// The EMA field that builds consistency targets.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub field: &'a dyn VelocityField,
    /// Conditions for the consistency rows as the teacher's own backbone
    /// sees them; `None` uses the student's condition values.
    pub cond: Option<&'a Tensor>,
}

impl<'a> Teacher<'a> {
    pub fn new(field: &'a dyn VelocityField) -> Self {
        Teacher { field, cond: None }
    }

    pub fn with_cond(field: &'a dyn VelocityField, cond: &'a Tensor) -> Self {
        Teacher { field, cond: Some(cond) }
    }
}

/// Builds the training losses on `tape` for data rows `z1` with conditions `cond`.
///
/// The flow-matching term uses every row with `d = 0`. The consistency term
/// (when `objective` asks for it) uses the leading rows and a target built by
/// `teacher`; no gradient reaches the target.
/// Both terms go through a single stacked head pass.
#[allow(clippy::too_many_arguments)]
pub fn head_loss(
    tape: &mut Tape,
    head: &ShortcutHead,
    p: &Bound,
    teacher: Option<Teacher<'_>>,
    cond: Var,
    z1: &Tensor,
    draws: &FlowDraws,
    objective: Objective,
) -> Result<LossTerms> {
    let b = z1.rows();
    if b == 0 || draws.t.len() != b || draws.z0.shape() != z1.shape() {
        return invalid("loss batch is empty or disagrees with its draws");
    }
    check_rows_finite(z1)?;
    let sigma = head.config.sigma_min;
    let (z_t, v) = draws.path(z1, sigma);
    let nc = match objective {
        Objective::Shortcut => consistency_rows(b, head.config.consistency_fraction),
        Objective::FlowMatching => 0,
    };
    if nc == 0 {
        let zv = tape.constant(z_t)?;
        let out = head.forward(tape, p, zv, &draws.t, &vec![0.0; b], cond)?;
        let target = tape.constant(v)?;
        let fm = tape.mse(out, target)?;
        return Ok(LossTerms {
            fm,
            consist: None,
            total: fm,
        });
    }
    let teacher = teacher.ok_or_else(|| Error::Invalid("consistency loss needs a teacher".into()))?;
    let rows: Vec<usize> = (0..nc).collect();
    let zc = z_t.select_rows(&rows);
    let (tc, dc) = (&draws.t[..nc], &draws.d[..nc]);
    let cvals = match teacher.cond {
        Some(c) if c.rows() < nc || c.cols() != tape.shape(cond)[1] => {
            return invalid(format!("teacher conditions {:?} for {nc} consistency rows", c.shape()));
        }
        Some(c) => c.select_rows(&rows),
        None => tape.value(cond).select_rows(&rows),
    };
    let v_star = consistency_target(teacher.field, &zc, tc, dc, &cvals)?;

    let mut z_in = z_t.into_data();
    z_in.extend_from_slice(zc.data());
    let z_in = tape.constant(Tensor::matrix(b + nc, z1.cols(), z_in))?;
    let t_in: Vec<f64> = draws.t.iter().chain(tc).copied().collect();
    let d_in: Vec<f64> = std::iter::repeat_n(0.0, b).chain(dc.iter().copied()).collect();
    let c_lead = tape.slice_rows(cond, 0, nc)?;
    let c_in = tape.concat_rows(&[cond, c_lead])?;
    let out = head.forward(tape, p, z_in, &t_in, &d_in, c_in)?;

    let out_fm = tape.slice_rows(out, 0, b)?;
    let out_c = tape.slice_rows(out, b, nc)?;
    let v = tape.constant(v)?;
    let v_star = tape.constant(v_star)?;
    let v_star = tape.stopgrad(v_star)?;
    let fm = tape.mse(out_fm, v)?;
    let consist = tape.mse(out_c, v_star)?;
    let total = tape.add(fm, consist)?;
    Ok(LossTerms {
        fm,
        consist: Some(consist),
        total,
    })
}

/// Loss value and per-parameter gradients (store order).
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

enum Term {
    Fm,
    Consist,
    Total,
}

fn loss_with_grads(
    head: &ShortcutHead,
    params: &ParamStore,
    teacher: Option<&dyn VelocityField>,
    z1: &Tensor,
    c: &Tensor,
    draws: &FlowDraws,
    term: Term,
) -> Result<LossGrad> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true)?;
    let cv = tape.constant(c.clone())?;
    let objective = match term {
        Term::Fm => Objective::FlowMatching,
        _ => Objective::Shortcut,
    };
    let terms = head_loss(&mut tape, head, &p, teacher.map(Teacher::new), cv, z1, draws, objective)?;
    let out = match term {
        Term::Fm | Term::Total => terms.total,
        Term::Consist => terms
            .consist
            .ok_or_else(|| Error::Invalid("consistency_fraction is 0".into()))?,
    };
    let grads = tape.backward(out)?;
    Ok(LossGrad {
        value: tape.value(out).item(),
        grads: p.collect(&grads),
    })
}

/// Flow-matching loss `‖f(z_t, t, 0, c) − v‖²` on fresh draws from `rng`.
pub fn fm_loss(head: &ShortcutHead, params: &ParamStore, z1: &Tensor, c: &Tensor, rng: &mut RngStream) -> Result<LossGrad> {
    let draws = FlowDraws::sample(z1.rows(), z1.cols(), rng);
    loss_with_grads(head, params, None, z1, c, &draws, Term::Fm)
}

/// Consistency loss against the EMA teacher `ema`.
pub fn consistency_loss(
    head: &ShortcutHead,
    params: &ParamStore,
    ema: &ParamStore,
    z1: &Tensor,
    c: &Tensor,
    rng: &mut RngStream,
) -> Result<LossGrad> {
    let draws = FlowDraws::sample(z1.rows(), z1.cols(), rng);
    let teacher = head.eval(ema);
    loss_with_grads(head, params, Some(&teacher), z1, c, &draws, Term::Consist)
}

/// Unweighted sum of both losses on the same batch and draws.
pub fn total_loss(
    head: &ShortcutHead,
    params: &ParamStore,
    ema: &ParamStore,
    z1: &Tensor,
    c: &Tensor,
    rng: &mut RngStream,
) -> Result<LossGrad> {
    let draws = FlowDraws::sample(z1.rows(), z1.cols(), rng);
    let teacher = head.eval(ema);
    loss_with_grads(head, params, Some(&teacher), z1, c, &draws, Term::Total)
}

/// How the sampler picks the step-size input `d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// `1/N` for `N ≤ 16`, else `0`.
    #[default]
    Published,
    /// Always `0`; for heads trained with plain flow matching.
    Zero,
}

impl StepRule {
    pub fn d_input(self, steps: usize) -> f64 {
        match self {
            StepRule::Published if steps <= 16 => 1.0 / steps as f64,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfgKind {
    #[default]
    Linear,
    Constant,
}

/// Guidance weight as a function of generation progress in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfgSchedule {
    pub weight: f64,
    pub kind: CfgKind,
}

impl Default for CfgSchedule {
    fn default() -> Self {
        CfgSchedule {
            weight: 1.0,
            kind: CfgKind::Linear,
        }
    }
}

impl CfgSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return invalid(format!("cfg weight {} must be finite and ≥ 0", self.weight));
        }
        if self.kind == CfgKind::Linear && self.weight < 1.0 {
            return invalid("linear cfg ramps from 1 and needs a terminal weight ≥ 1");
        }
        Ok(())
    }

    pub fn effective(&self, progress: f64) -> f64 {
        match self.kind {
            CfgKind::Linear => 1.0 + (self.weight - 1.0) * progress,
            CfgKind::Constant => self.weight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    pub steps: usize,
    pub step_rule: StepRule,
    pub cfg: CfgSchedule,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            steps: 8,
            step_rule: StepRule::Published,
            cfg: CfgSchedule::default(),
        }
    }
}

impl SamplerSpec {
    pub fn new(steps: usize) -> Self {
        SamplerSpec {
            steps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid("sampler needs at least one step");
        }
        self.cfg.validate()
    }

    pub fn d_input(&self) -> f64 {
        self.step_rule.d_input(self.steps)
    }
}

/// `v_u + w·(v_c − v_u)`; returns `v_c` unchanged when `w == 1`.
pub fn cfg_combine(v_cond: &[f64], v_uncond: &[f64], w: f64) -> Vec<f64> {
    if w == 1.0 {
        return v_cond.to_vec();
    }
    v_cond.iter().zip(v_uncond).map(|(c, u)| u + w * (c - u)).collect()
}

/// Unconditional conditions and per-row guidance weights.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub uncond: &'a Tensor,
    pub weights: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct Sampled {
    pub tokens: Tensor,
    /// One per row per Euler step; a guided step counts once.
    pub head_calls: u64,
}

/// `N` Euler steps of size `1/N` from `noise` (rows of `ĥ0`) at times
/// `0, 1/N, …, (N−1)/N`.
pub fn euler_sample(
    field: &dyn VelocityField,
    c: &Tensor,
    steps: usize,
    rule: StepRule,
    guidance: Option<Guidance<'_>>,
    noise: Tensor,
) -> Result<Sampled> {
    if steps == 0 {
        return invalid("sampler needs at least one step");
    }
    let b = noise.rows();
    if c.rows() != b {
        return invalid(format!("{b} noise rows but {} conditions", c.rows()));
    }
    let active = match guidance {
        Some(g) if g.weights.len() != b || g.uncond.shape() != c.shape() => {
            return invalid("guidance weights/conditions disagree with the batch");
        }
        Some(g) if g.weights.iter().any(|&w| w != 1.0) => Some(g),
        _ => None,
    };
    let h = 1.0 / steps as f64;
    let d = vec![rule.d_input(steps); b];
    let mut z = noise;
    let mut calls = 0u64;
    for k in 0..steps {
        let t = vec![k as f64 / steps as f64; b];
        let vc = field.velocity(&z, &t, &d, c)?;
        let v = match active {
            None => vc,
            Some(g) => {
                let vu = field.velocity(&z, &t, &d, g.uncond)?;
                let mut out = Vec::with_capacity(vc.len());
                for i in 0..b {
                    out.extend(cfg_combine(vc.row(i), vu.row(i), g.weights[i]));
                }
                Tensor::matrix(b, vc.cols(), out)
            }
        };
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += h * vi;
        }
        calls += b as u64;
    }
    Ok(Sampled {
        tokens: z,
        head_calls: calls,
    })
}

/// [`euler_sample`] with `ĥ0` drawn row by row from `rng`.
pub fn euler_sample_rng(
    field: &dyn VelocityField,
    c: &Tensor,
    spec: &SamplerSpec,
    guidance: Option<Guidance<'_>>,
    rng: &mut RngStream,
) -> Result<Sampled> {
    spec.validate()?;
    let k = field.token_dim();
    let noise = Tensor::matrix(c.rows(), k, rng.normals(c.rows() * k));
    euler_sample(field, c, spec.steps, spec.step_rule, guidance, noise)
}

/// `mean‖f(z, t, d) − v*‖ / mean‖f(z, t, d)‖`, with `v*` the consistency
/// target built by `field` itself.
pub fn self_consistency_residual(
    field: &dyn VelocityField,
    z_t: &Tensor,
    t: &[f64],
    d: &[f64],
    c: &Tensor,
) -> Result<f64> {
    let f = field.velocity(z_t, t, d, c)?;
    let target = consistency_target(field, z_t, t, d, c)?;
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..f.rows() {
        let diff: Vec<f64> = f.row(i).iter().zip(target.row(i)).map(|(a, b)| a - b).collect();
        num += norm(&diff);
        den += norm(f.row(i));
    }
    if den == 0.0 {
        return invalid("self-consistency residual of an all-zero field");
    }
    Ok(num / den)
}
