use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use farlab::ar_engine::{
    causal_generate, far_generate, model_oracle, sampler_oracle, write_grid_csv, Backbone, EpisodeSpec, FarModel,
    Generated, HeadKind, ModelParams, OracleRow, RunManifest, StepReport, Trainer,
};
use farlab::costmodel::{cost_grid, ArchSpec, BASE_HEAD_WIDTH, FLOPS_PER_MAC, MLP_RATIO};
use farlab::diffcore::{OpKind, RngStream};
use farlab::gradsuite::{run_suite, GRAD_TOLERANCE};
use farlab::shortcut_head::StepRule;
use farlab::toylab::{energy_distance, moment_error};
use serde::Serialize;

use crate::config::{RunConfig, Task};
use crate::rundir::RunDir;
use crate::task::TaskData;

pub const GRADCHECK_HEADER: &str = "check,group,max_rel_err,status";
pub const TRAIN_HEADER: &str = "step,fm,consist,recon,kl,total,grad_norm,lr";

/// Seeds of the independent random streams of a run.
mod stream {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const REFERENCE: u64 = 3;
}

fn rng(cfg: &RunConfig, stream: u64) -> RngStream {
    RngStream::derive(cfg.seed, &[stream])
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn head_name(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Shortcut => "shortcut",
        HeadKind::FlowMatchingOnly => "fm",
        HeadKind::Cvae => "cvae",
    }
}

/// Prints one row per check; `Ok(false)` when any check fails.
pub fn gradcheck(fault: Option<&str>) -> Result<bool> {
    let fault = match fault {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| anyhow!("unknown op {name}"))?),
        None => None,
    };
    let rows = run_suite(fault)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "{GRADCHECK_HEADER}")?;
    for r in &rows {
        let status = if r.passed() { "pass" } else { "fail" };
        writeln!(out, "{},{},{:e},{status}", r.name, r.group.name(), r.max_rel_err)?;
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    eprintln!("{} checks, {failed} above {GRAD_TOLERANCE:e}", rows.len());
    Ok(failed == 0)
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    command: &'static str,
    seed: u64,
    task: Task,
    head: &'static str,
    steps: usize,
    final_total: f64,
    config: &'a RunConfig,
}

fn build(cfg: &RunConfig) -> Result<(FarModel, ModelParams)> {
    Ok(FarModel::init(&cfg.model, &mut rng(cfg, stream::INIT))?)
}

/// Trains into `dir`: loss CSV, periodic and final checkpoints, manifest.
pub fn train(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<StepReport>> {
    std::fs::write(dir.file("config.toml"), cfg.to_toml()?)?;
    let data = TaskData::new(cfg)?;
    let (model, params) = build(cfg)?;
    let mut trainer = Trainer::new(model, params, cfg.train.clone())?;
    let mut data_rng = rng(cfg, stream::DATA);
    let mut train_rng = rng(cfg, stream::TRAIN);
    let mut log = BufWriter::new(File::create(dir.file("train_loss.csv"))?);
    writeln!(log, "{TRAIN_HEADER}")?;
    let labels = vec![cfg.label; cfg.train.batch_size];
    let mut reports = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let grids = data.batch(&mut data_rng, cfg.train.batch_size);
        let r = trainer
            .train_step(&grids, &labels, &mut train_rng)
            .with_context(|| format!("training aborted at step {step}"))?;
        writeln!(
            log,
            "{},{},{},{},{},{},{},{}",
            r.step, r.fm, r.consist, r.recon, r.kl, r.total, r.grad_norm, r.lr
        )?;
        reports.push(r);
        let done = step + 1;
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < cfg.train.steps {
            trainer.params().save(dir.path(), &format!("step{done}.live"))?;
            trainer.ema_params().save(dir.path(), &format!("step{done}.ema"))?;
        }
    }
    log.flush()?;
    let (_, live, ema) = trainer.into_parts();
    live.save(dir.path(), "final.live")?;
    ema.save(dir.path(), "final.ema")?;
    write_json(
        &dir.file("manifest.json"),
        &TrainManifest {
            command: "train",
            seed: cfg.seed,
            task: cfg.task,
            head: head_name(cfg.model.head_kind),
            steps: cfg.train.steps,
            final_total: reports.last().map_or(f64::NAN, |r| r.total),
            config: cfg,
        },
    )?;
    Ok(reports)
}

fn load(cfg: &RunConfig, dir: &Path, prefix: &str) -> Result<(FarModel, ModelParams)> {
    let (model, mut params) = build(cfg)?;
    let probe = dir.join(format!("{prefix}.head.ckpt"));
    if !probe.exists() {
        bail!("missing checkpoint {}", probe.display());
    }
    params.load_into(dir, prefix)?;
    Ok((model, params))
}

fn generate(cfg: &RunConfig, model: &FarModel, params: &ModelParams, n: usize) -> Result<Generated> {
    Ok(match model.backbone {
        Backbone::Masked(_) => {
            let eps = vec![
                EpisodeSpec {
                    label: cfg.label,
                    clamps: vec![],
                };
                n
            ];
            far_generate(model, params, &eps, &cfg.generate)?
        }
        Backbone::Causal(_) => causal_generate(model, params, &vec![cfg.label; n], &cfg.generate)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub head_kind: &'static str,
    pub steps: usize,
    pub energy_distance: f64,
    pub mean_error: f64,
    pub cov_error: f64,
    pub samples: usize,
    pub head_calls: u64,
}

fn metrics(cfg: &RunConfig, data: &TaskData, out: &Generated) -> Result<MetricsRow> {
    let samples: Vec<Vec<f64>> = out.grids.iter().map(|g| g.data().to_vec()).collect();
    let reference = data.reference(&mut rng(cfg, stream::REFERENCE), cfg.ablate.reference);
    let (mean, cov) = data.moments();
    let m = moment_error(&samples, &mean, &cov)?;
    Ok(MetricsRow {
        head_kind: head_name(cfg.model.head_kind),
        steps: cfg.generate.sampler.steps,
        energy_distance: energy_distance(&samples, &reference)?,
        mean_error: m.mean_error,
        cov_error: m.cov_error,
        samples: samples.len(),
        head_calls: out.head_calls,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sample(cfg: &RunConfig, dir: &RunDir, checkpoint: &str, n: usize) -> Result<MetricsRow> {
    let data = TaskData::new(cfg)?;
    let (model, params) = load(cfg, dir.path(), checkpoint)?;
    let out = generate(cfg, &model, &params, n)?;
    let f = BufWriter::new(File::create(dir.file("samples.csv"))?);
    write_grid_csv(f, &out.grids, data.grid_width())?;
    let row = metrics(cfg, &data, &out)?;
    write_rows(&dir.file("metrics.csv"), std::slice::from_ref(&row))?;
    write_json(
        &dir.file("sample_manifest.json"),
        &RunManifest {
            command: "sample".into(),
            seed: cfg.seed,
            ar_iters: cfg.generate.ar_iters,
            steps: cfg.generate.sampler.steps,
            cfg_weight: cfg.generate.sampler.cfg.weight,
            checkpoint: Some(checkpoint.into()),
            head: head_name(cfg.model.head_kind).into(),
            backbone: format!("{:?}", cfg.model.backbone_kind).to_lowercase(),
            episodes: n,
            head_calls: out.head_calls,
        },
    )?;
    Ok(row)
}

/// Trains (when asked) or loads a shortcut and a flow-matching-only model in
/// `<out>/shortcut` and `<out>/fm`, then evaluates each over the step list.
pub fn ablate_steps(cfg: &RunConfig, dir: &RunDir, retrain: bool) -> Result<Vec<MetricsRow>> {
    let data = TaskData::new(cfg)?;
    let mut rows = Vec::new();
    for kind in [HeadKind::Shortcut, HeadKind::FlowMatchingOnly] {
        let mut c = cfg.clone();
        c.model.head_kind = kind;
        let sub = dir.path().join(head_name(kind));
        if retrain {
            let d = RunDir::acquire(&sub)?;
            train(&c, &d)?;
        }
        let (model, params) = load(&c, &sub, "final.ema")?;
        for &n in &cfg.ablate.steps {
            c.generate.sampler.steps = n;
            c.generate.sampler.step_rule = if kind == HeadKind::Shortcut {
                StepRule::Published
            } else {
                StepRule::Zero
            };
            let out = generate(&c, &model, &params, cfg.ablate.samples)?;
            rows.push(metrics(&c, &data, &out)?);
        }
    }
    write_rows(&dir.file("ablate_steps.csv"), &rows)?;
    Ok(rows)
}

#[derive(Serialize)]
struct CostManifest {
    flops_per_mac: u64,
    backbone_mlp_ratio: u64,
    base_head_width: usize,
    counted: &'static str,
    archs: Vec<ArchSpec>,
}

pub fn cost(dir: &RunDir) -> Result<usize> {
    let archs = ArchSpec::presets();
    let rows: Vec<_> = cost_grid(&archs)?.iter().map(|b| b.csv_row()).collect();
    write_rows(&dir.file("cost.csv"), &rows)?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(
        &dir.file("cost_manifest.json"),
        &CostManifest {
            flops_per_mac: FLOPS_PER_MAC,
            backbone_mlp_ratio: MLP_RATIO,
            base_head_width: BASE_HEAD_WIDTH,
            counted: "matmul FLOPs only; biases, norms, softmax and activations excluded",
            archs,
        },
    )?;
    Ok(rows.len())
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleCsvRow {
    pub source: &'static str,
    pub pattern: usize,
    pub clamped: usize,
    pub mean_error: f64,
    pub cov_error: f64,
    pub samples: usize,
}

impl OracleCsvRow {
    fn new(source: &'static str, r: OracleRow) -> Self {
        OracleCsvRow {
            source,
            pattern: r.pattern,
            clamped: r.clamped,
            mean_error: r.mean_error,
            cov_error: r.cov_error,
            samples: r.samples,
        }
    }
}

pub enum OracleSource<'a> {
    Checkpoint(&'a str),
    Untrained,
}

pub fn oracle(cfg: &RunConfig, dir: &RunDir, source: OracleSource<'_>) -> Result<Vec<OracleCsvRow>> {
    let TaskData::Field(field) = TaskData::new(cfg)? else {
        bail!("the oracle needs the gaussian-field task");
    };
    let (name, (model, params)) = match source {
        OracleSource::Checkpoint(prefix) => ("model", load(cfg, dir.path(), prefix)?),
        OracleSource::Untrained => ("untrained", build(cfg)?),
    };
    if !matches!(model.backbone, Backbone::Masked(_)) {
        bail!("the oracle clamps tokens and needs the masked backbone");
    }
    let mut rows: Vec<OracleCsvRow> = sampler_oracle(&field, &cfg.oracle)?
        .into_iter()
        .map(|r| OracleCsvRow::new("exact", r))
        .collect();
    for row in model_oracle(&model, &params, &field, &cfg.oracle, cfg.label, &cfg.generate)? {
        rows.push(OracleCsvRow::new(name, row));
    }
    write_rows(&dir.file("oracle.csv"), &rows)?;
    Ok(rows)
}
