use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ar_engine::model::{Backbone, FarModel, Head, ModelParams};
use crate::ar_engine::schedule::cosine_plan;
use crate::conditioner::{KvCache, MaskedQuery};
use crate::diffcore::{ParamStore, RngStream, Tensor};
use crate::error::{invalid, Error, Result};
use crate::exec::{map_range, Parallelism};
use crate::shortcut_head::{euler_sample, Guidance, SamplerSpec};

/// One generation episode: a class label (or `None` for unconditional) and
/// positions fixed in advance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub label: Option<usize>,
    pub clamps: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    /// AR iterations `K` of the masked pipeline.
    pub ar_iters: usize,
    pub sampler: SamplerSpec,
    pub seed: u64,
    #[serde(skip)]
    pub mode: Parallelism,
    /// Causal pipeline only: reuse keys/values instead of recomputing the prefix.
    pub kv_cache: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            ar_iters: 8,
            sampler: SamplerSpec::default(),
            seed: 0,
            mode: Parallelism::default(),
            kv_cache: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    /// One `[T, token_dim]` grid per episode.
    pub grids: Vec<Tensor>,
    /// One per generated token per sampler step (a guided step counts once).
    pub head_calls: u64,
    /// Longest per-episode iteration count.
    pub iterations: usize,
    /// Causal pipeline: per-episode `[T, embed_dim]` conditions in generation order.
    pub conditions: Vec<Tensor>,
    /// Causal pipeline: rows appended to each episode's KV cache per layer.
    pub cache_appends: Vec<usize>,
}

/// Episodes per conditioner pass in the masked pipeline.
const EPISODE_CHUNK: usize = 64;

fn noise_stream(seed: u64, episode: usize, position: usize) -> RngStream {
    RngStream::derive(seed, &[episode as u64, position as u64, 1])
}

fn noise_dim(head: &Head, token_dim: usize) -> usize {
    match head {
        Head::Shortcut { .. } => token_dim,
        Head::Cvae(h) => h.config().latent(),
    }
}

/// Samples one token per row of `c`. Guidance weights of exactly 1 skip the
/// unconditional pass.
fn sample_rows(
    head: &Head,
    params: &ParamStore,
    c: &Tensor,
    guidance: Option<(&Tensor, &[f64])>,
    noise: Tensor,
    sampler: &SamplerSpec,
    mode: Parallelism,
) -> Result<(Tensor, u64)> {
    match head {
        Head::Shortcut { head, .. } => {
            let f = head.eval(params).with_parallelism(mode);
            let g = guidance.map(|(uncond, weights)| Guidance { uncond, weights });
            let s = euler_sample(&f, c, sampler.steps, sampler.step_rule, g, noise)?;
            Ok((s.tokens, s.head_calls))
        }
        Head::Cvae(h) => {
            let s = h.decode_noise(params, c, noise)?;
            Ok((s.tokens, s.head_calls))
        }
    }
}

struct EpisodeState {
    grid: Vec<f64>,
    done: Vec<bool>,
    plan: Vec<usize>,
    generated: usize,
}

/// Masked-AR generation over the cosine plan.
///
/// Every iteration conditions all pending positions on every token generated
/// so far, picks `count_k` pending positions uniformly, and samples them.
/// Randomness is keyed by `(seed, episode, …)`, so results do not depend on
/// batching or on the parallelism mode.
pub fn far_generate(model: &FarModel, params: &ModelParams, episodes: &[EpisodeSpec], cfg: &GenerateConfig) -> Result<Generated> {
    let Backbone::Masked(backbone) = &model.backbone else {
        return invalid("far_generate needs the masked backbone");
    };
    cfg.sampler.validate()?;
    let (t, td) = (model.tokens(), model.token_dim());
    let nd = noise_dim(&model.head, td);
    if cfg.ar_iters > t {
        return invalid(format!("{} AR iterations for {t} tokens", cfg.ar_iters));
    }
    let mut states = Vec::with_capacity(episodes.len());
    for (e, ep) in episodes.iter().enumerate() {
        let mut grid = vec![0.0; t * td];
        let mut done = vec![false; t];
        for (pos, tok) in &ep.clamps {
            if *pos >= t || tok.len() != td || done[*pos] {
                return invalid(format!("episode {e}: bad clamp at position {pos}"));
            }
            grid[pos * td..(pos + 1) * td].copy_from_slice(tok);
            done[*pos] = true;
        }
        let to_generate = t - ep.clamps.len();
        let plan = if to_generate == 0 {
            Vec::new()
        } else {
            cosine_plan(cfg.ar_iters.min(to_generate), to_generate)?
        };
        states.push(EpisodeState {
            grid,
            done,
            plan,
            generated: 0,
        });
    }
    let iterations = states.iter().map(|s| s.plan.len()).max().unwrap_or(0);
    let sampler = cfg.sampler;
    let mut head_calls = 0u64;

    for it in 0..iterations {
        let active: Vec<usize> = (0..states.len()).filter(|&e| it < states[e].plan.len()).collect();
        let chunks: Vec<&[usize]> = active.chunks(EPISODE_CHUNK).collect();
        let results = map_range(cfg.mode, chunks.len(), |ci| -> Result<(Vec<(usize, Vec<usize>)>, Tensor, u64)> {
            let chunk = chunks[ci];
            let mut known_pos = Vec::with_capacity(chunk.len());
            let mut known = Vec::with_capacity(chunk.len());
            let mut pending = Vec::with_capacity(chunk.len());
            let mut picks = Vec::with_capacity(chunk.len());
            for &e in chunk {
                let s = &states[e];
                let kp: Vec<usize> = (0..t).filter(|&p| s.done[p]).collect();
                let pp: Vec<usize> = (0..t).filter(|&p| !s.done[p]).collect();
                known.push(kp.iter().flat_map(|&p| s.grid[p * td..(p + 1) * td].to_vec()).collect::<Vec<f64>>());
                let mut rng = RngStream::derive(cfg.seed, &[e as u64, it as u64, 0]);
                let chosen: Vec<usize> = rng.choose_distinct(pp.len(), s.plan[it]);
                picks.push(chosen);
                known_pos.push(kp);
                pending.push(pp);
            }
            let queries = |labels: &mut dyn FnMut(usize) -> Option<usize>| -> Vec<MaskedQuery<'_>> {
                (0..chunk.len())
                    .map(|i| MaskedQuery {
                        label: labels(chunk[i]),
                        known_pos: &known_pos[i],
                        known: &known[i],
                        query_pos: &pending[i],
                    })
                    .collect()
            };
            let cond_all = backbone.conditions(&params.backbone, &queries(&mut |e| episodes[e].label))?;
            let weights: Vec<f64> = chunk
                .iter()
                .zip(&picks)
                .flat_map(|(&e, p)| {
                    let s = &states[e];
                    let w = sampler.cfg.effective(s.generated as f64 / t as f64);
                    std::iter::repeat_n(w, p.len())
                })
                .collect();
            let guided = matches!(model.head, Head::Shortcut { .. }) && weights.iter().any(|&w| w != 1.0);
            let uncond_all = if guided {
                Some(backbone.conditions(&params.backbone, &queries(&mut |_| None))?)
            } else {
                None
            };
            // condition rows of the picked positions, episode by episode
            let mut rows = Vec::new();
            let mut offset = 0;
            let mut noise = Vec::new();
            let mut out_pos = Vec::with_capacity(chunk.len());
            for ((&e, pp), chosen) in chunk.iter().zip(&pending).zip(&picks) {
                let positions: Vec<usize> = chosen.iter().map(|&i| pp[i]).collect();
                for (&i, &pos) in chosen.iter().zip(&positions) {
                    rows.push(offset + i);
                    noise.extend(noise_stream(cfg.seed, e, pos).normals(nd));
                }
                offset += pp.len();
                out_pos.push((e, positions));
            }
            let c = cond_all.select_rows(&rows);
            let u = uncond_all.map(|u| u.select_rows(&rows));
            let guidance = u.as_ref().map(|u| (u, &weights[..]));
            let noise = Tensor::matrix(rows.len(), nd, noise);
            let (tokens, calls) = sample_rows(&model.head, &params.head, &c, guidance, noise, &sampler, Parallelism::Sequential)?;
            Ok((out_pos, tokens, calls))
        });
        for r in results {
            let (out_pos, tokens, calls) = r?;
            head_calls += calls;
            let mut row = 0;
            for (e, positions) in out_pos {
                let s = &mut states[e];
                for pos in positions {
                    debug_assert!(!s.done[pos]);
                    s.grid[pos * td..(pos + 1) * td].copy_from_slice(tokens.row(row));
                    s.done[pos] = true;
                    s.generated += 1;
                    row += 1;
                }
            }
        }
    }
    let mut grids = Vec::with_capacity(states.len());
    for (e, s) in states.into_iter().enumerate() {
        if s.done.iter().any(|d| !d) {
            return Err(Error::Internal(format!("episode {e} has ungenerated positions")));
        }
        grids.push(Tensor::matrix(t, td, s.grid));
    }
    Ok(Generated {
        grids,
        head_calls,
        iterations,
        conditions: Vec::new(),
        cache_appends: Vec::new(),
    })
}

/// Raster-order generation with the causal backbone, one token per step.
/// Clamps are not supported.
pub fn causal_generate(model: &FarModel, params: &ModelParams, labels: &[Option<usize>], cfg: &GenerateConfig) -> Result<Generated> {
    let Backbone::Causal(backbone) = &model.backbone else {
        return invalid("causal_generate needs the causal backbone");
    };
    cfg.sampler.validate()?;
    let (t, td) = (model.tokens(), model.token_dim());
    let nd = noise_dim(&model.head, td);
    let sampler = cfg.sampler;
    let runs = map_range(cfg.mode, labels.len(), |e| -> Result<(Vec<f64>, Tensor, u64, usize)> {
        let label = labels[e];
        let mut tokens: Vec<f64> = Vec::with_capacity(t * td);
        let mut conds = Vec::with_capacity(t);
        let (mut cache, mut ucache) = (KvCache::new(), KvCache::new());
        let mut calls = 0;
        // the unconditional cache must see every step once guidance is on
        let guided = sampler.cfg.weight != 1.0 && matches!(model.head, Head::Shortcut { .. });
        for i in 0..t {
            let w = sampler.cfg.effective(i as f64 / t as f64);
            let cond = |l: Option<usize>, cache: &mut KvCache| {
                if cfg.kv_cache {
                    backbone.condition_cached(&params.backbone, l, &tokens, cache)
                } else {
                    backbone.condition_full(&params.backbone, l, &tokens)
                }
            };
            let c = cond(label, &mut cache)?;
            let u = if guided { Some(cond(None, &mut ucache)?) } else { None };
            let noise = Tensor::matrix(1, nd, noise_stream(cfg.seed, e, i).normals(nd));
            let g = u.as_ref().map(|u| (u, std::slice::from_ref(&w)));
            let (tok, n) = sample_rows(&model.head, &params.head, &c, g, noise, &sampler, Parallelism::Sequential)?;
            calls += n;
            tokens.extend_from_slice(tok.data());
            conds.extend_from_slice(c.data());
        }
        let d = conds.len() / t;
        Ok((tokens, Tensor::matrix(t, d, conds), calls, cache.len()))
    });
    let mut out = Generated {
        grids: Vec::with_capacity(labels.len()),
        head_calls: 0,
        iterations: t,
        conditions: Vec::with_capacity(labels.len()),
        cache_appends: Vec::with_capacity(labels.len()),
    };
    for r in runs {
        let (tokens, conds, calls, appended) = r?;
        out.grids.push(Tensor::matrix(t, td, tokens));
        out.conditions.push(conds);
        out.head_calls += calls;
        out.cache_appends.push(appended);
    }
    Ok(out)
}

/// Run manifest written next to generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub ar_iters: usize,
    pub steps: usize,
    pub cfg_weight: f64,
    pub checkpoint: Option<String>,
    pub head: String,
    pub backbone: String,
    pub episodes: usize,
    pub head_calls: u64,
}

/// Header of [`write_grid_csv`] for `token_dim` components.
pub fn grid_csv_header(token_dim: usize) -> String {
    let mut h = String::from("sample,position,row,col");
    for c in 0..token_dim {
        h.push_str(&format!(",z{c}"));
    }
    h
}

/// One line per `(sample, position)`: raster position, grid row/column and
/// the token components.
pub fn write_grid_csv(mut w: impl Write, grids: &[Tensor], width: usize) -> Result<()> {
    if width == 0 {
        return invalid("grid width must be positive");
    }
    let td = grids.first().map_or(0, |g| g.cols());
    writeln!(w, "{}", grid_csv_header(td))?;
    for (s, g) in grids.iter().enumerate() {
        for p in 0..g.rows() {
            write!(w, "{s},{p},{},{}", p / width, p % width)?;
            for x in g.row(p) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}
