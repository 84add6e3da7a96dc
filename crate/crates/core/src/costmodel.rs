//! Analytic FLOP and head-call accounting.
//!
//! Every matmul `[m, k] × [k, n]` costs `2·m·k·n` FLOPs (one multiply and one
//! add per MAC). Biases, norms, softmax and activations are not counted.

use serde::{Deserialize, Serialize};

use crate::ar_engine::cosine_plan;
use crate::error::{invalid, Result};

/// FLOPs per multiply-accumulate.
pub const FLOPS_PER_MAC: u64 = 2;

/// MLP expansion ratio of the backbone blocks.
pub const MLP_RATIO: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BlockFlops {
    /// QKV and output projections, `8·L·D²`.
    pub projection: u64,
    /// Two-layer MLP, `16·L·D²`.
    pub mlp: u64,
    /// Scores and weighted values, `4·L·L_total·D`.
    pub attention: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.projection + self.mlp + self.attention
    }

    fn scaled(self, n: u64) -> Self {
        BlockFlops {
            projection: self.projection * n,
            mlp: self.mlp * n,
            attention: self.attention * n,
        }
    }

    fn add(self, o: Self) -> Self {
        BlockFlops {
            projection: self.projection + o.projection,
            mlp: self.mlp + o.mlp,
            attention: self.attention + o.attention,
        }
    }
}

/// One transformer block over `seq_len` new rows. With `kv_cache`, the rows
/// also attend `cached_len` earlier keys; without it `cached_len` is ignored
/// and the block sees only its own rows. The head count does not change the
/// total.
pub fn flops_attention_block(embed_dim: usize, _heads: usize, seq_len: usize, kv_cache: bool, cached_len: usize) -> BlockFlops {
    let (d, l) = (embed_dim as u64, seq_len as u64);
    let total = if kv_cache { l + cached_len as u64 } else { l };
    BlockFlops {
        projection: FLOPS_PER_MAC * 4 * l * d * d,
        mlp: FLOPS_PER_MAC * 2 * MLP_RATIO * l * d * d,
        attention: FLOPS_PER_MAC * 2 * l * total * d,
    }
}

/// Residual AdaLN MLP head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub depth: usize,
    pub width: usize,
    pub token_dim: usize,
    pub cond_dim: usize,
    /// Frequency features of the time embedder.
    pub t_freq_dim: usize,
    /// Frequency features of the step-size embedder; `None` for a plain flow-matching head.
    pub d_freq_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct HeadFlops {
    /// Input projection, condition projection, time and step embedders.
    pub embed: u64,
    /// Residual blocks: modulation `W→3W` and two `W→W` layers each.
    pub layers: u64,
    /// Final modulation `W→2W` and output projection.
    pub output: u64,
}

impl HeadFlops {
    pub fn total(&self) -> u64 {
        self.embed + self.layers + self.output
    }
}

/// FLOPs of one head evaluation on one token.
pub fn flops_head_call(h: &HeadSpec) -> HeadFlops {
    let w = h.width as u64;
    let embedder = |f: usize| f as u64 * w + w * w;
    let mut embed = h.token_dim as u64 * w + h.cond_dim as u64 * w + embedder(h.t_freq_dim);
    if let Some(f) = h.d_freq_dim {
        embed += embedder(f);
    }
    HeadFlops {
        embed: FLOPS_PER_MAC * embed,
        layers: FLOPS_PER_MAC * h.depth as u64 * 5 * w * w,
        output: FLOPS_PER_MAC * (2 * w * w + w * h.token_dim as u64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BackboneShape {
    /// Encoder over known tokens plus `buffer` class rows; decoder over all
    /// tokens plus the buffer.
    Masked { encoder_layers: usize, decoder_layers: usize, buffer: usize },
    /// One row per generated token.
    Causal { layers: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub id: String,
    pub backbone: BackboneShape,
    pub embed_dim: usize,
    pub heads: usize,
    pub head: HeadSpec,
    pub tokens: usize,
    pub batch: usize,
}

/// Head width assumed for the base-size presets.
pub const BASE_HEAD_WIDTH: usize = 1024;

impl ArchSpec {
    fn masked(id: &str, layers: usize, dim: usize, heads: usize, head: HeadSpec) -> Self {
        ArchSpec {
            id: id.into(),
            backbone: BackboneShape::Masked {
                encoder_layers: layers,
                decoder_layers: layers,
                buffer: 64,
            },
            embed_dim: dim,
            heads,
            head,
            tokens: 256,
            batch: 1,
        }
    }

    fn base_head(shortcut: bool) -> HeadSpec {
        HeadSpec {
            depth: 6,
            width: BASE_HEAD_WIDTH,
            token_dim: 16,
            cond_dim: 768,
            t_freq_dim: 256,
            d_freq_dim: shortcut.then_some(256),
        }
    }

    /// 12+12 blocks of width 768, flow-matching head.
    pub fn mar_b() -> Self {
        Self::masked("MAR-B", 12, 768, 12, Self::base_head(false))
    }

    /// Same backbone as [`ArchSpec::mar_b`] with a step-size-conditioned head.
    pub fn far_b() -> Self {
        Self::masked("FAR-B", 12, 768, 12, Self::base_head(true))
    }

    pub fn far_b_causal() -> Self {
        ArchSpec {
            id: "FAR-B-Causal".into(),
            backbone: BackboneShape::Causal { layers: 24 },
            embed_dim: 768,
            heads: 12,
            head: Self::base_head(true),
            tokens: 256,
            batch: 1,
        }
    }

    /// 16+16 blocks of width 1024; 8-block head of width 1280.
    pub fn far_l() -> Self {
        let head = HeadSpec {
            depth: 8,
            width: 1280,
            cond_dim: 1024,
            ..Self::base_head(true)
        };
        Self::masked("FAR-L", 16, 1024, 16, head)
    }

    pub fn presets() -> Vec<ArchSpec> {
        vec![Self::mar_b(), Self::far_b(), Self::far_b_causal(), Self::far_l()]
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.head;
        let positive = [self.embed_dim, self.heads, self.tokens, self.batch, h.width, h.token_dim, h.cond_dim];
        if positive.contains(&0) {
            return invalid(format!("{}: sizes must be positive", self.id));
        }
        let layers_ok = match self.backbone {
            BackboneShape::Masked { encoder_layers, decoder_layers, .. } => encoder_layers > 0 && decoder_layers > 0,
            BackboneShape::Causal { layers } => layers > 0,
        };
        if !layers_ok {
            return invalid(format!("{}: layer counts must be positive", self.id));
        }
        Ok(())
    }
}

/// Cost of one AR iteration (masked) or one token step (causal).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct IterationCost {
    pub tokens: usize,
    pub backbone_flops: u64,
    pub head_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub arch_id: String,
    pub k: usize,
    pub o: usize,
    pub kv_cache: bool,
    pub backbone_flops: u64,
    pub head_flops: u64,
    pub head_calls: u64,
    pub iterations: Vec<IterationCost>,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.backbone_flops + self.head_flops
    }

    /// `head / (head + backbone)`.
    pub fn head_share(&self) -> f64 {
        self.head_flops as f64 / self.total() as f64
    }

    pub fn csv_row(&self) -> CostRow {
        CostRow {
            arch_id: self.arch_id.clone(),
            k: self.k,
            o: self.o,
            kv_cache: self.kv_cache,
            backbone_flops: self.backbone_flops,
            head_flops: self.head_flops,
            head_calls: self.head_calls,
            head_share: self.head_share(),
        }
    }
}

/// One line of the cost CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub arch_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "O")]
    pub o: usize,
    pub kv_cache: bool,
    pub backbone_flops: u64,
    pub head_flops: u64,
    pub head_calls: u64,
    pub head_share: f64,
}

pub const COST_CSV_HEADER: &str = "arch_id,K,O,kv_cache,backbone_flops,head_flops,head_calls,head_share";

fn stack(arch: &ArchSpec, layers: usize, rows: usize, kv_cache: bool, cached: usize) -> u64 {
    flops_attention_block(arch.embed_dim, arch.heads, rows, kv_cache, cached).total() * layers as u64
}

/// Whole-run cost of generating `arch.tokens` tokens (times `arch.batch`)
/// with `k` AR iterations and `o` head steps per token.
///
/// Masked: iteration `i` runs the encoder over the known tokens plus the
/// buffer and the decoder over all tokens plus the buffer. Causal: `k` must
/// equal the token count; each step feeds one row against the cache, or the
/// whole prefix again without it.
pub fn breakdown(arch: &ArchSpec, k: usize, o: usize, kv_cache: bool) -> Result<CostBreakdown> {
    arch.validate()?;
    let t = arch.tokens;
    if o == 0 || k == 0 {
        return invalid("K and O must be positive");
    }
    let per_call = flops_head_call(&arch.head).total();
    let batch = arch.batch as u64;
    let iterations: Vec<IterationCost> = match arch.backbone {
        BackboneShape::Masked { encoder_layers, decoder_layers, buffer } => {
            if k > t {
                return invalid(format!("K={k} exceeds {t} tokens"));
            }
            let mut known = 0;
            cosine_plan(k, t)?
                .into_iter()
                .map(|count| {
                    let enc = stack(arch, encoder_layers, known + buffer, false, 0);
                    let dec = stack(arch, decoder_layers, t + buffer, false, 0);
                    known += count;
                    IterationCost {
                        tokens: count,
                        backbone_flops: (enc + dec) * batch,
                        head_flops: per_call * (count * o) as u64 * batch,
                    }
                })
                .collect()
        }
        BackboneShape::Causal { layers } => {
            if k != t {
                return invalid(format!("causal generation takes exactly {t} iterations, not {k}"));
            }
            (0..t)
                .map(|i| {
                    let flops = if kv_cache {
                        stack(arch, layers, 1, true, i)
                    } else {
                        stack(arch, layers, i + 1, false, 0)
                    };
                    IterationCost {
                        tokens: 1,
                        backbone_flops: flops * batch,
                        head_flops: per_call * o as u64 * batch,
                    }
                })
                .collect()
        }
    };
    Ok(CostBreakdown {
        arch_id: arch.id.clone(),
        k,
        o,
        kv_cache: kv_cache && matches!(arch.backbone, BackboneShape::Causal { .. }),
        backbone_flops: iterations.iter().map(|i| i.backbone_flops).sum(),
        head_flops: iterations.iter().map(|i| i.head_flops).sum(),
        head_calls: (t * o) as u64 * batch,
        iterations,
    })
}

/// Causal backbone cost of `tokens` steps, split by term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct KvComparison {
    pub with_cache: BlockFlops,
    pub without_cache: BlockFlops,
}

/// Backbone FLOPs of causal generation with and without the KV cache,
/// for a `layers`-deep stack (the backbone depth of a causal `arch`; the
/// encoder plus decoder depth otherwise).
pub fn kv_cache_comparison(arch: &ArchSpec, tokens: usize) -> KvComparison {
    let layers = match arch.backbone {
        BackboneShape::Causal { layers } => layers,
        BackboneShape::Masked { encoder_layers, decoder_layers, .. } => encoder_layers + decoder_layers,
    } as u64;
    let (d, h) = (arch.embed_dim, arch.heads);
    let mut with = BlockFlops::default();
    let mut without = BlockFlops::default();
    for i in 0..tokens {
        with = with.add(flops_attention_block(d, h, 1, true, i));
        without = without.add(flops_attention_block(d, h, i + 1, false, 0));
    }
    let b = arch.batch as u64;
    KvComparison {
        with_cache: with.scaled(layers * b),
        without_cache: without.scaled(layers * b),
    }
}

pub const GRID_K: [usize; 3] = [32, 64, 256];
pub const GRID_O: [usize; 5] = [2, 8, 25, 50, 100];

/// Every preset over the `K × O` grid. Causal presets run `K = T` with and
/// without the cache.
pub fn cost_grid(archs: &[ArchSpec]) -> Result<Vec<CostBreakdown>> {
    let mut out = Vec::new();
    for a in archs {
        match a.backbone {
            BackboneShape::Masked { .. } => {
                for k in GRID_K {
                    for o in GRID_O {
                        out.push(breakdown(a, k, o, false)?);
                    }
                }
            }
            BackboneShape::Causal { .. } => {
                for cache in [true, false] {
                    for o in GRID_O {
                        out.push(breakdown(a, a.tokens, o, cache)?);
                    }
                }
            }
        }
    }
    Ok(out)
}
