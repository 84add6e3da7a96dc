//! Backbones that turn context tokens into per-token conditions.
//!
//! The masked backbone is a bidirectional encoder-decoder: the encoder reads
//! a class token plus the known tokens, the decoder adds one mask token per
//! unknown position and emits a condition for each. The causal backbone is a
//! left-to-right transformer over `[CLS, z_1, z_2, …]` whose output at row
//! `i − 1` conditions token `i`; it supports incremental decoding with a KV
//! cache.

use serde::{Deserialize, Serialize};

use crate::diffcore::{AttentionSpec, Bound, ParamId, ParamStore, RngStream, Segment, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{init_tensor, Init, Linear, TransformerBlock};

/// Partition of `0..n` into known (`unmasked`) and to-be-predicted (`masked`)
/// raster positions. Both lists are sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub n: usize,
    pub unmasked: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskSet {
    /// Masks exactly `max(1, round(ratio · n))` positions chosen uniformly.
    pub fn with_ratio(n: usize, ratio: f64, rng: &mut RngStream) -> Result<Self> {
        if n == 0 || !(0.0..=1.0).contains(&ratio) {
            return invalid(format!("mask ratio {ratio} over {n} tokens"));
        }
        let k = ((ratio * n as f64).round() as usize).clamp(1, n);
        let mut masked = rng.choose_distinct(n, k);
        masked.sort_unstable();
        Ok(Self::from_masked(n, masked))
    }

    fn from_masked(n: usize, masked: Vec<usize>) -> Self {
        let mut is_m = vec![false; n];
        for &m in &masked {
            is_m[m] = true;
        }
        MaskSet {
            n,
            unmasked: (0..n).filter(|&i| !is_m[i]).collect(),
            masked,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.n as f64
    }
}

/// Draws the mask ratio uniformly from `range`, then the mask.
pub fn partition_tokens(n: usize, range: (f64, f64), rng: &mut RngStream) -> Result<MaskSet> {
    let (lo, hi) = range;
    if !(0.0..=hi).contains(&lo) || hi > 1.0 {
        return invalid(format!("mask ratio range [{lo}, {hi}]"));
    }
    let ratio = lo + (hi - lo) * rng.uniform();
    MaskSet::with_ratio(n, ratio, rng)
}

/// Smallest training mask ratio.
pub const MIN_MASK_RATIO: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub token_dim: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Depth of the causal stack.
    pub causal_depth: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    /// Multiplicity of the class token in the masked encoder. The causal
    /// backbone always uses a single class token.
    pub cls_repeat: usize,
    /// Number of raster positions.
    pub max_sequence: usize,
    pub mlp_ratio: usize,
    /// Std of the learned positional tables at init.
    pub pos_init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            token_dim: 2,
            embed_dim: 64,
            encoder_depth: 2,
            decoder_depth: 2,
            causal_depth: 4,
            num_heads: 4,
            num_classes: 10,
            cls_repeat: 64,
            max_sequence: 16,
            mlp_ratio: 4,
            pos_init_std: 0.02,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.token_dim, self.embed_dim, self.num_heads, self.num_classes, self.cls_repeat, self.max_sequence, self.mlp_ratio]
            .contains(&0)
        {
            return invalid("backbone dimensions must be positive");
        }
        if self.embed_dim % self.num_heads != 0 {
            return invalid(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if !(self.pos_init_std >= 0.0 && self.pos_init_std.is_finite()) {
            return invalid("pos_init_std must be finite and non-negative");
        }
        Ok(())
    }

    fn check_label(&self, label: Option<usize>) -> Result<usize> {
        match label {
            None => Ok(self.num_classes),
            Some(l) if l < self.num_classes => Ok(l),
            Some(l) => invalid(format!("unknown class label {l} (have {})", self.num_classes)),
        }
    }
}

/// One masked-conditioning query: known tokens and the positions to condition.
#[derive(Clone, Copy, Debug)]
pub struct MaskedQuery<'a> {
    /// `None` selects the null (unconditional) class embedding.
    pub label: Option<usize>,
    pub known_pos: &'a [usize],
    /// One row per entry of `known_pos`, `token_dim` values each, flattened.
    pub known: &'a [f64],
    pub query_pos: &'a [usize],
}

/// Masked encoder-decoder layout; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct MaskedConditioner {
    config: BackboneConfig,
    class_table: ParamId,
    token_embed: Linear,
    enc_pos: ParamId,
    encoder: Vec<TransformerBlock>,
    dec_embed: Linear,
    dec_pos: ParamId,
    mask_token: ParamId,
    decoder: Vec<TransformerBlock>,
}

fn table(store: &mut ParamStore, name: &str, rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> ParamId {
    store.add(name, init_tensor(rows, cols, Init::Normal(std), rng), false)
}

impl MaskedConditioner {
    pub fn init(config: BackboneConfig, rng: &mut RngStream) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut s = ParamStore::new();
        let d = config.embed_dim;
        let n = config.max_sequence;
        let c = MaskedConditioner {
            class_table: table(&mut s, "masked.class", config.num_classes + 1, d, 0.02, rng),
            token_embed: Linear::new(&mut s, "masked.token", config.token_dim, d, Init::Xavier, false, rng),
            // one extra row for the class-token slot
            enc_pos: table(&mut s, "masked.enc_pos", n + 1, d, config.pos_init_std, rng),
            encoder: (0..config.encoder_depth)
                .map(|i| TransformerBlock::new(&mut s, &format!("masked.enc{i}"), d, config.mlp_ratio, rng))
                .collect(),
            dec_embed: Linear::new(&mut s, "masked.dec_embed", d, d, Init::Xavier, false, rng),
            dec_pos: table(&mut s, "masked.dec_pos", n + 1, d, config.pos_init_std, rng),
            mask_token: table(&mut s, "masked.mask_token", 1, d, 0.02, rng),
            decoder: (0..config.decoder_depth)
                .map(|i| TransformerBlock::new(&mut s, &format!("masked.dec{i}"), d, config.mlp_ratio, rng))
                .collect(),
            config,
        };
        Ok((c, s))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Conditions for every query position, stacked query by query in the
    /// listed order: `[Σ |query_pos|, embed_dim]`.
    ///
    /// Each query is processed with its positions sorted, so the result for a
    /// position never depends on how the caller ordered them.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, queries: &[MaskedQuery<'_>]) -> Result<Var> {
        let cfg = &self.config;
        let (n, td) = (cfg.max_sequence, cfg.token_dim);
        if queries.is_empty() {
            return invalid("no conditioning queries");
        }
        let e = queries.len();
        let mut labels = Vec::with_capacity(e);
        let mut known = Vec::new();
        let mut known_pos = Vec::new();
        let mut mask_pos = Vec::new();
        for q in queries {
            labels.push(cfg.check_label(q.label)?);
            if q.known.len() != q.known_pos.len() * td {
                return invalid(format!("{} known positions but {} values", q.known_pos.len(), q.known.len()));
            }
            if q.query_pos.is_empty() {
                return invalid("conditioning query without masked positions");
            }
            let mut seen = vec![false; n];
            for &pos in q.known_pos.iter().chain(q.query_pos) {
                if pos >= n {
                    return invalid(format!("position {pos} out of range for {n} tokens"));
                }
                if std::mem::replace(&mut seen[pos], true) {
                    return invalid(format!("position {pos} listed twice"));
                }
            }
            known.extend_from_slice(q.known);
            known_pos.extend_from_slice(q.known_pos);
        }
        let total_u = known_pos.len();

        // Encoder rows, query-major: [cls, known...].
        let cls = tape.gather_rows(p[self.class_table], &labels)?;
        let mut stack = vec![cls];
        if total_u > 0 {
            let kv = tape.constant(Tensor::matrix(total_u, td, known))?;
            stack.push(self.token_embed.forward(tape, p, kv)?);
        }
        let stack = tape.concat_rows(&stack)?;
        let mut enc_order = Vec::with_capacity(e + total_u);
        let mut enc_pos = Vec::with_capacity(e + total_u);
        let mut segs = Vec::with_capacity(e);
        let mut log_w = Vec::with_capacity(e + total_u);
        let mut u_offset = e;
        for (i, q) in queries.iter().enumerate() {
            segs.push(Segment::square(enc_order.len(), 1 + q.known_pos.len()));
            enc_order.push(i);
            enc_pos.push(n);
            log_w.push((cfg.cls_repeat as f64).ln());
            for (j, &pos) in q.known_pos.iter().enumerate() {
                enc_order.push(u_offset + j);
                enc_pos.push(pos);
                log_w.push(0.0);
            }
            u_offset += q.known_pos.len();
        }
        let x = tape.gather_rows(stack, &enc_order)?;
        let pe = tape.gather_rows(p[self.enc_pos], &enc_pos)?;
        let mut x = tape.add(x, pe)?;
        let spec = AttentionSpec {
            key_log_weight: Some(log_w.clone()),
            ..AttentionSpec::new(cfg.num_heads, segs)
        };
        for b in &self.encoder {
            x = b.forward(tape, p, x, &spec)?;
        }
        let x = tape.layernorm(x)?;

        // Decoder rows, query-major: [encoder rows..., mask tokens (sorted positions)...].
        let enc_rows = enc_order.len();
        let enc = self.dec_embed.forward(tape, p, x)?;
        let mut sorted_queries = Vec::with_capacity(e);
        for q in queries {
            let mut s: Vec<(usize, usize)> = q.query_pos.iter().copied().enumerate().map(|(i, p)| (p, i)).collect();
            s.sort_unstable();
            mask_pos.extend(s.iter().map(|&(p, _)| p));
            sorted_queries.push(s);
        }
        let total_m = mask_pos.len();
        let mt = tape.gather_rows(p[self.mask_token], &vec![0; total_m])?;
        let stack = tape.concat_rows(&[enc, mt])?;
        let mut dec_order = Vec::with_capacity(enc_rows + total_m);
        let mut dec_pos = Vec::with_capacity(enc_rows + total_m);
        let mut segs = Vec::with_capacity(e);
        let mut dec_w = Vec::with_capacity(enc_rows + total_m);
        let mut out_rows = vec![0; total_m];
        let (mut enc_cursor, mut m_cursor, mut out_base) = (0, 0, 0);
        for (q, s) in queries.iter().zip(&sorted_queries) {
            let len_enc = 1 + q.known_pos.len();
            segs.push(Segment::square(dec_order.len(), len_enc + s.len()));
            for r in 0..len_enc {
                dec_order.push(enc_cursor + r);
                dec_pos.push(enc_pos[enc_cursor + r]);
                dec_w.push(log_w[enc_cursor + r]);
            }
            for (k, &(pos, listed)) in s.iter().enumerate() {
                out_rows[out_base + listed] = dec_order.len();
                dec_order.push(enc_rows + m_cursor + k);
                dec_pos.push(pos);
                dec_w.push(0.0);
            }
            enc_cursor += len_enc;
            m_cursor += s.len();
            out_base += s.len();
        }
        let y = tape.gather_rows(stack, &dec_order)?;
        let pe = tape.gather_rows(p[self.dec_pos], &dec_pos)?;
        let mut y = tape.add(y, pe)?;
        let spec = AttentionSpec {
            key_log_weight: Some(dec_w),
            ..AttentionSpec::new(cfg.num_heads, segs)
        };
        for b in &self.decoder {
            y = b.forward(tape, p, y, &spec)?;
        }
        let y = tape.layernorm(y)?;
        tape.gather_rows(y, &out_rows)
    }

    /// Inference-only [`forward`](Self::forward).
    pub fn conditions(&self, params: &ParamStore, queries: &[MaskedQuery<'_>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &p, queries)?;
        Ok(tape.value(out).clone())
    }
}

/// Per-layer keys and values of the rows processed so far in one episode.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    layers: Vec<(Tensor, Tensor)>,
    len: usize,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rows processed (the class token counts as one).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cached key rows of `layer`.
    pub fn keys(&self, layer: usize) -> Option<&Tensor> {
        self.layers.get(layer).map(|(k, _)| k)
    }
}

/// Left-to-right transformer over `[CLS, z_1, …, z_{T−1}]`.
#[derive(Clone, Debug)]
pub struct CausalConditioner {
    config: BackboneConfig,
    class_table: ParamId,
    token_embed: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
}

impl CausalConditioner {
    pub fn init(config: BackboneConfig, rng: &mut RngStream) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut s = ParamStore::new();
        let d = config.embed_dim;
        let c = CausalConditioner {
            class_table: table(&mut s, "causal.class", config.num_classes + 1, d, 0.02, rng),
            token_embed: Linear::new(&mut s, "causal.token", config.token_dim, d, Init::Xavier, false, rng),
            pos: table(&mut s, "causal.pos", config.max_sequence, d, config.pos_init_std, rng),
            blocks: (0..config.causal_depth)
                .map(|i| TransformerBlock::new(&mut s, &format!("causal.block{i}"), d, config.mlp_ratio, rng))
                .collect(),
            config,
        };
        Ok((c, s))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Input rows for consecutive sequence positions `start..start+len` of
    /// one episode; row `r` is the class token for `r = 0`, else `z_r`.
    fn embed(&self, tape: &mut Tape, p: &Bound, label: usize, tokens: &[f64], start: usize, len: usize) -> Result<Var> {
        let td = self.config.token_dim;
        let mut parts = Vec::new();
        if start == 0 {
            parts.push(tape.gather_rows(p[self.class_table], &[label])?);
        }
        let first_tok = start.max(1);
        let n_tok = start + len - first_tok;
        if n_tok > 0 {
            let rows = &tokens[(first_tok - 1) * td..(first_tok - 1 + n_tok) * td];
            let t = tape.constant(Tensor::matrix(n_tok, td, rows.to_vec()))?;
            parts.push(self.token_embed.forward(tape, p, t)?);
        }
        let x = tape.concat_rows(&parts)?;
        let pe = tape.slice_rows(p[self.pos], start, len)?;
        tape.add(x, pe)
    }

    /// Conditions for all `len` positions of each episode:
    /// `[Σ len, embed_dim]`, row `i` of an episode conditioning token `i+1`.
    ///
    /// `episodes` lists `(label, tokens)`; tokens hold at least `len − 1` rows.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, episodes: &[(Option<usize>, &[f64])], len: usize) -> Result<Var> {
        let cfg = &self.config;
        if len == 0 || len > cfg.max_sequence {
            return invalid(format!("sequence length {len} outside 1..={}", cfg.max_sequence));
        }
        let mut parts = Vec::with_capacity(episodes.len());
        let mut segs = Vec::with_capacity(episodes.len());
        for (i, (label, tokens)) in episodes.iter().enumerate() {
            let label = cfg.check_label(*label)?;
            if tokens.len() < (len - 1) * cfg.token_dim {
                return invalid(format!("episode {i} has too few tokens for length {len}"));
            }
            parts.push(self.embed(tape, p, label, tokens, 0, len)?);
            segs.push(Segment::square(i * len, len));
        }
        let mut x = tape.concat_rows(&parts)?;
        let spec = AttentionSpec {
            causal: true,
            ..AttentionSpec::new(cfg.num_heads, segs)
        };
        for b in &self.blocks {
            x = b.forward(tape, p, x, &spec)?;
        }
        tape.layernorm(x)
    }

    /// Condition for token `prefix.len() + 1` computed from scratch.
    pub fn condition_full(&self, params: &ParamStore, label: Option<usize>, prefix: &[f64]) -> Result<Tensor> {
        let len = prefix.len() / self.config.token_dim + 1;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false)?;
        let all = self.forward(&mut tape, &p, &[(label, prefix)], len)?;
        let last = tape.slice_rows(all, len - 1, 1)?;
        Ok(tape.value(last).clone())
    }

    /// Condition for token `prefix.len() + 1`, processing only the newest
    /// row and appending its keys/values to `cache`.
    ///
    /// The cache must already hold the class token and all but the last
    /// prefix token, i.e. `cache.len() == prefix rows`.
    pub fn condition_cached(
        &self,
        params: &ParamStore,
        label: Option<usize>,
        prefix: &[f64],
        cache: &mut KvCache,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let rows = prefix.len() / cfg.token_dim;
        if cache.len != rows {
            return Err(Error::CacheLength {
                expected: rows,
                found: cache.len,
            });
        }
        if rows >= cfg.max_sequence {
            return invalid(format!("prefix of {rows} tokens reaches max_sequence"));
        }
        let label = cfg.check_label(label)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false)?;
        let mut x = self.embed(&mut tape, &p, label, prefix, rows, 1)?;
        let spec = AttentionSpec {
            causal: true,
            ..AttentionSpec::new(
                cfg.num_heads,
                vec![Segment {
                    q_start: 0,
                    q_len: 1,
                    k_start: 0,
                    k_len: rows + 1,
                }],
            )
        };
        let mut new_layers = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let past = cache.layers.get(l).map(|(k, v)| (k, v));
            let (y, kv) = b.forward_with_cache(&mut tape, &p, x, past, &spec)?;
            new_layers.push((tape.value(kv.k).clone(), tape.value(kv.v).clone()));
            x = y;
        }
        let c = tape.layernorm(x)?;
        for (l, (k, v)) in new_layers.into_iter().enumerate() {
            match cache.layers.get_mut(l) {
                Some((ck, cv)) => {
                    *ck = append_rows(ck, &k);
                    *cv = append_rows(cv, &v);
                }
                None => cache.layers.push((k, v)),
            }
        }
        cache.len += 1;
        Ok(tape.value(c).clone())
    }
}

fn append_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use proptest::prelude::*;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            embed_dim: 8,
            num_heads: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            causal_depth: 2,
            num_classes: 3,
            cls_repeat: 4,
            max_sequence: 9,
            mlp_ratio: 2,
            pos_init_std: 0.02,
            ..Default::default()
        }
    }

    #[test]
    fn ratio_examples() {
        let mut rng = RngStream::new(0, 0);
        let m = MaskSet::with_ratio(16, 1.0, &mut rng).unwrap();
        assert!(m.unmasked.is_empty() && m.masked.len() == 16);
        assert_eq!(MaskSet::with_ratio(10, 0.7, &mut rng).unwrap().masked.len(), 7);
        assert_eq!(MaskSet::with_ratio(10, 0.0, &mut rng).unwrap().masked.len(), 1);
        assert!(partition_tokens(4, (0.8, 0.7), &mut rng).is_err());
    }

    #[test]
    fn ratio_distribution_is_uniform() {
        let mut rng = RngStream::new(5, 0);
        let mut draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let lo = 0.7;
                let r = lo + 0.3 * rng.uniform();
                let _ = MaskSet::with_ratio(16, r, &mut rng).unwrap();
                r
            })
            .collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, x)| ((x - 0.7) / 0.3 - i as f64 / n).abs())
            .fold(0.0, f64::max);
        assert!(ks < 1.36 / n.sqrt(), "{ks}");
    }

    proptest! {
        #[test]
        fn partitions_cover(n in 1usize..40, seed: u64) {
            let m = partition_tokens(n, (MIN_MASK_RATIO, 1.0), &mut RngStream::new(seed, 0)).unwrap();
            let mut all: Vec<usize> = m.unmasked.iter().chain(&m.masked).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(m.masked.len() as f64 >= (0.7 * n as f64).round().max(1.0) - 1e-9);
        }
    }

    fn randomized() -> (MaskedConditioner, ParamStore) {
        let mut rng = RngStream::new(3, 0);
        let (c, mut s) = MaskedConditioner::init(cfg(), &mut rng).unwrap();
        for p in s.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::randn(&shape, 0.3, &mut rng);
        }
        (c, s)
    }

    #[test]
    fn masked_is_order_equivariant_and_batch_independent() {
        let (c, s) = randomized();
        let known = [0.3, -0.1, 1.2, 0.4];
        let q1 = MaskedQuery { label: Some(1), known_pos: &[2, 5], known: &known, query_pos: &[0, 7, 3] };
        let q2 = MaskedQuery { query_pos: &[7, 3, 0], ..q1 };
        let a = c.conditions(&s, &[q1]).unwrap();
        let b = c.conditions(&s, &[q2]).unwrap();
        assert_eq!(a.row(0), b.row(2));
        assert_eq!(a.row(1), b.row(0));
        assert_eq!(a.row(2), b.row(1));
        let other = MaskedQuery { label: None, known_pos: &[], known: &[], query_pos: &[4] };
        let batched = c.conditions(&s, &[other, q1]).unwrap();
        for r in 0..3 {
            for (x, y) in batched.row(r + 1).iter().zip(a.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_depends_on_label_and_validates() {
        let (c, s) = randomized();
        let q = |label| MaskedQuery { label, known_pos: &[], known: &[], query_pos: &[1, 2] };
        let a = c.conditions(&s, &[q(Some(0))]).unwrap();
        let b = c.conditions(&s, &[q(Some(2))]).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert!(c.conditions(&s, &[q(Some(3))]).is_err());
        let bad = MaskedQuery { label: None, known_pos: &[], known: &[], query_pos: &[9] };
        assert!(c.conditions(&s, &[bad]).is_err());
    }

    #[test]
    fn shared_positional_embedding_gives_equal_conditions() {
        let (c, mut s) = randomized();
        let id = s.find("masked.dec_pos").unwrap();
        let row = s.get(id).row(1).to_vec();
        s.get_mut(id).row_mut(6).copy_from_slice(&row);
        let q = MaskedQuery { label: Some(0), known_pos: &[3], known: &[0.5, 0.5], query_pos: &[1, 6] };
        let out = c.conditions(&s, &[q]).unwrap();
        for (x, y) in out.row(0).iter().zip(out.row(1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn class_multiplicity_matches_repeated_tokens() {
        // With a tiny embedding and no blocks the encoder is a single attention
        // layer; compare log-weighting against literally repeating the key.
        let mut rng = RngStream::new(1, 0);
        let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let reps = 5;
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(v.clone()).unwrap());
        let spec = AttentionSpec {
            key_log_weight: Some(vec![(reps as f64).ln(), 0.0, 0.0]),
            ..AttentionSpec::new(2, vec![Segment::square(0, 3)])
        };
        let a = tape.attention(qv, kv, vv, &spec).unwrap();
        let idx: Vec<usize> = std::iter::repeat_n(0, reps).chain([1, 2]).collect();
        let k2 = tape.constant(k.select_rows(&idx)).unwrap();
        let v2 = tape.constant(v.select_rows(&idx)).unwrap();
        let spec2 = AttentionSpec::new(2, vec![Segment { q_start: 0, q_len: 3, k_start: 0, k_len: reps + 2 }]);
        let b = tape.attention(qv, k2, v2, &spec2).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-14);
    }

    /// Gradient check over every parameter except the attention biases: the
    /// key part of `qkv.bias` shifts each softmax row by a constant, so its
    /// true gradient is exactly zero and a relative error there measures only
    /// rounding noise.
    pub(crate) fn check_params<F>(s: &ParamStore, f: F) -> f64
    where
        F: Fn(&mut Tape, &Bound) -> Result<Var>,
    {
        let free: Vec<usize> = (0..s.len()).filter(|&i| !s.params()[i].name.ends_with("qkv.bias")).collect();
        let point: Vec<Tensor> = free.iter().map(|&i| s.params()[i].value.clone()).collect();
        grad_check(&point, 1e-5, |tape, vars| {
            let fixed = s.bind(tape, false)?;
            let mut all: Vec<Var> = (0..s.len()).map(|i| fixed.var(s.id(i))).collect();
            for (&i, &v) in free.iter().zip(vars) {
                all[i] = v;
            }
            f(tape, &Bound::from_vars(all))
        })
        .unwrap()
    }

    #[test]
    fn masked_gradients_check() {
        let (c, s) = randomized();
        let known = [0.3, -0.1];
        let proj = Tensor::randn(&[2, 8], 1.0, &mut RngStream::new(2, 0));
        let err = check_params(&s, |tape, p| {
            let q = MaskedQuery { label: Some(2), known_pos: &[4], known: &known, query_pos: &[0, 8] };
            let out = c.forward(tape, p, &[q])?;
            let w = tape.constant(proj.clone())?;
            let o = tape.mul(out, w)?;
            tape.sum(o)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn causal_gradients_check() {
        let (c, s) = causal();
        let toks = RngStream::new(3, 3).normals(4 * 2);
        let proj = Tensor::randn(&[5, 8], 1.0, &mut RngStream::new(2, 0));
        let err = check_params(&s, |tape, p| {
            let out = c.forward(tape, p, &[(Some(1), &toks)], 5)?;
            let w = tape.constant(proj.clone())?;
            let o = tape.mul(out, w)?;
            tape.sum(o)
        });
        assert!(err < 1e-4, "{err}");
    }

    fn causal() -> (CausalConditioner, ParamStore) {
        let mut rng = RngStream::new(4, 0);
        let (c, mut s) = CausalConditioner::init(cfg(), &mut rng).unwrap();
        for p in s.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::randn(&shape, 0.3, &mut rng);
        }
        (c, s)
    }

    #[test]
    fn cache_matches_full_recompute() {
        let (c, s) = causal();
        let toks = RngStream::new(8, 0).normals(8 * 2);
        let mut cache = KvCache::new();
        for i in 0..=8 {
            let prefix = &toks[..i * 2];
            let a = c.condition_cached(&s, Some(1), prefix, &mut cache).unwrap();
            let b = c.condition_full(&s, Some(1), prefix).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10);
            assert_eq!(cache.len(), i + 1);
            assert_eq!(cache.keys(0).unwrap().rows(), i + 1);
        }
        let e = c.condition_cached(&s, Some(1), &toks[..4], &mut KvCache::new()).unwrap_err();
        assert!(matches!(e, Error::CacheLength { expected: 2, found: 0 }));
    }

    #[test]
    fn causal_ignores_the_future() {
        let (c, s) = causal();
        let mut toks = RngStream::new(9, 0).normals(8 * 2);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let a = c.forward(&mut tape, &p, &[(Some(0), &toks)], 9).unwrap();
        let a = tape.value(a).clone();
        toks[4 * 2] += 10.0; // z_5 feeds row 5
        let b = c.forward(&mut tape, &p, &[(Some(0), &toks)], 9).unwrap();
        let b = tape.value(b).clone();
        for r in 0..9 {
            if r < 5 {
                assert_eq!(a.row(r), b.row(r));
            } else {
                assert_ne!(a.row(r), b.row(r));
            }
        }
        let first0 = c.condition_full(&s, Some(0), &[]).unwrap();
        let first2 = c.condition_full(&s, Some(2), &[]).unwrap();
        assert!(first0.max_abs_diff(&first2) > 1e-6);
    }
}
