//! Layers shared by the heads and the backbones.

use crate::diffcore::{AttentionSpec, Bound, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
}

pub(crate) fn init_tensor(rows: usize, cols: usize, init: Init, rng: &mut RngStream) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(&[rows, cols]),
        Init::Xavier => {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| a * (2.0 * rng.uniform() - 1.0)).collect();
            Tensor::matrix(rows, cols, data)
        }
        Init::Normal(std) => Tensor::randn(&[rows, cols], std, rng),
    }
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// `head_params` marks the weight as decay-exempt too; biases always are.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        head_params: bool,
        rng: &mut RngStream,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(fan_in, fan_out, init, rng),
            head_params,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]), true);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add_row(y, p[self.bias])
    }
}

/// Residual MLP block modulated by adaptive layer normalization:
/// `x + gate * mlp(ln(x) * (1 + scale) + shift)`, with shift/scale/gate
/// projected from the conditioning vector.
#[derive(Clone, Debug)]
pub struct AdaLnBlock {
    modulation: Linear,
    fc1: Linear,
    fc2: Linear,
    width: usize,
}

impl AdaLnBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, head: bool, rng: &mut RngStream) -> Self {
        AdaLnBlock {
            modulation: Linear::new(store, &format!("{name}.ada"), width, 3 * width, Init::Zeros, head, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width, Init::Xavier, head, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), width, width, Init::Xavier, head, rng),
            width,
        }
    }

    /// `cond_act` is the already-activated conditioning vector, one row per row of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, cond_act: Var) -> Result<Var> {
        let w = self.width;
        let m = self.modulation.forward(tape, p, cond_act)?;
        let shift = tape.slice_cols(m, 0, w)?;
        let scale = tape.slice_cols(m, w, w)?;
        let gate = tape.slice_cols(m, 2 * w, w)?;
        let h = modulate(tape, x, shift, scale)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.silu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        let h = tape.mul(gate, h)?;
        tape.add(x, h)
    }
}

/// `ln(x) * (1 + scale) + shift`
pub(crate) fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layernorm(x)?;
    let s1 = tape.add_scalar(scale, 1.0)?;
    let h = tape.mul(n, s1)?;
    tape.add(h, shift)
}

/// Final adaptive-LN projection to the output width.
#[derive(Clone, Debug)]
pub struct AdaLnOutput {
    modulation: Linear,
    out: Linear,
    width: usize,
}

impl AdaLnOutput {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        out_dim: usize,
        head: bool,
        rng: &mut RngStream,
    ) -> Self {
        AdaLnOutput {
            modulation: Linear::new(store, &format!("{name}.ada"), width, 2 * width, Init::Zeros, head, rng),
            out: Linear::new(store, &format!("{name}.out"), width, out_dim, Init::Zeros, head, rng),
            width,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, cond_act: Var) -> Result<Var> {
        let m = self.modulation.forward(tape, p, cond_act)?;
        let shift = tape.slice_cols(m, 0, self.width)?;
        let scale = tape.slice_cols(m, self.width, self.width)?;
        let h = modulate(tape, x, shift, scale)?;
        self.out.forward(tape, p, h)
    }
}

/// Sinusoidal features of scalars in `[0, 1]`, evaluated at `1000 * s`.
pub fn sinusoidal_embedding(values: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &s in values {
        let x = 1000.0 * s;
        let start = data.len();
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((x * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((x * freq).sin());
        }
        data.resize(start + dim, 0.0);
    }
    Tensor::matrix(values.len(), dim, data)
}

/// Two-layer MLP `lin2(silu(lin1(x)))` used to embed timesteps and step sizes.
#[derive(Clone, Debug)]
pub struct ScalarEmbedder {
    lin1: Linear,
    lin2: Linear,
    freq_dim: usize,
}

impl ScalarEmbedder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        freq_dim: usize,
        width: usize,
        head: bool,
        rng: &mut RngStream,
    ) -> Self {
        ScalarEmbedder {
            lin1: Linear::new(store, &format!("{name}.lin1"), freq_dim, width, Init::Normal(0.02), head, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), width, width, Init::Normal(0.02), head, rng),
            freq_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, values: &[f64]) -> Result<Var> {
        let f = tape.constant(sinusoidal_embedding(values, self.freq_dim))?;
        let h = self.lin1.forward(tape, p, f)?;
        let h = tape.silu(h)?;
        self.lin2.forward(tape, p, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

/// Key/value rows produced by one block for the rows it processed.
pub struct BlockKv {
    pub k: Var,
    pub v: Var,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, mlp_ratio: usize, rng: &mut RngStream) -> Self {
        TransformerBlock {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, Init::Xavier, false, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, Init::Xavier, false, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp_ratio * dim, Init::Xavier, false, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * dim, dim, Init::Xavier, false, rng),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, spec: &AttentionSpec) -> Result<Var> {
        Ok(self.forward_with_cache(tape, p, x, None, spec)?.0)
    }

    /// Like [`forward`](Self::forward), but keys/values of earlier rows may be
    /// supplied (`past`, as constants) and are prepended to this call's keys.
    /// Returns the output and the key/value rows of `x` itself.
    pub fn forward_with_cache(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        past: Option<(&Tensor, &Tensor)>,
        spec: &AttentionSpec,
    ) -> Result<(Var, BlockKv)> {
        let d = self.dim;
        let h = tape.layernorm(x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k_new = tape.slice_cols(qkv, d, d)?;
        let v_new = tape.slice_cols(qkv, 2 * d, d)?;
        let (k, v) = match past {
            Some((pk, pv)) => {
                let pk = tape.constant(pk.clone())?;
                let pv = tape.constant(pv.clone())?;
                (tape.concat_rows(&[pk, k_new])?, tape.concat_rows(&[pv, v_new])?)
            }
            None => (k_new, v_new),
        };
        let a = tape.attention(q, k, v, spec)?;
        let a = self.proj.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = tape.layernorm(x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        let out = tape.add(x, h)?;
        Ok((out, BlockKv { k: k_new, v: v_new }))
    }
}
