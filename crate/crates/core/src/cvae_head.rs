//! Conditional VAE head: one decoder call turns prior noise and a condition
//! into a token.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Bound, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{AdaLnBlock, AdaLnOutput, Init, Linear};
use crate::shortcut_head::Sampled;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub token_dim: usize,
    pub cond_dim: usize,
    /// Defaults to `token_dim`.
    pub latent_dim: Option<usize>,
    pub hidden_width: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub kl_weight: f64,
}

/// KL weights of the reproduction sweep.
pub const KL_SWEEP: [f64; 6] = [0.1, 0.01, 0.001, 0.0005, 0.0002, 0.0001];

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            token_dim: 2,
            cond_dim: 64,
            latent_dim: None,
            hidden_width: 64,
            encoder_depth: 3,
            decoder_depth: 3,
            kl_weight: 0.01,
        }
    }
}

impl CvaeConfig {
    pub fn latent(&self) -> usize {
        self.latent_dim.unwrap_or(self.token_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.token_dim, self.cond_dim, self.latent(), self.hidden_width, self.encoder_depth, self.decoder_depth]
            .contains(&0)
        {
            return invalid("cvae dimensions and depths must be positive");
        }
        if !(self.kl_weight > 0.0 && self.kl_weight.is_finite()) {
            return invalid(format!("kl_weight {} must be positive", self.kl_weight));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Tower {
    input: Linear,
    cond: Linear,
    blocks: Vec<AdaLnBlock>,
    out: AdaLnOutput,
}

impl Tower {
    #[allow(clippy::too_many_arguments)]
    fn new(
        s: &mut ParamStore,
        name: &str,
        in_dim: usize,
        cond_dim: usize,
        width: usize,
        depth: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        Tower {
            input: Linear::new(s, &format!("{name}.input"), in_dim, width, Init::Xavier, true, rng),
            cond: Linear::new(s, &format!("{name}.cond"), cond_dim, width, Init::Xavier, true, rng),
            blocks: (0..depth)
                .map(|i| AdaLnBlock::new(s, &format!("{name}.block{i}"), width, true, rng))
                .collect(),
            out: AdaLnOutput::new(s, &format!("{name}.final"), width, out_dim, true, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, c: Var) -> Result<Var> {
        let mut h = self.input.forward(tape, p, x)?;
        let s = self.cond.forward(tape, p, c)?;
        let s = tape.silu(s)?;
        for b in &self.blocks {
            h = b.forward(tape, p, h, s)?;
        }
        self.out.forward(tape, p, h, s)
    }
}

/// Encoder and decoder layout; parameters live in a separate [`ParamStore`].
#[derive(Debug)]
pub struct CvaeHead {
    config: CvaeConfig,
    encoder: Tower,
    decoder: Tower,
    decoder_rows: AtomicU64,
}

/// Per-batch loss parts.
#[derive(Clone, Copy, Debug)]
pub struct CvaeTerms {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CvaeValues {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl CvaeTerms {
    pub fn values(&self, tape: &Tape) -> CvaeValues {
        CvaeValues {
            recon: tape.value(self.recon).item(),
            kl: tape.value(self.kl).item(),
            total: tape.value(self.total).item(),
        }
    }
}

impl CvaeHead {
    pub fn init(config: CvaeConfig, rng: &mut RngStream) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut s = ParamStore::new();
        let (w, l) = (config.hidden_width, config.latent());
        let encoder = Tower::new(&mut s, "cvae.enc", config.token_dim, config.cond_dim, w, config.encoder_depth, 2 * l, rng);
        let decoder = Tower::new(&mut s, "cvae.dec", l, config.cond_dim, w, config.decoder_depth, config.token_dim, rng);
        Ok((
            CvaeHead {
                config,
                encoder,
                decoder,
                decoder_rows: AtomicU64::new(0),
            },
            s,
        ))
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    /// Rows pushed through the decoder since construction.
    pub fn decoder_calls(&self) -> u64 {
        self.decoder_rows.load(Ordering::Relaxed)
    }

    fn check(&self, tape: &Tape, x: Var, width: usize, c: Var) -> Result<usize> {
        let (xs, cs) = (tape.shape(x), tape.shape(c));
        if xs.len() != 2 || xs[1] != width || cs != [xs[0], self.config.cond_dim] {
            return invalid(format!("cvae input {xs:?} with condition {cs:?}"));
        }
        Ok(xs[0])
    }

    /// `(mu, logvar)`, each `[B, latent_dim]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, z: Var, c: Var) -> Result<(Var, Var)> {
        self.check(tape, z, self.config.token_dim, c)?;
        let l = self.config.latent();
        let out = self.encoder.forward(tape, p, z, c)?;
        Ok((tape.slice_cols(out, 0, l)?, tape.slice_cols(out, l, l)?))
    }

    pub fn decode(&self, tape: &mut Tape, p: &Bound, latent: Var, c: Var) -> Result<Var> {
        let b = self.check(tape, latent, self.config.latent(), c)?;
        self.decoder_rows.fetch_add(b as u64, Ordering::Relaxed);
        self.decoder.forward(tape, p, latent, c)
    }

    /// Reconstruction MSE, batch-mean KL to the unit prior, and
    /// `recon + kl_weight · kl`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: &Tensor,
        c: Var,
        eps: &Tensor,
        kl_weight: f64,
    ) -> Result<CvaeTerms> {
        if let Some(index) = (0..z.rows()).find(|&i| z.row(i).iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteLoss { index });
        }
        let zv = tape.constant(z.clone())?;
        let (mu, logvar) = self.encode(tape, p, zv, c)?;
        let latent = reparameterize(tape, mu, logvar, eps)?;
        let recon_z = self.decode(tape, p, latent, c)?;
        let recon = tape.mse(recon_z, zv)?;
        let kl = kl_divergence(tape, mu, logvar)?;
        let wkl = tape.scale(kl, kl_weight)?;
        let total = tape.add(recon, wkl)?;
        Ok(CvaeTerms { recon, kl, total })
    }

    /// One decoder pass over prior draws from `rng`; the encoder is unused.
    pub fn sample(&self, params: &ParamStore, c: &Tensor, rng: &mut RngStream) -> Result<Sampled> {
        let (b, l) = (c.rows(), self.config.latent());
        self.decode_noise(params, c, Tensor::matrix(b, l, rng.normals(b * l)))
    }

    /// Decodes prior draws `eps` (`[B, latent_dim]`).
    pub fn decode_noise(&self, params: &ParamStore, c: &Tensor, eps: Tensor) -> Result<Sampled> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false)?;
        let cv = tape.constant(c.clone())?;
        let ev = tape.constant(eps)?;
        let out = self.decode(&mut tape, &p, ev, cv)?;
        Ok(Sampled {
            tokens: tape.value(out).clone(),
            head_calls: c.rows() as u64,
        })
    }
}

/// `mu + exp(logvar / 2) · eps`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.activation(half, Activation::Exp)?;
    let e = tape.constant(eps.clone())?;
    let noise = tape.mul(sd, e)?;
    tape.add(mu, noise)
}

/// `−½ Σ (1 + logvar − mu² − exp(logvar))`, summed over latent dims and
/// averaged over rows.
pub fn kl_divergence(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let rows = tape.shape(mu)[0] as f64;
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.activation(logvar, Activation::Exp)?;
    let a = tape.add_scalar(logvar, 1.0)?;
    let a = tape.sub(a, mu2)?;
    let a = tape.sub(a, ev)?;
    let s = tape.sum(a)?;
    tape.scale(s, -0.5 / rows)
}

/// Scalar form of [`kl_divergence`] for one row.
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu.iter().zip(logvar).map(|(m, l)| 1.0 + l - m * m - l.exp()).sum::<f64>()
}
