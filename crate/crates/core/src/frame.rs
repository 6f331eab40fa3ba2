//! Frame-level generative attention: a conditional VAE over per-frame
//! features, conditioned on the attention value of each frame.
//!
//! Encoder `q(z_t | f_t, λ_t)`, prior `p(z_t | λ_t)` and decoder
//! `p(f_t | λ_t, z_t)` all act frame by frame. λ joins the data path as one
//! extra channel, after the channel-reducing projection in the encoder and
//! next to `z` in the decoder. The decoder is a unit-variance Gaussian, so
//! its negative log-likelihood is the squared reconstruction error.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{Bound, Linear, ParamSet};
use crate::segment::{check_attention, AttentionMap};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeDims {
    pub d: usize,
    /// Channels after the reducing projection.
    pub d_r: usize,
    pub h_enc: usize,
    pub h_dec: usize,
    pub d_z: usize,
}

impl CvaeDims {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            d_r: 16,
            h_enc: 32,
            h_dec: 32,
            d_z: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvaeModel {
    pub dims: CvaeDims,
    pub params: ParamSet,
    pub theta_reduce: Linear,
    pub enc_fc: Linear,
    pub enc_mu: Linear,
    pub enc_logvar: Linear,
    pub prior_mu: Linear,
    pub prior_logvar: Linear,
    pub dec_fc: Linear,
    pub theta_deconv: Linear,
}

/// Tape handles of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub z: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Encoder outputs and the noise used to draw `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub eps: Tensor,
}

/// Loss components of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct CvaeLossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

impl CvaeModel {
    pub fn new(dims: CvaeDims, rng: &mut impl Rng) -> Self {
        let CvaeDims {
            d,
            d_r,
            h_enc,
            h_dec,
            d_z,
        } = dims;
        let mut params = ParamSet::new();
        let theta_reduce = Linear::new(&mut params, "frame.theta_reduce", d, d_r, rng);
        let enc_fc = Linear::new(&mut params, "frame.enc_fc", d_r + 1, h_enc, rng);
        let enc_mu = Linear::new(&mut params, "frame.enc_mu", h_enc, d_z, rng);
        let enc_logvar = Linear::new(&mut params, "frame.enc_logvar", h_enc, d_z, rng);
        let prior_mu = Linear::new(&mut params, "frame.prior_mu", 1, d_z, rng);
        let prior_logvar = Linear::new(&mut params, "frame.prior_logvar", 1, d_z, rng);
        let dec_fc = Linear::new(&mut params, "frame.dec_fc", d_z + 1, h_dec, rng);
        let theta_deconv = Linear::new(&mut params, "frame.theta_deconv", h_dec, d, rng);
        Self {
            dims,
            params,
            theta_reduce,
            enc_fc,
            enc_mu,
            enc_logvar,
            prior_mu,
            prior_logvar,
            dec_fc,
            theta_deconv,
        }
    }

    /// Standard-normal reparameterization noise for a `T`-frame sequence.
    pub fn sample_eps(&self, t: usize, rng: &mut impl Rng) -> Tensor {
        let mut eps = Tensor::zeros(&[t, self.dims.d_z]);
        eps.data_mut().iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
        eps
    }

    /// `z = μ + exp(logσ²/2) ⊙ ε`; ε enters as a constant.
    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, f: Var, lam: Var, eps: &Tensor) -> Result<LatentVars> {
        check_attention(tape, lam)?;
        let reduced = self.theta_reduce.forward(tape, bound, f)?;
        let cat = tape.concat_cols(reduced, lam)?;
        let h = self.enc_fc.forward(tape, bound, cat)?;
        let h = tape.relu(h)?;
        let mu = self.enc_mu.forward(tape, bound, h)?;
        let logvar = self.enc_logvar.forward(tape, bound, h)?;
        let half = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let eps = tape.constant(eps.clone());
        let noise = tape.mul(std, eps)?;
        let z = tape.add(mu, noise)?;
        Ok(LatentVars { z, mu, logvar })
    }

    /// Per-frame prior parameters `(μ_p, logσ²_p)`, functions of λ_t only.
    pub fn prior_on(&self, tape: &mut Tape, bound: &Bound, lam: Var) -> Result<(Var, Var)> {
        check_attention(tape, lam)?;
        let mu = self.prior_mu.forward(tape, bound, lam)?;
        let logvar = self.prior_logvar.forward(tape, bound, lam)?;
        Ok((mu, logvar))
    }

    pub fn decode_on(&self, tape: &mut Tape, bound: &Bound, z: Var, lam: Var) -> Result<Var> {
        let cat = tape.concat_cols(z, lam)?;
        let h = self.dec_fc.forward(tape, bound, cat)?;
        let h = tape.relu(h)?;
        self.theta_deconv.forward(tape, bound, h).map_err(Into::into)
    }

    /// Squared reconstruction error plus `beta_kl` times the KL to the
    /// λ-conditioned prior, with a single latent sample.
    pub fn cvae_loss_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f: Var,
        lam: Var,
        eps: &Tensor,
        beta_kl: f64,
    ) -> Result<CvaeLossVars> {
        let latent = self.encode_on(tape, bound, f, lam, eps)?;
        let (mu_p, logvar_p) = self.prior_on(tape, bound, lam)?;
        let recon_f = self.decode_on(tape, bound, latent.z, lam)?;
        let recon = squared_error_on(tape, f, recon_f)?;
        let kl = kl_gaussian_on(tape, latent.mu, latent.logvar, mu_p, logvar_p)?;
        let total = if beta_kl == 0.0 {
            recon
        } else {
            let weighted = tape.scale(kl, beta_kl)?;
            tape.add(recon, weighted)?
        };
        Ok(CvaeLossVars { total, recon, kl })
    }

    /// Squared reconstruction error only, `Σ_t ‖f_t − F̂_t‖² / T`.
    pub fn reconstruction_loss_on(&self, tape: &mut Tape, bound: &Bound, f: Var, lam: Var, eps: &Tensor) -> Result<Var> {
        let latent = self.encode_on(tape, bound, f, lam, eps)?;
        let recon_f = self.decode_on(tape, bound, latent.z, lam)?;
        squared_error_on(tape, f, recon_f)
    }

    fn frozen(&self) -> (Tape, Bound) {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        (tape, bound)
    }

    pub fn encode(&self, f: &Tensor, lam: &AttentionMap, eps: &Tensor) -> Result<LatentSample> {
        let (mut tape, bound) = self.frozen();
        let fv = tape.constant(f.clone());
        let lv = tape.constant(lam.to_tensor());
        let out = self.encode_on(&mut tape, &bound, fv, lv, eps)?;
        Ok(LatentSample {
            z: tape.value(out.z).clone(),
            mu: tape.value(out.mu).clone(),
            logvar: tape.value(out.logvar).clone(),
            eps: eps.clone(),
        })
    }

    pub fn prior(&self, lam: &AttentionMap) -> Result<(Tensor, Tensor)> {
        let (mut tape, bound) = self.frozen();
        let lv = tape.constant(lam.to_tensor());
        let (mu, logvar) = self.prior_on(&mut tape, &bound, lv)?;
        Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
    }

    pub fn decode(&self, z: &Tensor, lam: &AttentionMap) -> Result<Tensor> {
        let (mut tape, bound) = self.frozen();
        let zv = tape.constant(z.clone());
        let lv = tape.constant(lam.to_tensor());
        let out = self.decode_on(&mut tape, &bound, zv, lv)?;
        Ok(tape.value(out).clone())
    }

    pub fn cvae_loss(&self, f: &Tensor, lam: &AttentionMap, eps: &Tensor, beta_kl: f64) -> Result<f64> {
        let (mut tape, bound) = self.frozen();
        let fv = tape.constant(f.clone());
        let lv = tape.constant(lam.to_tensor());
        let out = self.cvae_loss_on(&mut tape, &bound, fv, lv, eps, beta_kl)?;
        Ok(tape.value(out.total).item())
    }

    pub fn reconstruction_loss(&self, f: &Tensor, lam: &AttentionMap, eps: &Tensor) -> Result<f64> {
        let (mut tape, bound) = self.frozen();
        let fv = tape.constant(f.clone());
        let lv = tape.constant(lam.to_tensor());
        let out = self.reconstruction_loss_on(&mut tape, &bound, fv, lv, eps)?;
        Ok(tape.value(out).item())
    }
}

/// `Σ_t ‖a_t − b_t‖² / T` for `[T × D]` operands.
pub fn squared_error_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let t = tape.shape(a)[0] as f64;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, 1.0 / t)?)
}

/// Closed-form `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` for diagonal Gaussians,
/// summed over latent dimensions and averaged over frames.
///
/// Per dimension, with `u = logσ_q² − logσ_p²`:
/// `½ (expm1(u) − u + (μ_q − μ_p)² / σ_p²)`. Both parts are non-negative in
/// floating point, so the result never dips below zero.
pub fn kl_gaussian_on(tape: &mut Tape, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Result<Var> {
    let t = tape.shape(mu_q)[0] as f64;
    let u = tape.sub(logvar_q, logvar_p)?;
    let e = tape.expm1(u)?;
    let var_term = tape.sub(e, u)?;
    let diff = tape.sub(mu_q, mu_p)?;
    let sq = tape.square(diff)?;
    let neg_lvp = tape.neg(logvar_p)?;
    let inv_var_p = tape.exp(neg_lvp)?;
    let mean_term = tape.mul(sq, inv_var_p)?;
    let per_dim = tape.add(var_term, mean_term)?;
    let total = tape.sum(per_dim)?;
    Ok(tape.scale(total, 0.5 / t)?)
}

pub fn kl_gaussian(mu_q: &Tensor, logvar_q: &Tensor, mu_p: &Tensor, logvar_p: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [mu_q, logvar_q, mu_p, logvar_p].map(|t| tape.constant(t.clone()));
    let kl = kl_gaussian_on(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok(tape.value(kl).item())
}
