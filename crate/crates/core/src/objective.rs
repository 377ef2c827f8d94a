//! Training objective `L = L_rec + L_KL + L_contra`.
//!
//! * `L_rec`: binary cross-entropy of the three decoded probability
//!   matrices against the zero-padded `(A_l, A_n, A_g)` of the input,
//!   averaged over entries.
//! * `L_KL`: `β₁·KL(q(z_l) ‖ N(0, I)) + β₂·KL(q(z_g) ‖ N(0, I))`.
//! * `L_contra`: for each label group, every ordered pair of members
//!   (including a member with itself) is scored against all members of
//!   other labels with temperature-scaled cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{padded_targets, reparameterize, BoundParams, DecoderOutput, EncoderOutput};
use crate::pgraph::{Decomposition, PeriodicGraph, UnitKind};
use crate::tensor::{DiffTensor, Matrix, Tape};

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before
/// taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Lower bound on latent norms inside cosine similarity.
const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// β₁, weight of the local KL term.
    pub beta_local: f64,
    /// β₂, weight of the global KL term.
    pub beta_global: f64,
    /// β₃, weight of the contrastive term.
    pub beta_contra: f64,
    /// τ.
    pub temperature: f64,
    /// Keep the `j = k` terms of the positive double sum.
    pub include_self_pairs: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta_local: 0.1,
            beta_global: 0.1,
            beta_contra: 1.0,
            temperature: 0.2,
            include_self_pairs: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_local", self.beta_local),
            ("beta_global", self.beta_global),
            ("beta_contra", self.beta_contra),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Scalar loss values for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_contra: f64,
    pub total: f64,
    /// `false` when the batch had fewer than two labels and the
    /// contrastive term was defined as zero.
    pub contrastive_active: bool,
    pub weights: ObjectiveConfig,
}

fn check_binary(target: &Matrix) -> Result<()> {
    match target.iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(t) => Err(Error::InvalidArgument(format!("non-binary reconstruction target {t}"))),
        None => Ok(()),
    }
}

/// Summed binary cross-entropy `−Σ[t·ln p + (1−t)·ln(1−p)]` over clamped
/// probabilities.
pub fn binary_cross_entropy(tape: &mut Tape, probs: DiffTensor, target: &Matrix) -> Result<DiffTensor> {
    check_binary(target)?;
    if tape.shape(probs) != target.dim() {
        return Err(Error::Shape {
            op: "binary_cross_entropy",
            left: tape.shape(probs),
            right: target.dim(),
        });
    }
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.ln(p);
    let flipped = tape.scale(p, -1.0);
    let one_minus = tape.offset(flipped, 1.0);
    let log_q = tape.ln(one_minus);
    let t = tape.constant(target.clone());
    let not_t = tape.constant(target.mapv(|v| 1.0 - v));
    let pos = tape.mul(t, log_p)?;
    let neg = tape.mul(not_t, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0))
}

/// Reconstruction loss against `target`, normalized by the total entry
/// count of the three matrices.
pub fn recon_loss(tape: &mut Tape, probs: &DecoderOutput, target: &Decomposition) -> Result<DiffTensor> {
    let (n_max, _) = tape.shape(probs.local);
    let (m_max, _) = tape.shape(probs.global);
    let (t_local, t_neighbor, t_global) = padded_targets(target, n_max, m_max)?;
    recon_loss_dense(tape, probs, &t_local, &t_neighbor, &t_global)
}

/// [`recon_loss`] with explicit dense targets, which must be 0/1.
pub fn recon_loss_dense(
    tape: &mut Tape,
    probs: &DecoderOutput,
    local: &Matrix,
    neighbor: &Matrix,
    global: &Matrix,
) -> Result<DiffTensor> {
    let a = binary_cross_entropy(tape, probs.local, local)?;
    let b = binary_cross_entropy(tape, probs.neighbor, neighbor)?;
    let c = binary_cross_entropy(tape, probs.global, global)?;
    let entries = (local.len() + neighbor.len() + global.len()) as f64;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    Ok(tape.scale(abc, 1.0 / entries))
}

/// `½·Σ(μ² + σ² − 1 − 2·log σ)` for a diagonal Gaussian against N(0, I).
pub fn gaussian_kl(tape: &mut Tape, mu: DiffTensor, logsig: DiffTensor) -> Result<DiffTensor> {
    let mu2 = tape.mul(mu, mu)?;
    let two_logsig = tape.scale(logsig, 2.0);
    let var = tape.exp(two_logsig);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_logsig)?;
    let c = tape.offset(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5))
}

pub fn kl_loss(tape: &mut Tape, enc: &EncoderOutput, cfg: &ObjectiveConfig) -> Result<DiffTensor> {
    let local = gaussian_kl(tape, enc.mu_l, enc.logsig_l)?;
    let global = gaussian_kl(tape, enc.mu_g, enc.logsig_g)?;
    let a = tape.scale(local, cfg.beta_local);
    let b = tape.scale(global, cfg.beta_global);
    tape.add(a, b)
}

/// Contrastive term over latent rows `z` (each `1 × d`) with group ids
/// `labels`. Returns `None` when fewer than two distinct labels are
/// present, since every denominator would be empty.
pub fn contrastive_loss(
    tape: &mut Tape,
    z: &[DiffTensor],
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<Option<DiffTensor>> {
    if z.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} latents but {} labels",
            z.len(),
            labels.len()
        )));
    }
    let distinct = labels
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if distinct < 2 {
        return Ok(None);
    }
    let b = z.len();
    let positives = Matrix::from_shape_fn((b, b), |(i, j)| {
        u8::from(labels[i] == labels[j] && (cfg.include_self_pairs || i != j)) as f64
    });
    let negatives = Matrix::from_shape_fn((b, b), |(i, j)| f64::from(u8::from(labels[i] != labels[j])));
    let pos_counts = positives.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));

    let stacked = tape.concat_rows(z)?;
    let sq = tape.mul(stacked, stacked)?;
    let norm2 = tape.row_sums(sq);
    let norm = tape.sqrt(norm2);
    let norm = tape.clamp(norm, MIN_NORM, f64::INFINITY);
    let inv = tape.recip(norm);
    let unit = tape.scale_rows(stacked, inv)?;
    let unit_t = tape.transpose(unit);
    let cos = tape.matmul(unit, unit_t)?;
    let logits = tape.scale(cos, 1.0 / cfg.temperature);

    let neg_mask = tape.constant(negatives);
    let expd = tape.exp(logits);
    let masked = tape.mul(expd, neg_mask)?;
    let denom = tape.row_sums(masked);
    let log_denom = tape.ln(denom);
    let counts = tape.constant(pos_counts);
    let weighted = tape.mul(log_denom, counts)?;
    let denom_term = tape.sum(weighted);

    let pos_mask = tape.constant(positives);
    let pos = tape.mul(logits, pos_mask)?;
    let pos_term = tape.sum(pos);

    let inner = tape.sub(pos_term, denom_term)?;
    Ok(Some(tape.scale(inner, -cfg.beta_contra)))
}

/// One training graph: encoder input, reconstruction target and label.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub graph: &'a PeriodicGraph,
    pub target: &'a Decomposition,
    pub label: Option<UnitKind>,
}

/// Standard-normal draws for one graph's reparameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub local: Matrix,
    pub global: Matrix,
}

/// Tape handles of the three terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rec: DiffTensor,
    pub kl: DiffTensor,
    pub contra: DiffTensor,
    pub total: DiffTensor,
    pub contrastive_active: bool,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            l_rec: tape.scalar(self.rec)?,
            l_kl: tape.scalar(self.kl)?,
            l_contra: tape.scalar(self.contra)?,
            total: tape.scalar(self.total)?,
            contrastive_active: self.contrastive_active,
            weights: cfg.clone(),
        })
    }
}

/// Batch-mean reconstruction plus batch-mean KL plus the contrastive term
/// over the batch's sampled `z_l`. Unlabelled items do not take part in
/// the contrastive term.
pub fn total_loss(
    tape: &mut Tape,
    params: &BoundParams<'_>,
    batch: &[BatchItem<'_>],
    noise: &[Noise],
    cfg: &ObjectiveConfig,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if noise.len() != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "{} noise draws for {} graphs",
            noise.len(),
            batch.len()
        )));
    }
    let mut recs = Vec::with_capacity(batch.len());
    let mut kls = Vec::with_capacity(batch.len());
    let mut z_labelled = Vec::new();
    let mut labels = Vec::new();
    for (item, eta) in batch.iter().zip(noise) {
        let enc = params.encode(tape, item.graph)?;
        let z_l = reparameterize(tape, enc.mu_l, enc.logsig_l, &eta.local)?;
        let z_g = reparameterize(tape, enc.mu_g, enc.logsig_g, &eta.global)?;
        let dec = params.decode(tape, z_l, z_g)?;
        recs.push(recon_loss(tape, &dec, item.target)?);
        kls.push(kl_loss(tape, &enc, cfg)?);
        if let Some(label) = item.label {
            z_labelled.push(z_l);
            labels.push(label as usize);
        }
    }
    let rec = mean_of(tape, &recs)?;
    let kl = mean_of(tape, &kls)?;
    let (contra, contrastive_active) = match contrastive_loss(tape, &z_labelled, &labels, cfg)? {
        Some(c) => (c, true),
        None => (tape.constant(Matrix::zeros((1, 1))), false),
    };
    let partial = tape.add(rec, kl)?;
    let total = tape.add(partial, contra)?;
    Ok(LossTerms {
        rec,
        kl,
        contra,
        total,
        contrastive_active,
    })
}

fn mean_of(tape: &mut Tape, xs: &[DiffTensor]) -> Result<DiffTensor> {
    let stacked = tape.concat_rows(xs)?;
    Ok(tape.mean(stacked))
}
