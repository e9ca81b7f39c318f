//! Contrastive objectives.
//!
//! * Instance contrast (`ℓ_c`): InfoNCE between a voice embedding and all faces
//!   in the batch, positive included in the denominator, in both directions.
//! * Prototype contrast (`ℓ_p`): InfoNCE between an embedding and the centroids
//!   of the other modality's clustering, the positive being the centroid that
//!   instance's other-modality memory was assigned to. Averaged over the `R`
//!   clusterings.
//!
//! All softmaxes are evaluated with log-sum-exp, so small temperatures such as
//! 0.03 with similarities at ±1 never overflow.
//!
//! Every loss takes per-instance coefficients `c_i` and returns the gradient
//! of `Σ_i c_i · L_i` with respect to the embeddings. Uniform coefficients
//! `1/N` give the batch mean; recalibration weights give `w_i / Σ w`.

use serde::{Deserialize, Serialize};

use crate::clustering::PrototypeSet;
use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
}

impl LossConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }
}

/// Per-instance loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceLoss {
    pub cid_vf: f64,
    pub cid_fv: f64,
    pub proto_vf: f64,
    pub proto_fv: f64,
}

impl InstanceLoss {
    pub fn total(&self) -> f64 {
        self.cid_vf + self.cid_fv + self.proto_vf + self.proto_fv
    }
}

/// Batch means of every term plus the coefficient-weighted objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cid_vf: f64,
    pub cid_fv: f64,
    pub proto_vf: f64,
    pub proto_fv: f64,
    /// Unweighted mean of per-instance totals.
    pub total: f64,
    /// `Σ c_i · total_i`, the value the gradients belong to.
    pub objective: f64,
    pub per_instance: Vec<InstanceLoss>,
}

impl LossBreakdown {
    fn from_instances(per_instance: Vec<InstanceLoss>, coeffs: &[f64]) -> Self {
        let n = per_instance.len() as f64;
        let mean = |f: fn(&InstanceLoss) -> f64| per_instance.iter().map(f).sum::<f64>() / n;
        Self {
            cid_vf: mean(|l| l.cid_vf),
            cid_fv: mean(|l| l.cid_fv),
            proto_vf: mean(|l| l.proto_vf),
            proto_fv: mean(|l| l.proto_fv),
            total: mean(InstanceLoss::total),
            objective: per_instance
                .iter()
                .zip(coeffs)
                .map(|(l, c)| c * l.total())
                .sum(),
            per_instance,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cid_vf,
            self.cid_fv,
            self.proto_vf,
            self.proto_fv,
            self.objective,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grad_v: Matrix,
    pub grad_f: Matrix,
}

/// Positive similarities and in-batch negative similarities, one row per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBatch {
    pub positive: Vec<f64>,
    /// `negatives[i][k]` is the similarity of anchor `i` to its `k`-th negative.
    pub negatives: Vec<Vec<f64>>,
    pub instance_ids: Vec<usize>,
}

impl SimilarityBatch {
    /// Voice→face similarities: `s^p_i = v_i·f_i`, `s^n_{i,j} = v_i·f_j` for `j ≠ i`.
    pub fn from_embeddings(v: &Matrix, f: &Matrix, instance_ids: &[usize]) -> Result<Self> {
        check_pair(v, f)?;
        if instance_ids.len() != v.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                instance_ids.len(),
                v.rows()
            )));
        }
        let s = v.matmul_t(f)?;
        let n = v.rows();
        Ok(Self {
            positive: (0..n).map(|i| s.get(i, i)).collect(),
            negatives: (0..n)
                .map(|i| (0..n).filter(|&j| j != i).map(|j| s.get(i, j)).collect())
                .collect(),
            instance_ids: instance_ids.to_vec(),
        })
    }
}

impl SimilarityBatch {
    /// `ℓ_c` per anchor: `−log softmax` of the positive among itself and its negatives.
    pub fn losses(&self, temperature: f64) -> Vec<f64> {
        self.positive
            .iter()
            .zip(&self.negatives)
            .map(|(&sp, negs)| {
                let logits: Vec<f64> = std::iter::once(sp)
                    .chain(negs.iter().copied())
                    .map(|s| s / temperature)
                    .collect();
                log_sum_exp(&logits) - logits[0]
            })
            .collect()
    }
}

/// `(∂ℓ_c/∂s^p_i, ∂ℓ_c/∂s^n_{i,k})` in closed form.
///
/// With `p_k` the softmax weight of negative `k` (positive in the
/// denominator), the negative gradient is `p_k / τ` and the positive
/// gradient is `−Σ_k p_k / τ`. The sum is formed from the negative masses
/// directly, so it stays exact when the positive saturates the softmax.
pub fn similarity_gradients(batch: &SimilarityBatch, temperature: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if batch.negatives.len() != batch.positive.len() {
        return Err(Error::Shape("one negative row per positive required".into()));
    }
    let mut d_pos = Vec::with_capacity(batch.positive.len());
    let mut d_neg = Vec::with_capacity(batch.positive.len());
    for (&sp, negs) in batch.positive.iter().zip(&batch.negatives) {
        let logits: Vec<f64> = std::iter::once(sp)
            .chain(negs.iter().copied())
            .map(|s| s / temperature)
            .collect();
        let lse = log_sum_exp(&logits);
        let neg: Vec<f64> = logits[1..]
            .iter()
            .map(|l| (l - lse).exp() / temperature)
            .collect();
        d_pos.push(-neg.iter().sum::<f64>());
        d_neg.push(neg);
    }
    Ok((d_pos, d_neg))
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_pair(v: &Matrix, f: &Matrix) -> Result<()> {
    if v.shape() != f.shape() {
        return Err(Error::Shape(format!(
            "voice batch {:?} vs face batch {:?}",
            v.shape(),
            f.shape()
        )));
    }
    if v.rows() < 2 {
        return Err(Error::Argument(format!(
            "instance contrast needs at least 2 instances, got {}",
            v.rows()
        )));
    }
    Ok(())
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_coeffs(coeffs: &[f64], n: usize) -> Result<()> {
    if coeffs.len() != n {
        return Err(Error::Shape(format!("{} coefficients for {n} instances", coeffs.len())));
    }
    Ok(())
}

/// Adds `Σ_i c_i ℓ(anchor_i → candidates)` gradients; returns per-anchor losses.
///
/// Logits are `anchor_i · cand_j / τ`, the positive of anchor `i` is `cand_i`.
fn instance_contrast(
    anchors: &Matrix,
    cands: &Matrix,
    sims: &Matrix,
    transpose: bool,
    tau: f64,
    coeffs: &[f64],
    grad_anchor: &mut Matrix,
    grad_cand: &mut Matrix,
) -> Vec<f64> {
    let n = anchors.rows();
    let mut losses = Vec::with_capacity(n);
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = if transpose { sims.get(j, i) } else { sims.get(i, j) } / tau;
        }
        let lse = log_sum_exp(&logits);
        losses.push(lse - logits[i]);
        for j in 0..n {
            let p = (logits[j] - lse).exp();
            let ds = coeffs[i] * (p - if i == j { 1.0 } else { 0.0 }) / tau;
            if ds == 0.0 {
                continue;
            }
            grad_anchor
                .row_mut(i)
                .iter_mut()
                .zip(cands.row(j))
                .for_each(|(g, x)| *g += ds * x);
            grad_cand
                .row_mut(j)
                .iter_mut()
                .zip(anchors.row(i))
                .for_each(|(g, x)| *g += ds * x);
        }
    }
    losses
}

/// Instance contrast in both directions (`ℓ_c(v,f)` and `ℓ_c(f,v)`), batch mean.
pub fn cid_loss(v: &Matrix, f: &Matrix, temperature: f64) -> Result<LossOutput> {
    cid_loss_weighted(v, f, temperature, &uniform(v.rows()))
}

pub fn cid_loss_weighted(v: &Matrix, f: &Matrix, temperature: f64, coeffs: &[f64]) -> Result<LossOutput> {
    check_pair(v, f)?;
    check_coeffs(coeffs, v.rows())?;
    LossConfig::new(temperature)?;
    let (n, d) = v.shape();
    let sims = v.matmul_t(f)?;
    let mut grad_v = Matrix::zeros(n, d);
    let mut grad_f = Matrix::zeros(n, d);
    let vf = instance_contrast(v, f, &sims, false, temperature, coeffs, &mut grad_v, &mut grad_f);
    let fv = instance_contrast(f, v, &sims, true, temperature, coeffs, &mut grad_f, &mut grad_v);
    let per_instance = vf
        .into_iter()
        .zip(fv)
        .map(|(cid_vf, cid_fv)| InstanceLoss {
            cid_vf,
            cid_fv,
            ..Default::default()
        })
        .collect();
    Ok(LossOutput {
        breakdown: LossBreakdown::from_instances(per_instance, coeffs),
        grad_v,
        grad_f,
    })
}

/// `(1/R) Σ_r ℓ_p(e_i, C_r)` for each row, where the positive centroid of
/// row `i` in clustering `r` is `protos.assignment(r, instance_ids[i])`.
///
/// Gradients of `Σ_i c_i ℓ_p` are accumulated into `grad`.
pub fn prototype_loss(
    embeddings: &Matrix,
    instance_ids: &[usize],
    protos: &PrototypeSet,
    temperature: f64,
    coeffs: &[f64],
    grad: &mut Matrix,
) -> Result<Vec<f64>> {
    LossConfig::new(temperature)?;
    check_coeffs(coeffs, embeddings.rows())?;
    if instance_ids.len() != embeddings.rows() || grad.shape() != embeddings.shape() {
        return Err(Error::Shape("prototype loss inputs disagree in size".into()));
    }
    let r_count = protos.num_clusterings();
    if r_count == 0 {
        return Err(Error::State("no clusterings available: prototypes not built".into()));
    }
    let scale = 1.0 / r_count as f64;
    let mut losses = vec![0.0; embeddings.rows()];
    for clustering in protos.clusterings() {
        let centroids = &clustering.centroids;
        if centroids.cols() != embeddings.cols() {
            return Err(Error::Shape(format!(
                "centroids have dim {}, embeddings {}",
                centroids.cols(),
                embeddings.cols()
            )));
        }
        let sims = embeddings.matmul_t(centroids)?;
        for (i, &id) in instance_ids.iter().enumerate() {
            let s = *clustering.assignments.get(id).ok_or_else(|| {
                Error::State(format!("instance {id} has no prototype assignment"))
            })?;
            let logits: Vec<f64> = sims.row(i).iter().map(|x| x / temperature).collect();
            let lse = log_sum_exp(&logits);
            losses[i] += scale * (lse - logits[s]);
            let w = coeffs[i] * scale / temperature;
            let g = grad.row_mut(i);
            for (k, l) in logits.iter().enumerate() {
                let coef = w * ((l - lse).exp() - if k == s { 1.0 } else { 0.0 });
                g.iter_mut()
                    .zip(centroids.row(k))
                    .for_each(|(gi, c)| *gi += coef * c);
            }
        }
    }
    Ok(losses)
}

/// Full per-instance objective:
/// `ℓ_c(v,f) + ℓ_c(f,v) + (1/R)Σ ℓ_p(v, C^F_r) + (1/R)Σ ℓ_p(f, C^V_r)`.
///
/// `coeffs` defaults to uniform `1/N`.
pub fn cmpc_loss(
    v: &Matrix,
    f: &Matrix,
    instance_ids: &[usize],
    voice_protos: &PrototypeSet,
    face_protos: &PrototypeSet,
    config: &LossConfig,
    coeffs: Option<&[f64]>,
) -> Result<LossOutput> {
    let owned;
    let coeffs = match coeffs {
        Some(c) => c,
        None => {
            owned = uniform(v.rows());
            &owned
        }
    };
    let tau = config.temperature;
    let mut out = cid_loss_weighted(v, f, tau, coeffs)?;
    let pv = prototype_loss(v, instance_ids, face_protos, tau, coeffs, &mut out.grad_v)?;
    let pf = prototype_loss(f, instance_ids, voice_protos, tau, coeffs, &mut out.grad_f)?;
    let per_instance = out
        .breakdown
        .per_instance
        .iter()
        .zip(pv.into_iter().zip(pf))
        .map(|(l, (proto_vf, proto_fv))| InstanceLoss {
            proto_vf,
            proto_fv,
            ..*l
        })
        .collect();
    out.breakdown = LossBreakdown::from_instances(per_instance, coeffs);
    Ok(out)
}
