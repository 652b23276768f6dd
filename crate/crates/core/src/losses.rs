//! Training objectives: cross-entropy classification, the squared-correlation
//! adversarial loss, and the baseline objectives (MSE adversary, joint
//! multi-task regression, logit-correlation penalty).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tape::{Tape, VarId};

/// Which objective drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    /// Classifier only; the bias predictor exists but is never trained.
    Vanilla,
    /// Three-phase adversarial training on the squared correlation.
    BrNet,
    /// One extractor with two jointly trained predictor heads.
    MultiTask,
    /// Three-phase adversarial training on the mean squared error.
    AdvMse,
    /// Single minimization of cross-entropy plus a logit-correlation penalty.
    Zafar,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Vanilla,
        VariantKind::BrNet,
        VariantKind::MultiTask,
        VariantKind::AdvMse,
        VariantKind::Zafar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Vanilla => "vanilla",
            VariantKind::BrNet => "br-net",
            VariantKind::MultiTask => "multi-task",
            VariantKind::AdvMse => "adv-mse",
            VariantKind::Zafar => "zafar",
        }
    }

    /// True for the variants with separate adversary-update and
    /// feature-update phases.
    pub fn is_adversarial(self) -> bool {
        matches!(self, VariantKind::BrNet | VariantKind::AdvMse)
    }
}

impl FromStr for VariantKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(VariantKind::Vanilla),
            "br-net" | "brnet" | "br_net" => Ok(VariantKind::BrNet),
            "multi-task" | "multitask" | "multi_task" => Ok(VariantKind::MultiTask),
            "adv-mse" | "advmse" | "adv_mse" => Ok(VariantKind::AdvMse),
            "zafar" => Ok(VariantKind::Zafar),
            other => Err(contract(format!(
                "unknown variant {other:?} (expected vanilla, br-net, multi-task, adv-mse, or zafar)"
            ))),
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A training objective: the variant plus its trade-off weight and the
/// standard-deviation perturbation used inside correlations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossVariant {
    pub kind: VariantKind,
    pub lambda: f64,
    pub eps_std: f64,
}

impl LossVariant {
    pub fn new(kind: VariantKind) -> Self {
        LossVariant {
            kind,
            lambda: 1.0,
            eps_std: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(contract(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps_std > 0.0) {
            return Err(contract(format!("eps_std must be > 0, got {}", self.eps_std)));
        }
        Ok(())
    }
}

/// Squared Pearson correlation between two batch vectors on the tape:
/// cov(a,b)^2 / ((var(a)+eps)(var(b)+eps)), bounded in [0,1] for eps > 0.
pub fn pearson_corr_sq(tape: &mut Tape, a: VarId, b: VarId, eps: f64) -> Result<VarId> {
    let n = tape.value(a).dims1()?;
    if tape.value(b).dims1()? != n {
        return Err(contract(format!(
            "correlation operands have different lengths: {} vs {}",
            n,
            tape.value(b).dims1()?
        )));
    }
    if n < 2 {
        return Err(contract(format!("correlation needs at least 2 samples, got {n}")));
    }
    let mean_a = tape.mean(a)?;
    let cen_a = tape.sub_scalar(a, mean_a)?;
    let sq_a = tape.elem_mul(cen_a, cen_a)?;
    let var_a = tape.mean(sq_a)?;

    let mean_b = tape.mean(b)?;
    let cen_b = tape.sub_scalar(b, mean_b)?;
    let sq_b = tape.elem_mul(cen_b, cen_b)?;
    let var_b = tape.mean(sq_b)?;

    let prod = tape.elem_mul(cen_a, cen_b)?;
    let cov = tape.mean(prod)?;
    let cov_sq = tape.square(cov)?;

    let da = tape.add_const(var_a, eps)?;
    let db = tape.add_const(var_b, eps)?;
    let denom = tape.mul(da, db)?;
    tape.div(cov_sq, denom)
}

/// Sum over protected variables of the squared correlation between true
/// values b[:,k] and predictions b_hat[:,k]. Accepts [B] or [B,k].
pub fn corr_sq_sum(tape: &mut Tape, b: VarId, b_hat: VarId, eps: f64) -> Result<VarId> {
    if tape.value(b).shape() != tape.value(b_hat).shape() {
        return Err(contract(format!(
            "corr_sq_sum shape mismatch: {:?} vs {:?}",
            tape.value(b).shape(),
            tape.value(b_hat).shape()
        )));
    }
    match tape.value(b).shape().len() {
        1 => pearson_corr_sq(tape, b, b_hat, eps),
        2 => {
            let (_, k) = tape.value(b).dims2()?;
            if k == 0 {
                return Err(contract("no protected variables".to_string()));
            }
            let mut total: Option<VarId> = None;
            for col in 0..k {
                let bc = tape.column(b, col)?;
                let bhc = tape.column(b_hat, col)?;
                let c = pearson_corr_sq(tape, bc, bhc, eps)?;
                total = Some(match total {
                    None => c,
                    Some(t) => tape.add(t, c)?,
                });
            }
            Ok(total.expect("k >= 1"))
        }
        _ => Err(contract(format!(
            "corr_sq_sum expects rank 1 or 2, got shape {:?}",
            tape.value(b).shape()
        ))),
    }
}

/// Adversarial correlation loss: the negative sum of squared correlations,
/// in [-k, 0]. The bias predictor minimizes it; the extractor maximizes it.
pub fn adv_corr_loss(tape: &mut Tape, b: VarId, b_hat: VarId, eps: f64) -> Result<VarId> {
    let s = corr_sq_sum(tape, b, b_hat, eps)?;
    tape.neg(s)
}

/// Mean squared error over all entries of matching tensors.
pub fn adv_mse_loss(tape: &mut Tape, b: VarId, b_hat: VarId) -> Result<VarId> {
    if tape.value(b).shape() != tape.value(b_hat).shape() {
        return Err(contract(format!(
            "mse shape mismatch: {:?} vs {:?}",
            tape.value(b).shape(),
            tape.value(b_hat).shape()
        )));
    }
    let diff = tape.elem_sub(b_hat, b)?;
    let sq = tape.elem_mul(diff, diff)?;
    tape.mean(sq)
}

/// Logit-correlation penalty for a binary task: the sum over protected
/// variables of corr^2(b_k, logit difference). Added to the classification
/// loss as a single minimized objective; there is no adversary.
pub fn zafar_penalty(tape: &mut Tape, b: VarId, logits: VarId, eps: f64) -> Result<VarId> {
    let (rows, m) = tape.value(logits).dims2()?;
    if m != 2 {
        return Err(contract(format!(
            "logit-correlation penalty is defined for binary tasks, got {m} classes"
        )));
    }
    let l1 = tape.column(logits, 1)?;
    let l0 = tape.column(logits, 0)?;
    let diff = tape.elem_sub(l1, l0)?;

    match tape.value(b).shape().len() {
        1 => {
            if tape.value(b).dims1()? != rows {
                return Err(contract("protected vector length does not match batch".to_string()));
            }
            pearson_corr_sq(tape, b, diff, eps)
        }
        2 => {
            let (bn, k) = tape.value(b).dims2()?;
            if bn != rows {
                return Err(contract("protected matrix rows do not match batch".to_string()));
            }
            let mut total: Option<VarId> = None;
            for col in 0..k {
                let bc = tape.column(b, col)?;
                let c = pearson_corr_sq(tape, bc, diff, eps)?;
                total = Some(match total {
                    None => c,
                    Some(t) => tape.add(t, c)?,
                });
            }
            total.ok_or_else(|| contract("no protected variables".to_string()))
        }
        _ => Err(contract("protected tensor must be rank 1 or 2".to_string())),
    }
}

/// The scalar targets of each optimization phase, with signs resolved so
/// every phase is a minimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseObjectives {
    /// Minimized w.r.t. the extractor and classifier (plus the bias head
    /// for the joint multi-task objective).
    pub primary: f64,
    /// Minimized w.r.t. the bias predictor alone; absent for variants
    /// without an adversary phase.
    pub adversary: Option<f64>,
}

/// Combine the classification loss with the variant's adversarial term
/// (the correlation loss for br-net, the MSE for adv-mse/multi-task, the
/// logit penalty for zafar; None for vanilla).
pub fn total_objective(variant: &LossVariant, loss_c: f64, adv_term: Option<f64>) -> PhaseObjectives {
    match variant.kind {
        VariantKind::Vanilla => PhaseObjectives {
            primary: loss_c,
            adversary: None,
        },
        VariantKind::BrNet | VariantKind::AdvMse => {
            let adv = adv_term.unwrap_or(0.0);
            PhaseObjectives {
                primary: loss_c - variant.lambda * adv,
                adversary: Some(adv),
            }
        }
        VariantKind::MultiTask | VariantKind::Zafar => {
            let adv = adv_term.unwrap_or(0.0);
            PhaseObjectives {
                primary: loss_c + variant.lambda * adv,
                adversary: None,
            }
        }
    }
}

/// Plain-value squared Pearson correlation, matching the tape formula.
pub fn pearson_corr_sq_value(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!(
            "correlation operands have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(contract(format!("correlation needs at least 2 samples, got {}", a.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    cov /= n;
    va /= n;
    vb /= n;
    Ok(cov * cov / ((va + eps) * (vb + eps)))
}
