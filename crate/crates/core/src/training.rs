//! Alternating three-phase optimization over epochs and batches.
//!
//! Each iteration of an adversarial variant runs:
//!   1. minimize the classification loss w.r.t. the extractor + classifier;
//!   2. with the extractor frozen, update the bias predictor to recover the
//!      protected variables as well as it can;
//!   3. with the bias predictor frozen, update the extractor to defeat it.
//!
//! Vanilla runs phase 1 only; multi-task and the logit-penalty variant run a
//! single joint minimization. Conditioning restricts the adversarial phases
//! to samples of designated classes so only the direct feature/bias
//! dependency is removed, not the part mediated by the task label.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::losses::{self, LossVariant, VariantKind};
use crate::metrics;
use crate::nets::{self, ArchitectureSpec, MlpParams, ModelParams};
use crate::optim::{adam_step, OptimizerState};
use crate::synthdata::Dataset;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Smallest sub-batch on which a batch correlation is considered meaningful.
pub const MIN_ADV_BATCH: usize = 8;

/// Which samples the adversarial phases see.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// The whole batch.
    All,
    /// Per-class sub-batches of the given classes; the adversarial term is
    /// the sum of per-class terms.
    Classes(BTreeSet<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: LossVariant,
    pub batch_size: usize,
    pub iterations: usize,
    /// Learning rate for the classification phase.
    pub lr_classify: f64,
    /// Learning rate for the bias-predictor update phase.
    pub lr_adversary: f64,
    /// Learning rate for the extractor's adversarial phase.
    pub lr_feature: f64,
    pub conditioning: Conditioning,
    pub seed: u64,
    pub log_every: usize,
    /// Fraction of iterations over which lambda ramps linearly from zero;
    /// zero keeps lambda constant from the start.
    pub lambda_warmup_frac: f64,
}

impl TrainConfig {
    pub fn new(variant: LossVariant) -> Self {
        TrainConfig {
            variant,
            batch_size: 64,
            iterations: 5000,
            lr_classify: 1e-3,
            lr_adversary: 1e-3,
            lr_feature: 1e-3,
            conditioning: Conditioning::All,
            seed: 0,
            log_every: 25,
            lambda_warmup_frac: 0.0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.variant.validate()?;
        if self.batch_size < MIN_ADV_BATCH {
            return Err(contract(format!(
                "batch_size must be at least {MIN_ADV_BATCH}, got {}",
                self.batch_size
            )));
        }
        if self.iterations == 0 {
            return Err(contract("iterations must be at least 1".to_string()));
        }
        if self.log_every == 0 {
            return Err(contract("log_every must be at least 1".to_string()));
        }
        for (name, lr) in [
            ("lr_classify", self.lr_classify),
            ("lr_adversary", self.lr_adversary),
            ("lr_feature", self.lr_feature),
        ] {
            if !(lr > 0.0) {
                return Err(contract(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_warmup_frac) {
            return Err(contract(format!(
                "lambda_warmup_frac must lie in [0,1], got {}",
                self.lambda_warmup_frac
            )));
        }
        if let Conditioning::Classes(set) = &self.conditioning {
            if set.is_empty() {
                return Err(contract("conditioning class set must be non-empty".to_string()));
            }
            if let Some(&bad) = set.iter().find(|&&c| c >= num_classes) {
                return Err(contract(format!(
                    "conditioning class {bad} outside 0..{num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// Effective lambda at a 1-based iteration.
    pub fn lambda_at(&self, iteration: usize) -> f64 {
        let lambda = self.variant.lambda;
        if self.lambda_warmup_frac <= 0.0 {
            return lambda;
        }
        let warm = (self.iterations as f64 * self.lambda_warmup_frac).ceil() as usize;
        if warm == 0 || iteration >= warm {
            lambda
        } else {
            lambda * iteration as f64 / warm as f64
        }
    }
}

/// One training-progress record, emitted every `log_every` iterations with
/// loss values from the current batch and metrics from the full dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss_c: f64,
    /// Adversarial term (correlation sum or MSE); NaN for vanilla.
    pub loss_adv: f64,
    pub bacc: f64,
    /// Squared distance correlation between features and each protected
    /// variable, conditioned per class when conditioning is active.
    pub dcor2: Vec<f64>,
    /// k-NN mutual information per protected variable, floored at -0.05.
    pub mi: Vec<f64>,
    pub grad_norm_classify: f64,
    pub grad_norm_adversary: f64,
    pub grad_norm_feature: f64,
    /// Steps since the previous log whose adversarial phases were skipped
    /// because every conditioned sub-batch was too small.
    pub adv_skips: usize,
}

/// One mini-batch gathered from the dataset.
pub struct Batch {
    pub images: Tensor,    // [B,1,H,W]
    pub onehot: Tensor,    // [B,M]
    pub labels: Vec<u8>,
    pub protected: Tensor, // [B,k]
}

/// Optimizer instances per phase. The extractor appears in both the
/// classification and feature phases with independent moment state.
pub struct Optimizers {
    pub primary: OptimizerState,
    pub adversary: Option<OptimizerState>,
    pub feature: Option<OptimizerState>,
}

impl Optimizers {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let kind = config.variant.kind;
        let mut primary_refs = params.rl_tensors();
        primary_refs.extend(params.classifier_tensors());
        if kind == VariantKind::MultiTask {
            primary_refs.extend(params.bias_pred_tensors());
        }
        let primary = OptimizerState::new(config.lr_classify, &primary_refs);
        let (adversary, feature) = if kind.is_adversarial() {
            (
                Some(OptimizerState::new(config.lr_adversary, &params.bias_pred_tensors())),
                Some(OptimizerState::new(config.lr_feature, &params.rl_tensors())),
            )
        } else {
            (None, None)
        };
        Optimizers {
            primary,
            adversary,
            feature,
        }
    }
}

/// Losses and gradient norms of one optimization step.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub loss_c: f64,
    pub adv_term: Option<f64>,
    pub grad_norm_classify: f64,
    pub grad_norm_adversary: Option<f64>,
    pub grad_norm_feature: Option<f64>,
    /// Samples consumed by the adversarial phases.
    pub adv_samples: usize,
    pub adv_skipped: bool,
}

fn extract_grads(
    tape: &Tape,
    grads: &crate::tape::Gradients,
    ids: &[VarId],
) -> (Vec<Tensor>, f64) {
    let mut out = Vec::with_capacity(ids.len());
    let mut sq_sum = 0.0;
    for &id in ids {
        let g = match grads.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        };
        sq_sum += g.data().iter().map(|v| v * v).sum::<f64>();
        out.push(g);
    }
    (out, sq_sum.sqrt())
}

fn apply_update(
    params: &mut Vec<&mut Tensor>,
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    adam_step(params.as_mut_slice(), &grad_refs, state)
}

fn check_finite(value: f64, phase: &'static str, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            phase,
            iteration,
            quantity: "loss",
        })
    }
}

/// Conditioned sub-batches as index groups within the batch. Groups smaller
/// than `MIN_ADV_BATCH` are dropped.
fn adversarial_groups(batch: &Batch, conditioning: &Conditioning) -> Vec<Vec<usize>> {
    let all: Vec<Vec<usize>> = match conditioning {
        Conditioning::All => vec![(0..batch.labels.len()).collect()],
        Conditioning::Classes(set) => set
            .iter()
            .map(|&c| {
                batch
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|&(_, &l)| l as usize == c)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect(),
    };
    all.into_iter().filter(|g| g.len() >= MIN_ADV_BATCH).collect()
}

/// The adversarial term on the tape: the sum over groups of the per-group
/// correlation sum (or MSE). `bhat` holds predictions for the union of the
/// groups, laid out group after group.
fn adv_term_on_tape(
    tape: &mut Tape,
    bhat: VarId,
    group_spans: &[(usize, usize)],
    group_protected: &[Tensor],
    kind: VariantKind,
    eps_std: f64,
) -> Result<VarId> {
    let mut total: Option<VarId> = None;
    for (span, prot) in group_spans.iter().zip(group_protected) {
        let bh = if group_spans.len() == 1 {
            bhat
        } else {
            tape.gather_rows(bhat, (span.0..span.1).collect())?
        };
        let b = tape.constant(prot.clone());
        let term = match kind {
            VariantKind::BrNet => losses::corr_sq_sum(tape, b, bh, eps_std)?,
            VariantKind::AdvMse => losses::adv_mse_loss(tape, b, bh)?,
            _ => unreachable!("adversarial phases only run for br-net and adv-mse"),
        };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one qualifying group"))
}

/// One optimization step on one batch. Phase structure depends on the
/// variant; parameter sets not owned by a phase are never touched by it.
pub fn train_step(
    batch: &Batch,
    params: &mut ModelParams,
    opts: &mut Optimizers,
    spec: &ArchitectureSpec,
    config: &TrainConfig,
    lambda_now: f64,
    iteration: usize,
) -> Result<StepStats> {
    let kind = config.variant.kind;
    let eps = config.variant.eps_std;

    // Phase 1: classification (joint objective for multi-task / zafar).
    let mut tape = Tape::new();
    let images = tape.constant(batch.images.clone());
    let rl = params.register_rl(&mut tape, true);
    let cl = params.register_classifier(&mut tape, true);
    let feats = nets::rl_forward(&mut tape, images, &rl, spec)?;
    let logits = nets::c_forward(&mut tape, feats, &cl)?;
    let ce = tape.softmax_xent(logits, batch.onehot.clone())?;
    let loss_c = tape.scalar(ce);

    let mut joint_adv: Option<f64> = None;
    let mut phase1_ids = rl.ids();
    phase1_ids.extend(cl.ids());
    let objective = match kind {
        VariantKind::MultiTask => {
            let bp = params.register_bias_pred(&mut tape, true);
            phase1_ids.extend(bp.ids());
            let bhat = nets::bp_forward(&mut tape, feats, &bp)?;
            let b = tape.constant(batch.protected.clone());
            let mse = losses::adv_mse_loss(&mut tape, b, bhat)?;
            joint_adv = Some(tape.scalar(mse));
            let weighted = tape.mul_const(mse, lambda_now)?;
            tape.add(ce, weighted)?
        }
        VariantKind::Zafar => {
            let b = tape.constant(batch.protected.clone());
            let pen = losses::zafar_penalty(&mut tape, b, logits, eps)?;
            joint_adv = Some(tape.scalar(pen));
            let weighted = tape.mul_const(pen, lambda_now)?;
            tape.add(ce, weighted)?
        }
        _ => ce,
    };
    check_finite(tape.scalar(objective), "classification", iteration)?;

    let grads = tape.backward(objective)?;
    let (grad_tensors, grad_norm_classify) = extract_grads(&tape, &grads, &phase1_ids);
    {
        let mut refs: Vec<&mut Tensor> = Vec::with_capacity(phase1_ids.len());
        let (rl_refs, cl_refs, bp_refs) = split_params_mut(params);
        refs.extend(rl_refs);
        refs.extend(cl_refs);
        if kind == VariantKind::MultiTask {
            refs.extend(bp_refs);
        }
        apply_update(&mut refs, &grad_tensors, &mut opts.primary)?;
    }

    if !kind.is_adversarial() {
        return Ok(StepStats {
            loss_c,
            adv_term: joint_adv,
            grad_norm_classify,
            grad_norm_adversary: None,
            grad_norm_feature: None,
            adv_samples: 0,
            adv_skipped: false,
        });
    }

    // Adversarial phases share the conditioned sub-batch.
    let groups = adversarial_groups(batch, &config.conditioning);
    if groups.is_empty() {
        return Ok(StepStats {
            loss_c,
            adv_term: None,
            grad_norm_classify,
            grad_norm_adversary: None,
            grad_norm_feature: None,
            adv_samples: 0,
            adv_skipped: true,
        });
    }

    let union: Vec<usize> = groups.iter().flatten().copied().collect();
    let mut group_spans = Vec::with_capacity(groups.len());
    let mut start = 0usize;
    for g in &groups {
        group_spans.push((start, start + g.len()));
        start += g.len();
    }
    let group_protected: Vec<Tensor> = groups
        .iter()
        .map(|g| batch.protected.gather_rows(g).expect("indices in range"))
        .collect();
    let union_images = batch.images.gather_rows(&union)?;

    // Phase 2: adversary update on frozen features.
    let feats_frozen = nets::rl_infer(params, spec, &union_images)?;
    let mut tape = Tape::new();
    let f = tape.constant(feats_frozen);
    let bp = params.register_bias_pred(&mut tape, true);
    let bhat = nets::bp_forward(&mut tape, f, &bp)?;
    let adv = adv_term_on_tape(&mut tape, bhat, &group_spans, &group_protected, kind, eps)?;
    let adv_value = tape.scalar(adv);
    let loss2 = match kind {
        VariantKind::BrNet => tape.neg(adv)?, // maximize the correlation sum
        VariantKind::AdvMse => adv,           // predict the bias as well as possible
        _ => unreachable!(),
    };
    check_finite(tape.scalar(loss2), "adversary", iteration)?;
    let grads = tape.backward(loss2)?;
    let (grad_tensors, grad_norm_adversary) = extract_grads(&tape, &grads, &bp.ids());
    apply_update(
        &mut params.bias_pred_tensors_mut(),
        &grad_tensors,
        opts.adversary.as_mut().expect("adversarial variant"),
    )?;

    // Phase 3: extractor update against the frozen adversary.
    let mut tape = Tape::new();
    let imgs = tape.constant(union_images);
    let rl = params.register_rl(&mut tape, true);
    let bp = params.register_bias_pred(&mut tape, false);
    let feats = nets::rl_forward(&mut tape, imgs, &rl, spec)?;
    let bhat = nets::bp_forward(&mut tape, feats, &bp)?;
    let adv3 = adv_term_on_tape(&mut tape, bhat, &group_spans, &group_protected, kind, eps)?;
    let loss3 = match kind {
        VariantKind::BrNet => tape.mul_const(adv3, lambda_now)?, // drive correlations to zero
        VariantKind::AdvMse => tape.mul_const(adv3, -lambda_now)?, // drive the MSE up
        _ => unreachable!(),
    };
    check_finite(tape.scalar(loss3), "feature", iteration)?;
    let grads = tape.backward(loss3)?;
    let (grad_tensors, grad_norm_feature) = extract_grads(&tape, &grads, &rl.ids());
    apply_update(
        &mut params.rl_tensors_mut(),
        &grad_tensors,
        opts.feature.as_mut().expect("adversarial variant"),
    )?;

    Ok(StepStats {
        loss_c,
        adv_term: Some(adv_value),
        grad_norm_classify,
        grad_norm_adversary: Some(grad_norm_adversary),
        grad_norm_feature: Some(grad_norm_feature),
        adv_samples: union.len(),
        adv_skipped: false,
    })
}

fn split_params_mut(
    params: &mut ModelParams,
) -> (Vec<&mut Tensor>, Vec<&mut Tensor>, Vec<&mut Tensor>) {
    let ModelParams {
        conv,
        classifier,
        bias_pred,
    } = params;
    let [c0, c1, c2] = conv;
    let rl = vec![
        &mut c0.weight,
        &mut c0.bias,
        &mut c1.weight,
        &mut c1.bias,
        &mut c2.weight,
        &mut c2.bias,
    ];
    let cl = vec![
        &mut classifier.w1,
        &mut classifier.b1,
        &mut classifier.w2,
        &mut classifier.b2,
    ];
    let bp = vec![
        &mut bias_pred.w1,
        &mut bias_pred.b1,
        &mut bias_pred.w2,
        &mut bias_pred.b2,
    ];
    (rl, cl, bp)
}

/// Pure inference over a dataset's images: predicted labels (argmax, ties
/// to the lower class), class probabilities, and the extractor features.
pub struct EvalOutput {
    pub pred_labels: Vec<u8>,
    pub probs: Tensor,    // [N, M]
    pub features: Tensor, // [N, F]
}

pub fn evaluate(params: &ModelParams, spec: &ArchitectureSpec, images: &Tensor) -> Result<EvalOutput> {
    use rayon::prelude::*;

    let (n, _, _, _) = images.dims4()?;
    let m = spec.num_classes;
    let fdim = spec.feature_dim();

    // independent chunks, concatenated in order
    let chunk = 128;
    let spans: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let parts: Vec<Result<(Vec<u8>, Vec<f64>, Vec<f64>)>> = spans
        .par_iter()
        .map(|&(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            let imgs = images.gather_rows(&idx)?;
            let f = nets::rl_infer(params, spec, &imgs)?;
            let logits = nets::c_infer(params, &f)?;
            let p = crate::kernels::softmax_rows(&logits)?;
            let mut preds = Vec::with_capacity(idx.len());
            for b in 0..idx.len() {
                let row = &logits.data()[b * m..(b + 1) * m];
                let mut best = 0usize;
                for j in 1..m {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                preds.push(best as u8);
            }
            Ok((preds, p.data().to_vec(), f.data().to_vec()))
        })
        .collect();

    let mut probs = Vec::with_capacity(n * m);
    let mut features = Vec::with_capacity(n * fdim);
    let mut pred_labels = Vec::with_capacity(n);
    for part in parts {
        let (preds, p, f) = part?;
        pred_labels.extend(preds);
        probs.extend(p);
        features.extend(f);
    }

    Ok(EvalOutput {
        pred_labels,
        probs: Tensor::from_vec(&[n, m], probs)?,
        features: Tensor::from_vec(&[n, fdim], features)?,
    })
}

/// Full-dataset independence metrics of the current features, honoring the
/// conditioning mode: per-class values are averaged over the conditioned
/// classes.
fn feature_dependence(
    features: &Tensor,
    protected: &Tensor,
    labels: &[u8],
    conditioning: &Conditioning,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, k) = protected.dims2()?;
    let groups: Vec<Vec<usize>> = match conditioning {
        Conditioning::All => vec![(0..n).collect()],
        Conditioning::Classes(set) => set
            .iter()
            .map(|&c| {
                labels
                    .iter()
                    .enumerate()
                    .filter(|&(_, &l)| l as usize == c)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect(),
    };

    let mut dcor = vec![0.0f64; k];
    let mut mi = vec![0.0f64; k];
    let mut used_groups = 0usize;
    for g in &groups {
        if g.len() < 8 {
            continue;
        }
        used_groups += 1;
        let f = features.gather_rows(g)?;
        for kappa in 0..k {
            let b: Vec<f64> = g.iter().map(|&i| protected.data()[i * k + kappa]).collect();
            dcor[kappa] += metrics::dcor2(&f, &b)?;
            mi[kappa] += metrics::mutual_info_knn(&f, &b, 3)?;
        }
    }
    if used_groups == 0 {
        return Err(contract("no conditioning group has enough samples for metrics".to_string()));
    }
    for kappa in 0..k {
        dcor[kappa] /= used_groups as f64;
        mi[kappa] = (mi[kappa] / used_groups as f64).max(-0.05);
    }
    Ok((dcor, mi))
}

/// Full training loop. Deterministic given the config seed: parameter
/// initialization, batch order, and all updates derive from it. The
/// callback sees every log record together with the current parameters
/// (checkpoint hook).
pub fn train(
    dataset: &Dataset,
    spec: &ArchitectureSpec,
    config: &TrainConfig,
    mut on_log: impl FnMut(&IterationLog, &ModelParams),
) -> Result<(ModelParams, Vec<IterationLog>)> {
    spec.validate()?;
    config.validate(spec.num_classes)?;
    let n = dataset.len();
    if n == 0 {
        return Err(contract("empty dataset".to_string()));
    }
    let (h, w) = dataset.resolution();
    if h != spec.input_h || w != spec.input_w {
        return Err(contract(format!(
            "dataset resolution {h}x{w} does not match architecture {}x{}",
            spec.input_h, spec.input_w
        )));
    }
    if spec.num_protected != 1 {
        return Err(contract(
            "this dataset carries a single protected variable".to_string(),
        ));
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l as usize >= spec.num_classes) {
        return Err(contract(format!(
            "label {bad} outside 0..{}",
            spec.num_classes
        )));
    }

    let mut params = nets::init_params(spec, config.seed)?;
    let mut opts = Optimizers::new(&params, config);
    let protected = dataset.protected_matrix();

    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed);
    shuffler.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut shuffler);
    let mut cursor = 0usize;

    let mut logs = Vec::new();
    let mut skips_since_log = 0usize;

    for iteration in 1..=config.iterations {
        if cursor + config.batch_size > n {
            order.shuffle(&mut shuffler);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + config.batch_size).min(n)];
        cursor += config.batch_size;

        let batch = make_batch(dataset, &protected, idx, spec.num_classes)?;
        let lambda_now = config.lambda_at(iteration);
        let stats = train_step(&batch, &mut params, &mut opts, spec, config, lambda_now, iteration)?;
        if stats.adv_skipped {
            skips_since_log += 1;
        }

        if iteration % config.log_every == 0 {
            let eval = evaluate(&params, spec, &dataset.images)?;
            let bacc = metrics::balanced_accuracy(&eval.pred_labels, &dataset.labels)?;
            let (dcor, mi) =
                feature_dependence(&eval.features, &protected, &dataset.labels, &config.conditioning)?;
            let log = IterationLog {
                iteration,
                loss_c: stats.loss_c,
                loss_adv: stats.adv_term.unwrap_or(f64::NAN),
                bacc,
                dcor2: dcor,
                mi,
                grad_norm_classify: stats.grad_norm_classify,
                grad_norm_adversary: stats.grad_norm_adversary.unwrap_or(f64::NAN),
                grad_norm_feature: stats.grad_norm_feature.unwrap_or(f64::NAN),
                adv_skips: skips_since_log,
            };
            on_log(&log, &params);
            logs.push(log);
            skips_since_log = 0;
        }
    }

    Ok((params, logs))
}

pub fn make_batch(
    dataset: &Dataset,
    protected: &Tensor,
    indices: &[usize],
    num_classes: usize,
) -> Result<Batch> {
    let images = dataset.images.gather_rows(indices)?;
    let prot = protected.gather_rows(indices)?;
    let labels: Vec<u8> = indices.iter().map(|&i| dataset.labels[i]).collect();
    let mut onehot = Tensor::zeros(&[indices.len(), num_classes]);
    for (row, &l) in labels.iter().enumerate() {
        onehot.data_mut()[row * num_classes + l as usize] = 1.0;
    }
    Ok(Batch {
        images,
        onehot,
        labels,
        protected: prot,
    })
}

/// Train a freshly initialized bias-predictor head on frozen features by
/// full-batch correlation maximization. Returns the fitted head and the
/// final correlation sum: the operational probe for whether the expected
/// value of the protected variables can still be read out of the features.
pub fn fit_bias_predictor(
    features: &Tensor,
    protected: &Tensor,
    spec: &ArchitectureSpec,
    seed: u64,
    steps: usize,
    lr: f64,
    eps_std: f64,
) -> Result<(MlpParams, f64)> {
    let (n, _) = features.dims2()?;
    let (pn, _) = protected.dims2()?;
    if n != pn {
        return Err(contract(format!("{n} feature rows vs {pn} protected rows")));
    }
    if n < MIN_ADV_BATCH {
        return Err(contract(format!("need at least {MIN_ADV_BATCH} samples, got {n}")));
    }

    let mut head = nets::init_bias_head(spec, seed);
    let mut state = OptimizerState::new(lr, &head.tensors());

    for step in 1..=steps {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let vars = nets::register_mlp(&mut tape, &head, true);
        let bhat = nets::bp_forward(&mut tape, f, &vars)?;
        let b = tape.constant(protected.clone());
        let corr = losses::corr_sq_sum(&mut tape, b, bhat, eps_std)?;
        let loss = tape.neg(corr)?;
        check_finite(tape.scalar(loss), "probe", step)?;
        let grads = tape.backward(loss)?;
        let (grad_tensors, _) = extract_grads(&tape, &grads, &vars.ids());
        apply_update(&mut head.tensors_mut(), &grad_tensors, &mut state)?;
    }

    // measure with the final parameters
    let bhat = nets::mlp_infer(&head, features)?;
    let (_, k) = protected.dims2()?;
    let mut total = 0.0;
    for kappa in 0..k {
        let b: Vec<f64> = (0..n).map(|i| protected.data()[i * k + kappa]).collect();
        let bh: Vec<f64> = (0..n).map(|i| bhat.data()[i * k + kappa]).collect();
        total += losses::pearson_corr_sq_value(&b, &bh, eps_std)?;
    }
    Ok((head, total))
}
