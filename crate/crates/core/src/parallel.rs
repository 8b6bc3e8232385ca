//! Layer-parallel training: the model is split into `K` contiguous stages
//! that run decoupled forward/backward passes concurrently, each against a
//! stage-local loss, followed by a communication phase that corrects the
//! auxiliary boundary variables.
//!
//! Stage `k` starts from `lambda_k` instead of stage `k-1`'s output. Its
//! local loss is `beta * psi(lambda_{k+1}, x_out) + <kappa_{k+1}, x_out>`
//! for interior stages and the classification loss for the last stage, so
//! the terminal adjoint of the stage backward pass is exactly
//! `beta * dpsi/dx + kappa_{k+1}` (resp. `dphi/dx`). The corrections are
//!
//! ```text
//! lambda_k <- lambda_k - eta * (beta * dpsi(lambda_k, x_prev)/dlambda + p_in_k - kappa_k)
//! kappa_k  <- kappa_k  - eta/(2 beta) * (lambda_k - x_prev)
//! ```
//!
//! with `lambda_0` pinned to the embedded input and `kappa_0 = 0`. Penalty
//! mode keeps every `kappa` identically zero.
//!
//! Three sources supply the lambdas: a persistent per-(sample, variant)
//! store (the memory-hungry baseline), per-interface auxiliary networks
//! distilled against the corrected values, or recursive chains regenerating
//! every interface directly from the embedded input.

use crate::auxnet::{distill_step, generate_lambdas, AuxNet, ReAuxCache, ReAuxNet};
use crate::data::Batch;
use crate::error::Error;
use crate::model::{
    block_backward, block_forward, embed_backward, embed_forward, AffineParams, BlockCache,
    BlockParams, EmbedCache, ModelConfig, ResidualModel,
};
use crate::optim::{sgd_update, Momentum};
use crate::rng::SeededRng;
use crate::tensor::{affine, softmax_cross_entropy, Tensor};
use crate::Result;
use std::collections::HashMap;
use std::ops::Range;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Partitioning

/// Contiguous near-uniform assignment of blocks to stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    ranges: Vec<Range<usize>>,
}

impl StagePlan {
    pub fn stage_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        self.ranges[k].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
}

/// Split `blocks` into `stages` contiguous ranges whose sizes differ by at
/// most one; earlier stages take the extra blocks.
pub fn partition(blocks: usize, stages: usize) -> Result<StagePlan> {
    if stages < 1 || blocks < 1 {
        return Err(Error::input(format!(
            "partition: need blocks, stages >= 1, got {blocks}/{stages}"
        )));
    }
    if stages > blocks {
        return Err(Error::input(format!(
            "partition: {stages} stages exceed {blocks} blocks"
        )));
    }
    let base = blocks / stages;
    let extra = blocks % stages;
    let mut ranges = Vec::with_capacity(stages);
    let mut start = 0;
    for k in 0..stages {
        let len = base + usize::from(k < extra);
        ranges.push(start..start + len);
        start += len;
    }
    Ok(StagePlan { ranges })
}

// ---------------------------------------------------------------------------
// Penalty function

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiKind {
    L2Squared,
    /// Exact but nonsmooth; experimental.
    L1,
}

/// Penalty value with gradients w.r.t. both arguments.
///
/// `l2_squared`: `sum((lambda - x)^2)`, gradients `2(lambda - x)` and
/// `-2(lambda - x)`. `l1`: `sum(|lambda - x|)` with the zero subgradient at
/// kinks. Symmetric in the sense that swapping the arguments only flips the
/// gradient signs.
pub fn psi_value_and_grads(
    lambda: &Tensor,
    x: &Tensor,
    kind: PsiKind,
) -> Result<(f64, Tensor, Tensor)> {
    let diff = lambda.sub(x)?;
    match kind {
        PsiKind::L2Squared => {
            let value = diff.sq_l2();
            let d_lambda = diff.scale(2.0);
            let d_x = diff.scale(-2.0);
            Ok((value, d_lambda, d_x))
        }
        PsiKind::L1 => {
            let value = diff.data().iter().map(|v| v.abs()).sum();
            let sign = diff.map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            let d_x = sign.scale(-1.0);
            Ok((value, sign, d_x))
        }
    }
}

// ---------------------------------------------------------------------------
// Auxiliary state

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    Penalty,
    AugmentedLagrangian,
}

/// Per-batch auxiliary variables and multipliers.
///
/// `lambdas[0]` is pinned to the embedded input of the current mini-batch and
/// `kappas[0]` stays zero; in penalty mode every kappa stays zero.
#[derive(Debug, Clone)]
pub struct AuxState {
    pub lambdas: Vec<Tensor>,
    pub kappas: Vec<Tensor>,
    pub beta: f64,
    pub psi_kind: PsiKind,
    pub mode: CouplingMode,
}

impl AuxState {
    pub fn new(
        lambdas: Vec<Tensor>,
        kappas: Vec<Tensor>,
        beta: f64,
        psi_kind: PsiKind,
        mode: CouplingMode,
    ) -> Result<Self> {
        if beta <= 0.0 {
            return Err(Error::input("aux state: beta must be > 0".to_string()));
        }
        if lambdas.len() != kappas.len() || lambdas.is_empty() {
            return Err(Error::input(
                "aux state: lambdas/kappas must have equal length K >= 1".to_string(),
            ));
        }
        Ok(AuxState {
            lambdas,
            kappas,
            beta,
            psi_kind,
            mode,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.lambdas.len()
    }

    /// Gradient correction of `lambda_k` from the boundary mismatch and the
    /// stage-input adjoint:
    /// `lambda_k -= eta * (beta * dpsi/dlambda + p_in_k - kappa_k)`.
    pub fn update_lambda(
        &mut self,
        k: usize,
        p_in_k: &Tensor,
        x_prev_out: &Tensor,
        eta: f64,
    ) -> Result<()> {
        if k == 0 || k >= self.stage_count() {
            return Err(Error::usage(format!(
                "update_lambda: k must be in 1..{}, got {k} (lambda_0 is pinned)",
                self.stage_count()
            )));
        }
        let (_, d_lambda, _) = psi_value_and_grads(&self.lambdas[k], x_prev_out, self.psi_kind)?;
        let mut direction = d_lambda.scale(self.beta);
        direction.add_assign(p_in_k)?;
        if self.mode == CouplingMode::AugmentedLagrangian {
            direction.axpy(-1.0, &self.kappas[k])?;
        }
        self.lambdas[k].axpy(-eta, &direction)
    }

    /// Multiplier update `kappa_k -= eta/(2 beta) * (lambda_k - x_prev_out)`.
    pub fn update_kappa(&mut self, k: usize, x_prev_out: &Tensor, eta: f64) -> Result<()> {
        if self.mode != CouplingMode::AugmentedLagrangian {
            return Err(Error::usage(
                "update_kappa: multipliers are frozen at zero in penalty mode".to_string(),
            ));
        }
        if k == 0 || k >= self.stage_count() {
            return Err(Error::usage(format!(
                "update_kappa: k must be in 1..{}, got {k} (kappa_0 is pinned)",
                self.stage_count()
            )));
        }
        let diff = self.lambdas[k].sub(x_prev_out)?;
        self.kappas[k].axpy(-eta / (2.0 * self.beta), &diff)
    }

    /// Per-interface boundary mismatch `||lambda_k - x_out_{k-1}||` for
    /// `k = 1..K-1`. Empty when `K = 1`.
    pub fn constraint_violations(&self, boundary_outputs: &[Tensor]) -> Result<Vec<f64>> {
        if boundary_outputs.len() != self.stage_count() {
            return Err(Error::input(format!(
                "constraint_violations: {} boundary outputs for {} stages",
                boundary_outputs.len(),
                self.stage_count()
            )));
        }
        (1..self.stage_count())
            .map(|k| Ok(self.lambdas[k].sub(&boundary_outputs[k - 1])?.l2_norm()))
            .collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Stage parameters and stage-local operations

/// The parameters one worker owns: a contiguous block range, plus the input
/// map on stage 0 and the output map on the last stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub index: usize,
    pub input_map: Option<AffineParams>,
    pub blocks: Vec<BlockParams>,
    pub output_map: Option<AffineParams>,
    pub residual_scale: f64,
    pub width: usize,
}

impl StageParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(s) = &self.input_map {
            out.push(&s.w);
            out.push(&s.b);
        }
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        if let Some(t) = &self.output_map {
            out.push(&t.w);
            out.push(&t.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(s) = &mut self.input_map {
            out.push(&mut s.w);
            out.push(&mut s.b);
        }
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        if let Some(t) = &mut self.output_map {
            out.push(&mut t.w);
            out.push(&mut t.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Distribute a model's parameters across the plan's stages. Stage 0 takes
/// the input map, the last stage takes the output map.
pub fn split_model(model: &ResidualModel, plan: &StagePlan) -> Result<Vec<StageParams>> {
    if plan.ranges().last().map(|r| r.end) != Some(model.blocks.len()) {
        return Err(Error::input(format!(
            "split_model: plan covers {:?} blocks, model has {}",
            plan.ranges().last(),
            model.blocks.len()
        )));
    }
    let k_stages = plan.stage_count();
    Ok((0..k_stages)
        .map(|k| StageParams {
            index: k,
            input_map: (k == 0).then(|| model.input.clone()),
            blocks: plan.range(k).map(|i| model.blocks[i].clone()).collect(),
            output_map: (k == k_stages - 1).then(|| model.output.clone()),
            residual_scale: model.cfg.residual_scale,
            width: model.cfg.width,
        })
        .collect())
}

/// Inverse of [`split_model`].
pub fn assemble_model(cfg: ModelConfig, stages: &[StageParams]) -> Result<ResidualModel> {
    let input = stages
        .first()
        .and_then(|s| s.input_map.clone())
        .ok_or_else(|| Error::usage("assemble_model: stage 0 lacks the input map".to_string()))?;
    let output = stages
        .last()
        .and_then(|s| s.output_map.clone())
        .ok_or_else(|| {
            Error::usage("assemble_model: last stage lacks the output map".to_string())
        })?;
    let blocks: Vec<BlockParams> = stages.iter().flat_map(|s| s.blocks.clone()).collect();
    if blocks.len() != cfg.blocks {
        return Err(Error::input(format!(
            "assemble_model: {} blocks from stages, config says {}",
            blocks.len(),
            cfg.blocks
        )));
    }
    Ok(ResidualModel {
        cfg,
        input,
        blocks,
        output,
    })
}

/// What a stage consumes: raw features (stage 0 embeds them itself) or a
/// boundary variable.
#[derive(Debug, Clone)]
pub enum StageFeed {
    Raw(Tensor),
    Boundary(Tensor),
}

#[derive(Debug, Clone)]
pub struct StageCache {
    pub embed: Option<EmbedCache>,
    /// Activation at the stage input (the lambda level).
    pub entry: Tensor,
    pub blocks: Vec<BlockCache>,
}

/// Run the stage's blocks from its feed. Returns the boundary output and the
/// caches for the backward pass.
pub fn stage_forward(params: &StageParams, feed: &StageFeed) -> Result<(Tensor, StageCache)> {
    let (entry, embed) = match feed {
        StageFeed::Raw(raw) => {
            let input_map = params.input_map.as_ref().ok_or_else(|| {
                Error::usage(format!(
                    "stage {} got raw features but owns no input map",
                    params.index
                ))
            })?;
            let (embedded, cache) = embed_forward(input_map, raw)?;
            (embedded, Some(cache))
        }
        StageFeed::Boundary(lambda) => {
            if lambda.shape().len() != 2 || lambda.cols() != params.width {
                return Err(Error::dimension(
                    "stage_forward",
                    lambda.shape(),
                    &[0, params.width],
                ));
            }
            (lambda.clone(), None)
        }
    };
    let mut x = entry.clone();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, cache) = block_forward(&x, b, params.residual_scale)?;
        caches.push(cache);
        x = next;
    }
    Ok((
        x,
        StageCache {
            embed,
            entry,
            blocks: caches,
        },
    ))
}

/// Stage-local loss value, its gradient w.r.t. the boundary output, and (on
/// the last stage) the output-map gradients that fall out of it.
#[derive(Debug, Clone)]
pub struct StageLoss {
    pub value: f64,
    pub d_x_out: Tensor,
    pub output_grads: Option<AffineParams>,
}

/// Interior stages pay `beta * psi(lambda_next, x_out) + <kappa_next, x_out>`
/// (the multiplier term vanishes in penalty mode); the last stage pays the
/// classification loss through its output map.
#[allow(clippy::too_many_arguments)]
pub fn stage_local_loss(
    k: usize,
    stage_count: usize,
    x_out: &Tensor,
    lambda_next: Option<&Tensor>,
    kappa_next: Option<&Tensor>,
    labels: Option<&[usize]>,
    output_map: Option<&AffineParams>,
    beta: f64,
    psi_kind: PsiKind,
) -> Result<StageLoss> {
    if k + 1 == stage_count {
        let labels = labels.ok_or_else(|| {
            Error::usage("last stage needs labels for its local loss".to_string())
        })?;
        let output_map = output_map
            .ok_or_else(|| Error::usage("last stage needs the output map".to_string()))?;
        let logits = affine(x_out, &output_map.w, &output_map.b)?;
        let (value, d_logits) = softmax_cross_entropy(&logits, labels)?;
        let d_x_out = d_logits.matmul_nt(&output_map.w)?;
        let output_grads = AffineParams {
            w: x_out.matmul_tn(&d_logits)?,
            b: d_logits.col_sum(),
        };
        Ok(StageLoss {
            value,
            d_x_out,
            output_grads: Some(output_grads),
        })
    } else {
        let lambda_next = lambda_next.ok_or_else(|| {
            Error::usage(format!(
                "stage {k} of {stage_count} needs lambda_{} for its local loss",
                k + 1
            ))
        })?;
        let (psi, _, d_x) = psi_value_and_grads(lambda_next, x_out, psi_kind)?;
        let mut value = beta * psi;
        let mut d_x_out = d_x.scale(beta);
        if let Some(kappa) = kappa_next {
            value += kappa.dot(x_out)?;
            d_x_out.add_assign(kappa)?;
        }
        Ok(StageLoss {
            value,
            d_x_out,
            output_grads: None,
        })
    }
}

/// Gradients for one stage, aligned with [`StageParams::tensors`].
#[derive(Debug, Clone)]
pub struct StageGrads {
    pub input_map: Option<AffineParams>,
    pub blocks: Vec<BlockParams>,
    pub output_map: Option<AffineParams>,
}

impl StageGrads {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(s) = &self.input_map {
            out.push(&s.w);
            out.push(&s.b);
        }
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        if let Some(t) = &self.output_map {
            out.push(&t.w);
            out.push(&t.b);
        }
        out
    }
}

/// Reverse sweep over the stage's blocks from the terminal adjoint
/// `d(local loss)/d(x_out)`. Returns the parameter gradients (output-map slot
/// left empty for the caller to fill) and the adjoint at the stage input.
pub fn stage_backward(
    params: &StageParams,
    cache: &StageCache,
    terminal_adjoint: &Tensor,
) -> Result<(StageGrads, Tensor)> {
    if cache.blocks.len() != params.blocks.len() {
        return Err(Error::usage(format!(
            "stage_backward: cache has {} block records, stage {} has {} blocks",
            cache.blocks.len(),
            params.index,
            params.blocks.len()
        )));
    }
    let mut p = terminal_adjoint.clone();
    let mut block_grads = vec![BlockParams::zeros(1, 1); params.blocks.len()];
    for (i, (bc, bp)) in cache.blocks.iter().zip(&params.blocks).enumerate().rev() {
        let (p_in, grads) = block_backward(bc, bp, &p, params.residual_scale)?;
        block_grads[i] = grads;
        p = p_in;
    }
    let input_grads = match (&params.input_map, &cache.embed) {
        (Some(_), Some(embed)) => Some(embed_backward(embed, &p)?),
        (None, None) => None,
        _ => {
            return Err(Error::usage(
                "stage_backward: cache and parameters disagree about the input map".to_string(),
            ))
        }
    };
    Ok((
        StageGrads {
            input_map: input_grads,
            blocks: block_grads,
            output_map: None,
        },
        p,
    ))
}

// ---------------------------------------------------------------------------
// Persistent per-sample lambda storage

/// The no-auxiliary-network baseline: one lambda row per (sample, variant)
/// per interface, written back after every correction. Grows with the
/// dataset and with the augmentation ratio; that growth is the point.
#[derive(Debug)]
pub struct PersistentAux {
    width: usize,
    interfaces: usize,
    with_kappa: bool,
    rows: HashMap<(u32, u32), AuxRow>,
}

#[derive(Debug, Clone)]
struct AuxRow {
    lambdas: Vec<f64>,
    kappas: Option<Vec<f64>>,
}

impl PersistentAux {
    pub fn new(width: usize, interfaces: usize, with_kappa: bool) -> Self {
        PersistentAux {
            width,
            interfaces,
            with_kappa,
            rows: HashMap::new(),
        }
    }

    pub fn has_all(&self, batch: &Batch) -> bool {
        batch
            .sample_ids
            .iter()
            .zip(&batch.variant_ids)
            .all(|(&s, &v)| self.rows.contains_key(&(s, v)))
    }

    /// Warm-start missing rows from chained stage boundary values.
    pub fn fill_missing(&mut self, batch: &Batch, boundaries: &[Tensor]) -> Result<()> {
        if boundaries.len() != self.interfaces {
            return Err(Error::input(format!(
                "fill_missing: {} boundaries for {} interfaces",
                boundaries.len(),
                self.interfaces
            )));
        }
        for (row_idx, key) in batch.sample_ids.iter().zip(&batch.variant_ids).enumerate() {
            let key = (*key.0, *key.1);
            if self.rows.contains_key(&key) {
                continue;
            }
            let mut lambdas = Vec::with_capacity(self.interfaces * self.width);
            for b in boundaries {
                lambdas.extend_from_slice(b.row(row_idx));
            }
            let kappas = self
                .with_kappa
                .then(|| vec![0.0; self.interfaces * self.width]);
            self.rows.insert(key, AuxRow { lambdas, kappas });
        }
        Ok(())
    }

    /// Assemble `lambda_k` and `kappa_k` tensors (k = 1..K-1) for a batch.
    pub fn gather(&self, batch: &Batch) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let b = batch.sample_ids.len();
        let mut lambdas = Vec::with_capacity(self.interfaces);
        let mut kappas = Vec::with_capacity(self.interfaces);
        for iface in 0..self.interfaces {
            let mut ldata = Vec::with_capacity(b * self.width);
            let mut kdata = Vec::with_capacity(b * self.width);
            for (&s, &v) in batch.sample_ids.iter().zip(&batch.variant_ids) {
                let row = self.rows.get(&(s, v)).ok_or_else(|| {
                    Error::usage(format!(
                        "persistent lambda missing for sample {s} variant {v}"
                    ))
                })?;
                let at = iface * self.width;
                ldata.extend_from_slice(&row.lambdas[at..at + self.width]);
                match &row.kappas {
                    Some(kap) => kdata.extend_from_slice(&kap[at..at + self.width]),
                    None => kdata.extend(std::iter::repeat_n(0.0, self.width)),
                }
            }
            lambdas.push(Tensor::new(vec![b, self.width], ldata)?);
            kappas.push(Tensor::new(vec![b, self.width], kdata)?);
        }
        Ok((lambdas, kappas))
    }

    /// Write corrected per-batch tensors back to their rows.
    pub fn scatter(&mut self, batch: &Batch, lambdas: &[Tensor], kappas: &[Tensor]) -> Result<()> {
        for iface in 0..self.interfaces {
            for (row_idx, (&s, &v)) in batch.sample_ids.iter().zip(&batch.variant_ids).enumerate() {
                let row = self.rows.get_mut(&(s, v)).ok_or_else(|| {
                    Error::usage(format!("scatter into missing row: sample {s} variant {v}"))
                })?;
                let at = iface * self.width;
                row.lambdas[at..at + self.width].copy_from_slice(lambdas[iface].row(row_idx));
                if let Some(kap) = &mut row.kappas {
                    kap[at..at + self.width].copy_from_slice(kappas[iface].row(row_idx));
                }
            }
        }
        Ok(())
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn tensor_count(&self) -> usize {
        self.rows.len() * self.interfaces * (1 + usize::from(self.with_kappa))
    }

    pub fn byte_count(&self) -> usize {
        self.tensor_count() * self.width * std::mem::size_of::<f64>()
    }
}

// ---------------------------------------------------------------------------
// The synchronous K-worker trainer

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Stages execute sequentially on the coordinator thread.
    Inline,
    /// One persistent worker thread per stage; data crosses only at the
    /// phase barriers, so results are identical to inline execution.
    Threads,
}

/// Where the per-batch lambdas come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaStrategy {
    /// Per-(sample, variant) storage, warm-started on first visit.
    Persistent,
    /// Per-interface auxiliary nets; corrected lambdas only serve as
    /// distillation targets.
    AuxNets {
        hidden: usize,
        blocks: usize,
        lr: Option<f64>,
        distill_steps: usize,
    },
    /// Recursive chains from the embedded input; the chain update replaces
    /// the lambda correction.
    ReAux {
        hidden: usize,
        blocks: usize,
        lr: Option<f64>,
        shared_prefix: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelOptions {
    pub mode: CouplingMode,
    pub psi_kind: PsiKind,
    pub beta: f64,
    /// Learning rate for lambda/kappa corrections; defaults to the parameter
    /// learning rate of the current step.
    pub lambda_lr: Option<f64>,
    /// Std-dev of the Gaussian perturbation applied to corrected lambdas.
    pub noise_std: f64,
    pub momentum: f64,
    pub exec: ExecMode,
    pub seed: u64,
    pub strategy: LambdaStrategy,
}

/// Phase timings of one parallel step, before epoch aggregation.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepTimings {
    /// Filled by the harness when it assembles the batch.
    pub t_data: f64,
    /// Mean over stages of the in-worker forward time.
    pub stage_forward_mean: f64,
    /// Mean over stages of the in-worker backward+update time (the last
    /// stage's classification-loss evaluation counts as backward work).
    pub stage_backward_mean: f64,
    /// Mean interior-stage boundary-loss time plus coordinator correction time.
    pub t_psi: f64,
    pub t_aux_forward: f64,
    pub t_aux_backward: f64,
    pub wall: f64,
}

/// Everything one step reports to the harness.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub stage_losses: Vec<f64>,
    /// Pre-correction `||lambda_k - x_out_{k-1}||` per interface.
    pub violations: Vec<f64>,
    pub distill_losses: Vec<f64>,
    pub timings: StepTimings,
}

impl StepMetrics {
    pub fn violation_mean(&self) -> f64 {
        mean(&self.violations)
    }
}

struct PhaseAInput {
    feed: StageFeed,
    lambda_next: Option<Tensor>,
    kappa_next: Option<Tensor>,
    labels: Option<Vec<usize>>,
    beta: f64,
    psi_kind: PsiKind,
    lr: f64,
    momentum: f64,
}

/// What a worker hands back after its decoupled forward/backward pass.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: usize,
    pub x_out: Tensor,
    pub p_in: Tensor,
    /// Activation at the stage input; stage 0 reports the embedded batch.
    pub entry: Tensor,
    pub local_loss: f64,
    pub t_forward: f64,
    pub t_loss: f64,
    pub t_backward: f64,
}

struct WorkerState {
    params: StageParams,
    momentum: Momentum,
    stage_count: usize,
}

impl WorkerState {
    fn new(params: StageParams, stage_count: usize) -> Self {
        let momentum = Momentum::matching(&params.tensors());
        WorkerState {
            params,
            momentum,
            stage_count,
        }
    }

    /// Phase A: forward from the feed, stage-local loss, backward sweep,
    /// SGD update of the stage's own parameters.
    fn phase_a(&mut self, input: PhaseAInput) -> Result<StageReport> {
        let k = self.params.index;
        let t = Instant::now();
        let (x_out, cache) = stage_forward(&self.params, &input.feed)?;
        let t_forward = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let loss = stage_local_loss(
            k,
            self.stage_count,
            &x_out,
            input.lambda_next.as_ref(),
            input.kappa_next.as_ref(),
            input.labels.as_deref(),
            self.params.output_map.as_ref(),
            input.beta,
            input.psi_kind,
        )?;
        let t_loss = t.elapsed().as_secs_f64();
        if !loss.value.is_finite() {
            return Err(Error::Numeric {
                epoch: usize::MAX,
                stage: Some(k),
                what: "stage-local loss".to_string(),
            });
        }

        let t = Instant::now();
        let (mut grads, p_in) = stage_backward(&self.params, &cache, &loss.d_x_out)?;
        grads.output_map = loss.output_grads;
        sgd_update(
            &mut self.params.tensors_mut(),
            &grads.tensors(),
            input.lr,
            input.momentum,
            &mut self.momentum,
        )?;
        let t_backward = t.elapsed().as_secs_f64();

        Ok(StageReport {
            stage: k,
            x_out,
            p_in,
            entry: cache.entry,
            local_loss: loss.value,
            t_forward,
            t_loss,
            t_backward,
        })
    }

    /// Evaluation-only forward pass (warm starts, lambda seeding).
    fn eval(&self, feed: &StageFeed) -> Result<Tensor> {
        Ok(stage_forward(&self.params, feed)?.0)
    }

    fn embed(&self, raw: &Tensor) -> Result<Tensor> {
        let input_map = self.params.input_map.as_ref().ok_or_else(|| {
            Error::usage("embed requested from a stage without the input map".to_string())
        })?;
        Ok(embed_forward(input_map, raw)?.0)
    }
}

enum Job {
    PhaseA(Box<PhaseAInput>),
    Eval(StageFeed),
    Embed(Tensor),
    Snapshot,
    Shutdown,
}

enum Reply {
    PhaseA(Box<StageReport>),
    Eval(Tensor),
    Embed(Tensor),
    Snapshot(Box<StageParams>),
}

struct WorkerHandle {
    tx: Sender<Job>,
    rx: Receiver<Result<Reply>>,
    join: Option<JoinHandle<()>>,
}

enum ExecBackend {
    Inline(Vec<WorkerState>),
    Threads(Vec<WorkerHandle>),
}

fn spawn_worker(mut state: WorkerState) -> WorkerHandle {
    let (tx, job_rx) = channel::<Job>();
    let (reply_tx, rx) = channel::<Result<Reply>>();
    let join = std::thread::spawn(move || {
        while let Ok(job) = job_rx.recv() {
            let reply = match job {
                Job::PhaseA(input) => state.phase_a(*input).map(|r| Reply::PhaseA(Box::new(r))),
                Job::Eval(feed) => state.eval(&feed).map(Reply::Eval),
                Job::Embed(raw) => state.embed(&raw).map(Reply::Embed),
                Job::Snapshot => Ok(Reply::Snapshot(Box::new(state.params.clone()))),
                Job::Shutdown => break,
            };
            if reply_tx.send(reply).is_err() {
                break;
            }
        }
    });
    WorkerHandle {
        tx,
        rx,
        join: Some(join),
    }
}

impl WorkerHandle {
    fn request(&self, job: Job, stage: usize) -> Result<Reply> {
        self.tx
            .send(job)
            .map_err(|_| Error::usage(format!("stage {stage} worker is gone")))?;
        self.rx
            .recv()
            .map_err(|_| Error::usage(format!("stage {stage} worker disconnected mid-step")))?
    }
}

/// Coordinator plus `K` stage contexts. All cross-stage data moves through
/// the coordinator at the two phase barriers, so a step's results are a pure
/// function of (parameters, batch, options) in either execution mode.
pub struct ParallelTrainer {
    cfg: ModelConfig,
    plan: StagePlan,
    opts: ParallelOptions,
    beta: f64,
    exec: ExecBackend,
    persistent: Option<PersistentAux>,
    aux_nets: Option<(Vec<AuxNet>, Vec<Momentum>)>,
    reaux: Option<ReAuxNet>,
    /// Transient lambda bytes moved through the last step.
    transient_lambda_bytes: usize,
}

/// Auxiliary-storage accounting for the memory contract.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuxStorageStats {
    pub persistent_rows: usize,
    pub persistent_tensors: usize,
    pub persistent_bytes: usize,
    pub aux_param_count: usize,
    pub transient_lambda_bytes: usize,
}

impl ParallelTrainer {
    pub fn new(model: ResidualModel, stages: usize, opts: ParallelOptions) -> Result<Self> {
        let cfg = model.cfg;
        let plan = partition(cfg.blocks, stages)?;
        let stage_params = split_model(&model, &plan)?;
        if opts.beta <= 0.0 {
            return Err(Error::input(
                "parallel trainer: beta must be > 0".to_string(),
            ));
        }

        let interfaces = stages - 1;
        let mut persistent = None;
        let mut aux_nets = None;
        let mut reaux = None;
        match &opts.strategy {
            LambdaStrategy::Persistent => {
                let with_kappa = opts.mode == CouplingMode::AugmentedLagrangian;
                persistent = Some(PersistentAux::new(cfg.width, interfaces, with_kappa));
            }
            LambdaStrategy::AuxNets {
                hidden,
                blocks,
                distill_steps,
                ..
            } => {
                if opts.mode == CouplingMode::AugmentedLagrangian {
                    return Err(Error::usage(
                        "augmented Lagrangian mode requires persistent multipliers; auxiliary nets only regenerate lambdas".to_string(),
                    ));
                }
                if *distill_steps < 1 {
                    return Err(Error::input("distill_steps must be >= 1".to_string()));
                }
                let mut rng = SeededRng::derive(opts.seed, &[0xA0C5]);
                let mut nets = Vec::with_capacity(interfaces);
                let mut momenta = Vec::with_capacity(interfaces);
                for iface in 0..interfaces {
                    let net = AuxNet::init_identity(cfg.width, *hidden, *blocks, &mut rng)?;
                    // The net feeds stage iface+1 and must stay strictly smaller.
                    let stage_size = stage_params[iface + 1].param_count();
                    if net.param_count() >= stage_size {
                        return Err(Error::input(format!(
                            "auxnet for interface {} has {} params, stage {} only {}",
                            iface + 1,
                            net.param_count(),
                            iface + 1,
                            stage_size
                        )));
                    }
                    momenta.push(Momentum::matching(&net.tensors()));
                    nets.push(net);
                }
                aux_nets = Some((nets, momenta));
            }
            LambdaStrategy::ReAux {
                hidden,
                blocks,
                shared_prefix,
                ..
            } => {
                if opts.mode == CouplingMode::AugmentedLagrangian {
                    return Err(Error::usage(
                        "augmented Lagrangian mode requires persistent multipliers".to_string(),
                    ));
                }
                if interfaces == 0 {
                    return Err(Error::input(
                        "reaux strategy needs at least 2 stages".to_string(),
                    ));
                }
                let mut rng = SeededRng::derive(opts.seed, &[0x3EAA]);
                let net = ReAuxNet::init_identity(
                    interfaces,
                    cfg.width,
                    *hidden,
                    *blocks,
                    *shared_prefix,
                    &mut rng,
                )?;
                for (k, stage) in stage_params.iter().enumerate().take(interfaces + 1).skip(1) {
                    let stage_size = stage.param_count();
                    if net.chain_params(k) >= stage_size {
                        return Err(Error::input(format!(
                            "reaux chain {k} has {} params, stage {k} only {stage_size}",
                            net.chain_params(k)
                        )));
                    }
                }
                reaux = Some(net);
            }
        }

        let stage_count = plan.stage_count();
        let exec = match opts.exec {
            ExecMode::Inline => ExecBackend::Inline(
                stage_params
                    .into_iter()
                    .map(|p| WorkerState::new(p, stage_count))
                    .collect(),
            ),
            ExecMode::Threads => ExecBackend::Threads(
                stage_params
                    .into_iter()
                    .map(|p| spawn_worker(WorkerState::new(p, stage_count)))
                    .collect(),
            ),
        };

        let beta = opts.beta;
        Ok(ParallelTrainer {
            cfg,
            plan,
            opts,
            beta,
            exec,
            persistent,
            aux_nets,
            reaux,
            transient_lambda_bytes: 0,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.plan.stage_count()
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Penalty-coefficient schedule hook (multiplied per epoch by the harness).
    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        if beta <= 0.0 {
            return Err(Error::input("beta must stay > 0".to_string()));
        }
        self.beta = beta;
        Ok(())
    }

    /// Correction-rate hook; `None` ties the lambda rate to the parameter lr.
    pub fn set_lambda_lr(&mut self, lambda_lr: Option<f64>) {
        self.opts.lambda_lr = lambda_lr;
    }

    fn eval_stage(&mut self, k: usize, feed: StageFeed) -> Result<Tensor> {
        match &mut self.exec {
            ExecBackend::Inline(states) => states[k].eval(&feed),
            ExecBackend::Threads(handles) => match handles[k].request(Job::Eval(feed), k)? {
                Reply::Eval(t) => Ok(t),
                _ => Err(Error::usage(format!(
                    "stage {k} returned the wrong reply kind"
                ))),
            },
        }
    }

    fn embed_batch(&mut self, raw: &Tensor) -> Result<Tensor> {
        match &mut self.exec {
            ExecBackend::Inline(states) => states[0].embed(raw),
            ExecBackend::Threads(handles) => {
                match handles[0].request(Job::Embed(raw.clone()), 0)? {
                    Reply::Embed(t) => Ok(t),
                    _ => Err(Error::usage(
                        "stage 0 returned the wrong reply kind".to_string(),
                    )),
                }
            }
        }
    }

    /// Chained evaluation producing the stage boundary values for warm starts.
    fn boundary_chain(&mut self, batch: &Batch) -> Result<Vec<Tensor>> {
        let mut boundaries = Vec::with_capacity(self.stage_count() - 1);
        let mut feed = StageFeed::Raw(batch.features.clone());
        for k in 0..self.stage_count() - 1 {
            let x = self.eval_stage(k, feed)?;
            boundaries.push(x.clone());
            feed = StageFeed::Boundary(x);
        }
        Ok(boundaries)
    }

    /// Snapshot the distributed parameters back into one model.
    pub fn model(&mut self) -> Result<ResidualModel> {
        let stages: Vec<StageParams> = match &mut self.exec {
            ExecBackend::Inline(states) => states.iter().map(|s| s.params.clone()).collect(),
            ExecBackend::Threads(handles) => {
                let mut out = Vec::with_capacity(handles.len());
                for (k, h) in handles.iter().enumerate() {
                    match h.request(Job::Snapshot, k)? {
                        Reply::Snapshot(p) => out.push(*p),
                        _ => {
                            return Err(Error::usage(format!(
                                "stage {k} returned the wrong reply kind"
                            )))
                        }
                    }
                }
                out
            }
        };
        assemble_model(self.cfg, &stages)
    }

    pub fn aux_storage(&self) -> AuxStorageStats {
        let (rows, tensors, bytes) = match &self.persistent {
            Some(p) => (p.row_count(), p.tensor_count(), p.byte_count()),
            None => (0, 0, 0),
        };
        let aux_param_count = self
            .aux_nets
            .as_ref()
            .map(|(nets, _)| nets.iter().map(|n| n.param_count()).sum())
            .or_else(|| self.reaux.as_ref().map(|r| r.param_count()))
            .unwrap_or(0);
        AuxStorageStats {
            persistent_rows: rows,
            persistent_tensors: tensors,
            persistent_bytes: bytes,
            aux_param_count,
            transient_lambda_bytes: self.transient_lambda_bytes,
        }
    }

    pub fn aux_nets(&self) -> Option<&[AuxNet]> {
        self.aux_nets.as_ref().map(|(nets, _)| nets.as_slice())
    }

    /// One synchronous training step.
    ///
    /// Phase A (all stages, concurrently): stage forward from its lambda,
    /// stage-local loss, backward sweep, SGD update of the stage parameters.
    /// Barrier. Phase B (communication): boundary outputs and input adjoints
    /// cross stage interfaces; lambdas (and in AL mode kappas) are corrected;
    /// auxiliary nets distill toward the corrected values.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        lr: f64,
        epoch: usize,
        step: usize,
    ) -> Result<StepMetrics> {
        let wall = Instant::now();
        let k_stages = self.stage_count();
        let lambda_lr = self.opts.lambda_lr.unwrap_or(lr);
        let batch_rows = batch.labels.len();

        // Lambda preparation.
        let t_aux = Instant::now();
        let mut gen_lambdas: Vec<Tensor> = Vec::new(); // lambda_1..K-1 fed to stages
        let mut gathered_kappas: Vec<Tensor> = Vec::new();
        let mut lambda0_for_chain: Option<Tensor> = None;
        let mut reaux_caches: Vec<ReAuxCache> = Vec::new();
        match &self.opts.strategy {
            LambdaStrategy::Persistent => {
                if k_stages > 1 {
                    if !self.persistent.as_ref().unwrap().has_all(batch) {
                        let boundaries = self.boundary_chain(batch)?;
                        self.persistent
                            .as_mut()
                            .unwrap()
                            .fill_missing(batch, &boundaries)?;
                    }
                    let (l, kap) = self.persistent.as_ref().unwrap().gather(batch)?;
                    gen_lambdas = l;
                    gathered_kappas = kap;
                }
            }
            LambdaStrategy::AuxNets { .. } => {
                let lambda0 = self.embed_batch(&batch.features)?;
                let (nets, _) = self.aux_nets.as_ref().unwrap();
                let chain = generate_lambdas(&lambda0, nets)?;
                lambda0_for_chain = Some(lambda0);
                gen_lambdas = chain.into_iter().skip(1).collect();
                gathered_kappas = (0..k_stages - 1)
                    .map(|_| Tensor::zeros(&[batch_rows, self.cfg.width]))
                    .collect();
            }
            LambdaStrategy::ReAux { .. } => {
                let lambda0 = self.embed_batch(&batch.features)?;
                let net = self.reaux.as_ref().unwrap();
                for iface in 1..k_stages {
                    let (lam, cache) = net.forward_cached(iface, &lambda0)?;
                    gen_lambdas.push(lam);
                    reaux_caches.push(cache);
                }
                lambda0_for_chain = Some(lambda0);
                gathered_kappas = (0..k_stages - 1)
                    .map(|_| Tensor::zeros(&[batch_rows, self.cfg.width]))
                    .collect();
            }
        }
        let t_aux_forward = t_aux.elapsed().as_secs_f64();
        self.transient_lambda_bytes =
            (gen_lambdas.len() + 1) * batch_rows * self.cfg.width * std::mem::size_of::<f64>();

        // Phase A.
        let al = self.opts.mode == CouplingMode::AugmentedLagrangian;
        let mut inputs: Vec<PhaseAInput> = Vec::with_capacity(k_stages);
        for k in 0..k_stages {
            let feed = if k == 0 {
                StageFeed::Raw(batch.features.clone())
            } else {
                StageFeed::Boundary(gen_lambdas[k - 1].clone())
            };
            inputs.push(PhaseAInput {
                feed,
                lambda_next: (k + 1 < k_stages).then(|| gen_lambdas[k].clone()),
                kappa_next: (al && k + 1 < k_stages).then(|| gathered_kappas[k].clone()),
                labels: (k + 1 == k_stages).then(|| batch.labels.clone()),
                beta: self.beta,
                psi_kind: self.opts.psi_kind,
                lr,
                momentum: self.opts.momentum,
            });
        }
        let reports = self.run_phase_a(inputs, epoch)?;

        // Phase B: communication and corrections.
        let t_psi_start = Instant::now();
        let lambdas_full: Vec<Tensor> = std::iter::once(reports[0].entry.clone())
            .chain(gen_lambdas.iter().cloned())
            .collect();
        let kappas_full: Vec<Tensor> =
            std::iter::once(Tensor::zeros(&[batch_rows, self.cfg.width]))
                .chain(gathered_kappas.iter().cloned())
                .collect();
        let mut aux = AuxState::new(
            lambdas_full,
            kappas_full,
            self.beta,
            self.opts.psi_kind,
            self.opts.mode,
        )?;
        let boundary_outputs: Vec<Tensor> = reports.iter().map(|r| r.x_out.clone()).collect();
        let violations = aux.constraint_violations(&boundary_outputs)?;

        let mut distill_losses = Vec::new();
        let mut t_aux_backward = 0.0;
        match &self.opts.strategy {
            LambdaStrategy::ReAux { lr: aux_lr, .. } => {
                // The chain update replaces the lambda correction: descend
                // the composite objective through each cached chain.
                let t = Instant::now();
                let aux_lr = aux_lr.unwrap_or(lambda_lr);
                let net = self.reaux.as_mut().unwrap();
                for k in 1..k_stages {
                    let (psi, d_lambda, _) = psi_value_and_grads(
                        &aux.lambdas[k],
                        &boundary_outputs[k - 1],
                        self.opts.psi_kind,
                    )?;
                    let mut signal = d_lambda.scale(self.beta);
                    signal.add_assign(&reports[k].p_in)?;
                    net.update(k, &reaux_caches[k - 1], &signal, aux_lr)?;
                    distill_losses.push(psi);
                }
                t_aux_backward = t.elapsed().as_secs_f64();
            }
            _ => {
                for k in 1..k_stages {
                    aux.update_lambda(k, &reports[k].p_in, &boundary_outputs[k - 1], lambda_lr)?;
                }
                if al {
                    for k in 1..k_stages {
                        aux.update_kappa(k, &boundary_outputs[k - 1], lambda_lr)?;
                    }
                }
                if self.opts.noise_std > 0.0 {
                    for k in 1..k_stages {
                        let mut rng = SeededRng::derive(
                            self.opts.seed,
                            &[0x4015E, epoch as u64, step as u64, k as u64],
                        );
                        let noise = aux.lambdas[k]
                            .map_with_rng(&mut rng, |_, r| r.normal() * self.opts.noise_std);
                        aux.lambdas[k].add_assign(&noise)?;
                    }
                }
            }
        }
        let mut t_psi_coord = t_psi_start.elapsed().as_secs_f64() - t_aux_backward;

        match &self.opts.strategy {
            LambdaStrategy::Persistent => {
                self.persistent.as_mut().unwrap().scatter(
                    batch,
                    &aux.lambdas[1..],
                    &aux.kappas[1..],
                )?;
            }
            LambdaStrategy::AuxNets {
                lr: aux_lr,
                distill_steps,
                ..
            } => {
                let t = Instant::now();
                let aux_lr = aux_lr.unwrap_or(lr);
                let steps = *distill_steps;
                let (nets, momenta) = self.aux_nets.as_mut().unwrap();
                let chain_inputs: Vec<&Tensor> =
                    std::iter::once(lambda0_for_chain.as_ref().unwrap())
                        .chain(gen_lambdas.iter().take(k_stages.saturating_sub(2)))
                        .collect();
                for (iface, (net, mom)) in nets.iter_mut().zip(momenta.iter_mut()).enumerate() {
                    let loss = distill_step(
                        net,
                        mom,
                        chain_inputs[iface],
                        &aux.lambdas[iface + 1],
                        aux_lr,
                        0.0,
                        steps,
                    )?;
                    distill_losses.push(loss);
                }
                t_aux_backward = t.elapsed().as_secs_f64();
            }
            LambdaStrategy::ReAux { .. } => {}
        }

        let interior = k_stages.saturating_sub(1);
        let t_psi_workers = if interior > 0 {
            reports[..interior].iter().map(|r| r.t_loss).sum::<f64>() / interior as f64
        } else {
            0.0
        };
        if k_stages == 1 {
            t_psi_coord = 0.0;
        }
        let stage_forward_mean = reports.iter().map(|r| r.t_forward).sum::<f64>() / k_stages as f64;
        let stage_backward_mean = reports
            .iter()
            .map(|r| {
                r.t_backward
                    + if r.stage + 1 == k_stages {
                        r.t_loss
                    } else {
                        0.0
                    }
            })
            .sum::<f64>()
            / k_stages as f64;

        Ok(StepMetrics {
            stage_losses: reports.iter().map(|r| r.local_loss).collect(),
            violations,
            distill_losses,
            timings: StepTimings {
                t_data: 0.0,
                stage_forward_mean,
                stage_backward_mean,
                t_psi: t_psi_workers + t_psi_coord,
                t_aux_forward,
                t_aux_backward,
                wall: wall.elapsed().as_secs_f64(),
            },
        })
    }

    fn run_phase_a(&mut self, inputs: Vec<PhaseAInput>, epoch: usize) -> Result<Vec<StageReport>> {
        let fix_epoch = |mut e: Error| {
            if let Error::Numeric { epoch: ep, .. } = &mut e {
                *ep = epoch;
            }
            e
        };
        match &mut self.exec {
            ExecBackend::Inline(states) => {
                let mut reports = Vec::with_capacity(states.len());
                for (state, input) in states.iter_mut().zip(inputs) {
                    reports.push(state.phase_a(input).map_err(fix_epoch)?);
                }
                Ok(reports)
            }
            ExecBackend::Threads(handles) => {
                // Dispatch everything, then collect in stage order: the
                // collect loop is the post-Phase-A barrier.
                for (k, (h, input)) in handles.iter().zip(inputs).enumerate() {
                    h.tx.send(Job::PhaseA(Box::new(input)))
                        .map_err(|_| Error::usage(format!("stage {k} worker is gone")))?;
                }
                let mut reports = Vec::with_capacity(handles.len());
                for (k, h) in handles.iter().enumerate() {
                    let reply =
                        h.rx.recv()
                            .map_err(|_| {
                                Error::usage(format!("stage {k} worker disconnected mid-step"))
                            })?
                            .map_err(fix_epoch)?;
                    match reply {
                        Reply::PhaseA(r) => reports.push(*r),
                        _ => {
                            return Err(Error::usage(format!(
                                "stage {k} returned the wrong reply kind"
                            )))
                        }
                    }
                }
                Ok(reports)
            }
        }
    }
}

impl Drop for ParallelTrainer {
    fn drop(&mut self) {
        if let ExecBackend::Threads(handles) = &mut self.exec {
            for h in handles.iter_mut() {
                let _ = h.tx.send(Job::Shutdown);
                if let Some(join) = h.join.take() {
                    let _ = join.join();
                }
            }
        }
    }
}
