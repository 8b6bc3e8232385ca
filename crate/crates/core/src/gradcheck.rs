//! Finite-difference verification of every analytic gradient path: serial
//! backpropagation, penalty and augmented-Lagrangian stage losses, auxiliary
//! net distillation, and the recursive-chain composite. The CLI exposes this
//! as `grad-check`; the acceptance suite runs it across a size grid.
//!
//! Central differences are only valid where the objective is differentiable,
//! so candidate draws whose relu pre-activations sit within [`KINK_MARGIN`]
//! of zero are rejected and redrawn.

use crate::auxnet::{AuxNet, ReAuxNet};
use crate::model::{
    loss_phi, net_backward, net_forward, BlockCache, EmbedCache, ModelConfig, ResidualModel,
    Trajectory,
};
use crate::parallel::{
    partition, psi_value_and_grads, split_model, stage_backward, stage_forward, stage_local_loss,
    CouplingMode, PsiKind, StageCache, StageFeed, StageParams,
};
use crate::rng::SeededRng;
use crate::tensor::{finite_diff_grad, max_rel_err, Tensor};
use crate::{Error, Result};

pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
/// Minimum distance of any relu pre-activation from its kink. Deep stacks
/// amplify an fd probe's perturbation several-fold, so the margin is a
/// generous 100x the fd step.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 200;

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheck {
    pub name: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed())
    }
}

fn record(checks: &mut Vec<GradCheck>, name: String, err: f64) {
    checks.push(GradCheck {
        name,
        worst_rel_err: err,
        tolerance: GRAD_TOLERANCE,
    });
}

fn random_labels(batch: usize, classes: usize, rng: &mut SeededRng) -> Vec<usize> {
    (0..batch).map(|_| rng.below(classes)).collect()
}

// --- kink margins -----------------------------------------------------------

/// Distance of the closest relu input to its kink. Exact zeros in a block
/// input are relu outputs clamped from strictly negative pre-activations and
/// stay flat under small perturbations, so they don't count.
fn blocks_margin(caches: &[BlockCache]) -> f64 {
    let mut m = f64::INFINITY;
    for c in caches {
        for &v in c.z1.data() {
            m = m.min(v.abs());
        }
        for &v in c.x.data() {
            if v != 0.0 {
                m = m.min(v.abs());
            }
        }
    }
    m
}

fn embed_margin(cache: &EmbedCache) -> f64 {
    cache
        .pre
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min)
}

fn trajectory_margin(traj: &Trajectory) -> f64 {
    embed_margin(&traj.embed).min(blocks_margin(&traj.blocks))
}

fn stage_cache_margin(cache: &StageCache) -> f64 {
    let e = cache.embed.as_ref().map_or(f64::INFINITY, embed_margin);
    e.min(blocks_margin(&cache.blocks))
}

fn too_many_draws(what: &str) -> Error {
    Error::input(format!(
        "gradient check could not draw a kink-free {what} in {MAX_DRAWS} tries"
    ))
}

/// Zero-initialized biases let dead relu rows emit exact zeros that can land
/// a downstream block input exactly on its kink; jittered biases make every
/// hidden activation generically nonzero so the margin test is sufficient.
fn jitter_biases(tensors: Vec<&mut Tensor>, rng: &mut SeededRng) {
    for t in tensors {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v += 0.2 * (rng.uniform() - 0.5);
            }
        }
    }
}

// --- individual checks ------------------------------------------------------

/// Worst relative error of the full serial backward pass over every
/// parameter tensor.
fn check_serial_bp(cfg: ModelConfig, batch: usize, rng: &mut SeededRng) -> Result<f64> {
    let (model, raw, labels, traj, logits) = (0..MAX_DRAWS)
        .find_map(|_| {
            let mut model = ResidualModel::init(cfg, rng).ok()?;
            jitter_biases(model.tensors_mut(), rng);
            let raw = Tensor::he_init(batch, cfg.raw_dim, rng);
            let labels = random_labels(batch, cfg.classes, rng);
            let (logits, traj) = net_forward(&model, &raw).ok()?;
            (trajectory_margin(&traj) >= KINK_MARGIN).then_some((model, raw, labels, traj, logits))
        })
        .ok_or_else(|| too_many_draws("model"))?;

    let (_, d_logits) = loss_phi(&logits, &labels)?;
    let grads = net_backward(&model, &traj, &d_logits)?;
    let analytic = grads.tensors();
    let mut worst = 0.0f64;
    for (idx, grad) in analytic.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut m = model.clone();
                *m.tensors_mut()[idx] = t.clone();
                let (lg, _) = net_forward(&m, &raw).unwrap();
                loss_phi(&lg, &labels).unwrap().0
            },
            model.tensors()[idx],
            FD_STEP,
        );
        worst = worst.max(max_rel_err(grad, &fd));
    }
    Ok(worst)
}

/// Worst relative error over stage parameter gradients and the stage-input
/// adjoint for every stage of a K-way split, in the given coupling mode.
fn check_stage_gradients(
    cfg: ModelConfig,
    stages: usize,
    batch: usize,
    mode: CouplingMode,
    rng: &mut SeededRng,
) -> Result<f64> {
    let plan = partition(cfg.blocks, stages)?;
    let beta = 3.0;
    let al = mode == CouplingMode::AugmentedLagrangian;
    let mut worst = 0.0f64;

    for k in 0..stages {
        // Redraw stage inputs until every relu stays clear of its kink.
        let (params, feed, lambda_k, lambda_next, kappa_next, labels, x_out, cache) = (0
            ..MAX_DRAWS)
            .find_map(|_| {
                let mut model = ResidualModel::init(cfg, rng).ok()?;
                jitter_biases(model.tensors_mut(), rng);
                let stage_params = split_model(&model, &plan).ok()?;
                let params = stage_params.into_iter().nth(k)?;
                let raw = Tensor::he_init(batch, cfg.raw_dim, rng);
                let lambda_k = Tensor::he_init(batch, cfg.width, rng);
                let kappa_next = al.then(|| Tensor::he_init(batch, cfg.width, rng).scale(0.3));
                let labels = random_labels(batch, cfg.classes, rng);
                let feed = if k == 0 {
                    StageFeed::Raw(raw)
                } else {
                    StageFeed::Boundary(lambda_k.clone())
                };
                let (x_out, cache) = stage_forward(&params, &feed).ok()?;
                // Keep the boundary target near the boundary output: a large
                // psi value would drown the central difference in rounding.
                let mut lambda_next = x_out.clone();
                lambda_next
                    .axpy(0.1, &Tensor::he_init(batch, cfg.width, rng))
                    .ok()?;
                (stage_cache_margin(&cache) >= KINK_MARGIN).then_some((
                    params,
                    feed,
                    lambda_k,
                    lambda_next,
                    kappa_next,
                    labels,
                    x_out,
                    cache,
                ))
            })
            .ok_or_else(|| too_many_draws("stage"))?;

        let eval = |params: &StageParams, feed: &StageFeed| -> f64 {
            let (x_out, _) = stage_forward(params, feed).unwrap();
            stage_local_loss(
                k,
                stages,
                &x_out,
                Some(&lambda_next),
                kappa_next.as_ref(),
                Some(&labels),
                params.output_map.as_ref(),
                beta,
                PsiKind::L2Squared,
            )
            .unwrap()
            .value
        };

        let loss = stage_local_loss(
            k,
            stages,
            &x_out,
            Some(&lambda_next),
            kappa_next.as_ref(),
            Some(&labels),
            params.output_map.as_ref(),
            beta,
            PsiKind::L2Squared,
        )?;
        let (mut grads, p_in) = stage_backward(&params, &cache, &loss.d_x_out)?;
        grads.output_map = loss.output_grads;

        let analytic = grads.tensors();
        for (idx, grad) in analytic.iter().enumerate() {
            let fd = finite_diff_grad(
                |t| {
                    let mut p = params.clone();
                    *p.tensors_mut()[idx] = t.clone();
                    eval(&p, &feed)
                },
                params.tensors()[idx],
                FD_STEP,
            );
            worst = worst.max(max_rel_err(grad, &fd));
        }

        // Input adjoint against finite differences of the local loss w.r.t.
        // the stage's lambda (stage 0 is fed raw features instead).
        if k > 0 {
            let fd = finite_diff_grad(
                |t| eval(&params, &StageFeed::Boundary(t.clone())),
                &lambda_k,
                FD_STEP,
            );
            worst = worst.max(max_rel_err(&p_in, &fd));
        }
    }
    Ok(worst)
}

/// Distillation-loss gradients of a small auxiliary net.
fn check_distill(width: usize, batch: usize, rng: &mut SeededRng) -> Result<f64> {
    let (net, input, target, caches, prediction) = (0..MAX_DRAWS)
        .find_map(|_| {
            let mut net = AuxNet::init(width, width.div_ceil(2), 1, rng).ok()?;
            jitter_biases(net.tensors_mut(), rng);
            let input = Tensor::he_init(batch, width, rng);
            let target = Tensor::he_init(batch, width, rng);
            let (prediction, caches) = net.forward_cached(&input).ok()?;
            (blocks_margin(&caches) >= KINK_MARGIN)
                .then_some((net, input, target, caches, prediction))
        })
        .ok_or_else(|| too_many_draws("auxnet"))?;

    let d_pred = prediction.sub(&target)?.scale(2.0);
    let (grads, _) = net.backward(&caches, &d_pred)?;
    let analytic: Vec<&Tensor> = grads.iter().flat_map(|b| b.tensors()).collect();
    let mut worst = 0.0f64;
    for (idx, grad) in analytic.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut n = net.clone();
                *n.tensors_mut()[idx] = t.clone();
                n.forward(&input).unwrap().sub(&target).unwrap().sq_l2()
            },
            net.tensors()[idx],
            FD_STEP,
        );
        worst = worst.max(max_rel_err(grad, &fd));
    }
    Ok(worst)
}

/// Composite recursive-chain gradient: the assembled signal
/// `beta * dpsi/dlambda + p_in` chained through the cached chain must match
/// finite differences of
/// `beta * psi(chain(x0), x_prev) + local_loss(stage_forward(chain(x0)))`.
fn check_reaux_composite(cfg: ModelConfig, batch: usize, rng: &mut SeededRng) -> Result<f64> {
    let stages = 2;
    let plan = partition(cfg.blocks, stages)?;
    let beta = 2.5;
    let k = 1usize;

    let (stage_params, reaux, x0, x_prev, labels, lambda, cache, stage_cache, x_out) = (0
        ..MAX_DRAWS)
        .find_map(|_| {
            let mut model = ResidualModel::init(cfg, rng).ok()?;
            jitter_biases(model.tensors_mut(), rng);
            let stage_params = split_model(&model, &plan).ok()?;
            let mut reaux =
                ReAuxNet::init(1, cfg.width, cfg.width.div_ceil(2), 1, false, rng).ok()?;
            jitter_biases(reaux.chain_tensors_mut(1), rng);
            let x0 = Tensor::he_init(batch, cfg.width, rng);
            let labels = random_labels(batch, cfg.classes, rng);
            let (lambda, cache) = reaux.forward_cached(k, &x0).ok()?;
            let mut x_prev = lambda.clone();
            x_prev
                .axpy(0.1, &Tensor::he_init(batch, cfg.width, rng))
                .ok()?;
            let chain_margin = cache
                .segment_caches
                .iter()
                .map(|c| blocks_margin(c))
                .fold(f64::INFINITY, f64::min);
            let (x_out, stage_cache) =
                stage_forward(&stage_params[k], &StageFeed::Boundary(lambda.clone())).ok()?;
            (chain_margin.min(stage_cache_margin(&stage_cache)) >= KINK_MARGIN).then_some((
                stage_params,
                reaux,
                x0,
                x_prev,
                labels,
                lambda,
                cache,
                stage_cache,
                x_out,
            ))
        })
        .ok_or_else(|| too_many_draws("reaux chain"))?;

    let objective = |net: &ReAuxNet| -> f64 {
        let lambda = net.forward(k, &x0).unwrap();
        let (psi, _, _) = psi_value_and_grads(&lambda, &x_prev, PsiKind::L2Squared).unwrap();
        let (x_out, _) =
            stage_forward(&stage_params[k], &StageFeed::Boundary(lambda.clone())).unwrap();
        let local = stage_local_loss(
            k,
            stages,
            &x_out,
            None,
            None,
            Some(&labels),
            stage_params[k].output_map.as_ref(),
            beta,
            PsiKind::L2Squared,
        )
        .unwrap();
        beta * psi + local.value
    };

    let (_, d_lambda, _) = psi_value_and_grads(&lambda, &x_prev, PsiKind::L2Squared)?;
    let local = stage_local_loss(
        k,
        stages,
        &x_out,
        None,
        None,
        Some(&labels),
        stage_params[k].output_map.as_ref(),
        beta,
        PsiKind::L2Squared,
    )?;
    let (_, p_in) = stage_backward(&stage_params[k], &stage_cache, &local.d_x_out)?;
    let mut signal = d_lambda.scale(beta);
    signal.add_assign(&p_in)?;
    let seg_grads = reaux.chain_gradients(k, &cache, &signal)?;
    let analytic: Vec<&Tensor> = seg_grads
        .iter()
        .flatten()
        .flat_map(|b| b.tensors())
        .collect();

    let chain_tensors: Vec<Tensor> = reaux.chain_tensors(k).into_iter().cloned().collect();
    let mut worst = 0.0f64;
    for (idx, probe) in chain_tensors.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut net = reaux.clone();
                *net.chain_tensors_mut(k)[idx] = t.clone();
                objective(&net)
            },
            probe,
            FD_STEP,
        );
        worst = worst.max(max_rel_err(analytic[idx], &fd));
    }
    Ok(worst)
}

/// Run the whole suite over a grid of small configurations.
pub fn run_gradient_suite(seed: u64, quick: bool) -> Result<GradCheckReport> {
    let mut checks = Vec::new();
    let blocks_grid: &[usize] = if quick { &[2, 4] } else { &[2, 4, 6] };
    let width_grid: &[usize] = if quick { &[4] } else { &[4, 8] };
    let batch_grid: &[usize] = &[1, 3];

    let mut rng = SeededRng::derive(seed, &[0x6AD5]);
    for &blocks in blocks_grid {
        for &width in width_grid {
            for &batch in batch_grid {
                let cfg = ModelConfig {
                    raw_dim: 2,
                    width,
                    hidden: width,
                    classes: 3,
                    blocks,
                    residual_scale: 1.0,
                };
                let tag = format!("L{blocks}_d{width}_b{batch}");
                record(
                    &mut checks,
                    format!("serial_bp/{tag}"),
                    check_serial_bp(cfg, batch, &mut rng)?,
                );
                let stages = if blocks >= 6 { 3 } else { 2 };
                record(
                    &mut checks,
                    format!("stage_penalty/{tag}_K{stages}"),
                    check_stage_gradients(cfg, stages, batch, CouplingMode::Penalty, &mut rng)?,
                );
                record(
                    &mut checks,
                    format!("stage_al/{tag}_K{stages}"),
                    check_stage_gradients(
                        cfg,
                        stages,
                        batch,
                        CouplingMode::AugmentedLagrangian,
                        &mut rng,
                    )?,
                );
                record(
                    &mut checks,
                    format!("auxnet_distill/{tag}"),
                    check_distill(width, batch, &mut rng)?,
                );
                record(
                    &mut checks,
                    format!("reaux_composite/{tag}"),
                    check_reaux_composite(cfg, batch, &mut rng)?,
                );
            }
        }
    }
    Ok(GradCheckReport { checks })
}
