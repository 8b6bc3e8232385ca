//! Auxiliary-variable networks.
//!
//! An `AuxNet` is a low-capacity residual net that regenerates the boundary
//! variable `lambda_k` from `lambda_{k-1}` so that no per-sample lambda ever
//! has to be stored. It is trained by distillation: after the communication
//! phase corrects the lambdas, the net takes one (or a few) SGD steps toward
//! reproducing the corrected value.
//!
//! `ReAuxNet` removes the remaining forward dependency between the AuxNets
//! themselves: interface `k` is regenerated directly from the embedded input
//! by a depth-`k` chain of segments, each independently trainable. Forcing
//! all chains to share their leading segments collapses the construction
//! back to the plain AuxNet chain.

use crate::error::Error;
use crate::model::{block_backward, block_forward, BlockCache, BlockParams};
use crate::optim::{sgd_update, Momentum};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::Result;

/// One auxiliary network: a stack of residual blocks at the trunk's feature
/// width. Zero parameters make it the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxNet {
    pub blocks: Vec<BlockParams>,
    pub width: usize,
}

impl AuxNet {
    pub fn init(width: usize, hidden: usize, blocks: usize, rng: &mut SeededRng) -> Result<Self> {
        if blocks < 1 || hidden < 1 {
            return Err(Error::input(
                "auxnet needs at least one block and hidden unit",
            ));
        }
        Ok(AuxNet {
            blocks: (0..blocks)
                .map(|_| BlockParams::init(width, hidden, rng))
                .collect(),
            width,
        })
    }

    pub fn zeros(width: usize, hidden: usize, blocks: usize) -> Self {
        AuxNet {
            blocks: (0..blocks)
                .map(|_| BlockParams::zeros(width, hidden))
                .collect(),
            width,
        }
    }

    /// He-initialized first affine, zero second affine: the net starts as
    /// the exact identity map (the value a fresh boundary regenerator should
    /// produce) while keeping live gradients through the hidden layer.
    pub fn init_identity(
        width: usize,
        hidden: usize,
        blocks: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut net = AuxNet::init(width, hidden, blocks, rng)?;
        for b in &mut net.blocks {
            b.w2 = Tensor::zeros(b.w2.shape());
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.tensors_mut())
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out, _) = self.forward_cached(x)?;
        Ok(out)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<BlockCache>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = block_forward(&cur, b, 1.0)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Adjoint of the output back to parameter gradients and the input adjoint.
    pub fn backward(
        &self,
        caches: &[BlockCache],
        d_out: &Tensor,
    ) -> Result<(Vec<BlockParams>, Tensor)> {
        let mut grads = vec![BlockParams::zeros(1, 1); self.blocks.len()];
        let mut p = d_out.clone();
        for (i, (cache, params)) in caches.iter().zip(&self.blocks).enumerate().rev() {
            let (p_in, g) = block_backward(cache, params, &p, 1.0)?;
            grads[i] = g;
            p = p_in;
        }
        Ok((grads, p))
    }
}

/// Squared-error distillation loss and its gradient w.r.t. the prediction.
fn distill_loss(prediction: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = prediction.sub(target)?;
    Ok((diff.sq_l2(), diff.scale(2.0)))
}

/// `steps` SGD steps on the squared distillation error
/// `|| target - net(input) ||^2`. Returns the loss after the last step.
pub fn distill_step(
    net: &mut AuxNet,
    momentum_state: &mut Momentum,
    input: &Tensor,
    target: &Tensor,
    eta: f64,
    momentum: f64,
    steps: usize,
) -> Result<f64> {
    if steps < 1 {
        return Err(Error::input("distill_step: steps must be >= 1".to_string()));
    }
    for _ in 0..steps {
        let (prediction, caches) = net.forward_cached(input)?;
        let (_, d_pred) = distill_loss(&prediction, target)?;
        let (grads, _) = net.backward(&caches, &d_pred)?;
        let grad_refs: Vec<&Tensor> = grads.iter().flat_map(|b| b.tensors()).collect();
        sgd_update(
            &mut net.tensors_mut(),
            &grad_refs,
            eta,
            momentum,
            momentum_state,
        )?;
    }
    // Loss at the updated parameters: the metric tracks where the net ended
    // up, not where it started.
    let (final_loss, _) = distill_loss(&net.forward(input)?, target)?;
    Ok(final_loss)
}

/// Chain the per-interface nets: `lambda_0 = x0`,
/// `lambda_{k+1} = net_k(lambda_k)`. Returns all `K = nets.len() + 1` values.
pub fn generate_lambdas(x0_embedded: &Tensor, nets: &[AuxNet]) -> Result<Vec<Tensor>> {
    let mut lambdas = Vec::with_capacity(nets.len() + 1);
    lambdas.push(x0_embedded.clone());
    for net in nets {
        let next = net.forward(lambdas.last().unwrap())?;
        lambdas.push(next);
    }
    Ok(lambdas)
}

/// Recursive auxiliary networks: interface `k` (1-based) is produced from the
/// embedded input by composing `k` segments. With `shared_prefix` the chains
/// alias one common segment list, which is exactly the plain AuxNet chain;
/// without it every interface owns an independent chain of `k` segments.
#[derive(Debug, Clone)]
pub struct ReAuxNet {
    pub shared_prefix: bool,
    width: usize,
    /// Segment list when sharing: segment `j` maps interface `j` to `j+1`.
    common: Vec<AuxNet>,
    /// Independent chains when not sharing: `chains[k-1]` has `k` segments.
    chains: Vec<Vec<AuxNet>>,
}

/// Forward activations retained per interface for the update pass.
#[derive(Debug, Clone)]
pub struct ReAuxCache {
    pub segment_caches: Vec<Vec<BlockCache>>,
}

impl ReAuxNet {
    pub fn init(
        interfaces: usize,
        width: usize,
        hidden: usize,
        blocks_per_segment: usize,
        shared_prefix: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if interfaces < 1 {
            return Err(Error::input(
                "reauxnet needs at least one interface".to_string(),
            ));
        }
        if shared_prefix {
            let common = (0..interfaces)
                .map(|_| AuxNet::init(width, hidden, blocks_per_segment, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(ReAuxNet {
                shared_prefix,
                width,
                common,
                chains: Vec::new(),
            })
        } else {
            let chains = (1..=interfaces)
                .map(|k| {
                    (0..k)
                        .map(|_| AuxNet::init(width, hidden, blocks_per_segment, rng))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ReAuxNet {
                shared_prefix,
                width,
                common: Vec::new(),
                chains,
            })
        }
    }

    /// Identity-start variant of [`ReAuxNet::init`]; every chain initially
    /// replicates its input.
    pub fn init_identity(
        interfaces: usize,
        width: usize,
        hidden: usize,
        blocks_per_segment: usize,
        shared_prefix: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut net = ReAuxNet::init(
            interfaces,
            width,
            hidden,
            blocks_per_segment,
            shared_prefix,
            rng,
        )?;
        let zero_w2 = |seg: &mut AuxNet| {
            for b in &mut seg.blocks {
                b.w2 = Tensor::zeros(b.w2.shape());
            }
        };
        net.common.iter_mut().for_each(&zero_w2);
        net.chains.iter_mut().flatten().for_each(&zero_w2);
        Ok(net)
    }

    /// Build the shared-prefix structure from an existing AuxNet chain.
    pub fn from_auxnets(nets: &[AuxNet]) -> Self {
        ReAuxNet {
            shared_prefix: true,
            width: nets.first().map_or(0, |n| n.width),
            common: nets.to_vec(),
            chains: Vec::new(),
        }
    }

    pub fn interfaces(&self) -> usize {
        if self.shared_prefix {
            self.common.len()
        } else {
            self.chains.len()
        }
    }

    fn segments(&self, k: usize) -> &[AuxNet] {
        if self.shared_prefix {
            &self.common[..k]
        } else {
            &self.chains[k - 1]
        }
    }

    pub fn param_count(&self) -> usize {
        if self.shared_prefix {
            self.common.iter().map(|n| n.param_count()).sum()
        } else {
            self.chains.iter().flatten().map(|n| n.param_count()).sum()
        }
    }

    /// Parameter count of the chain feeding interface `k`.
    pub fn chain_params(&self, k: usize) -> usize {
        self.segments(k).iter().map(|n| n.param_count()).sum()
    }

    /// Largest single-interface parameter count (capacity checks).
    pub fn max_chain_params(&self) -> usize {
        (1..=self.interfaces())
            .map(|k| self.chain_params(k))
            .max()
            .unwrap_or(0)
    }

    /// `lambda_k = chain_k(x0)`, `k` in `1..=interfaces`.
    pub fn forward(&self, k: usize, x0_embedded: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(k, x0_embedded)?.0)
    }

    pub fn forward_cached(&self, k: usize, x0_embedded: &Tensor) -> Result<(Tensor, ReAuxCache)> {
        if k == 0 || k > self.interfaces() {
            return Err(Error::usage(format!(
                "reauxnet interface {k} out of range 1..={}",
                self.interfaces()
            )));
        }
        let mut cur = x0_embedded.clone();
        let mut segment_caches = Vec::with_capacity(k);
        for seg in self.segments(k) {
            let (next, caches) = seg.forward_cached(&cur)?;
            segment_caches.push(caches);
            cur = next;
        }
        Ok((cur, ReAuxCache { segment_caches }))
    }

    /// Per-segment parameter gradients of chain `k` for an assembled signal
    /// `d(objective)/d(lambda_k)`, chained through the cached forward pass.
    pub fn chain_gradients(
        &self,
        k: usize,
        cache: &ReAuxCache,
        grad_signal: &Tensor,
    ) -> Result<Vec<Vec<BlockParams>>> {
        if k == 0 || k > self.interfaces() {
            return Err(Error::usage(format!("reauxnet interface {k} out of range")));
        }
        let want = [cache.segment_caches[0][0].x.rows(), self.width];
        if grad_signal.shape() != want {
            return Err(Error::dimension(
                "reauxnet_update",
                grad_signal.shape(),
                &want,
            ));
        }
        let mut d_out = grad_signal.clone();
        let mut seg_grads: Vec<Vec<BlockParams>> = Vec::with_capacity(k);
        for (seg, caches) in self.segments(k).iter().zip(&cache.segment_caches).rev() {
            let (grads, d_in) = seg.backward(caches, &d_out)?;
            seg_grads.push(grads);
            d_out = d_in;
        }
        seg_grads.reverse();
        Ok(seg_grads)
    }

    /// One SGD step on chain `k` from the assembled gradient signal.
    pub fn update(
        &mut self,
        k: usize,
        cache: &ReAuxCache,
        grad_signal: &Tensor,
        eta: f64,
    ) -> Result<()> {
        let seg_grads = self.chain_gradients(k, cache, grad_signal)?;
        let segs_mut: &mut [AuxNet] = if self.shared_prefix {
            &mut self.common[..k]
        } else {
            &mut self.chains[k - 1]
        };
        for (seg, grads) in segs_mut.iter_mut().zip(&seg_grads) {
            let grad_refs: Vec<&Tensor> = grads.iter().flat_map(|b| b.tensors()).collect();
            let mut params = seg.tensors_mut();
            for (w, g) in params.iter_mut().zip(&grad_refs) {
                w.axpy(-eta, g)?;
            }
        }
        Ok(())
    }

    /// Flattened parameter tensors of chain `k`, segment by segment.
    pub fn chain_tensors(&self, k: usize) -> Vec<&Tensor> {
        self.segments(k).iter().flat_map(|n| n.tensors()).collect()
    }

    pub fn chain_tensors_mut(&mut self, k: usize) -> Vec<&mut Tensor> {
        let segs: &mut [AuxNet] = if self.shared_prefix {
            &mut self.common[..k]
        } else {
            &mut self.chains[k - 1]
        };
        segs.iter_mut().flat_map(|n| n.tensors_mut()).collect()
    }
}
