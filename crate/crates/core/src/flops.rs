//! Analytic cost model.
//!
//! One multiply-add counts as one FLOP. Per block that gives
//! `4 N D^2 + 2 N^2 D + 2 N D D_hidden`: the Q/K/V/output projections, the
//! two attention products and the MLP. Norms, softmax, biases and residual
//! adds are not billed.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::{s, Scalar};
use crate::tensor::contract;
use crate::tofe::{approximator_width, selector_widths, DecisionMask, StagePlan};
use crate::vit::ModelConfig;

pub fn flops_per_block(n: usize, d: usize, d_hidden: usize) -> Result<u64> {
    if n == 0 {
        return Err(contract("flops_per_block", "token count must be >= 1").into());
    }
    let (n, d, dh) = (n as u64, d as u64, d_hidden as u64);
    Ok(4 * n * d * d + 2 * n * n * d + 2 * n * d * dh)
}

/// Real-valued version for fractional (expected) token counts.
pub fn flops_per_block_real(n: f64, d: usize, d_hidden: usize) -> f64 {
    let (d, dh) = (d as f64, d_hidden as f64);
    4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * dh
}

/// Selector cost on `tokens` tokens.
pub fn selector_flops(tokens: usize, dim: usize) -> u64 {
    let (h1, h2) = selector_widths(dim);
    (tokens * (dim * h1 + h1 * h2 + h2 * 2)) as u64
}

pub fn approximator_flops(tokens: usize, dim: usize) -> u64 {
    let h = approximator_width(dim);
    (tokens * 2 * dim * h) as u64
}

/// Selectors on all `N` patch tokens at every stage plus approximators on the
/// frozen tokens of every stage that has one. `frozen` defaults to `N`
/// (the upper bound) when absent.
pub fn overhead_flops(plan: &StagePlan, cfg: &ModelConfig, frozen: Option<&[usize]>) -> u64 {
    let n = cfg.num_patches();
    let sel = plan.stages() as u64 * selector_flops(n, cfg.dim);
    let apr: u64 = (0..plan.approximators())
        .map(|s| approximator_flops(frozen.map_or(n, |f| f[s]), cfg.dim))
        .sum();
    sel + apr
}

/// Patch projection plus classifier head.
pub fn embed_head_flops(cfg: &ModelConfig) -> u64 {
    (cfg.num_patches() * cfg.patch_dim() * cfg.dim + cfg.dim * cfg.num_classes) as u64
}

/// All blocks on the full `N + 1` sequence.
pub fn baseline_block_flops(cfg: &ModelConfig) -> u64 {
    cfg.depth as u64 * flops_per_block(cfg.num_patches() + 1, cfg.dim, cfg.mlp_hidden).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    /// 1-based block index.
    pub block: usize,
    pub tokens: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_block: Vec<BlockFlops>,
    pub overhead: u64,
    pub total: u64,
    pub target: Option<u64>,
}

impl FlopsReport {
    pub fn block_total(&self) -> u64 {
        self.per_block.iter().map(|b| b.flops).sum()
    }
}

/// Cost of one instance given its per-stage masks.
pub fn instance_flops(masks: &[DecisionMask], plan: &StagePlan, cfg: &ModelConfig) -> Result<FlopsReport> {
    plan.check_depth(cfg)?;
    if masks.len() != plan.stages() {
        return Err(contract(
            "instance_flops",
            format!("{} masks for {} stages", masks.len(), plan.stages()),
        )
        .into());
    }
    let n = cfg.num_patches();
    for m in masks {
        m.check_len(n)?;
    }
    let per_block = (0..cfg.depth)
        .map(|l| {
            let tokens = plan.governing_stage(l).map_or(n + 1, |s| masks[s].kept() + 1);
            let flops = flops_per_block(tokens, cfg.dim, cfg.mlp_hidden)?;
            Ok(BlockFlops {
                block: l + 1,
                tokens,
                flops,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frozen: Vec<usize> = masks.iter().map(|m| m.frozen()).collect();
    let overhead = overhead_flops(plan, cfg, Some(&frozen));
    let total = per_block.iter().map(|b| b.flops).sum::<u64>() + overhead;
    Ok(FlopsReport {
        per_block,
        overhead,
        total,
        target: None,
    })
}

/// Cost with every patch token dropped after the first selector.
pub fn cls_floor_flops(plan: &StagePlan, cfg: &ModelConfig) -> u64 {
    let masks = vec![DecisionMask::all(cfg.num_patches(), false); plan.stages()];
    instance_flops(&masks, plan, cfg).unwrap().total
}

/// Mean over instances of `(flops - target)^2`.
pub fn budget_loss(values: &[f64], target: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("budget_loss", "empty batch").into());
    }
    Ok(values.iter().map(|v| (v - target).powi(2)).sum::<f64>() / values.len() as f64)
}

/// Instance cost on the tape from per-stage kept-token counts (scalars,
/// `[CLS]` excluded), divided by `unit`.
///
/// Counts may be fractional; the approximator term follows the frozen count
/// `N - count`, the selector term is constant.
pub fn soft_instance_flops<T: Scalar>(
    g: &mut Graph<T>,
    kept: &[Var],
    plan: &StagePlan,
    cfg: &ModelConfig,
    unit: f64,
) -> Result<Var> {
    plan.check_depth(cfg)?;
    if kept.len() != plan.stages() {
        return Err(contract(
            "soft_instance_flops",
            format!("{} counts for {} stages", kept.len(), plan.stages()),
        )
        .into());
    }
    let n = cfg.num_patches();
    let (d, dh) = (cfg.dim as f64, cfg.mlp_hidden as f64);
    let apr_per_token = approximator_flops(1, cfg.dim) as f64;
    let mut constant = plan.prefix_blocks().len() as f64 * flops_per_block_real((n + 1) as f64, cfg.dim, cfg.mlp_hidden)
        + plan.stages() as f64 * selector_flops(n, cfg.dim) as f64;
    let mut terms = Vec::with_capacity(kept.len());
    for (s_idx, &c) in kept.iter().enumerate() {
        let blocks = plan.blocks(s_idx).len() as f64;
        // with t = c + 1 tokens: blocks * (a t + b t^2) - apr * (t - (N + 1))
        let mut lin = blocks * (4.0 * d * d + 2.0 * d * dh);
        let quad = blocks * 2.0 * d;
        if plan.has_approximator(s_idx) {
            lin -= apr_per_token;
            constant += apr_per_token * (n + 1) as f64;
        }
        let t = g.add_scalar(c, T::one());
        let sq = g.mul(t, t)?;
        let a = g.scale(t, s(lin / unit));
        let b = g.scale(sq, s(quad / unit));
        terms.push(g.add(a, b)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.add_scalar(total, s(constant / unit)))
}

/// Tape version of [`budget_loss`] over per-instance scalar costs.
pub fn budget_loss_graph<T: Scalar>(g: &mut Graph<T>, flops: &[Var], target: f64) -> Result<Var> {
    if flops.is_empty() {
        return Err(contract("budget_loss", "empty batch").into());
    }
    let rows = flops
        .iter()
        .map(|&f| g.reshape(f, &[1, 1]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stacked = g.concat_rows(&rows)?;
    let gap = g.add_scalar(stacked, s(-target));
    let sq = g.mul(gap, gap)?;
    Ok(g.mean_all(sq))
}

#[cfg(test)]
fn scalar_tensor<T: Scalar>(v: f64) -> crate::tensor::Tensor<T> {
    crate::tensor::Tensor::scalar(s(v))
}
