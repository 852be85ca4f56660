//! Token selectors, token approximators and the bookkeeping that splits a
//! token sequence into kept and frozen rows and puts it back together.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::graph::{Graph, Var};
use crate::nn::{bind_leaf, join, LayerNorm, Linear, Module};
use crate::rng::{gumbel_noise, Rng};
use crate::scalar::{s, Scalar};
use crate::tensor::{check_unique, contract, shape_err, Tensor};
use crate::vit::ModelConfig;

/// Block locations of the reduction stages.
///
/// Locations are 1-based and ascending; stage `s` runs its selector right
/// before block `locations[s]`. Every stage but the last owns an approximator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    locations: Vec<usize>,
    depth: usize,
}

impl StagePlan {
    pub fn new(locations: Vec<usize>, depth: usize) -> Result<Self> {
        if locations.is_empty() {
            return Err(config("stage plan needs at least one stage"));
        }
        if locations[0] < 1 || *locations.last().unwrap() > depth {
            return Err(config(format!(
                "stage locations {locations:?} must lie in 1..={depth}"
            )));
        }
        if locations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config(format!(
                "stage locations {locations:?} must be strictly ascending"
            )));
        }
        Ok(Self { locations, depth })
    }

    /// Three stages at roughly the quarter points, e.g. `[4, 7, 10]` for 12
    /// blocks and `[3, 5, 7]` for 8.
    pub fn default_for(depth: usize) -> Result<Self> {
        if depth < 4 {
            return Err(config(format!("default plan needs depth >= 4, got {depth}")));
        }
        let locs = (1..=3)
            .map(|k| 1 + (k as f64 * depth as f64 / 4.0).round() as usize)
            .collect();
        Self::new(locs, depth)
    }

    pub fn stages(&self) -> usize {
        self.locations.len()
    }

    pub fn locations(&self) -> &[usize] {
        &self.locations
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of approximators, one per stage except the last.
    pub fn approximators(&self) -> usize {
        self.stages() - 1
    }

    pub fn has_approximator(&self, stage: usize) -> bool {
        stage + 1 < self.stages()
    }

    /// 0-based block indices governed by `stage` (0-based).
    pub fn blocks(&self, stage: usize) -> Range<usize> {
        let start = self.locations[stage] - 1;
        let end = self
            .locations
            .get(stage + 1)
            .map(|&l| l - 1)
            .unwrap_or(self.depth);
        start..end
    }

    /// 0-based blocks that run on the full sequence before the first selector.
    pub fn prefix_blocks(&self) -> Range<usize> {
        0..self.locations[0] - 1
    }

    /// Stage governing 0-based block `block`, if any.
    pub fn governing_stage(&self, block: usize) -> Option<usize> {
        self.locations.iter().rposition(|&l| l - 1 <= block)
    }

    pub fn check_depth(&self, cfg: &ModelConfig) -> Result<()> {
        if self.depth != cfg.depth {
            return Err(config(format!(
                "stage plan built for depth {}, model depth is {}",
                self.depth, cfg.depth
            )));
        }
        Ok(())
    }
}

/// Per-stage keep/freeze decision over the `N` patch tokens (`[CLS]` excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionMask {
    pub bits: Vec<bool>,
    /// Keep-class probability from the selector, per token.
    pub soft: Vec<f64>,
}

impl DecisionMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let soft = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self { bits, soft }
    }

    pub fn all(n: usize, keep: bool) -> Self {
        Self::from_bits(vec![keep; n])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn frozen(&self) -> usize {
        self.len() - self.kept()
    }

    /// Rows of the full sequence (`[CLS]` is row 0) that are kept, excluding `[CLS]`.
    pub fn kept_idx(&self) -> Vec<usize> {
        (1..=self.len()).filter(|&i| self.bits[i - 1]).collect()
    }

    pub fn frozen_idx(&self) -> Vec<usize> {
        (1..=self.len()).filter(|&i| !self.bits[i - 1]).collect()
    }

    /// `[CLS]` followed by [`Self::kept_idx`].
    pub fn kept_rows(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.kept_idx()).collect()
    }

    /// Column of 0/1 over the full sequence, `[CLS]` first.
    pub fn full_column<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.len() + 1);
        data.push(T::one());
        data.extend(self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }));
        Tensor::from_fn(&[self.len() + 1, 1], |i| data[i])
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n || self.soft.len() != n {
            return Err(shape_err(
                "decision_mask",
                format!("mask over {} tokens, sequence has {n} patches", self.len()),
            )
            .into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Gumbel sample with a hard forward value.
    Train,
    /// Deterministic argmax, no noise.
    Infer,
}

/// `LN -> D/2 -> GELU -> D/4 -> GELU -> 2` over patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams<P> {
    pub norm: LayerNorm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
    pub fc3: Linear<P>,
}

/// `x + fc2(GELU(fc1(LN(x))))` with a `D/4` bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproximatorParams<P> {
    pub norm: LayerNorm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

impl<P> SelectorParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> SelectorParams<Q> {
        SelectorParams {
            norm: self.norm.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
            fc3: self.fc3.map(f),
        }
    }
}

impl<P> Module<P> for SelectorParams<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.norm.visit(&join(prefix, "norm"), out);
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
        self.fc3.visit(&join(prefix, "fc3"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.norm.visit_mut(out);
        self.fc1.visit_mut(out);
        self.fc2.visit_mut(out);
        self.fc3.visit_mut(out);
    }
}

impl<P> ApproximatorParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ApproximatorParams<Q> {
        ApproximatorParams {
            norm: self.norm.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
}

impl<P> Module<P> for ApproximatorParams<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.norm.visit(&join(prefix, "norm"), out);
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.norm.visit_mut(out);
        self.fc1.visit_mut(out);
        self.fc2.visit_mut(out);
    }
}

/// Hidden widths of the selector MLP.
pub fn selector_widths(dim: usize) -> (usize, usize) {
    (dim / 2, dim / 4)
}

pub fn approximator_width(dim: usize) -> usize {
    dim / 4
}

pub fn selector_param_count(dim: usize) -> usize {
    let (h1, h2) = selector_widths(dim);
    2 * dim + (dim * h1 + h1) + (h1 * h2 + h2) + (h2 * 2 + 2)
}

pub fn approximator_param_count(dim: usize) -> usize {
    let h = approximator_width(dim);
    2 * dim + (dim * h + h) + (h * dim + dim)
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 4 {
        return Err(config(format!("selector/approximator need dim >= 4, got {dim}")));
    }
    Ok(())
}

impl<T: Scalar> SelectorParams<Tensor<T>> {
    /// `keep_bias` is added to the keep logit and subtracted from the freeze logit.
    pub fn init(dim: usize, rng: &mut Rng, keep_bias: f64) -> Result<Self> {
        check_dim(dim)?;
        let (h1, h2) = selector_widths(dim);
        let mut fc3 = Linear::init(rng, h2, 2);
        fc3.bias = Tensor::from_fn(&[2], |i| s(if i == 0 { keep_bias } else { -keep_bias }));
        Ok(Self {
            norm: LayerNorm::new(dim),
            fc1: Linear::init(rng, dim, h1),
            fc2: Linear::init(rng, h1, h2),
            fc3,
        })
    }
}

impl<T: Scalar> ApproximatorParams<Tensor<T>> {
    /// The output layer starts at zero so the approximator starts as identity.
    pub fn init(dim: usize, rng: &mut Rng) -> Result<Self> {
        check_dim(dim)?;
        let h = approximator_width(dim);
        Ok(Self {
            norm: LayerNorm::new(dim),
            fc1: Linear::init(rng, dim, h),
            fc2: Linear::zeros(h, dim),
        })
    }
}

/// All selectors and approximators of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ToFeParams<P> {
    pub selectors: Vec<SelectorParams<P>>,
    pub approximators: Vec<ApproximatorParams<P>>,
}

pub type ToFe<T> = ToFeParams<Tensor<T>>;
pub type Selector<T> = SelectorParams<Tensor<T>>;
pub type Approximator<T> = ApproximatorParams<Tensor<T>>;

impl<P> ToFeParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ToFeParams<Q> {
        ToFeParams {
            selectors: self.selectors.iter().map(|p| p.map(f)).collect(),
            approximators: self.approximators.iter().map(|p| p.map(f)).collect(),
        }
    }
}

impl<P> Module<P> for ToFeParams<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        self.selectors.visit(&join(prefix, "selectors"), out);
        self.approximators.visit(&join(prefix, "approximators"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.selectors.visit_mut(out);
        self.approximators.visit_mut(out);
    }
}

impl<T: Scalar> ToFeParams<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, plan: &StagePlan, rng: &mut Rng, keep_bias: f64) -> Result<Self> {
        plan.check_depth(cfg)?;
        let selectors = (0..plan.stages())
            .map(|_| SelectorParams::init(cfg.dim, rng, keep_bias))
            .collect::<Result<_>>()?;
        let approximators = (0..plan.approximators())
            .map(|_| ApproximatorParams::init(cfg.dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            selectors,
            approximators,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ToFeParams<Var> {
        self.map(&mut |t| bind_leaf(g, t, trainable))
    }

    pub fn check_shapes(&self, cfg: &ModelConfig, plan: &StagePlan) -> Result<()> {
        if self.selectors.len() != plan.stages() || self.approximators.len() != plan.approximators() {
            return Err(config(format!(
                "{} selectors / {} approximators for a {}-stage plan",
                self.selectors.len(),
                self.approximators.len(),
                plan.stages()
            )));
        }
        let expected = ToFeParams::<Tensor<T>>::init(cfg, plan, &mut Rng::seed(0), 0.0)?;
        for ((name, a), (_, b)) in self.named().iter().zip(expected.named()) {
            if a.shape() != b.shape() {
                return Err(config(format!(
                    "{name}: shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Selector logits `[N x 2]` for patch tokens `[N x D]`.
pub fn selector_logits<T: Scalar>(g: &mut Graph<T>, patches: Var, p: &SelectorParams<Var>) -> Result<Var> {
    let h = p.norm.forward(g, patches)?;
    let h = p.fc1.forward(g, h)?;
    let h = g.gelu(h);
    let h = p.fc2.forward(g, h)?;
    let h = g.gelu(h);
    Ok(p.fc3.forward(g, h)?)
}

/// Row-wise `(p_keep, p_freeze)`.
pub fn selector_scores<T: Scalar>(g: &mut Graph<T>, patches: Var, p: &SelectorParams<Var>) -> Result<Var> {
    let logits = selector_logits(g, patches, p)?;
    Ok(g.softmax_rows(logits)?)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(contract("gumbel_hard_mask", format!("temperature must be > 0, got {tau}")).into());
    }
    Ok(())
}

fn check_two_cols<T: Scalar>(z: &Tensor<T>) -> Result<usize> {
    if z.rank() != 2 || z.cols() != 2 {
        return Err(shape_err("gumbel_hard_mask", format!("scores of shape {:?}", z.shape())).into());
    }
    Ok(z.rows())
}

/// Hard decision from keep/freeze probabilities `z` (`[N x 2]`).
///
/// `Train` perturbs `ln z` with Gumbel noise; `Infer` takes the argmax.
/// Ties go to keep.
pub fn gumbel_hard_mask<T: Scalar>(z: &Tensor<T>, rng: &mut Rng, tau: f64, mode: MaskMode) -> Result<DecisionMask> {
    check_tau(tau)?;
    let n = check_two_cols(z)?;
    let noise: Tensor<f64> = match mode {
        MaskMode::Train => gumbel_noise(rng, &[n, 2]),
        MaskMode::Infer => Tensor::zeros(&[n, 2]),
    };
    let mut bits = Vec::with_capacity(n);
    let mut soft = Vec::with_capacity(n);
    for i in 0..n {
        let (keep, freeze) = (z.at(i, 0).to_f64_lossy(), z.at(i, 1).to_f64_lossy());
        let a = (keep.ln() + noise.at(i, 0)) / tau;
        let b = (freeze.ln() + noise.at(i, 1)) / tau;
        bits.push(a >= b);
        soft.push(keep);
    }
    Ok(DecisionMask { bits, soft })
}

/// Training-mode mask on the tape.
///
/// Returns the decision, the straight-through column `[N x 1]` (hard value,
/// gradient of the relaxed keep probability) and the un-noised keep
/// probability column used for soft token counts.
pub fn sample_train_mask<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    rng: &mut Rng,
    tau: f64,
) -> Result<(DecisionMask, Var, Var)> {
    check_tau(tau)?;
    let n = check_two_cols(g.value(logits))?;
    let noise: Tensor<f64> = gumbel_noise(rng, &[n, 2]);
    let logp = g.log_softmax_rows(logits)?;
    let noise = g.constant(noise.cast());
    let y = g.add(logp, noise)?;
    let y = g.scale(y, s(1.0 / tau));
    let y = g.softmax_rows(y)?;
    let relaxed = g.slice_cols(y, 0, 1)?;
    let yv = g.value(y);
    let bits: Vec<bool> = (0..n).map(|i| yv.at(i, 0) >= yv.at(i, 1)).collect();
    let probs = g.softmax_rows(logits)?;
    let keep_prob = g.slice_cols(probs, 0, 1)?;
    let soft = g.value(keep_prob).data().iter().map(|v| v.to_f64_lossy()).collect();
    let mask = DecisionMask { bits, soft };
    let st = g.straight_through(mask.full_column::<T>().slice_rows(1, n)?, relaxed)?;
    Ok((mask, st, keep_prob))
}

/// Kept and frozen rows of a full sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition<T> {
    /// `[CLS]` followed by kept patch rows, original order.
    pub kept: Tensor<T>,
    pub frozen: Tensor<T>,
    pub kept_idx: Vec<usize>,
    pub frozen_idx: Vec<usize>,
}

pub fn partition_tokens<T: Scalar>(x: &Tensor<T>, mask: &DecisionMask) -> Result<Partition<T>> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(shape_err("partition_tokens", format!("sequence of shape {:?}", x.shape())).into());
    }
    mask.check_len(x.rows() - 1)?;
    Ok(Partition {
        kept: x.gather_rows(&mask.kept_rows())?,
        frozen: x.gather_rows(&mask.frozen_idx())?,
        kept_idx: mask.kept_idx(),
        frozen_idx: mask.frozen_idx(),
    })
}

/// Checks that `kept_idx` and `frozen_idx` together cover `1..=N` exactly once.
pub fn check_partition(kept_idx: &[usize], frozen_idx: &[usize]) -> Result<usize> {
    let n = kept_idx.len() + frozen_idx.len();
    let all: Vec<usize> = kept_idx.iter().chain(frozen_idx).copied().collect();
    if all.iter().any(|&i| i == 0 || i > n) {
        return Err(contract("rearrange_tokens", format!("indices {all:?} do not partition 1..={n}")).into());
    }
    check_unique(&all, n + 1, "rearrange_tokens")?;
    Ok(n)
}

/// Inverse of [`partition_tokens`]: kept rows (with `[CLS]` first) and
/// frozen rows back in positional order.
pub fn rearrange_tokens<T: Scalar>(
    kept: &Tensor<T>,
    frozen: &Tensor<T>,
    kept_idx: &[usize],
    frozen_idx: &[usize],
) -> Result<Tensor<T>> {
    let n = check_partition(kept_idx, frozen_idx)?;
    if kept.rows() != kept_idx.len() + 1 || frozen.rows() != frozen_idx.len() {
        return Err(shape_err(
            "rearrange_tokens",
            format!("{} kept / {} frozen rows for {n} tokens", kept.rows(), frozen.rows()),
        )
        .into());
    }
    let d = kept.cols();
    let rows: Vec<usize> = std::iter::once(0).chain(kept_idx.iter().copied()).collect();
    let out = Tensor::zeros(&[n + 1, d]).scatter_rows(&rows, kept)?;
    Ok(out.scatter_rows(frozen_idx, frozen)?)
}

/// Tape version of [`rearrange_tokens`].
pub fn rearrange_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    kept: Var,
    frozen: Var,
    kept_idx: &[usize],
    frozen_idx: &[usize],
) -> Result<Var> {
    let n = check_partition(kept_idx, frozen_idx)?;
    let d = g.value(kept).cols();
    let rows: Vec<usize> = std::iter::once(0).chain(kept_idx.iter().copied()).collect();
    let base = g.constant(Tensor::zeros(&[n + 1, d]));
    let out = g.scatter_rows(base, &rows, kept)?;
    if frozen_idx.is_empty() {
        return Ok(out);
    }
    Ok(g.scatter_rows(out, frozen_idx, frozen)?)
}

/// `frozen + MLP(LN(frozen))`, rowwise. Zero rows pass through.
pub fn approximate_frozen<T: Scalar>(g: &mut Graph<T>, frozen: Var, p: &ApproximatorParams<Var>) -> Result<Var> {
    if g.value(frozen).rows() == 0 {
        return Ok(frozen);
    }
    let h = p.norm.forward(g, frozen)?;
    let h = p.fc1.forward(g, h)?;
    let h = g.gelu(h);
    let h = p.fc2.forward(g, h)?;
    Ok(g.add(frozen, h)?)
}
