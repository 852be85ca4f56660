//! The masked, full-length training form and everything needed to optimise it.
//!
//! Frozen tokens stay in the sequence; a per-token mask column removes them as
//! attention keys and a row blend carries them past the stage's blocks.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::flops::{
    baseline_block_flops, budget_loss_graph, cls_floor_flops, instance_flops, soft_instance_flops,
};
use crate::graph::{Graph, Var};
use crate::nn::Module;
use crate::rng::Rng;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use crate::tofe::{
    approximate_frozen, sample_train_mask, selector_logits, DecisionMask, StagePlan, ToFe, ToFeParams,
};
use crate::vit::{
    attention, backbone_forward, block_forward, classify, hidden_states, patch_embed, Backbone,
    BackboneParams, BlockParams, ModelConfig,
};

/// One labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub apr: f64,
    pub flops: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            apr: 2.0,
            flops: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cls", self.cls), ("apr", self.apr), ("flops", self.flops)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs at the start during which the backbone is not updated.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    /// Per-instance budget: block FLOPs plus selector/approximator overhead.
    pub target_flops: f64,
    pub seed: u64,
    pub temperature: f64,
    /// Initial keep-logit margin of every selector.
    pub keep_bias: f64,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            warmup_epochs: 2,
            batch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-5,
            weight_decay: 0.05,
            target_flops: 0.0,
            seed: 0,
            temperature: 1.0,
            keep_bias: 2.0,
            ema_decay: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, cfg: &ModelConfig, plan: &StagePlan) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config("epochs and batch_size must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        let floor = cls_floor_flops(plan, cfg) as f64;
        if !(self.target_flops > floor) {
            return Err(config(format!(
                "target_flops {} must exceed the [CLS]-only floor {floor}",
                self.target_flops
            )));
        }
        Ok(())
    }
}

/// `lr_end + (lr_start - lr_end) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 {
        return lr_start;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay. Decay applies to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates `params` in place; a missing gradient counts as zero.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2): (T, T) = (s(self.beta1), s(self.beta2));
        let (one, eps) = (T::one(), s::<T>(self.eps));
        let step_size: T = s(lr / bc1);
        let inv_bc2: T = s(1.0 / bc2);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.rank() == 2 && self.weight_decay > 0.0 {
                let keep: T = s(1.0 - lr * self.weight_decay);
                p.data_mut().iter_mut().for_each(|w| *w *= keep);
            }
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

fn grads_of<T: Scalar>(g: &Graph<T>, vars: &[&Var]) -> Vec<Option<Tensor<T>>> {
    vars.iter().map(|&&v| g.grad(v).cloned()).collect()
}

/// Running mean of kept patch tokens per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgKeepCounts {
    pub mean: Vec<f64>,
    pub decay: f64,
    pub updates: u64,
}

impl AvgKeepCounts {
    pub fn new(stages: usize, decay: f64) -> Self {
        Self {
            mean: vec![0.0; stages],
            decay,
            updates: 0,
        }
    }

    /// Exponential moving average; the first update seeds it.
    pub fn update(&mut self, batch_mean: &[f64]) {
        assert_eq!(batch_mean.len(), self.mean.len());
        for (m, &x) in self.mean.iter_mut().zip(batch_mean) {
            *m = if self.updates == 0 {
                x
            } else {
                self.decay * *m + (1.0 - self.decay) * x
            };
        }
        self.updates += 1;
    }

    /// Rounded half-up, clamped to `[1, n]`.
    pub fn snapshot(&self, n: usize) -> Vec<usize> {
        self.mean
            .iter()
            .map(|&m| ((m + 0.5).floor().max(1.0) as usize).min(n))
            .collect()
    }
}

/// Teacher token states at each stage boundary (end of the stage's last block).
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache<T> {
    pub stages: Vec<Tensor<T>>,
}

impl<T: Scalar> TeacherCache<T> {
    pub fn capture(teacher: &Backbone<T>, image: &Tensor<T>, plan: &StagePlan, cfg: &ModelConfig) -> Result<Self> {
        let hidden = hidden_states(image, teacher, cfg)?;
        Ok(Self {
            stages: (0..plan.stages()).map(|s| hidden[plan.blocks(s).end - 1].clone()).collect(),
        })
    }
}

/// Where the training form takes its masks from.
pub enum MaskSource<'a> {
    /// Gumbel samples with straight-through gradients.
    Sample { rng: &'a mut Rng, temperature: f64 },
    /// Given hard masks, one per stage; no gradient into the selectors.
    Fixed(&'a [DecisionMask]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedForward {
    /// `1 x num_classes`.
    pub logits: Var,
    pub masks: Vec<DecisionMask>,
    /// Full sequence after each stage's blend.
    pub boundaries: Vec<Var>,
    /// Expected kept patch-token count per stage (scalar).
    pub keep_counts: Vec<Var>,
    /// Per stage, `x + Approx(x)` recomputed from a detached copy of the
    /// stage input (`x` itself for the last stage). Equal to `boundaries` on
    /// frozen rows, but the approximation loss taken on it only reaches the
    /// approximator, never the selectors or the backbone.
    pub carried: Vec<Var>,
}

/// Attention of a block on `LN1(x)` where column `j != i` is weighted by
/// `mask_col[j]`; `mask_col` covers the full sequence, `[CLS]` first.
pub fn masked_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    mask_col: Var,
    block: &BlockParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let h = block.norm1.forward(g, x)?;
    attention(g, h, block, cfg, Some(mask_col))
}

/// Full-length forward with per-stage masks.
///
/// Each stage runs its blocks on every row with masked attention, then keeps
/// the block output on kept rows and `x + Approx(x)` (or `x` for the last
/// stage) on frozen rows.
pub fn masked_stage_forward<T: Scalar>(
    g: &mut Graph<T>,
    image: &Tensor<T>,
    bb: &BackboneParams<Var>,
    tofe: &ToFeParams<Var>,
    plan: &StagePlan,
    cfg: &ModelConfig,
    mut source: MaskSource<'_>,
) -> Result<MaskedForward> {
    plan.check_depth(cfg)?;
    let n = cfg.num_patches();
    let mut x = patch_embed(g, image, bb, cfg)?;
    for l in plan.prefix_blocks() {
        x = block_forward(g, x, &bb.blocks[l], cfg, None)?;
    }
    let mut masks = Vec::with_capacity(plan.stages());
    let mut boundaries = Vec::with_capacity(plan.stages());
    let mut keep_counts = Vec::with_capacity(plan.stages());
    let mut carried_all = Vec::with_capacity(plan.stages());
    for st in 0..plan.stages() {
        let patches = g.slice_rows(x, 1, n)?;
        let logits = selector_logits(g, patches, &tofe.selectors[st])?;
        let (mask, col, count) = match &mut source {
            MaskSource::Sample { rng, temperature } => {
                let (mask, col, keep) = sample_train_mask(g, logits, rng, *temperature)?;
                let count = g.sum_all(keep);
                (mask, col, count)
            }
            MaskSource::Fixed(given) => {
                let mask = given
                    .get(st)
                    .ok_or_else(|| config(format!("no mask for stage {}", st + 1)))?
                    .clone();
                mask.check_len(n)?;
                let col = g.constant(mask.full_column::<T>().slice_rows(1, n)?);
                let count = g.constant(Tensor::scalar(s(mask.kept() as f64)));
                (mask, col, count)
            }
        };
        let one = g.constant(Tensor::ones(&[1, 1]));
        let full = g.concat_rows(&[one, col])?;
        let mut y = x;
        for l in plan.blocks(st) {
            y = block_forward(g, y, &bb.blocks[l], cfg, Some(full))?;
        }
        let carried = if plan.has_approximator(st) {
            approximate_frozen(g, x, &tofe.approximators[st])?
        } else {
            x
        };
        let detached = if plan.has_approximator(st) {
            let x0 = g.constant(g.value(x).clone());
            approximate_frozen(g, x0, &tofe.approximators[st])?
        } else {
            carried
        };
        x = g.blend_rows(full, y, carried)?;
        masks.push(mask);
        boundaries.push(x);
        keep_counts.push(count);
        carried_all.push(detached);
    }
    let logits = classify(g, x, bb)?;
    Ok(MaskedForward {
        logits,
        masks,
        boundaries,
        keep_counts,
        carried: carried_all,
    })
}

/// Mean cross-entropy over a batch of `1 x C` logits.
pub fn cls_loss<T: Scalar>(g: &mut Graph<T>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let stacked = if logits.len() == 1 {
        logits[0]
    } else {
        g.concat_rows(logits)?
    };
    Ok(g.cross_entropy(stacked, labels)?)
}

/// `(1/B) sum_b sum_s (1/F_bs) sum_{i frozen} ||x'_i - x_i||^2`.
///
/// `F_bs` is the frozen count; a sample-stage with nothing frozen adds 0.
/// Indexed `[sample][stage]`.
pub fn approx_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: &[Vec<Var>],
    teacher: &[Vec<Tensor<T>>],
    masks: &[Vec<DecisionMask>],
) -> Result<Var> {
    if student.is_empty() || student.len() != teacher.len() || student.len() != masks.len() {
        return Err(config("approx_loss needs matching, nonempty batches"));
    }
    let mut terms = Vec::new();
    for ((xs, ts), ms) in student.iter().zip(teacher).zip(masks) {
        for ((&x, t), m) in xs.iter().zip(ts).zip(ms) {
            let frozen = m.frozen_idx();
            if frozen.is_empty() {
                continue;
            }
            let xf = g.gather_rows(x, &frozen)?;
            let tf = g.constant(t.gather_rows(&frozen)?);
            let d = g.sub(xf, tf)?;
            let sq = g.mul(d, d)?;
            let sum = g.sum_all(sq);
            terms.push(g.scale(sum, s(1.0 / frozen.len() as f64)));
        }
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant(Tensor::scalar(T::zero()))),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, s(1.0 / student.len() as f64)))
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, cls: Var, apr: Var, flops: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(cls, s(w.cls));
    let b = g.scale(apr, s(w.apr));
    let c = g.scale(flops, s(w.flops));
    let ab = g.add(a, b)?;
    Ok(g.add(ab, c)?)
}

pub fn total_loss_value(cls: f64, apr: f64, flops: f64, w: &LossWeights) -> f64 {
    w.cls * cls + w.apr * apr + w.flops * flops
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneEpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels<T>(samples: &[Sample<T>], cfg: &ModelConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(config("training set is empty"));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= cfg.num_classes) {
        return Err(config(format!("label {} out of range for {} classes", s.label, cfg.num_classes)));
    }
    Ok(())
}

/// Plain cross-entropy training of a fresh backbone.
pub fn train_backbone<T: Scalar>(
    samples: &[Sample<T>],
    cfg: &ModelConfig,
    tc: &BackboneTrainConfig,
    mut on_epoch: impl FnMut(&BackboneEpochRecord),
) -> Result<(Backbone<T>, Vec<BackboneEpochRecord>)> {
    cfg.validate()?;
    check_labels(samples, cfg)?;
    if tc.epochs == 0 || tc.batch_size == 0 {
        return Err(config("epochs and batch_size must be >= 1"));
    }
    let mut rng = Rng::seed(tc.seed);
    let mut params = Backbone::<T>::init(cfg, &mut rng.fork(1));
    let mut opt = AdamW::new(tc.weight_decay);
    let steps_per_epoch = samples.len().div_ceil(tc.batch_size);
    let total = tc.epochs * steps_per_epoch;
    let mut step = 0;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for batch in batches(&order, tc.batch_size) {
            lr = if step < tc.warmup_steps {
                tc.lr_start * (step + 1) as f64 / tc.warmup_steps as f64
            } else {
                cosine_lr(step - tc.warmup_steps, total.saturating_sub(tc.warmup_steps), tc.lr_start, tc.lr_end)
            };
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let mut logits = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (l, _) = backbone_forward(&mut g, &samples[i].image, &bound, cfg)?;
                if argmax(g.value(l).data()) == samples[i].label {
                    correct += 1;
                }
                logits.push(l);
                labels.push(samples[i].label);
            }
            let loss = cls_loss(&mut g, &logits, &labels)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).item().to_f64_lossy() * batch.len() as f64;
            let grads = grads_of(&g, &bound.leaves());
            opt.step(params.leaves_mut(), &grads, lr);
            step += 1;
        }
        let rec = BackboneEpochRecord {
            epoch: epoch + 1,
            step,
            loss: loss_sum / samples.len() as f64,
            train_accuracy: 100.0 * correct as f64 / samples.len() as f64,
            lr,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok((params, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub cls_loss: f64,
    pub apr_loss: f64,
    pub flops_loss: f64,
    /// Mean over the epoch's instances of the hard-mask cost, in GFLOPs.
    pub mean_gflops: f64,
    pub target_gflops: f64,
    pub keep_counts: Vec<f64>,
    pub train_accuracy: f64,
    pub lr: f64,
    pub backbone_frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ToFeTrained<T> {
    pub backbone: Backbone<T>,
    pub tofe: ToFe<T>,
    pub avg_counts: AvgKeepCounts,
    pub log: Vec<EpochRecord>,
}

/// Joint training of selectors, approximators and (after warmup) the backbone.
///
/// The student starts from `teacher`, which itself never changes. The
/// budget term uses expected kept counts and costs in units of the full
/// backbone's block FLOPs.
pub fn train_tofe<T: Scalar>(
    teacher: &Backbone<T>,
    samples: &[Sample<T>],
    cfg: &ModelConfig,
    plan: &StagePlan,
    tc: &TrainConfig,
    weights: &LossWeights,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ToFeTrained<T>> {
    cfg.validate()?;
    teacher.check_shapes(cfg)?;
    plan.check_depth(cfg)?;
    tc.validate(cfg, plan)?;
    weights.validate()?;
    check_labels(samples, cfg)?;

    let mut rng = Rng::seed(tc.seed);
    let mut tofe = ToFe::<T>::init(cfg, plan, &mut rng.fork(1), tc.keep_bias)?;
    let mut backbone = teacher.clone();
    let mut mask_rng = rng.fork(2);
    let mut opt_tofe = AdamW::new(tc.weight_decay);
    let mut opt_bb = AdamW::new(tc.weight_decay);
    let mut avg = AvgKeepCounts::new(plan.stages(), tc.ema_decay);
    let unit = baseline_block_flops(cfg) as f64;
    let target = tc.target_flops / unit;
    let n_appr = plan.approximators();

    let steps_per_epoch = samples.len().div_ceil(tc.batch_size);
    let total = tc.epochs * steps_per_epoch;
    let mut step = 0;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        let frozen_bb = epoch < tc.warmup_epochs;
        let mut sums = [0.0f64; 3];
        let mut flops_sum = 0.0;
        let mut keep_sum = vec![0.0; plan.stages()];
        let mut correct = 0usize;
        let mut lr = 0.0;
        for batch in batches(&order, tc.batch_size) {
            lr = cosine_lr(step, total, tc.lr_start, tc.lr_end);
            let mut g = Graph::new();
            let bb = backbone.bind(&mut g, !frozen_bb);
            let tv = tofe.bind(&mut g, true);
            let mut logits = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            let mut student = Vec::with_capacity(batch.len());
            let mut teach = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            let mut costs = Vec::with_capacity(batch.len());
            let mut batch_keep = vec![0.0; plan.stages()];
            for &i in batch {
                let sample = &samples[i];
                let cache = TeacherCache::capture(teacher, &sample.image, plan, cfg)?;
                let out = masked_stage_forward(
                    &mut g,
                    &sample.image,
                    &bb,
                    &tv,
                    plan,
                    cfg,
                    MaskSource::Sample {
                        rng: &mut mask_rng,
                        temperature: tc.temperature,
                    },
                )?;
                if argmax(g.value(out.logits).data()) == sample.label {
                    correct += 1;
                }
                costs.push(soft_instance_flops(&mut g, &out.keep_counts, plan, cfg, unit)?);
                flops_sum += instance_flops(&out.masks, plan, cfg)?.total as f64;
                for (k, m) in batch_keep.iter_mut().zip(&out.masks) {
                    *k += m.kept() as f64;
                }
                logits.push(out.logits);
                labels.push(sample.label);
                student.push(out.carried[..n_appr].to_vec());
                teach.push(cache.stages[..n_appr].to_vec());
                masks.push(out.masks[..n_appr].to_vec());
            }
            let cls = cls_loss(&mut g, &logits, &labels)?;
            let apr = approx_loss(&mut g, &student, &teach, &masks)?;
            let fl = budget_loss_graph(&mut g, &costs, target)?;
            let loss = total_loss(&mut g, cls, apr, fl, weights)?;
            g.backward(loss)?;
            for (acc, v) in sums.iter_mut().zip([cls, apr, fl]) {
                *acc += g.value(v).item().to_f64_lossy() * batch.len() as f64;
            }
            let grads = grads_of(&g, &tv.leaves());
            opt_tofe.step(tofe.leaves_mut(), &grads, lr);
            if !frozen_bb {
                let grads = grads_of(&g, &bb.leaves());
                opt_bb.step(backbone.leaves_mut(), &grads, lr);
            }
            let bmean: Vec<f64> = batch_keep.iter().map(|k| k / batch.len() as f64).collect();
            avg.update(&bmean);
            for (a, b) in keep_sum.iter_mut().zip(&batch_keep) {
                *a += b;
            }
            step += 1;
        }
        let m = samples.len() as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            step,
            cls_loss: sums[0] / m,
            apr_loss: sums[1] / m,
            flops_loss: sums[2] / m,
            mean_gflops: flops_sum / m / 1e9,
            target_gflops: tc.target_flops / 1e9,
            keep_counts: keep_sum.iter().map(|k| k / m).collect(),
            train_accuracy: 100.0 * correct as f64 / m,
            lr,
            backbone_frozen: frozen_bb,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(ToFeTrained {
        backbone,
        tofe,
        avg_counts: avg,
        log,
    })
}
