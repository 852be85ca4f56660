//! Gather-form inference: frozen rows are physically removed before each
//! stage's blocks and restored (approximated) at the next stage boundary.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::flops::{instance_flops, FlopsReport};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::{contract, Tensor};
use crate::tofe::{
    approximate_frozen, gumbel_hard_mask, rearrange_on_graph, selector_scores, DecisionMask, MaskMode,
    StagePlan, ToFe,
};
use crate::rng::Rng;
use crate::vit::{block_forward, classify, patch_embed, Backbone, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    InstanceAdaptive,
    BatchAdaptive,
}

/// Kept patch rows (1-based) at every stage of one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub kept: Vec<Vec<usize>>,
    pub num_patches: usize,
    /// Whether any block runs on the full sequence before the first stage.
    pub has_prefix: bool,
}

impl TokenUsage {
    /// Per patch: one for the pre-stage blocks plus one per stage keeping it.
    pub fn frequency(&self) -> Vec<usize> {
        let mut f = vec![usize::from(self.has_prefix); self.num_patches];
        for stage in &self.kept {
            for &i in stage {
                f[i - 1] += 1;
            }
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutput<T> {
    /// `1 x num_classes`.
    pub logits: Tensor<T>,
    pub masks: Vec<DecisionMask>,
    pub usage: TokenUsage,
    pub flops: FlopsReport,
    /// `[CLS]` plus kept rows after each stage's blocks, before any approximator.
    pub stage_kept: Vec<Tensor<T>>,
}

impl<T: Scalar> InstanceOutput<T> {
    pub fn predicted(&self) -> usize {
        let row = self.logits.data();
        (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
    }
}

/// Per-stage decision rule given the stage index and the `[N x 2]` scores.
pub type Decide<'a, T> = dyn FnMut(usize, &Tensor<T>) -> Result<DecisionMask> + 'a;

/// Shared pipeline; `decide` turns selector scores into the stage mask.
pub fn gather_forward<T: Scalar>(
    image: &Tensor<T>,
    bb: &Backbone<T>,
    tofe: &ToFe<T>,
    plan: &StagePlan,
    cfg: &ModelConfig,
    decide: &mut Decide<'_, T>,
) -> Result<InstanceOutput<T>> {
    plan.check_depth(cfg)?;
    tofe.check_shapes(cfg, plan)?;
    let n = cfg.num_patches();
    let mut g = Graph::new();
    let b = bb.bind(&mut g, false);
    let t = tofe.bind(&mut g, false);
    let mut x = patch_embed(&mut g, image, &b, cfg)?;
    for l in plan.prefix_blocks() {
        x = block_forward(&mut g, x, &b.blocks[l], cfg, None)?;
    }
    let mut masks: Vec<DecisionMask> = Vec::with_capacity(plan.stages());
    let mut stage_kept = Vec::with_capacity(plan.stages());
    // (processed kept rows, frozen rows) of the previous stage
    let mut carry = None;
    for st in 0..plan.stages() {
        if let Some((kept, frozen)) = carry.take() {
            let prev: &DecisionMask = &masks[st - 1];
            let frozen = approximate_frozen(&mut g, frozen, &t.approximators[st - 1])?;
            x = rearrange_on_graph(&mut g, kept, frozen, &prev.kept_idx(), &prev.frozen_idx())?;
        }
        let patches = g.slice_rows(x, 1, n)?;
        let z = selector_scores(&mut g, patches, &t.selectors[st])?;
        let mask = decide(st, g.value(z))?;
        mask.check_len(n)?;
        let mut kept = g.gather_rows(x, &mask.kept_rows())?;
        let frozen = g.gather_rows(x, &mask.frozen_idx())?;
        for l in plan.blocks(st) {
            kept = block_forward(&mut g, kept, &b.blocks[l], cfg, None)?;
        }
        stage_kept.push(g.value(kept).clone());
        masks.push(mask);
        carry = Some((kept, frozen));
    }
    let (kept, _) = carry.expect("at least one stage");
    let logits = classify(&mut g, kept, &b)?;
    g.check_finite()?;
    let flops = instance_flops(&masks, plan, cfg)?;
    let usage = TokenUsage {
        kept: masks.iter().map(|m| m.kept_idx()).collect(),
        num_patches: n,
        has_prefix: !plan.prefix_blocks().is_empty(),
    };
    Ok(InstanceOutput {
        logits: g.value(logits).clone(),
        masks,
        usage,
        flops,
        stage_kept,
    })
}

/// Argmax decisions per instance.
pub fn instance_adaptive_forward<T: Scalar>(
    image: &Tensor<T>,
    bb: &Backbone<T>,
    tofe: &ToFe<T>,
    plan: &StagePlan,
    cfg: &ModelConfig,
) -> Result<InstanceOutput<T>> {
    let mut rng = Rng::seed(0);
    gather_forward(image, bb, tofe, plan, cfg, &mut |_, z| {
        gumbel_hard_mask(z, &mut rng, 1.0, MaskMode::Infer)
    })
}

/// Gather form with externally fixed masks.
pub fn forward_with_masks<T: Scalar>(
    image: &Tensor<T>,
    bb: &Backbone<T>,
    tofe: &ToFe<T>,
    plan: &StagePlan,
    cfg: &ModelConfig,
    masks: &[DecisionMask],
) -> Result<InstanceOutput<T>> {
    if masks.len() != plan.stages() {
        return Err(config(format!("{} masks for {} stages", masks.len(), plan.stages())));
    }
    gather_forward(image, bb, tofe, plan, cfg, &mut |st, _| Ok(masks[st].clone()))
}

/// Indices (1-based) of the `count` highest scores, ties to the lower index,
/// returned in ascending order.
pub fn tie_break_top_n(scores: &[f64], count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > scores.len() {
        return Err(contract("tie_break_top_n", format!("count {count} outside 1..={}", scores.len())).into());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut top: Vec<usize> = order[..count].iter().map(|&i| i + 1).collect();
    top.sort_unstable();
    Ok(top)
}

fn top_n_mask<T: Scalar>(z: &Tensor<T>, count: usize) -> Result<DecisionMask> {
    let soft: Vec<f64> = (0..z.rows()).map(|i| z.at(i, 0).to_f64_lossy()).collect();
    let mut bits = vec![false; soft.len()];
    for i in tie_break_top_n(&soft, count)? {
        bits[i - 1] = true;
    }
    Ok(DecisionMask { bits, soft })
}

/// Every instance keeps exactly `counts[s]` patch tokens at stage `s`.
pub fn batch_adaptive_forward<T: Scalar>(
    images: &[Tensor<T>],
    bb: &Backbone<T>,
    tofe: &ToFe<T>,
    plan: &StagePlan,
    cfg: &ModelConfig,
    counts: &[usize],
) -> Result<Vec<InstanceOutput<T>>> {
    let n = cfg.num_patches();
    if counts.len() != plan.stages() {
        return Err(config(format!("{} keep counts for {} stages", counts.len(), plan.stages())));
    }
    if let Some(c) = counts.iter().find(|&&c| c == 0 || c > n) {
        return Err(contract("batch_adaptive_forward", format!("keep count {c} outside 1..={n}")).into());
    }
    images
        .iter()
        .map(|img| gather_forward(img, bb, tofe, plan, cfg, &mut |st, z| top_n_mask(z, counts[st])))
        .collect()
}

/// Dispatch on batch size: one image runs instance-adaptive, larger batches
/// run batch-adaptive and need the recorded keep counts.
pub fn adaptive_forward<T: Scalar>(
    images: &[Tensor<T>],
    bb: &Backbone<T>,
    tofe: &ToFe<T>,
    plan: &StagePlan,
    cfg: &ModelConfig,
    counts: Option<&[usize]>,
) -> Result<(InferenceMode, Vec<InstanceOutput<T>>)> {
    match images.len() {
        0 => Err(config("empty batch")),
        1 => Ok((
            InferenceMode::InstanceAdaptive,
            vec![instance_adaptive_forward(&images[0], bb, tofe, plan, cfg)?],
        )),
        _ => {
            let counts = counts.ok_or_else(|| config("batch-adaptive inference needs recorded keep counts"))?;
            Ok((
                InferenceMode::BatchAdaptive,
                batch_adaptive_forward(images, bb, tofe, plan, cfg, counts)?,
            ))
        }
    }
}

/// Mean use frequency per patch over `usages`, laid out `grid x grid`.
pub fn token_usage_map(usages: &[TokenUsage], grid: usize) -> Result<Tensor<f64>> {
    let first = usages.first().ok_or_else(|| config("no usage records"))?;
    if first.num_patches != grid * grid {
        return Err(config(format!("{} patches do not form a {grid}x{grid} grid", first.num_patches)));
    }
    let mut acc = vec![0.0; grid * grid];
    for u in usages {
        for (a, f) in acc.iter_mut().zip(u.frequency()) {
            *a += f as f64;
        }
    }
    let k = usages.len() as f64;
    Ok(Tensor::from_fn(&[grid, grid], |i| acc[i] / k))
}

/// Per stage `s >= 1`: tokens kept at `s` that were frozen at `s - 1`.
pub fn reused_tokens(masks: &[DecisionMask]) -> Vec<usize> {
    masks
        .windows(2)
        .map(|w| w[0].bits.iter().zip(&w[1].bits).filter(|(&a, &b)| !a && b).count())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform_tensor;
    use crate::vit::baseline_forward;

    fn tiny() -> (ModelConfig, StagePlan) {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            depth: 4,
            dim: 16,
            heads: 2,
            mlp_hidden: 32,
            num_classes: 3,
        };
        (cfg, StagePlan::new(vec![2, 3, 4], 4).unwrap())
    }

    fn model(keep_bias: f64) -> (ModelConfig, StagePlan, Backbone<f64>, ToFe<f64>) {
        let (cfg, plan) = tiny();
        let mut rng = Rng::seed(17);
        let bb = Backbone::init(&cfg, &mut rng);
        let tofe = ToFe::init(&cfg, &plan, &mut rng, keep_bias).unwrap();
        (cfg, plan, bb, tofe)
    }

    #[test]
    fn tie_break_cases() {
        assert_eq!(tie_break_top_n(&[0.5; 6], 3).unwrap(), vec![1, 2, 3]);
        assert_eq!(tie_break_top_n(&[0.1, 0.9, 0.3, 0.8], 2).unwrap(), vec![2, 4]);
        assert!(tie_break_top_n(&[0.1], 0).is_err());
        assert!(tie_break_top_n(&[0.1], 2).is_err());
    }

    #[test]
    fn keep_all_selector_matches_baseline() {
        let (cfg, plan, bb, tofe) = model(50.0);
        let img = uniform_tensor(&mut Rng::seed(1), &[1, 16, 16], 0.0, 1.0);
        let out = instance_adaptive_forward(&img, &bb, &tofe, &plan, &cfg).unwrap();
        assert_eq!(out.logits, baseline_forward(&img, &bb, &cfg).unwrap());
        assert!(out.masks.iter().all(|m| m.kept() == 16));
        assert_eq!(out.usage.frequency(), vec![4; 16]);
        assert_eq!(out.flops, instance_flops(&out.masks, &plan, &cfg).unwrap());
    }

    #[test]
    fn freeze_all_gives_unit_frequency_and_cls_floor() {
        let (cfg, plan, bb, tofe) = model(-50.0);
        let img = uniform_tensor(&mut Rng::seed(2), &[1, 16, 16], 0.0, 1.0);
        let out = instance_adaptive_forward(&img, &bb, &tofe, &plan, &cfg).unwrap();
        assert!(out.logits.all_finite());
        assert_eq!(out.usage.frequency(), vec![1; 16]);
        assert_eq!(out.flops.total, crate::flops::cls_floor_flops(&plan, &cfg));
    }

    #[test]
    fn batch_mode_full_counts_is_baseline_and_counts_are_exact() {
        let (cfg, plan, bb, tofe) = model(0.0);
        let mut rng = Rng::seed(3);
        let imgs: Vec<Tensor<f64>> = (0..3).map(|_| uniform_tensor(&mut rng, &[1, 16, 16], 0.0, 1.0)).collect();
        let full = batch_adaptive_forward(&imgs, &bb, &tofe, &plan, &cfg, &[16, 16, 16]).unwrap();
        for (o, img) in full.iter().zip(&imgs) {
            assert_eq!(o.logits, baseline_forward(img, &bb, &cfg).unwrap());
        }
        let part = batch_adaptive_forward(&imgs, &bb, &tofe, &plan, &cfg, &[9, 5, 2]).unwrap();
        for o in &part {
            let kept: Vec<usize> = o.masks.iter().map(|m| m.kept()).collect();
            assert_eq!(kept, vec![9, 5, 2]);
        }
        assert!(batch_adaptive_forward(&imgs, &bb, &tofe, &plan, &cfg, &[0, 5, 2]).is_err());
        assert!(batch_adaptive_forward(&imgs, &bb, &tofe, &plan, &cfg, &[17, 5, 2]).is_err());
    }

    #[test]
    fn identical_images_identical_outputs() {
        let (cfg, plan, bb, tofe) = model(0.0);
        let img = uniform_tensor(&mut Rng::seed(4), &[1, 16, 16], 0.0, 1.0);
        let outs = batch_adaptive_forward(&[img.clone(), img], &bb, &tofe, &plan, &cfg, &[8, 4, 2]).unwrap();
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn dispatch_on_batch_size() {
        let (cfg, plan, bb, tofe) = model(0.0);
        let img = uniform_tensor(&mut Rng::seed(5), &[1, 16, 16], 0.0, 1.0);
        let (mode, _) = adaptive_forward(&[img.clone()], &bb, &tofe, &plan, &cfg, None).unwrap();
        assert_eq!(mode, InferenceMode::InstanceAdaptive);
        assert!(adaptive_forward(&[img.clone(), img.clone()], &bb, &tofe, &plan, &cfg, None).is_err());
        let (mode, _) = adaptive_forward(&[img.clone(), img], &bb, &tofe, &plan, &cfg, Some(&[4, 4, 4])).unwrap();
        assert_eq!(mode, InferenceMode::BatchAdaptive);
    }

    #[test]
    fn reuse_and_usage_map() {
        let m = |b: &[u8]| DecisionMask::from_bits(b.iter().map(|&x| x == 1).collect());
        let masks = vec![m(&[1, 0, 0, 1]), m(&[0, 1, 1, 1]), m(&[1, 0, 0, 0])];
        assert_eq!(reused_tokens(&masks), vec![2, 1]);
        let usage = TokenUsage {
            kept: masks.iter().map(|m| m.kept_idx()).collect(),
            num_patches: 4,
            has_prefix: true,
        };
        assert_eq!(usage.frequency(), vec![3, 2, 2, 3]);
        let map = token_usage_map(&[usage], 2).unwrap();
        assert_eq!(map.data(), &[3.0, 2.0, 2.0, 3.0]);
        assert!(map.data().iter().all(|&f| (0.0..=4.0).contains(&f)));
    }
}
