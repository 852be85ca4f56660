//! The masked training form and the gather-form inference engine must agree
//! on `[CLS]` logits and on every kept row, for any fixed hard masks.

use tofe_core::infer::forward_with_masks;
use tofe_core::rng::{normal_tensor, uniform_tensor};
use tofe_core::tofe::{DecisionMask, StagePlan, ToFe};
use tofe_core::train::{masked_stage_forward, MaskSource};
use tofe_core::{rel_diff, Backbone, Graph, ModelConfig, Module, Rng, Scalar, Tensor};

fn toy() -> (ModelConfig, StagePlan) {
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        depth: 6,
        dim: 16,
        heads: 2,
        mlp_hidden: 64,
        num_classes: 5,
    };
    (cfg, StagePlan::new(vec![2, 4, 6], 6).unwrap())
}

fn random_model(cfg: &ModelConfig, plan: &StagePlan, rng: &mut Rng) -> (Backbone<f64>, ToFe<f64>) {
    let bb = Backbone::init(cfg, rng);
    let mut tofe = ToFe::init(cfg, plan, rng, 0.0).unwrap();
    // make the zero-initialised approximator outputs nontrivial
    for p in tofe.leaves_mut() {
        *p = p.add(&normal_tensor(rng, p.shape(), 0.1)).unwrap();
    }
    (bb, tofe)
}

fn random_masks(rng: &mut Rng, n: usize, stages: usize) -> Vec<DecisionMask> {
    (0..stages)
        .map(|_| {
            let p = rng.uniform();
            DecisionMask::from_bits((0..n).map(|_| rng.uniform() < p).collect())
        })
        .collect()
}

/// Worst relative gap over logits and kept rows.
fn compare<T: Scalar>(
    bb: &Backbone<f64>,
    tofe: &ToFe<f64>,
    img: &Tensor<f64>,
    masks: &[DecisionMask],
    cfg: &ModelConfig,
    plan: &StagePlan,
) -> f64 {
    let bb: Backbone<T> = bb.map(&mut |t| t.cast());
    let tofe: ToFe<T> = tofe.map(&mut |t| t.cast());
    let img: Tensor<T> = img.cast();
    let gathered = forward_with_masks(&img, &bb, &tofe, plan, cfg, masks).unwrap();

    let mut g = Graph::new();
    let b = bb.bind(&mut g, false);
    let t = tofe.bind(&mut g, false);
    let masked = masked_stage_forward(&mut g, &img, &b, &t, plan, cfg, MaskSource::Fixed(masks)).unwrap();

    let mut worst = rel_diff(g.value(masked.logits), &gathered.logits);
    for (s, m) in masks.iter().enumerate() {
        let rows = g.value(masked.boundaries[s]).gather_rows(&m.kept_rows()).unwrap();
        worst = worst.max(rel_diff(&rows, &gathered.stage_kept[s]));
    }
    worst
}

#[test]
fn masked_and_gather_forms_agree_on_random_triples() {
    let (cfg, plan) = toy();
    let mut rng = Rng::seed(2024);
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (bb, tofe) = random_model(&cfg, &plan, &mut rng);
        let img = uniform_tensor(&mut rng, &[1, 16, 16], 0.0, 1.0);
        let masks = random_masks(&mut rng, cfg.num_patches(), plan.stages());
        w64 = w64.max(compare::<f64>(&bb, &tofe, &img, &masks, &cfg, &plan));
        w32 = w32.max(compare::<f32>(&bb, &tofe, &img, &masks, &cfg, &plan));
    }
    println!("worst rel gap: f32 {w32:.2e}, f64 {w64:.2e}");
    assert!(w32 < 1e-5, "f32 {w32:e}");
    assert!(w64 < 1e-10, "f64 {w64:e}");
}

#[test]
fn frozen_inputs_get_exactly_zero_gradient_from_kept_outputs() {
    let (cfg, plan) = toy();
    let mut rng = Rng::seed(7);
    let (bb, _) = random_model(&cfg, &plan, &mut rng);
    let n = cfg.num_patches();
    let mask = DecisionMask::from_bits((0..n).map(|i| i % 3 != 0).collect());
    let mut g = Graph::<f64>::new();
    let b = bb.blocks[0].map(&mut |t| g.constant(t.clone()));
    let x = g.param(uniform_tensor(&mut rng, &[n + 1, cfg.dim], -1.0, 1.0));
    let col = g.constant(mask.full_column());
    let y = tofe_core::train::masked_attention(&mut g, x, col, &b, &cfg).unwrap();
    let kept = g.gather_rows(y, &mask.kept_rows()).unwrap();
    let w = g.constant(uniform_tensor(&mut rng, &[mask.kept() + 1, cfg.dim], -1.0, 1.0));
    let p = g.mul(kept, w).unwrap();
    let loss = g.sum_all(p);
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    for &i in &mask.frozen_idx() {
        assert!(grad.row(i).iter().all(|&d| d == 0.0), "row {i}");
    }
    for &i in &mask.kept_rows() {
        assert!(grad.row(i).iter().any(|&d| d != 0.0));
    }
}
