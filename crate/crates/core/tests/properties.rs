use proptest::prelude::*;

use tofe_core::flops::{budget_loss, instance_flops};
use tofe_core::infer::{tie_break_top_n, TokenUsage};
use tofe_core::rng::uniform_tensor;
use tofe_core::tofe::{partition_tokens, rearrange_tokens, DecisionMask, StagePlan};
use tofe_core::train::total_loss_value;
use tofe_core::train::LossWeights;
use tofe_core::{Backbone, ModelConfig, Rng, Tensor};

fn matrix(seed: u64, rows: usize, cols: usize) -> Tensor<f64> {
    uniform_tensor(&mut Rng::seed(seed), &[rows, cols], -5.0, 5.0)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
        let y = matrix(seed, rows, cols).softmax_rows().unwrap();
        for i in 0..rows {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(y.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gather_scatter_round_trip(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..6) {
        let x = matrix(seed, rows, cols);
        let mut perm: Vec<usize> = (0..rows).collect();
        Rng::seed(seed ^ 1).shuffle(&mut perm);
        let g = x.gather_rows(&perm).unwrap();
        let back = Tensor::zeros(&[rows, cols]).scatter_rows(&perm, &g).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn partition_rearrange_round_trip(seed in any::<u64>(), bits in proptest::collection::vec(any::<bool>(), 16)) {
        let x = matrix(seed, 17, 4);
        let m = DecisionMask::from_bits(bits);
        let p = partition_tokens(&x, &m).unwrap();
        let back = rearrange_tokens(&p.kept, &p.frozen, &p.kept_idx, &p.frozen_idx).unwrap();
        prop_assert_eq!(back.row(0), x.row(0));
        prop_assert_eq!(back, x);
    }

    #[test]
    fn tie_break_picks_the_largest(scores in proptest::collection::vec(0u8..4, 1..20), frac in 0.0f64..1.0) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let count = 1 + ((s.len() - 1) as f64 * frac) as usize;
        let top = tie_break_top_n(&s, count).unwrap();
        prop_assert_eq!(top.len(), count);
        prop_assert!(top.windows(2).all(|w| w[0] < w[1]));
        let min_in = top.iter().map(|&i| s[i - 1]).fold(f64::INFINITY, f64::min);
        for i in 1..=s.len() {
            if !top.contains(&i) {
                prop_assert!(s[i - 1] <= min_in);
                // an excluded tie must come after every included tie
                if s[i - 1] == min_in {
                    prop_assert!(top.iter().filter(|&&j| s[j - 1] == min_in).all(|&j| j < i));
                }
            }
        }
    }

    #[test]
    fn budget_loss_nonnegative_and_zero_only_on_target(vals in proptest::collection::vec(-10.0f64..10.0, 1..10), t in -10.0f64..10.0) {
        let l = budget_loss(&vals, t).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, vals.iter().all(|&v| v == t));
    }

    #[test]
    fn total_loss_is_linear_in_weights(c in 0.0f64..5.0, a in 0.0f64..5.0, f in 0.0f64..5.0, k in 0.0f64..3.0) {
        let w1 = LossWeights { cls: 1.0, apr: 2.0, flops: 5.0 };
        let w2 = LossWeights { cls: 0.5, apr: 0.1, flops: 3.0 };
        let sum = LossWeights { cls: w1.cls + k * w2.cls, apr: w1.apr + k * w2.apr, flops: w1.flops + k * w2.flops };
        let lhs = total_loss_value(c, a, f, &sum);
        let rhs = total_loss_value(c, a, f, &w1) + k * total_loss_value(c, a, f, &w2);
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn instance_flops_report_is_consistent(bits in proptest::collection::vec(any::<bool>(), 3 * 64)) {
        let cfg = ModelConfig::default();
        let plan = StagePlan::default_for(8).unwrap();
        let masks: Vec<DecisionMask> = bits.chunks(64).map(|c| DecisionMask::from_bits(c.to_vec())).collect();
        let r = instance_flops(&masks, &plan, &cfg).unwrap();
        prop_assert_eq!(r.total, r.block_total() + r.overhead);
        prop_assert!(r.per_block.iter().all(|b| b.tokens >= 1));
    }

    #[test]
    fn usage_frequency_in_range(bits in proptest::collection::vec(any::<bool>(), 3 * 16)) {
        let masks: Vec<DecisionMask> = bits.chunks(16).map(|c| DecisionMask::from_bits(c.to_vec())).collect();
        let u = TokenUsage { kept: masks.iter().map(|m| m.kept_idx()).collect(), num_patches: 16, has_prefix: true };
        let f = u.frequency();
        prop_assert!(f.iter().all(|&v| (1..=4).contains(&v)));
    }
}

#[test]
fn identical_seed_identical_weights() {
    let cfg = ModelConfig::default();
    let a = Backbone::<f32>::init(&cfg, &mut Rng::seed(3));
    let b = Backbone::<f32>::init(&cfg, &mut Rng::seed(3));
    assert_eq!(a, b);
}
