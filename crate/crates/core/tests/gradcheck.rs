//! Central finite-difference checks for every differentiable op.

use tofe_core::gradcheck::{catalogue, run_case};
use tofe_core::rng::uniform_tensor;
use tofe_core::{Graph, Rng, Tensor};

fn rnd(seed: u64, shape: &[usize]) -> Tensor<f64> {
    uniform_tensor(&mut Rng::seed(seed), shape, -1.0, 1.0)
}

#[test]
fn every_catalogue_case_matches_the_oracle() {
    let mut failed = Vec::new();
    for case in catalogue() {
        let r = run_case(&case).unwrap();
        println!("{}: rel err f64 {:.2e}, f32 {:.2e}", r.name, r.err64, r.err32);
        if !r.passed() {
            failed.push(r);
        }
    }
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn catalogue_covers_ops_and_composites() {
    let names: Vec<&str> = catalogue().iter().map(|c| c.name).collect();
    for op in ["matmul", "softmax_rows", "layer_norm", "gelu", "gather_with_repeats", "scatter", "blend_rows_soft_mask"] {
        assert!(names.contains(&op), "{op}");
    }
    for composite in ["block_forward", "masked_block_forward", "end_to_end_toy_model"] {
        assert!(names.contains(&composite), "{composite}");
    }
}

#[test]
fn backward_linear_and_quadratic_cases() {
    let x = rnd(50, &[3, 4]);
    let mut g = Graph::<f64>::new();
    let v = g.param(x.clone());
    let s = g.sum_all(v);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut g = Graph::<f64>::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum_all(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &x.scale(2.0));
    // a second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &x.scale(4.0));
    g.zero_grad();
    assert!(g.grad(v).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let v = g.param(rnd(51, &[2, 2]));
    assert!(g.backward(v).is_err());
}

#[test]
fn straight_through_routes_gradient_to_soft() {
    let mut g = Graph::<f64>::new();
    let soft = g.param(Tensor::from_rows(&[&[0.3], &[0.8]]).unwrap());
    let hard = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
    let st = g.straight_through(hard.clone(), soft).unwrap();
    assert_eq!(g.value(st), &hard);
    let w = g.constant(Tensor::from_rows(&[&[2.0], &[-3.0]]).unwrap());
    let p = g.mul(st, w).unwrap();
    let l = g.sum_all(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(soft).unwrap().data(), &[2.0, -3.0]);
}

#[test]
fn non_finite_values_are_reported() {
    let mut g = Graph::<f32>::new();
    let v = g.param(Tensor::from_rows(&[&[f32::MAX, f32::MAX]]).unwrap());
    let s = g.sum_all(v);
    assert!(g.check_finite().is_err());
    assert!(g.backward(s).is_err());
}
