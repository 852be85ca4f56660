//! Central finite-difference oracle and the catalogue of checked ops.
//!
//! The oracle always runs in `f64` with step `1e-6`; autodiff runs at both
//! widths. Outputs are scalarised with fixed random weights so every output
//! element contributes.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::{uniform_tensor, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{backbone_forward, block_forward, Backbone, ModelConfig};

pub const STEP: f64 = 1e-6;
pub const TOL32: f64 = 1e-3;

pub type CaseFn<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub tol64: f64,
    pub f64: CaseFn<f64>,
    pub f32: CaseFn<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub name: &'static str,
    pub err64: f64,
    pub err32: f64,
    pub tol64: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.err64 < self.tol64 && self.err32 < TOL32
    }
}

fn project<T: Scalar>(g: &mut Graph<T>, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w: Tensor<f64> = uniform_tensor(&mut Rng::seed(99), &shape, -1.0, 1.0);
    let w = g.constant(w.cast());
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

fn autodiff<T: Scalar>(inputs: &[Tensor<f64>], f: &CaseFn<T>) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|x| x.cast()).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

fn numeric(inputs: &[Tensor<f64>], f: &CaseFn<f64>) -> Result<Vec<Tensor<f64>>> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = project(&mut g, out)?;
        Ok(g.value(loss).item())
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for (k, t) in inputs.iter().enumerate() {
        let mut grad = Tensor::zeros(t.shape());
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            grad.data_mut()[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Largest absolute gap relative to the largest oracle magnitude.
pub fn max_rel(got: &[Tensor<f64>], oracle: &[Tensor<f64>]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in got.iter().zip(oracle) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            num = num.max((p - q).abs());
            den = den.max(q.abs());
        }
    }
    num / den.max(1e-12)
}

pub fn run_case(case: &GradCase) -> Result<GradResult> {
    let oracle = numeric(&case.inputs, &case.f64)?;
    Ok(GradResult {
        name: case.name,
        err64: max_rel(&autodiff(&case.inputs, &case.f64)?, &oracle),
        err32: max_rel(&autodiff(&case.inputs, &case.f32)?, &oracle),
        tol64: case.tol64,
    })
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

fn rnd(seed: u64, shape: &[usize]) -> Tensor<f64> {
    uniform_tensor(&mut Rng::seed(seed), shape, -1.0, 1.0)
}

fn rnd_range(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    uniform_tensor(&mut Rng::seed(seed), shape, lo, hi)
}

macro_rules! case {
    ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
        case!($name, $inputs, 1e-6, |$g, $v| $body)
    };
    ($name:expr, $inputs:expr, $tol:expr, |$g:ident, $v:ident| $body:expr) => {
        GradCase {
            name: $name,
            inputs: $inputs,
            tol64: $tol,
            f64: Box::new(|$g: &mut Graph<f64>, $v: &[Var]| Ok($body)),
            f32: Box::new(|$g: &mut Graph<f32>, $v: &[Var]| Ok($body)),
        }
    };
}

/// Toy model for the composed cases: L = 2, D = 8, N = 4.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_hidden: 16,
        num_classes: 3,
    }
}

fn block_case<T: Scalar>(g: &mut Graph<T>, v: &[Var], params: &Backbone<f64>, cfg: &ModelConfig) -> Result<Var> {
    let p = params.map(&mut |t| g.constant(t.cast()));
    let mut blk = p.blocks[0].clone();
    blk.qkv.weight = v[1];
    blk.fc1.weight = v[2];
    blk.norm1.gain = v[3];
    block_forward(g, v[0], &blk, cfg, None)
}

fn masked_block_case<T: Scalar>(
    g: &mut Graph<T>,
    v: &[Var],
    params: &Backbone<f64>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let p = params.map(&mut |t| g.constant(t.cast()));
    block_forward(g, v[0], &p.blocks[1], cfg, Some(v[1]))
}

fn model_case<T: Scalar>(
    g: &mut Graph<T>,
    v: &[Var],
    params: &Backbone<f64>,
    cfg: &ModelConfig,
    image: &Tensor<f64>,
) -> Result<Var> {
    let mut p = params.map(&mut |t| g.constant(t.cast()));
    p.patch.weight = v[0];
    p.pos = v[1];
    p.blocks[0].proj.weight = v[2];
    p.blocks[1].fc2.weight = v[3];
    p.head.weight = v[4];
    let (logits, _) = backbone_forward(g, &image.cast(), &p, cfg)?;
    Ok(g.cross_entropy(logits, &[1])?)
}

/// Every differentiable op, then a block, a masked block and the whole toy
/// model.
pub fn catalogue() -> Vec<GradCase> {
    let mut cases = vec![
        case!("matmul", vec![rnd(1, &[3, 4]), rnd(2, &[4, 5])], |g, v| g.matmul(v[0], v[1])?),
        case!("matmul_square_self", vec![rnd(3, &[4, 4])], |g, v| g.matmul(v[0], v[0])?),
        case!("softmax_rows", vec![rnd(4, &[3, 6])], |g, v| g.softmax_rows(v[0])?),
        case!(
            "masked_softmax_scores_and_mask",
            vec![rnd(5, &[5, 5]), rnd_range(6, &[5, 1], 0.2, 1.0)],
            |g, v| g.masked_softmax_rows(v[0], v[1])?
        ),
        case!("masked_softmax_hard_mask", vec![rnd(7, &[4, 4])], |g, v| {
            let (one, zero) = (c(1.0), c(0.0));
            let m = g.constant(Tensor::new(vec![4, 1], vec![one, zero, one, zero])?);
            g.masked_softmax_rows(v[0], m)?
        }),
        case!("log_softmax_rows", vec![rnd(8, &[3, 5])], |g, v| g.log_softmax_rows(v[0])?),
        case!("layer_norm", vec![rnd(9, &[4, 6]), rnd(10, &[6]), rnd(11, &[6])], |g, v| g
            .layer_norm(v[0], v[1], v[2], c(1e-6))?),
        case!("gelu", vec![rnd_range(12, &[3, 7], -3.0, 3.0)], |g, v| g.gelu(v[0])),
        case!(
            "relu_away_from_kink",
            vec![Tensor::from_rows(&[&[-0.7, 0.3, 1.2], &[0.5, -0.2, -1.1]]).expect("fixed shape")],
            |g, v| g.relu(v[0])
        ),
        case!("add_sub_mul", vec![rnd(13, &[3, 3]), rnd(14, &[3, 3])], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(v[0], v[1])?;
            g.mul(a, b)?
        }),
        case!("scale_add_scalar", vec![rnd(15, &[2, 3])], |g, v| {
            let a = g.scale(v[0], c(-2.5));
            g.add_scalar(a, c(0.75))
        }),
        case!("add_row_vector", vec![rnd(16, &[4, 3]), rnd(17, &[3])], |g, v| g.add_row_vector(v[0], v[1])?),
        case!("transpose", vec![rnd(18, &[3, 5])], |g, v| g.transpose(v[0])?),
        case!(
            "concat_rows_cols",
            vec![rnd(19, &[2, 3]), rnd(20, &[4, 3]), rnd(21, &[6, 2])],
            |g, v| {
                let r = g.concat_rows(&[v[0], v[1]])?;
                g.concat_cols(&[r, v[2]])?
            }
        ),
        case!("slices", vec![rnd(22, &[5, 6])], |g, v| {
            let a = g.slice_rows(v[0], 1, 3)?;
            g.slice_cols(a, 2, 3)?
        }),
        case!("gather_with_repeats", vec![rnd(23, &[5, 3])], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2])?),
        case!("scatter", vec![rnd(24, &[5, 3]), rnd(25, &[2, 3])], |g, v| g.scatter_rows(v[0], &[3, 1], v[1])?),
        case!("reductions", vec![rnd(26, &[3, 4])], |g, v| {
            let rows = g.sum_rows(v[0])?;
            let total = g.sum_all(v[0]);
            let mean = g.mean_all(v[0]);
            let sq = g.mul(rows, rows)?;
            let t = g.mul(total, mean)?;
            let s = g.sum_all(sq);
            g.add(s, t)?
        }),
        case!(
            "blend_rows_soft_mask",
            vec![rnd_range(27, &[4, 1], 0.1, 0.9), rnd(28, &[4, 3]), rnd(29, &[4, 3])],
            |g, v| g.blend_rows(v[0], v[1], v[2])?
        ),
        case!("cross_entropy", vec![rnd(30, &[3, 5])], |g, v| g.cross_entropy(v[0], &[4, 0, 2])?),
        case!("reshape", vec![rnd(31, &[2, 6])], |g, v| {
            let r = g.reshape(v[0], &[3, 4])?;
            g.mul(r, r)?
        }),
        case!(
            "composed_mlp",
            vec![rnd(32, &[4, 6]), rnd(33, &[6, 8]), rnd(34, &[8]), rnd(35, &[8, 3]), rnd(36, &[3])],
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_row_vector(h, v[2])?;
                let h = g.gelu(h);
                let o = g.matmul(h, v[3])?;
                let o = g.add_row_vector(o, v[4])?;
                g.cross_entropy(o, &[0, 2, 1, 1])?
            }
        ),
    ];

    let cfg = toy_config();
    let params = Backbone::<f64>::init(&cfg, &mut Rng::seed(40));
    let blk = &params.blocks[0];
    let inputs = vec![rnd(41, &[5, 8]), blk.qkv.weight.clone(), blk.fc1.weight.clone(), blk.norm1.gain.clone()];
    let (p1, p2) = (params.clone(), params.clone());
    cases.push(GradCase {
        name: "block_forward",
        inputs,
        tol64: 1e-6,
        f64: Box::new(move |g, v| block_case(g, v, &p1, &cfg)),
        f32: Box::new(move |g, v| block_case(g, v, &p2, &cfg)),
    });

    let params = Backbone::<f64>::init(&cfg, &mut Rng::seed(42));
    let (p1, p2) = (params.clone(), params);
    cases.push(GradCase {
        name: "masked_block_forward",
        inputs: vec![rnd(43, &[5, 8]), rnd_range(44, &[5, 1], 0.3, 1.0)],
        tol64: 1e-6,
        f64: Box::new(move |g, v| masked_block_case(g, v, &p1, &cfg)),
        f32: Box::new(move |g, v| masked_block_case(g, v, &p2, &cfg)),
    });

    let params = Backbone::<f64>::init(&cfg, &mut Rng::seed(45));
    let image = rnd_range(46, &[1, 8, 8], 0.0, 1.0);
    let inputs = vec![
        params.patch.weight.clone(),
        params.pos.clone(),
        params.blocks[0].proj.weight.clone(),
        params.blocks[1].fc2.weight.clone(),
        params.head.weight.clone(),
    ];
    let (p1, p2, i1, i2) = (params.clone(), params, image.clone(), image);
    cases.push(GradCase {
        name: "end_to_end_toy_model",
        inputs,
        tol64: 1e-5,
        f64: Box::new(move |g, v| model_case(g, v, &p1, &cfg, &i1)),
        f32: Box::new(move |g, v| model_case(g, v, &p2, &cfg, &i2)),
    });
    cases
}
