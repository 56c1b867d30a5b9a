//! Finite-difference gradient checks for every tape op and for the composed
//! four-block network, shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use mtl_core::models::{
    features_on_tape, BlockVars, BnMode, ExtractorConfig, ExtractorVars, FeatureExtractor, SsVars,
};
use mtl_core::{Rng, Tape, Tensor, Var};

use super::common::{central_difference, max_rel_err, rand_tensor, rng, weighted_sum};

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    /// Inputs for one seed.
    pub inputs: Box<dyn Fn(u64) -> Vec<Tensor>>,
    pub build: Build,
    pub h: f64,
}

/// max over input tensors of ‖auto − fd‖ / ‖fd‖. The denominator is floored
/// at 1e-3 of the whole gradient's norm, so tensors whose true gradient
/// vanishes (a conv bias feeding batch statistics) are judged against the
/// gradient scale instead of finite-difference round-off.
pub fn tensor_rel_err(auto: &[Vec<f64>], fd: &[Vec<f64>]) -> f64 {
    let global = fd.iter().flatten().map(|y| y * y).sum::<f64>().sqrt();
    let floor = (1e-3 * global).max(1e-12);
    auto.iter()
        .zip(fd)
        .map(|(a, n)| {
            let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let norm = n.iter().map(|y| y * y).sum::<f64>().sqrt();
            diff / norm.max(floor)
        })
        .fold(0.0, f64::max)
}

pub struct Errors {
    /// max |auto − fd| / (|fd| + 1e-8) over elements.
    pub elementwise: f64,
    /// [`tensor_rel_err`].
    pub tensorwise: f64,
}

pub fn check(case: &Case, seed: u64) -> f64 {
    check_both(case, seed).tensorwise
}

pub fn check_both(case: &Case, seed: u64) -> Errors {
    let inputs = (case.inputs)(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = (case.build)(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let auto: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    let f = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x)).collect();
        let l = (case.build)(&mut t, &vs);
        t.value(l).item().unwrap()
    };
    let fd = central_difference(&f, &inputs, case.h);
    Errors {
        elementwise: max_rel_err(&auto, &fd),
        tensorwise: tensor_rel_err(&auto, &fd),
    }
}

fn shapes(shapes: &'static [&'static [usize]]) -> Box<dyn Fn(u64) -> Vec<Tensor>> {
    Box::new(move |seed| {
        let mut r = rng(seed);
        shapes.iter().map(|s| rand_tensor(&mut r, s, 1.0)).collect()
    })
}

fn positive(shapes_: &'static [&'static [usize]]) -> Box<dyn Fn(u64) -> Vec<Tensor>> {
    let base = shapes(shapes_);
    Box::new(move |seed| base(seed).into_iter().map(|t| t.map(|v| v.abs() + 0.5)).collect())
}

fn case(name: &'static str, inputs: Box<dyn Fn(u64) -> Vec<Tensor>>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
        h: 1e-6,
    }
}

fn ws(t: &mut Tape, v: Var) -> Var {
    weighted_sum(t, v, 11)
}

pub fn op_cases() -> Vec<Case> {
    const M34: &[&[usize]] = &[&[3, 4], &[3, 4]];
    vec![
        case("add", shapes(M34), |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            ws(t, y)
        }),
        case("sub", shapes(M34), |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            ws(t, y)
        }),
        case("mul", shapes(M34), |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            ws(t, y)
        }),
        case(
            "div",
            Box::new(|seed| {
                let mut r = rng(seed);
                vec![rand_tensor(&mut r, &[3, 4], 1.0), rand_tensor(&mut r, &[3, 4], 1.0).map(|v| v.abs() + 0.5)]
            }),
            |t, v| {
                let y = t.div(v[0], v[1]).unwrap();
                ws(t, y)
            },
        ),
        case("scale", shapes(&[&[3, 4]]), |t, v| {
            let y = t.scale(v[0], -1.7).unwrap();
            ws(t, y)
        }),
        case("add_const", shapes(&[&[3, 4]]), |t, v| {
            let y = t.add_const(v[0], 0.3).unwrap();
            let y = t.mul(y, y).unwrap();
            ws(t, y)
        }),
        case("mul_const", shapes(&[&[2, 3]]), |t, v| {
            let y = t.mul_const(v[0], vec![1.0, 0.0, 2.0, -1.0, 0.5, 3.0]).unwrap();
            ws(t, y)
        }),
        case("mul_scalar", shapes(&[&[3, 4], &[1]]), |t, v| {
            let y = t.mul_scalar(v[0], v[1]).unwrap();
            ws(t, y)
        }),
        case("matmul", shapes(&[&[3, 4], &[4, 2]]), |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            ws(t, y)
        }),
        case("transpose", shapes(&[&[3, 4]]), |t, v| {
            let y = t.transpose(v[0]).unwrap();
            ws(t, y)
        }),
        case("add_row_vec", shapes(&[&[3, 4], &[4]]), |t, v| {
            let y = t.add_row_vec(v[0], v[1]).unwrap();
            let y = t.mul(y, y).unwrap();
            ws(t, y)
        }),
        case("sum_rows", shapes(&[&[3, 4]]), |t, v| {
            let y = t.sum_rows(v[0]).unwrap();
            let y = t.mul(y, y).unwrap();
            ws(t, y)
        }),
        case("broadcast_rows", shapes(&[&[4]]), |t, v| {
            let y = t.broadcast_rows(v[0], 3).unwrap();
            ws(t, y)
        }),
        case("row_sum", shapes(&[&[3, 4]]), |t, v| {
            let y = t.row_sum(v[0]).unwrap();
            let y = t.mul(y, y).unwrap();
            ws(t, y)
        }),
        case("broadcast_cols", shapes(&[&[3, 1]]), |t, v| {
            let y = t.broadcast_cols(v[0], 5).unwrap();
            ws(t, y)
        }),
        case("sum_all", shapes(&[&[3, 4]]), |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.sum_all(y).unwrap()
        }),
        case("expand", shapes(&[&[1]]), |t, v| {
            let y = t.expand(v[0], &[2, 3]).unwrap();
            let y = t.mul(y, y).unwrap();
            ws(t, y)
        }),
        case("reshape", shapes(&[&[3, 4]]), |t, v| {
            let y = t.reshape(v[0], &[2, 6]).unwrap();
            ws(t, y)
        }),
        case("sqrt", positive(&[&[3, 4]]), |t, v| {
            let y = t.sqrt(v[0]).unwrap();
            ws(t, y)
        }),
        case("relu", shapes(&[&[4, 5]]), |t, v| {
            let y = t.relu(v[0]).unwrap();
            ws(t, y)
        }),
        case("softmax", shapes(&[&[3, 5]]), |t, v| {
            let y = t.softmax(v[0]).unwrap();
            ws(t, y)
        }),
        case("softmax_cross_entropy", shapes(&[&[4, 5]]), |t, v| {
            let s = t.scale(v[0], 3.0).unwrap();
            t.softmax_cross_entropy(s, &[0, 4, 2, 2]).unwrap()
        }),
        case("conv2d", shapes(&[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]]), |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            ws(t, y)
        }),
        case("conv2d_stride2", shapes(&[&[1, 2, 6, 5], &[3, 2, 3, 3], &[3]]), |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 0).unwrap();
            ws(t, y)
        }),
        case("max_pool2d", shapes(&[&[2, 3, 4, 6]]), |t, v| {
            let y = t.max_pool2d(v[0]).unwrap();
            ws(t, y)
        }),
        case("mean_pool", shapes(&[&[2, 3, 4, 4]]), |t, v| {
            let y = t.mean_pool(v[0]).unwrap();
            let y = t.mul(y, y).unwrap();
            ws(t, y)
        }),
        case("batch_norm", shapes(&[&[3, 2, 3, 3], &[2], &[2]]), |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
            ws(t, y)
        }),
        case("batch_norm_2d", shapes(&[&[5, 3], &[3], &[3]]), |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
            ws(t, y)
        }),
        case("batch_norm_frozen", shapes(&[&[2, 2, 3, 3], &[2], &[2]]), |t, v| {
            let y = t.batch_norm_frozen(v[0], v[1], v[2], &[0.2, -0.1], &[0.5, 2.0], 1e-5).unwrap();
            ws(t, y)
        }),
        case("filter_scale", shapes(&[&[4, 2, 3, 3], &[4]]), |t, v| {
            let y = t.filter_scale(v[0], v[1]).unwrap();
            ws(t, y)
        }),
    ]
}

fn small_extractor(seed: u64) -> FeatureExtractor {
    let cfg = ExtractorConfig {
        in_channels: 3,
        filters: 3,
        blocks: 4,
        kernel: 3,
    };
    let mut ex = FeatureExtractor::init(&cfg, &mut Rng::new(seed));
    let mut r = rng(seed ^ 0x5eed);
    for b in ex.blocks_mut() {
        b.running_mean = rand_tensor(&mut r, &[3], 0.3);
        b.running_var = rand_tensor(&mut r, &[3], 0.5).map(|v| v.abs() + 0.5);
        b.bn_gamma = rand_tensor(&mut r, &[3], 0.5).map(|v| v + 1.0);
        b.bn_beta = rand_tensor(&mut r, &[3], 0.3);
    }
    ex
}

/// The full stack: four conv/BN/ReLU/pool blocks with scale/shift, mean
/// pooling, a linear head and cross-entropy. Every parameter, the SS scalars
/// and the input are checked.
pub fn network_case(bn: BnMode) -> Case {
    let template = small_extractor(0);
    let build_template = template.clone();
    Case {
        name: match bn {
            BnMode::Batch => "network_batch_bn",
            BnMode::Running => "network_running_bn",
        },
        inputs: Box::new(move |seed| {
            let ex = small_extractor(seed);
            let mut r = rng(seed);
            let mut v = vec![rand_tensor(&mut r, &[3, 3, 8, 8], 1.0)];
            for b in ex.blocks() {
                v.extend([b.weight.clone(), b.bias.clone(), b.bn_gamma.clone(), b.bn_beta.clone()]);
            }
            for _ in 0..4 {
                v.push(rand_tensor(&mut r, &[3], 0.3).map(|x| x + 1.0));
            }
            for _ in 0..4 {
                v.push(rand_tensor(&mut r, &[3], 0.3));
            }
            v.push(rand_tensor(&mut r, &[3, 3], 1.0));
            v.push(rand_tensor(&mut r, &[3], 0.1));
            v
        }),
        build: Box::new(move |t, v| {
            let blocks = (0..4)
                .map(|i| BlockVars {
                    weight: v[1 + 4 * i],
                    bias: v[2 + 4 * i],
                    gamma: v[3 + 4 * i],
                    beta: v[4 + 4 * i],
                })
                .collect();
            let ss = SsVars {
                scale: v[17..21].to_vec(),
                shift: v[21..25].to_vec(),
            };
            let (emb, _) = features_on_tape(t, v[0], &build_template, &ExtractorVars { blocks }, Some(&ss), bn).unwrap();
            let z = t.matmul(emb, v[25]).unwrap();
            let z = t.add_row_vec(z, v[26]).unwrap();
            t.softmax_cross_entropy(z, &[0, 1, 2]).unwrap()
        }),
        h: 1e-6,
    }
}

pub fn network_cases() -> Vec<Case> {
    vec![network_case(BnMode::Batch), network_case(BnMode::Running)]
}

pub fn all_cases() -> Vec<Case> {
    let mut c = op_cases();
    c.extend(network_cases());
    c
}

/// Worst error per case over `seeds`: element-wise for single ops,
/// tensor-wise for the composed network.
pub fn run_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let ops = op_cases()
        .into_iter()
        .map(|c| (c.name, (0..seeds).map(|s| check_both(&c, s).elementwise).fold(0.0, f64::max)));
    let nets = network_cases()
        .into_iter()
        .map(|c| (c.name, (0..seeds).map(|s| check_both(&c, s).tensorwise).fold(0.0, f64::max)));
    ops.chain(nets).collect()
}
