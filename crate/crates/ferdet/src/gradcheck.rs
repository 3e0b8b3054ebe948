//! Finite-difference gradient verification for every differentiable
//! operator. Each registered check builds a small f64 graph on random
//! inputs, reduces the output to a scalar through a fixed weighting, and
//! compares analytic gradients against central differences.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops;
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

/// Outcome of one operator check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub op: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Builder = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Deterministic non-uniform weights so symmetric gradient errors can't
/// cancel in the reduction.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 + ((i as u64).wrapping_mul(2654435761) % 1000) as f64 / 1000.0)
        .collect()
}

fn scalar_loss(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let t = g.value(out);
    if t.numel() == 1 && t.rank() == 0 {
        return Ok(out);
    }
    let w = Tensor::new(t.shape().to_vec(), probe_weights(t.numel()))?;
    let wv = g.constant(w);
    let prod = ops::mul(g, out, wv)?;
    ops::sum_all(g, prod)
}

fn loss_value(inputs: &[Tensor<f64>], build: &Builder) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let loss = scalar_loss(&mut g, out)?;
    Ok(g.value(loss).data()[0])
}

/// Runs one check: analytic gradients from one backward pass versus
/// central differences with step `1e-4` per input element.
pub fn run_check(name: &str, inputs: &[Tensor<f64>], build: &Builder) -> Result<CheckResult> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let loss = scalar_loss(&mut g, out)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut max_rel = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let numeric = (loss_value(&plus, build)? - loss_value(&minus, build)?) / (2.0 * FD_STEP);
            let ga = analytic[ti].data()[ei];
            let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(CheckResult {
        op: name.to_string(),
        max_rel_err: max_rel,
        passed: max_rel < REL_TOL,
    })
}

/// All registered operator checks, in a stable order.
pub fn registry() -> Vec<(&'static str, Box<dyn Fn() -> Result<CheckResult>>)> {
    let mut reg: Vec<(&'static str, Box<dyn Fn() -> Result<CheckResult>>)> = Vec::new();
    macro_rules! entry {
        ($name:literal, $inputs:expr, $build:expr) => {
            reg.push((
                $name,
                Box::new(move || {
                    let inputs = $inputs;
                    run_check($name, &inputs, &$build)
                }),
            ));
        };
    }

    let mk = |seed: u64| ChaCha8Rng::seed_from_u64(seed);

    entry!(
        "add",
        {
            let mut r = mk(1);
            vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0), rand_tensor(&mut r, &[2, 3], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::add(g, v[0], v[1])
    );
    entry!(
        "sub",
        {
            let mut r = mk(2);
            vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0), rand_tensor(&mut r, &[2, 3], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::sub(g, v[0], v[1])
    );
    entry!(
        "mul",
        {
            let mut r = mk(3);
            vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0), rand_tensor(&mut r, &[2, 3], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::mul(g, v[0], v[1])
    );
    entry!(
        "mul_bcast",
        {
            let mut r = mk(4);
            vec![
                rand_tensor(&mut r, &[2, 3, 2, 2], -1.0, 1.0),
                rand_tensor(&mut r, &[2, 3, 1, 1], -1.0, 1.0),
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::mul_bcast(g, v[0], v[1])
    );
    entry!(
        "scale",
        {
            let mut r = mk(5);
            vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::scale(g, v[0], -1.7)
    );
    // keep relu inputs away from the kink at zero
    entry!(
        "relu",
        {
            let mut r = mk(6);
            let mut t = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
            t.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            });
            vec![t]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::relu(g, v[0])
    );
    entry!(
        "sigmoid",
        {
            let mut r = mk(7);
            vec![rand_tensor(&mut r, &[3, 3], -3.0, 3.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::sigmoid(g, v[0])
    );
    entry!(
        "silu",
        {
            let mut r = mk(8);
            vec![rand_tensor(&mut r, &[3, 3], -3.0, 3.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::silu(g, v[0])
    );
    entry!(
        "exp",
        {
            let mut r = mk(9);
            vec![rand_tensor(&mut r, &[3, 3], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::exp(g, v[0])
    );
    entry!(
        "softplus",
        {
            let mut r = mk(10);
            vec![rand_tensor(&mut r, &[3, 3], -3.0, 3.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::softplus(g, v[0])
    );
    entry!(
        "softmax",
        {
            let mut r = mk(11);
            vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::softmax(g, v[0])
    );
    entry!(
        "mean_all",
        {
            let mut r = mk(12);
            vec![rand_tensor(&mut r, &[2, 5], -2.0, 2.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::mean_all(g, v[0])
    );
    entry!(
        "linear",
        {
            let mut r = mk(13);
            vec![
                rand_tensor(&mut r, &[3, 4], -1.0, 1.0),
                rand_tensor(&mut r, &[2, 4], -1.0, 1.0),
                rand_tensor(&mut r, &[2], -1.0, 1.0),
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::linear(g, v[0], v[1], Some(v[2]))
    );
    entry!(
        "conv2d",
        {
            let mut r = mk(14);
            vec![
                rand_tensor(&mut r, &[1, 2, 5, 5], -1.0, 1.0),
                rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
                rand_tensor(&mut r, &[3], -1.0, 1.0),
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::conv2d(g, v[0], v[1], Some(v[2]), 2, 1, 1)
    );
    entry!(
        "conv2d_depthwise",
        {
            let mut r = mk(15);
            vec![
                rand_tensor(&mut r, &[1, 4, 4, 4], -1.0, 1.0),
                rand_tensor(&mut r, &[4, 1, 3, 3], -1.0, 1.0),
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::conv2d(g, v[0], v[1], None, 1, 1, 4)
    );
    entry!(
        "layer_norm",
        {
            let mut r = mk(16);
            vec![
                rand_tensor(&mut r, &[2, 5, 2, 2], -2.0, 2.0),
                rand_tensor(&mut r, &[5], 0.5, 1.5),
                rand_tensor(&mut r, &[5], -0.5, 0.5),
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::layer_norm(g, v[0], v[1], v[2], 1e-5)
    );
    entry!(
        "global_avg_pool",
        {
            let mut r = mk(17);
            vec![rand_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::global_avg_pool(g, v[0])
    );
    entry!(
        "max_pool",
        {
            let mut r = mk(18);
            vec![rand_tensor(&mut r, &[1, 2, 4, 4], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::max_pool(g, v[0], 2, 2)
    );
    entry!(
        "nearest_upsample",
        {
            let mut r = mk(19);
            vec![rand_tensor(&mut r, &[1, 2, 3, 3], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::nearest_upsample(g, v[0], 2)
    );
    entry!(
        "reshape",
        {
            let mut r = mk(20);
            vec![rand_tensor(&mut r, &[2, 6], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::reshape(g, v[0], &[3, 4])
    );
    entry!(
        "permute",
        {
            let mut r = mk(21);
            vec![rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::permute(g, v[0], &[2, 0, 1])
    );
    entry!(
        "concat_channels",
        {
            let mut r = mk(22);
            vec![
                rand_tensor(&mut r, &[1, 2, 2, 2], -1.0, 1.0),
                rand_tensor(&mut r, &[1, 3, 2, 2], -1.0, 1.0),
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| ops::concat_channels(g, &[v[0], v[1]])
    );
    entry!(
        "split_channels",
        {
            let mut r = mk(23);
            vec![rand_tensor(&mut r, &[1, 4, 2, 2], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| {
            let parts = ops::split_channels(g, v[0], 2)?;
            // reduce both halves so every input element matters
            let a = ops::scale(g, parts[0], 2.0)?;
            ops::add(g, a, parts[1])
        }
    );
    entry!(
        "gather_scatter_spatial",
        {
            let mut r = mk(24);
            vec![rand_tensor(&mut r, &[1, 2, 2, 3], -1.0, 1.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| {
            let order = Rc::new(crate::oss::build_direction_map(
                crate::oss::Direction::DiagFwd,
                2,
                3,
            )?);
            let seq = ops::gather_spatial(g, v[0], order.clone())?;
            let seq2 = ops::silu(g, seq)?;
            ops::scatter_spatial(g, seq2, order, 2, 3)
        }
    );
    entry!(
        "bce_with_logits",
        {
            let mut r = mk(25);
            vec![rand_tensor(&mut r, &[2, 4], -3.0, 3.0)]
        },
        |g: &mut Graph<f64>, v: &[Var]| {
            let targets = Tensor::new(
                vec![2, 4],
                vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 1.0],
            )?;
            ops::bce_with_logits(g, v[0], &targets)
        }
    );
    entry!(
        "selective_scan",
        {
            let mut r = mk(26);
            vec![
                rand_tensor(&mut r, &[1, 2, 5], -1.0, 1.0),  // x
                rand_tensor(&mut r, &[1, 2, 5], 0.2, 0.8),   // dt (positive)
                rand_tensor(&mut r, &[1, 3, 5], -1.0, 1.0),  // b_seq
                rand_tensor(&mut r, &[1, 3, 5], -1.0, 1.0),  // c_seq
                rand_tensor(&mut r, &[2, 3], -1.0, 0.5),     // a_log
                rand_tensor(&mut r, &[2], -1.0, 1.0),        // d_skip
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| {
            crate::ssm::selective_scan(g, v[0], v[1], v[2], v[3], v[4], v[5], None)
        }
    );
    entry!(
        "selective_scan_chunked",
        {
            let mut r = mk(27);
            vec![
                rand_tensor(&mut r, &[2, 2, 7], -1.0, 1.0),
                rand_tensor(&mut r, &[2, 2, 7], 0.2, 0.8),
                rand_tensor(&mut r, &[2, 2, 7], -1.0, 1.0),
                rand_tensor(&mut r, &[2, 2, 7], -1.0, 1.0),
                rand_tensor(&mut r, &[2, 2], -1.0, 0.5),
                rand_tensor(&mut r, &[2], -1.0, 1.0),
            ]
        },
        |g: &mut Graph<f64>, v: &[Var]| {
            crate::ssm::selective_scan(g, v[0], v[1], v[2], v[3], v[4], v[5], Some(3))
        }
    );
    entry!(
        "detection_loss",
        crate::train::detection_loss_check_inputs(),
        crate::train::detection_loss_check_builder()
    );

    reg
}

/// Runs every check (or just `only`) and returns the results.
pub fn run_all(only: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, f) in registry() {
        if let Some(filter) = only {
            if name != filter {
                continue;
            }
        }
        out.push(f()?);
    }
    if out.is_empty() {
        return Err(crate::error::FerError::invalid(format!(
            "no gradient check named '{}'",
            only.unwrap_or("")
        )));
    }
    Ok(out)
}
