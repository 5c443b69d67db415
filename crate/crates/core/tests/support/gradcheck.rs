//! Central finite-difference checks for every tape op and both models.
//!
//! Each instance projects the op output onto a random fixed direction to get
//! a scalar loss, then compares analytic gradients with
//! `(f(x + h) − f(x − h)) / 2h` on up to [`MAX_COORDS`] coordinates per
//! input. The error is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.

#![allow(dead_code)]

use faudit_core::autodiff::{PoolKind, Tape, Var};
use faudit_core::models::{Arch, CnnConfig, GradMode, VitConfig};
use faudit_core::{Model, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;
pub const MAX_COORDS: usize = 40;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Coordinates dropped because the stencil straddles a relu or max kink.
    pub kinks: usize,
    pub checked: usize,
}

impl CaseResult {
    /// Also fails if kinks swallowed more than a quarter of the coordinates.
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.max_rel_err < TOLERANCE && self.kinks * 4 <= self.checked
    }
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.05 apart, for max-type ops.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn projected(tape: &mut Tape, out: Var, dir: &Tensor) -> Result<Var> {
    let d = tape.constant(dir.clone());
    let p = tape.mul(out, d)?;
    tape.sum(p)
}

fn direction_for(build: &Build, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(uniform(rng, tape.value(out).shape(), -1.0, 1.0))
}

fn loss_value(build: &Build, inputs: &[Tensor], dir: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let l = projected(&mut tape, out, dir)?;
    tape.value(l).item()
}

fn relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if n > MAX_COORDS {
        all.shuffle(rng);
        all.truncate(MAX_COORDS);
    }
    all
}

/// Relative gradient error for one instance.
pub fn check_instance(build: &Build, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let dir = direction_for(build, &inputs, rng)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let loss = projected(&mut tape, out, &dir)?;
    let grads = tape.backward(loss)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for c in coords(rng, inputs[k].numel()) {
            let mut plus = inputs.clone();
            plus[k].data_mut()[c] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[c] -= STEP;
            numeric.push((loss_value(build, &plus, &dir)? - loss_value(build, &minus, &dir)?) / (2.0 * STEP));
            analytic.push(g.data()[c]);
        }
    }
    Ok(relative(&analytic, &numeric))
}

fn run_case(
    name: &str,
    seed: u64,
    make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: &Build,
) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let inputs = make(&mut rng);
        let e = check_instance(build, inputs, &mut rng).unwrap_or(f64::INFINITY);
        worst = worst.max(e);
    }
    CaseResult {
        name: name.to_string(),
        instances: INSTANCES,
        max_rel_err: worst,
        kinks: 0,
        checked: 0,
    }
}

fn dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(1..5)]
}

/// Every tape op, [`INSTANCES`] random instances each.
pub fn op_cases() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build| {
        out.push(run_case(name, out.len() as u64 + 100, make, build));
    };
    let pair = |rng: &mut ChaCha8Rng| {
        let s = dims(rng);
        vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)]
    };
    let one = |rng: &mut ChaCha8Rng| {
        let s = dims(rng);
        vec![uniform(rng, &s, -1.0, 1.0)]
    };
    push("add", &pair, &|t, v| t.add(v[0], v[1]));
    push("sub", &pair, &|t, v| t.sub(v[0], v[1]));
    push("mul", &pair, &|t, v| t.mul(v[0], v[1]));
    push(
        "mul_broadcast_scalar",
        &|rng| {
            let s = dims(rng);
            vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[1], -1.0, 1.0)]
        },
        &|t, v| t.mul(v[0], v[1]),
    );
    push("add_scalar", &one, &|t, v| t.add_scalar(v[0], 0.7));
    push("mul_scalar", &one, &|t, v| t.mul_scalar(v[0], -1.3));
    push(
        "relu",
        &|rng| {
            let s = dims(rng);
            vec![away_from_zero(rng, &s)]
        },
        &|t, v| t.relu(v[0]),
    );
    push("exp", &one, &|t, v| t.exp(v[0]));
    push(
        "log",
        &|rng| {
            let s = dims(rng);
            vec![uniform(rng, &s, 0.5, 2.0)]
        },
        &|t, v| t.log(v[0]),
    );
    push("sigmoid", &one, &|t, v| t.sigmoid(v[0]));
    push(
        "matmul",
        &|rng| {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)]
        },
        &|t, v| t.matmul(v[0], v[1]),
    );
    push("transpose", &one, &|t, v| t.transpose(v[0]));
    push(
        "reshape",
        &|rng| vec![uniform(rng, &[2, 6], -1.0, 1.0)],
        &|t, v| t.reshape(v[0], &[3, 4]),
    );
    push(
        "expand",
        &|rng| vec![uniform(rng, &[1, 3], -1.0, 1.0)],
        &|t, v| t.expand(v[0], &[4, 3]),
    );
    push(
        "narrow",
        &|rng| vec![uniform(rng, &[3, 5], -1.0, 1.0)],
        &|t, v| t.narrow(v[0], 1, 1, 3),
    );
    push(
        "concat",
        &|rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[1, 3], -1.0, 1.0)],
        &|t, v| t.concat(&[v[0], v[1]], 0),
    );
    push("sum", &one, &|t, v| t.sum(v[0]));
    push(
        "mean_axis",
        &|rng| vec![uniform(rng, &[3, 4], -1.0, 1.0)],
        &|t, v| t.mean_axis(v[0], 1),
    );
    push(
        "max_axis",
        &|rng| vec![distinct(rng, &[3, 4])],
        &|t, v| t.max_axis(v[0], 1),
    );
    push(
        "softmax",
        &|rng| vec![uniform(rng, &[3, 4], -2.0, 2.0)],
        &|t, v| t.softmax(v[0], 1),
    );
    push(
        "conv2d",
        &|rng| {
            vec![
                uniform(rng, &[2, 5, 5], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ]
        },
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    push(
        "conv2d_stride2",
        &|rng| vec![uniform(rng, &[1, 5, 5], -1.0, 1.0), uniform(rng, &[2, 1, 3, 3], -1.0, 1.0)],
        &|t, v| t.conv2d(v[0], v[1], None, 2, 0),
    );
    push(
        "max_pool",
        &|rng| vec![distinct(rng, &[2, 4, 4])],
        &|t, v| t.pool2d(v[0], PoolKind::Max(2)),
    );
    push(
        "avg_pool",
        &|rng| vec![uniform(rng, &[2, 4, 4], -1.0, 1.0)],
        &|t, v| t.pool2d(v[0], PoolKind::Avg(2)),
    );
    push(
        "global_avg_pool",
        &|rng| vec![uniform(rng, &[3, 3, 3], -1.0, 1.0)],
        &|t, v| t.pool2d(v[0], PoolKind::GlobalAvg),
    );
    push(
        "global_max_pool",
        &|rng| vec![distinct(rng, &[3, 3, 3])],
        &|t, v| t.pool2d(v[0], PoolKind::GlobalMax),
    );
    push(
        "cross_entropy",
        &|rng| vec![uniform(rng, &[5], -2.0, 2.0)],
        &|t, v| t.cross_entropy(v[0], 2),
    );
    push("track", &one, &|t, v| {
        let x = t.track(v[0]);
        t.mul_scalar(x, 2.0)
    });
    out
}

fn model_loss(model: &Model, image: &Tensor, target: usize) -> f64 {
    let logits = model.logits(image).unwrap();
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[target]
}

/// Central difference of `f` at [`STEP`], or `None` when the stencil
/// straddles a non-differentiable point. For smooth `f`, halving the step
/// changes the central difference by O(h²) and the second difference
/// `f(h) − 2f(0) + f(−h)` by a factor of four up to O(h⁴); a kink anywhere in
/// `[−h, h]` breaks one of the two.
fn smooth_difference(f: &mut dyn FnMut(f64) -> f64) -> Option<f64> {
    let (f0, p1, m1, p2, m2) = (f(0.0), f(STEP), f(-STEP), f(STEP / 2.0), f(-STEP / 2.0));
    let wide = (p1 - m1) / (2.0 * STEP);
    let narrow = (p2 - m2) / STEP;
    let curvature_gap = ((p1 - 2.0 * f0 + m1) - 4.0 * (p2 - 2.0 * f0 + m2)).abs();
    let smooth = (wide - narrow).abs() <= 1e-6 * wide.abs().max(1.0) && curvature_gap <= 1e-11;
    smooth.then_some(wide)
}

/// Cross-entropy gradients of a model with respect to the input image and a
/// random subset of parameter entries.
pub fn model_case(name: &str, arch: Arch, instances: usize, seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = arch_size(&arch);
    let mut worst: f64 = 0.0;
    let (mut kinks, mut checked) = (0, 0);
    for inst in 0..instances {
        let mut model = Model::new(&arch, seed * 1000 + inst as u64).unwrap();
        let image = uniform(&mut rng, &[1, size, size], 0.0, 1.0);
        let target = rng.random_range(0..model.n_classes());
        let res = model
            .forward(&image, &[], GradMode { params: true, input: true })
            .unwrap()
            .backward_loss(target)
            .unwrap();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let g_in = res.input_grad.unwrap();
        for c in coords(&mut rng, image.numel()).into_iter().take(10) {
            let mut f = |h: f64| {
                let mut x = image.clone();
                x.data_mut()[c] += h;
                model_loss(&model, &x, target)
            };
            checked += 1;
            match smooth_difference(&mut f) {
                Some(d) => {
                    numeric.push(d);
                    analytic.push(g_in.data()[c]);
                }
                None => kinks += 1,
            }
        }
        let n_params = model.params().len();
        for _ in 0..20 {
            let p = rng.random_range(0..n_params);
            let c = rng.random_range(0..model.params().values()[p].numel());
            let orig = model.params().values()[p].data()[c];
            let mut f = |h: f64| {
                model.params_mut().values_mut()[p].data_mut()[c] = orig + h;
                let l = model_loss(&model, &image, target);
                model.params_mut().values_mut()[p].data_mut()[c] = orig;
                l
            };
            checked += 1;
            match smooth_difference(&mut f) {
                Some(d) => {
                    numeric.push(d);
                    analytic.push(res.param_grads[p].data()[c]);
                }
                None => kinks += 1,
            }
        }
        worst = worst.max(relative(&analytic, &numeric));
    }
    CaseResult {
        name: name.to_string(),
        instances,
        max_rel_err: worst,
        kinks,
        checked,
    }
}

fn arch_size(arch: &Arch) -> usize {
    match arch {
        Arch::Cnn(c) => c.image_size,
        Arch::Vit(v) => v.image_size,
    }
}

/// Both reference models on 8×8 inputs.
pub fn model_cases() -> Vec<CaseResult> {
    vec![
        model_case("tiny_cnn", Arch::Cnn(CnnConfig::with_size(8)), INSTANCES, 1),
        model_case(
            "tiny_vit",
            Arch::Vit(VitConfig {
                patch: 2,
                ..VitConfig::with_size(8)
            }),
            INSTANCES,
            2,
        ),
    ]
}
