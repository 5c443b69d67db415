//! Brute-force reference computations shared by the property tests and the
//! acceptance run.

#![allow(dead_code)]

use faudit_core::faithfulness::Direction;
use faudit_core::{Result, Tensor};
use rand::Rng;

/// One layer per entry, each a list of heads with rows drawn as softmax of
/// random logits.
pub fn random_attention_stack(rng: &mut impl Rng, depth: usize, heads: usize, n: usize) -> Vec<Vec<Tensor>> {
    (0..depth)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let mut data = Vec::with_capacity(n * n);
                    for _ in 0..n {
                        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
                        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                        let z: f64 = e.iter().sum();
                        data.extend(e.iter().map(|v| v / z));
                    }
                    Tensor::new([n, n], data).unwrap()
                })
                .collect()
        })
        .collect()
}

/// Rollout with explicit loops: `R ← (½·mean_h A + ½·I) R`, starting at `I`.
pub fn naive_rollout(stack: &[Vec<Tensor>]) -> Vec<Vec<Vec<f64>>> {
    let n = stack[0][0].shape()[0];
    let mut r: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    let mut out = Vec::new();
    for layer in stack {
        let mut a = vec![vec![0.0; n]; n];
        for head in layer {
            for i in 0..n {
                for j in 0..n {
                    a[i][j] += head.at(&[i, j]) / layer.len() as f64;
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = 0.5 * *v + if i == j { 0.5 } else { 0.0 };
            }
        }
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    next[i][j] += a[i][k] * r[k][j];
                }
            }
        }
        r = next;
        out.push(r.clone());
    }
    out
}

/// Two-class model whose first probability is the mean image value over
/// `mask` pixels, clamped to `[0, 1]`.
pub fn defect_counter(mask: Vec<bool>) -> impl Fn(&Tensor) -> Result<Vec<f64>> + Sync {
    move |x: &Tensor| {
        let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let s: f64 = x.data().iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).sum();
        let p = (s / count).clamp(0.0, 1.0);
        Ok(vec![p, 1.0 - p])
    }
}

/// Direct 2-D Gaussian blur with replicate borders, radius `⌈3σ⌉`.
pub fn naive_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut out = vec![0.0; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let (mut acc, mut norm) = (0.0, 0.0);
            for di in -r..=r {
                for dj in -r..=r {
                    let wt = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                    let y = (i + di).clamp(0, h as i64 - 1) as usize;
                    let x = (j + dj).clamp(0, w as i64 - 1) as usize;
                    acc += wt * plane[y * w + x];
                    norm += wt;
                }
            }
            out[i as usize * w + j as usize] = acc / norm;
        }
    }
    out
}

/// Indices by descending score; the earliest index wins among equals.
pub fn selection_order(scores: &[f64]) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut order = Vec::with_capacity(scores.len());
    for _ in 0..scores.len() {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        order.push(b);
    }
    order
}

/// Curve obtained by changing one pixel at a time and reading the
/// probability whenever the changed count reaches `⌈s·n/steps⌉`.
pub fn brute_force_curve(
    predict: &dyn Fn(&Tensor) -> Result<Vec<f64>>,
    image: &Tensor,
    fill: &[f64],
    scores: &[f64],
    direction: Direction,
    target: usize,
    steps: usize,
) -> Vec<f64> {
    let n = scores.len();
    let (from, to): (Vec<f64>, Vec<f64>) = match direction {
        Direction::Deletion => (image.data().to_vec(), fill.to_vec()),
        Direction::Insertion => (fill.to_vec(), image.data().to_vec()),
    };
    let shape = image.shape().to_vec();
    let mut current = from;
    let mut probs = vec![predict(&Tensor::new(shape.clone(), current.clone()).unwrap()).unwrap()[target]];
    let order = selection_order(scores);
    let mut changed = 0;
    for s in 1..=steps {
        let want = (s * n).div_ceil(steps);
        while changed < want {
            let p = order[changed];
            current[p] = to[p];
            changed += 1;
        }
        probs.push(predict(&Tensor::new(shape.clone(), current.clone()).unwrap()).unwrap()[target]);
    }
    probs
}
