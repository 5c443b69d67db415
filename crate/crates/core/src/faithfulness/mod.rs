//! Perturbation metrics for heatmaps: deletion and insertion curves under a
//! fill operator, top-k confidence drop, mask overlap, rank correlation with
//! the defect mask and augmentation stability.
//!
//! All pixel orderings come from [`rank_pixels`]: descending heatmap value,
//! ties in row-major order. Every metric except stability depends on the
//! heatmap only through that ordering (or through average ranks).

pub mod augment;
mod stability;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use stability::{masked_cosine, stability, StabilityConfig, StabilityResult};

use crate::error::{Error, Result};
use crate::explainers::Heatmap;
use crate::predictor::{argmax, Predictor};
use crate::stats::spearman;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FillKind {
    Zero,
    Blur { sigma: f64 },
}

impl FillKind {
    pub const DEFAULT_BLUR: FillKind = FillKind::Blur { sigma: 3.0 };

    pub fn name(&self) -> &'static str {
        match self {
            FillKind::Zero => "zero",
            FillKind::Blur { .. } => "blur",
        }
    }
}

/// A fill kind bound to the replacement image for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FillOperator {
    pub kind: FillKind,
    pub reference: Tensor,
}

impl FillOperator {
    pub fn new(kind: FillKind, image: &Tensor) -> Result<Self> {
        if image.rank() != 3 {
            return Err(Error::dim(format!("expected a [c, h, w] image, got {:?}", image.shape())));
        }
        let reference = match kind {
            FillKind::Zero => Tensor::zeros(image.shape().to_vec()),
            FillKind::Blur { sigma } => gaussian_blur(image, sigma)?,
        };
        Ok(Self { kind, reference })
    }
}

/// Normalised 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur per channel with replicated borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut out = Vec::with_capacity(image.numel());
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        let mut rows = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                rows[i * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * plane[i * w + clamp(j as i64 + t as i64 - r, w)])
                    .sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                out.push(
                    k.iter()
                        .enumerate()
                        .map(|(t, kv)| kv * rows[clamp(i as i64 + t as i64 - r, h) * w + j])
                        .sum(),
                );
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Pixel indices by descending value; equal values keep row-major order.
pub fn rank_pixels(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Pixels touched at `step` of `steps`: `ceil(step · n / steps)`.
pub fn pixels_at_step(step: usize, steps: usize, n: usize) -> usize {
    (step * n).div_ceil(steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Deletion,
    Insertion,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Deletion => "deletion",
            Direction::Insertion => "insertion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub direction: Direction,
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub target_class: usize,
    pub annotations: Vec<String>,
}

impl PerturbationCurve {
    pub fn auc(&self) -> Result<f64> {
        curve_auc(&self.fractions, &self.probabilities)
    }
}

/// Trapezoidal area under `(x, y)` points.
pub fn curve_auc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!(
            "curve needs at least two matching points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum())
}

fn plane_of(image: &Tensor, heatmap: &Heatmap) -> Result<usize> {
    if image.rank() != 3 || heatmap.values.shape() != &image.shape()[1..] {
        return Err(Error::dim(format!(
            "heatmap {:?} does not match image {:?}",
            heatmap.values.shape(),
            image.shape()
        )));
    }
    Ok(image.shape()[1] * image.shape()[2])
}

/// `base` with the first `count` ranked pixels (all channels) taken from
/// `source`.
fn splice(base: &Tensor, source: &Tensor, order: &[usize], count: usize) -> Tensor {
    let plane = order.len();
    let mut data = base.data().to_vec();
    for ch in 0..base.numel() / plane {
        for &p in &order[..count] {
            data[ch * plane + p] = source.data()[ch * plane + p];
        }
    }
    Tensor::from_parts(base.shape().to_vec(), data)
}

fn curve_images(image: &Tensor, fill: &FillOperator, order: &[usize], direction: Direction, steps: usize) -> Vec<Tensor> {
    (0..=steps)
        .map(|s| {
            let count = pixels_at_step(s, steps, order.len());
            match direction {
                Direction::Deletion => splice(image, &fill.reference, order, count),
                Direction::Insertion => splice(&fill.reference, image, order, count),
            }
        })
        .collect()
}

fn probs_for(predictor: &dyn Predictor, images: &[Tensor], target: usize) -> Result<Vec<f64>> {
    predictor
        .predict_batch(images)
        .into_iter()
        .map(|r| {
            let p = r?;
            p.get(target).copied().ok_or_else(|| {
                Error::invalid(format!("class {target} out of range for {} probabilities", p.len()))
            })
        })
        .collect()
}

fn fractions(steps: usize) -> Vec<f64> {
    (0..=steps).map(|s| s as f64 / steps as f64).collect()
}

/// Curve of the `target` probability as ranked pixels are replaced by the
/// fill reference (deletion) or restored into it (insertion).
pub fn perturbation_curve(
    predictor: &dyn Predictor,
    image: &Tensor,
    heatmap: &Heatmap,
    fill: &FillOperator,
    direction: Direction,
    target: usize,
    steps: usize,
) -> Result<PerturbationCurve> {
    plane_of(image, heatmap)?;
    if steps == 0 {
        return Err(Error::invalid("curves need at least one step"));
    }
    if fill.reference.shape() != image.shape() {
        return Err(Error::dim("fill reference does not match image"));
    }
    let order = rank_pixels(heatmap.values.data());
    let images = curve_images(image, fill, &order, direction, steps);
    let mut annotations = Vec::new();
    if heatmap.degenerate {
        annotations.push("degenerate_heatmap".to_string());
    }
    Ok(PerturbationCurve {
        direction,
        fractions: fractions(steps),
        probabilities: probs_for(predictor, &images, target)?,
        target_class: target,
        annotations,
    })
}

fn predicted_class(predictor: &dyn Predictor, image: &Tensor) -> Result<usize> {
    Ok(argmax(&predictor.predict(image)?))
}

/// Deletion curve for the class predicted on the unperturbed image.
pub fn deletion_curve(
    predictor: &dyn Predictor,
    image: &Tensor,
    heatmap: &Heatmap,
    fill: &FillOperator,
    steps: usize,
) -> Result<PerturbationCurve> {
    let target = predicted_class(predictor, image)?;
    perturbation_curve(predictor, image, heatmap, fill, Direction::Deletion, target, steps)
}

pub fn insertion_curve(
    predictor: &dyn Predictor,
    image: &Tensor,
    heatmap: &Heatmap,
    fill: &FillOperator,
    steps: usize,
) -> Result<PerturbationCurve> {
    let target = predicted_class(predictor, image)?;
    perturbation_curve(predictor, image, heatmap, fill, Direction::Insertion, target, steps)
}

fn check_k(k_percent: u32) -> Result<()> {
    if k_percent == 0 || k_percent > 100 {
        return Err(Error::invalid(format!("top-k percentage {k_percent} outside (0, 100]")));
    }
    Ok(())
}

/// Pixels removed for a top-k percentage: `ceil(k · n / 100)`.
pub fn topk_pixels(k_percent: u32, n: usize) -> usize {
    (k_percent as usize * n).div_ceil(100)
}

/// Probability drop of `target` when only the top `k_percent` pixels are
/// filled. Negative when filling raises the probability.
pub fn topk_drop(
    predictor: &dyn Predictor,
    image: &Tensor,
    heatmap: &Heatmap,
    k_percent: u32,
    fill: &FillOperator,
    target: usize,
) -> Result<f64> {
    check_k(k_percent)?;
    let n = plane_of(image, heatmap)?;
    let order = rank_pixels(heatmap.values.data());
    let filled = splice(image, &fill.reference, &order, topk_pixels(k_percent, n));
    let p = probs_for(predictor, &[image.clone(), filled], target)?;
    Ok(p[0] - p[1])
}

/// Metric value with notes on how it was obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub annotations: Vec<String>,
}

fn mask_bits(mask: &Tensor, n: usize) -> Result<Vec<bool>> {
    if mask.numel() != n {
        return Err(Error::dim(format!("mask has {} pixels, heatmap {n}", mask.numel())));
    }
    Ok(mask.data().iter().map(|&v| v > 0.5).collect())
}

/// Overlap between the mask and the top `100 − percentile` percent of
/// pixels by rank.
pub fn iou(heatmap: &Heatmap, mask: &Tensor, percentile: f64) -> Result<Scored> {
    let n = heatmap.values.numel();
    let bits = mask_bits(mask, n)?;
    if !bits.iter().any(|&b| b) {
        return Err(Error::invalid("IoU needs a non-empty mask"));
    }
    if !(0.0..100.0).contains(&percentile) {
        return Err(Error::invalid(format!("percentile {percentile} outside [0, 100)")));
    }
    let keep = ((n as f64) * (100.0 - percentile) / 100.0).ceil() as usize;
    let mut hot = vec![false; n];
    for &p in &rank_pixels(heatmap.values.data())[..keep.min(n)] {
        hot[p] = true;
    }
    let inter = hot.iter().zip(&bits).filter(|(a, b)| **a && **b).count();
    let union = hot.iter().zip(&bits).filter(|(a, b)| **a || **b).count();
    let mut annotations = Vec::new();
    if heatmap.degenerate {
        annotations.push("degenerate_heatmap".to_string());
    }
    Ok(Scored {
        value: inter as f64 / union as f64,
        annotations,
    })
}

/// Spearman correlation between heatmap values and the binary mask over
/// all pixels. A constant heatmap scores 0 with an annotation.
pub fn spearman_defect(heatmap: &Heatmap, mask: &Tensor) -> Result<Scored> {
    let n = heatmap.values.numel();
    let bits = mask_bits(mask, n)?;
    let on = bits.iter().filter(|&&b| b).count();
    if on == 0 || on == n {
        return Err(Error::invalid("mask needs both defect and non-defect pixels"));
    }
    let m: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(match spearman(heatmap.values.data(), &m) {
        Some(value) => Scored {
            value,
            annotations: Vec::new(),
        },
        None => Scored {
            value: 0.0,
            annotations: vec!["spearman_constant_heatmap".to_string()],
        },
    })
}

/// Every scalar metric for one (sample, explainer, fill).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    /// Training seed of the audited model.
    pub seed: u64,
    pub model: String,
    pub sample_id: u64,
    pub true_class: usize,
    pub predicted_class: usize,
    pub correct: bool,
    pub explainer: String,
    pub fill: String,
    pub del_auc: f64,
    pub ins_auc: f64,
    pub stability: Option<f64>,
    pub iou: Option<f64>,
    pub spearman_defect: Option<f64>,
    pub topk_drops: BTreeMap<u32, f64>,
    pub degenerate: bool,
    pub annotations: Vec<String>,
    pub error: Option<String>,
}

impl AuditRecord {
    /// Aggregation key: model, explainer and fill.
    pub fn group(&self) -> String {
        format!("{}/{}/{}", self.model, self.explainer, self.fill)
    }

    pub fn topk_drop(&self, k: u32) -> Option<f64> {
        self.topk_drops.get(&k).copied()
    }

    pub fn failed(meta: &RecordMeta, sample: &SampleInput, fill: &str, error: &Error) -> Self {
        Self {
            seed: meta.seed,
            model: meta.model.clone(),
            sample_id: sample.sample_id,
            true_class: sample.true_class,
            predicted_class: 0,
            correct: false,
            explainer: meta.explainer.clone(),
            fill: fill.to_string(),
            del_auc: 0.0,
            ins_auc: 0.0,
            stability: None,
            iou: None,
            spearman_defect: None,
            topk_drops: BTreeMap::new(),
            degenerate: false,
            annotations: Vec::new(),
            error: Some(error.to_string()),
        }
    }

    pub const CSV_HEADER: [&'static str; 19] = [
        "seed",
        "model",
        "sample_id",
        "true_class",
        "predicted_class",
        "correct",
        "explainer",
        "fill",
        "del_auc",
        "ins_auc",
        "stability",
        "iou",
        "spearman_defect",
        "topk5",
        "topk10",
        "topk20",
        "degenerate",
        "annotations",
        "error",
    ];

    /// One CSV row matching [`AuditRecord::CSV_HEADER`]; absent values are
    /// empty cells.
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.seed.to_string(),
            self.model.clone(),
            self.sample_id.to_string(),
            self.true_class.to_string(),
            self.predicted_class.to_string(),
            self.correct.to_string(),
            self.explainer.clone(),
            self.fill.clone(),
            self.del_auc.to_string(),
            self.ins_auc.to_string(),
            opt(self.stability),
            opt(self.iou),
            opt(self.spearman_defect),
            opt(self.topk_drop(5)),
            opt(self.topk_drop(10)),
            opt(self.topk_drop(20)),
            self.degenerate.to_string(),
            self.annotations.join(";"),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditSettings {
    pub curve_steps: usize,
    pub fills: Vec<FillKind>,
    pub topk_percents: Vec<u32>,
    pub iou_percentile: f64,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            curve_steps: 20,
            fills: vec![FillKind::Zero, FillKind::DEFAULT_BLUR],
            topk_percents: vec![5, 10, 20],
            iou_percentile: 50.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'a> {
    pub sample_id: u64,
    pub image: &'a Tensor,
    /// `None` or an empty mask skips mask-based metrics.
    pub mask: Option<&'a Tensor>,
    pub true_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordMeta {
    pub seed: u64,
    pub model: String,
    pub explainer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleAudit {
    pub records: Vec<AuditRecord>,
    /// `(fill name, curve)` pairs, deletion before insertion per fill.
    pub curves: Vec<(String, PerturbationCurve)>,
}

/// Scores one heatmap under every configured fill.
pub fn audit_sample(
    predictor: &dyn Predictor,
    sample: &SampleInput,
    heatmap: &Heatmap,
    stability: Option<&StabilityResult>,
    meta: &RecordMeta,
    settings: &AuditSettings,
) -> Result<SampleAudit> {
    let image = sample.image;
    let n = plane_of(image, heatmap)?;
    for &k in &settings.topk_percents {
        check_k(k)?;
    }
    let predicted = predicted_class(predictor, image)?;
    let order = rank_pixels(heatmap.values.data());

    let mut shared = Vec::new();
    if heatmap.degenerate {
        shared.push("degenerate_heatmap".to_string());
    }
    if let Some(s) = stability {
        if s.zero_norm_terms > 0 {
            shared.push(format!("stability_zero_norm_terms={}", s.zero_norm_terms));
        }
    }
    let mask = sample.mask.filter(|m| m.data().iter().any(|&v| v > 0.5));
    let (iou_v, rho) = match mask {
        Some(m) => {
            let i = iou(heatmap, m, settings.iou_percentile)?;
            let r = spearman_defect(heatmap, m)?;
            shared.extend(r.annotations.iter().cloned());
            (Some(i.value), Some(r.value))
        }
        None => (None, None),
    };

    let steps = settings.curve_steps;
    let mut out = SampleAudit {
        records: Vec::new(),
        curves: Vec::new(),
    };
    for &kind in &settings.fills {
        let fill = FillOperator::new(kind, image)?;
        let mut images = curve_images(image, &fill, &order, Direction::Deletion, steps);
        images.extend(curve_images(image, &fill, &order, Direction::Insertion, steps));
        for &k in &settings.topk_percents {
            images.push(splice(image, &fill.reference, &order, topk_pixels(k, n)));
        }
        let probs = probs_for(predictor, &images, predicted)?;
        let (del, rest) = probs.split_at(steps + 1);
        let (ins, topk) = rest.split_at(steps + 1);
        let base = del[0];
        let xs = fractions(steps);
        for (direction, ys) in [(Direction::Deletion, del), (Direction::Insertion, ins)] {
            out.curves.push((
                kind.name().to_string(),
                PerturbationCurve {
                    direction,
                    fractions: xs.clone(),
                    probabilities: ys.to_vec(),
                    target_class: predicted,
                    annotations: shared.clone(),
                },
            ));
        }
        out.records.push(AuditRecord {
            seed: meta.seed,
            model: meta.model.clone(),
            sample_id: sample.sample_id,
            true_class: sample.true_class,
            predicted_class: predicted,
            correct: predicted == sample.true_class,
            explainer: meta.explainer.clone(),
            fill: kind.name().to_string(),
            del_auc: curve_auc(&xs, del)?,
            ins_auc: curve_auc(&xs, ins)?,
            stability: stability.map(|s| s.value),
            iou: iou_v,
            spearman_defect: rho,
            topk_drops: settings
                .topk_percents
                .iter()
                .zip(topk)
                .map(|(&k, &p)| (k, base - p))
                .collect(),
            degenerate: heatmap.degenerate,
            annotations: shared.clone(),
            error: None,
        });
    }
    Ok(out)
}
