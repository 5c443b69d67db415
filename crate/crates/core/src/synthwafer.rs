//! Deterministic synthetic wafer maps with pixel-level defect masks.
//!
//! Pixel values follow the wafer-map convention: `0.0` outside the wafer,
//! `0.5` for a normal die and `1.0` for a defective die. Each sample carries
//! the binary mask of its *pattern* pixels; background noise defects are not
//! part of the mask.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.0;
pub const NORMAL_DIE: f64 = 0.5;
pub const DEFECT_DIE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaferClass {
    None,
    Center,
    Ring,
    EdgeLoc,
    Scratch,
}

impl WaferClass {
    pub const ALL: [WaferClass; 5] = [
        WaferClass::None,
        WaferClass::Center,
        WaferClass::Ring,
        WaferClass::EdgeLoc,
        WaferClass::Scratch,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            WaferClass::None => "none",
            WaferClass::Center => "center",
            WaferClass::Ring => "ring",
            WaferClass::EdgeLoc => "edge_loc",
            WaferClass::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaferSample {
    pub sample_id: u64,
    /// `[1, size, size]`.
    pub image: Tensor,
    pub label: WaferClass,
    /// `[size, size]`, 1.0 on pattern defect pixels.
    pub mask: Tensor,
    pub split: Split,
    pub seed: u64,
}

impl WaferSample {
    pub fn mask_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub wafer_radius: f64,
    pub center_radius: Range,
    pub ring_width: Range,
    /// Per-pixel fill probability inside the ring annulus.
    pub ring_fill: Range,
    pub edge_loc_depth: Range,
    pub edge_loc_span_deg: Range,
    pub scratch_length: Range,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            wafer_radius: 15.0,
            center_radius: Range::new(3.0, 5.5),
            ring_width: Range::new(1.5, 2.5),
            ring_fill: Range::new(0.8, 1.0),
            edge_loc_depth: Range::new(3.0, 5.0),
            edge_loc_span_deg: Range::new(40.0, 80.0),
            scratch_length: Range::new(10.0, 18.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub counts: BTreeMap<WaferClass, SplitCounts>,
    pub noise_rate: f64,
    pub geometry: Geometry,
    pub master_seed: u64,
}

impl DatasetSpec {
    /// Same split counts for every class.
    pub fn uniform(per_class: SplitCounts, noise_rate: f64, master_seed: u64) -> Self {
        Self {
            image_size: 32,
            counts: WaferClass::ALL.iter().map(|&c| (c, per_class)).collect(),
            noise_rate,
            geometry: Geometry::default(),
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if !(0.0..=0.2).contains(&self.noise_rate) {
            return Err(Error::invalid(format!(
                "noise rate {} outside [0, 0.2]",
                self.noise_rate
            )));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("image size must be at least 8"));
        }
        let half = self.image_size as f64 / 2.0;
        if !(g.wafer_radius > 0.0 && g.wafer_radius <= half) {
            return Err(Error::invalid(format!(
                "wafer radius {} must lie in (0, {half}]",
                g.wafer_radius
            )));
        }
        let ranges = [
            ("center_radius", g.center_radius, g.wafer_radius),
            ("ring_width", g.ring_width, g.wafer_radius),
            ("ring_fill", g.ring_fill, 1.0),
            ("edge_loc_depth", g.edge_loc_depth, g.wafer_radius),
            ("edge_loc_span_deg", g.edge_loc_span_deg, 360.0),
            ("scratch_length", g.scratch_length, 4.0 * g.wafer_radius),
        ];
        for (name, r, limit) in ranges {
            if !(r.min > 0.0 && r.min <= r.max && r.max <= limit) {
                return Err(Error::invalid(format!(
                    "geometry `{name}` = [{}, {}] must satisfy 0 < min <= max <= {limit}",
                    r.min, r.max
                )));
            }
        }
        Ok(())
    }
}

struct Canvas {
    size: usize,
    center: f64,
    radius: f64,
}

impl Canvas {
    fn polar(&self, i: usize, j: usize) -> (f64, f64) {
        let y = i as f64 + 0.5 - self.center;
        let x = j as f64 + 0.5 - self.center;
        ((x * x + y * y).sqrt(), y.atan2(x))
    }

    fn on_wafer(&self, i: usize, j: usize) -> bool {
        self.polar(i, j).0 <= self.radius
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn draw_pattern(class: WaferClass, canvas: &Canvas, g: &Geometry, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = canvas.size;
    let mut mask = vec![false; n * n];
    match class {
        WaferClass::None => {}
        WaferClass::Center => {
            let r = g.center_radius.sample(rng);
            for i in 0..n {
                for j in 0..n {
                    mask[i * n + j] = canvas.polar(i, j).0 <= r;
                }
            }
        }
        WaferClass::Ring => {
            let width = g.ring_width.sample(rng);
            let fill = g.ring_fill.sample(rng);
            for i in 0..n {
                for j in 0..n {
                    let d = canvas.polar(i, j).0;
                    let in_annulus = d <= canvas.radius && d > canvas.radius - width;
                    mask[i * n + j] = in_annulus && rng.random::<f64>() < fill;
                }
            }
        }
        WaferClass::EdgeLoc => {
            let theta = rng.random_range(0.0..2.0 * PI);
            let span = g.edge_loc_span_deg.sample(rng).to_radians();
            let depth = g.edge_loc_depth.sample(rng);
            for i in 0..n {
                for j in 0..n {
                    let (d, a) = canvas.polar(i, j);
                    mask[i * n + j] = d <= canvas.radius
                        && d > canvas.radius - depth
                        && angle_diff(a, theta) <= span / 2.0;
                }
            }
        }
        WaferClass::Scratch => {
            let turn = Normal::new(0.0, 0.12).expect("valid normal");
            let wanted = g.scratch_length.sample(rng).round().max(1.0) as usize;
            // Walks that leave the wafer early are retried; the best walk is
            // kept if none reaches the full length.
            let mut best: Vec<usize> = Vec::new();
            for _ in 0..16 {
                let r0 = rng.random_range(0.0..(canvas.radius - 4.0).max(1.0));
                let a0 = rng.random_range(0.0..2.0 * PI);
                let mut y = canvas.center + r0 * a0.sin();
                let mut x = canvas.center + r0 * a0.cos();
                let mut heading = rng.random_range(0.0..2.0 * PI);
                let mut pixels: Vec<usize> = Vec::new();
                for _ in 0..wanted * 2 {
                    if y < 0.0 || x < 0.0 {
                        break;
                    }
                    let (i, j) = (y as usize, x as usize);
                    if i >= n || j >= n || !canvas.on_wafer(i, j) {
                        break;
                    }
                    let at = i * n + j;
                    if !pixels.contains(&at) {
                        pixels.push(at);
                    }
                    if pixels.len() >= wanted {
                        break;
                    }
                    heading += turn.sample(rng);
                    y += heading.sin();
                    x += heading.cos();
                }
                if pixels.len() > best.len() {
                    best = pixels;
                }
                if best.len() >= wanted {
                    break;
                }
            }
            for at in best {
                mask[at] = true;
            }
        }
    }
    mask
}

fn render(
    sample_id: u64,
    class: WaferClass,
    split: Split,
    seed: u64,
    spec: &DatasetSpec,
) -> WaferSample {
    let n = spec.image_size;
    let canvas = Canvas {
        size: n,
        center: n as f64 / 2.0,
        radius: spec.geometry.wafer_radius,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = draw_pattern(class, &canvas, &spec.geometry, &mut rng);
    let mut image = vec![BACKGROUND; n * n];
    for i in 0..n {
        for j in 0..n {
            let at = i * n + j;
            if !canvas.on_wafer(i, j) {
                continue;
            }
            image[at] = if pattern[at] {
                DEFECT_DIE
            } else if rng.random::<f64>() < spec.noise_rate {
                DEFECT_DIE
            } else {
                NORMAL_DIE
            };
        }
    }
    let mask = pattern.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    WaferSample {
        sample_id,
        image: Tensor::from_parts(vec![1, n, n], image),
        label: class,
        mask: Tensor::from_parts(vec![n, n], mask),
        split,
        seed,
    }
}

/// Generates every sample described by `spec`. Output order is class,
/// then split, then index; `sample_id` is the position in that order.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<WaferSample>> {
    generate_with(spec, Exec::default())
}

pub fn generate_with(spec: &DatasetSpec, exec: Exec) -> Result<Vec<WaferSample>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.master_seed);
    let mut jobs = Vec::new();
    for (&class, counts) in &spec.counts {
        for split in Split::ALL {
            for _ in 0..counts.get(split) {
                jobs.push((class, split, master.random::<u64>()));
            }
        }
    }
    Ok(exec.map(jobs.len(), |k| {
        let (class, split, seed) = jobs[k];
        render(k as u64, class, split, seed, spec)
    }))
}

fn group_by_class(samples: &[WaferSample]) -> BTreeMap<WaferClass, Vec<usize>> {
    let mut groups: BTreeMap<WaferClass, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.label).or_default().push(i);
    }
    groups
}

fn class_rng(seed: u64, class: WaferClass) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class.index() as u64);
    rng
}

/// Re-tags samples into train/val/test per class according to `ratios`.
///
/// Per-class split sizes are the rounded ratio shares, adjusted so every
/// split with a positive ratio receives at least one sample.
pub fn stratified_split(
    mut samples: Vec<WaferSample>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<WaferSample>> {
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let needed = ratios.iter().filter(|&&r| r > 0.0).count();
    for (class, idx) in group_by_class(&samples) {
        let n = idx.len();
        if n < needed {
            return Err(Error::InsufficientSamples(format!(
                "class {} has {n} samples for {needed} splits",
                class.name()
            )));
        }
        let mut sizes = [0usize; 3];
        sizes[0] = (n as f64 * ratios[0]).round() as usize;
        sizes[1] = ((n as f64 * ratios[1]).round() as usize).min(n - sizes[0]);
        sizes[2] = n - sizes[0] - sizes[1];
        for s in 0..3 {
            if ratios[s] > 0.0 && sizes[s] == 0 {
                let donor = (0..3).max_by_key(|&d| sizes[d]).expect("three splits");
                sizes[donor] -= 1;
                sizes[s] = 1;
            }
        }
        let mut order = idx.clone();
        shuffle(&mut order, &mut class_rng(seed, class));
        let mut cursor = 0;
        for (s, &size) in sizes.iter().enumerate() {
            for &i in &order[cursor..cursor + size] {
                samples[i].split = Split::ALL[s];
            }
            cursor += size;
        }
    }
    Ok(samples)
}

fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Draws exactly `n_per_class` test-split samples of every class present in
/// `samples`, without replacement.
pub fn balanced_eval_subset(
    samples: &[WaferSample],
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<WaferSample>> {
    let test: Vec<WaferSample> = samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .cloned()
        .collect();
    let mut out = Vec::new();
    for (class, mut idx) in group_by_class(&test) {
        if idx.len() < n_per_class {
            return Err(Error::InsufficientSamples(format!(
                "class {} has {} test samples, {n_per_class} requested",
                class.name(),
                idx.len()
            )));
        }
        shuffle(&mut idx, &mut class_rng(seed, class));
        out.extend(idx[..n_per_class].iter().map(|&i| test[i].clone()));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    sample_id: u64,
    label: WaferClass,
    split: Split,
    seed: u64,
}

/// Writes one split into a container: sample metadata in the header,
/// `image/<id>` and `mask/<id>` records.
pub fn save_split(path: impl AsRef<Path>, samples: &[&WaferSample]) -> Result<()> {
    let meta: Vec<SampleMeta> = samples
        .iter()
        .map(|s| SampleMeta {
            sample_id: s.sample_id,
            label: s.label,
            split: s.split,
            seed: s.seed,
        })
        .collect();
    let mut c = Container::new(serde_json::to_string(&meta)?);
    for s in samples {
        c.push(format!("image/{}", s.sample_id), s.image.clone());
        c.push(format!("mask/{}", s.sample_id), s.mask.clone());
    }
    c.save(path)
}

pub fn load_split(path: impl AsRef<Path>) -> Result<Vec<WaferSample>> {
    let c = Container::load(path)?;
    let meta: Vec<SampleMeta> = serde_json::from_str(&c.header)?;
    let by_name: BTreeMap<&str, &Tensor> = c.records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    meta.into_iter()
        .map(|m| {
            let fetch = |kind: &str| {
                by_name
                    .get(format!("{kind}/{}", m.sample_id).as_str())
                    .map(|t| (*t).clone())
                    .ok_or_else(|| Error::Format(format!("missing {kind} for sample {}", m.sample_id)))
            };
            Ok(WaferSample {
                sample_id: m.sample_id,
                image: fetch("image")?,
                label: m.label,
                mask: fetch("mask")?,
                split: m.split,
                seed: m.seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(class: WaferClass, noise: f64, seed: u64) -> DatasetSpec {
        let mut spec = DatasetSpec::uniform(
            SplitCounts {
                train: 0,
                val: 0,
                test: 0,
            },
            noise,
            seed,
        );
        spec.counts.insert(
            class,
            SplitCounts {
                train: 1,
                val: 0,
                test: 0,
            },
        );
        spec
    }

    #[test]
    fn center_mask_is_exactly_a_central_disc() {
        let s = &generate(&one(WaferClass::Center, 0.0, 3)).unwrap()[0];
        let n = 32;
        let c = 16.0;
        let dist = |i: usize, j: usize| ((i as f64 + 0.5 - c).powi(2) + (j as f64 + 0.5 - c).powi(2)).sqrt();
        let inside: Vec<f64> = (0..n * n)
            .filter(|&k| s.mask.data()[k] > 0.5)
            .map(|k| dist(k / n, k % n))
            .collect();
        let r = inside.iter().cloned().fold(0.0, f64::max);
        for k in 0..n * n {
            let want = dist(k / n, k % n) <= r;
            assert_eq!(s.mask.data()[k] > 0.5, want, "pixel {k}");
        }
        // With no noise, defect pixels are exactly the mask.
        for k in 0..n * n {
            assert_eq!(s.image.data()[k] == DEFECT_DIE, s.mask.data()[k] > 0.5);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = DatasetSpec::uniform(SplitCounts { train: 3, val: 1, test: 1 }, 0.05, 11);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(
            generate_with(&spec, Exec::Sequential).unwrap(),
            generate_with(&spec, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn noise_rate_matches_off_pattern_defect_fraction() {
        let counts = SplitCounts { train: 200, val: 0, test: 0 };
        let samples = generate(&DatasetSpec::uniform(counts, 0.05, 99)).unwrap();
        assert_eq!(samples.len(), 1000);
        let fractions: Vec<f64> = samples
            .iter()
            .map(|s| {
                let mut off = 0usize;
                let mut noisy = 0usize;
                for k in 0..s.mask.numel() {
                    if s.image.data()[k] > 0.0 && s.mask.data()[k] < 0.5 {
                        off += 1;
                        if s.image.data()[k] == DEFECT_DIE {
                            noisy += 1;
                        }
                    }
                }
                noisy as f64 / off as f64
            })
            .collect();
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!((mean - 0.05).abs() <= 0.01, "mean off-pattern fraction {mean}");
    }

    #[test]
    fn geometry_exceeding_wafer_is_rejected() {
        let mut spec = one(WaferClass::Center, 0.0, 1);
        spec.geometry.center_radius = Range::new(3.0, 20.0);
        assert!(matches!(generate(&spec), Err(Error::InvalidArgument(_))));
        let mut spec = one(WaferClass::Center, 0.3, 1);
        spec.noise_rate = 0.3;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn invariants_over_many_samples() {
        let counts = SplitCounts { train: 100, val: 0, test: 0 };
        let spec = DatasetSpec::uniform(counts, 0.05, 5);
        let g = spec.geometry;
        for s in generate(&spec).unwrap() {
            let n = 32;
            let mut count = 0;
            for k in 0..n * n {
                let (i, j) = (k / n, k % n);
                let y = i as f64 + 0.5 - 16.0;
                let x = j as f64 + 0.5 - 16.0;
                let d = (x * x + y * y).sqrt();
                if s.mask.data()[k] > 0.5 {
                    count += 1;
                    assert_eq!(s.image.data()[k], DEFECT_DIE);
                    assert!(d <= g.wafer_radius);
                    match s.label {
                        WaferClass::Center => assert!(d <= g.center_radius.max),
                        WaferClass::Ring => assert!(d > g.wafer_radius - g.ring_width.max),
                        WaferClass::EdgeLoc => assert!(d > g.wafer_radius - g.edge_loc_depth.max),
                        _ => {}
                    }
                }
            }
            assert_eq!(count == 0, s.label == WaferClass::None, "{:?}", s.label);
        }
    }

    #[test]
    fn stratified_split_exact_and_partition() {
        let counts = SplitCounts { train: 100, val: 0, test: 0 };
        let samples = generate(&DatasetSpec::uniform(counts, 0.0, 2)).unwrap();
        let split = stratified_split(samples, [0.7, 0.15, 0.15], 4).unwrap();
        for class in WaferClass::ALL {
            for (s, want) in Split::ALL.iter().zip([70, 15, 15]) {
                let got = split.iter().filter(|x| x.label == class && x.split == *s).count();
                assert_eq!(got, want);
            }
        }
        let mut ids: Vec<u64> = split.iter().map(|s| s.sample_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 500);
    }

    #[test]
    fn stratified_split_small_classes() {
        let counts = SplitCounts { train: 10, val: 0, test: 0 };
        let samples = generate(&DatasetSpec::uniform(counts, 0.0, 2)).unwrap();
        let split = stratified_split(samples, [0.7, 0.15, 0.15], 4).unwrap();
        for class in WaferClass::ALL {
            for (s, r) in Split::ALL.iter().zip([0.7, 0.15, 0.15]) {
                let got = split.iter().filter(|x| x.label == class && x.split == *s).count();
                assert!(got >= 1);
                assert!((got as f64 - 10.0 * r).abs() <= 1.0);
            }
        }
        let tiny = generate(&DatasetSpec::uniform(SplitCounts { train: 2, val: 0, test: 0 }, 0.0, 2)).unwrap();
        assert!(matches!(
            stratified_split(tiny, [0.7, 0.15, 0.15], 4),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn balanced_subset() {
        let counts = SplitCounts { train: 1, val: 1, test: 4 };
        let samples = generate(&DatasetSpec::uniform(counts, 0.0, 8)).unwrap();
        let a = balanced_eval_subset(&samples, 2, 1).unwrap();
        assert_eq!(a.len(), 10);
        for class in WaferClass::ALL {
            assert_eq!(a.iter().filter(|s| s.label == class).count(), 2);
        }
        assert!(a.iter().all(|s| s.split == Split::Test));
        assert_eq!(a, balanced_eval_subset(&samples, 2, 1).unwrap());
        assert!(balanced_eval_subset(&samples, 5, 1).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let counts = SplitCounts { train: 2, val: 0, test: 0 };
        let samples = generate(&DatasetSpec::uniform(counts, 0.02, 8)).unwrap();
        let dir = std::env::temp_dir().join(format!("faudit-split-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train.faud");
        save_split(&path, &samples.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(load_split(&path).unwrap(), samples);
        std::fs::remove_dir_all(&dir).ok();
    }
}
