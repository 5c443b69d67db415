//! The pipeline stages and the files they exchange inside a run directory.
//!
//! ```text
//! run-<digest>/
//!   config.toml
//!   data/{train,val,test,eval}.faud, dataset.json
//!   models/<model>-s<seed>.faud, <model>-s<seed>.json
//!   heatmaps/<model>/s<seed>/<explainer>/<sample>.bin (+ .bin.json)
//!   heatmaps/<model>/s<seed>/<explainer>/{stability,errors}.json
//!   records/{records.jsonl,records.csv,curves.csv}
//!   report/...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use faudit_core::blackbox::{spawn_adapter, BlackboxConfig, ModelHandle};
use faudit_core::explainers::{
    attention_rollout, cls_attention_last_layer, grad_cam, ids, random_baseline, rise, Heatmap, RiseConfig,
};
use faudit_core::faithfulness::{
    audit_sample, stability, AuditRecord, RecordMeta, SampleInput, StabilityResult,
};
use faudit_core::models::train::{predict_labels, train, TrainReport};
use faudit_core::predictor::argmax;
use faudit_core::stats::{classification_metrics, ClassificationMetrics};
use faudit_core::synthwafer::{balanced_eval_subset, generate_with, load_split, save_split, Split, WaferSample};
use faudit_core::{Exec, Model, Predictor, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{config_error, AuditConfig, ModelEntry, ModelKind};

/// A validated config bound to its run directory.
pub struct Run {
    pub config: AuditConfig,
    pub dir: PathBuf,
    pub exec: Exec,
}

/// What a stage did; `failures` counts samples recorded as error rows.
#[derive(Debug, Default, PartialEq)]
pub struct StageSummary {
    pub failures: usize,
    pub lines: Vec<String>,
}

impl Run {
    /// Validates `config`, creates the run directory and writes the
    /// resolved config into it.
    pub fn open(config: AuditConfig, exec: Exec) -> anyhow::Result<Self> {
        config.validate()?;
        let dir = config.run_dir()?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.toml"), config.to_toml()?)?;
        Ok(Self { config, dir, exec })
    }

    pub fn data_path(&self, split: &str) -> PathBuf {
        self.dir.join("data").join(format!("{split}.faud"))
    }

    pub fn model_path(&self, model: &str, seed: u64) -> PathBuf {
        self.dir.join("models").join(format!("{model}-s{seed}.faud"))
    }

    pub fn heatmap_dir(&self, model: &str, seed: u64, explainer: &str) -> PathBuf {
        self.dir.join("heatmaps").join(model).join(format!("s{seed}")).join(explainer)
    }

    pub fn records_dir(&self) -> PathBuf {
        self.dir.join("records")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }

    fn require(&self, path: &Path, stage: &str) -> anyhow::Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(config_error(format!(
                "missing artifact {} (run `{stage}` first)",
                path.display()
            )))
        }
    }

    pub fn eval_samples(&self) -> anyhow::Result<Vec<WaferSample>> {
        let path = self.data_path("eval");
        self.require(&path, "generate")?;
        Ok(load_split(&path)?)
    }

    /// Model for `entry` at `seed`, ready for prediction.
    pub fn load_model(&self, entry: &ModelEntry, seed: u64) -> anyhow::Result<Loaded> {
        Ok(match entry.kind {
            ModelKind::Cnn | ModelKind::Vit => {
                let path = self.model_path(&entry.name, seed);
                self.require(&path, "train")?;
                Loaded::Native(Model::load(&path)?)
            }
            ModelKind::Checkpoint => Loaded::Native(Model::load(entry.path.as_ref().unwrap())?),
            ModelKind::Adapter => {
                let cmd = entry.command.as_ref().unwrap();
                Loaded::Remote(
                    spawn_adapter(cmd, BlackboxConfig::default())
                        .with_context(|| format!("starting adapter for `{}`", entry.name))?,
                )
            }
        })
    }

    /// Inner executor for work nested inside a parallel sample loop.
    fn inner_exec(&self) -> Exec {
        if self.exec.is_parallel() {
            Exec::Sequential
        } else {
            self.exec
        }
    }
}

pub enum Loaded {
    Native(Model),
    Remote(ModelHandle),
}

impl Loaded {
    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            Loaded::Native(m) => m,
            Loaded::Remote(h) => h,
        }
    }

    pub fn native(&self) -> Option<&Model> {
        match self {
            Loaded::Native(m) => Some(m),
            Loaded::Remote(_) => None,
        }
    }
}

/// Deterministic per-(seed, sample) stream id.
pub fn mix_seed(base: u64, seed: u64, sample_id: u64) -> u64 {
    let mut z = base ^ seed.rotate_left(32) ^ sample_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Heatmap of `explainer` for the predicted class of `image`.
pub fn explain(
    model: &Loaded,
    explainer: &str,
    image: &Tensor,
    seed: u64,
    sample_id: u64,
    rise_cfg: &RiseConfig,
    exec: Exec,
) -> faudit_core::Result<Heatmap> {
    let target = argmax(&model.predictor().predict(image)?);
    let native = || {
        model
            .native()
            .ok_or_else(|| faudit_core::Error::InvalidArgument(format!("`{explainer}` needs a built-in model")))
    };
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let map = match explainer {
        ids::GRADCAM => {
            let m = native()?;
            grad_cam(m, image, target, &m.gradcam_layer())?
        }
        ids::ROLLOUT => attention_rollout(native()?, image)?,
        ids::CLS_ATTENTION => cls_attention_last_layer(native()?, image)?,
        ids::RISE => {
            let cfg = RiseConfig {
                seed: mix_seed(rise_cfg.seed, seed, sample_id),
                ..rise_cfg.clone()
            };
            rise(model.predictor(), image, target, &cfg, exec)?
        }
        ids::RANDOM => random_baseline(h, w, target, mix_seed(0x5EED, seed, sample_id))?,
        other => return Err(faudit_core::Error::InvalidArgument(format!("unknown explainer `{other}`"))),
    };
    Ok(map.with_sample(sample_id))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct DatasetSummary {
    counts: BTreeMap<String, BTreeMap<String, usize>>,
    eval_samples: usize,
}

pub fn generate(run: &Run) -> anyhow::Result<StageSummary> {
    let spec = run.config.dataset.spec();
    let samples = generate_with(&spec, run.exec)?;
    fs::create_dir_all(run.dir.join("data"))?;
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for split in Split::ALL {
        let part: Vec<&WaferSample> = samples.iter().filter(|s| s.split == split).collect();
        save_split(run.data_path(split.name()), &part)?;
        for s in &part {
            *counts
                .entry(split.name().to_string())
                .or_default()
                .entry(s.label.name().to_string())
                .or_default() += 1;
        }
    }
    let eval = balanced_eval_subset(&samples, run.config.dataset.eval_per_class, spec.master_seed)?;
    save_split(run.data_path("eval"), &eval.iter().collect::<Vec<_>>())?;
    write_json(
        &run.dir.join("data").join("dataset.json"),
        &DatasetSummary {
            counts,
            eval_samples: eval.len(),
        },
    )?;
    Ok(StageSummary {
        failures: 0,
        lines: vec![format!("generated {} samples, {} in the audit subset", samples.len(), eval.len())],
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub seed: u64,
    pub training: TrainReport,
    pub test: ClassificationMetrics,
    pub eval: ClassificationMetrics,
}

fn evaluate(model: &Model, samples: &[WaferSample], exec: Exec) -> anyhow::Result<ClassificationMetrics> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let pred = predict_labels(model, &images, exec)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    Ok(classification_metrics(&truth, &pred, model.n_classes())?)
}

pub fn train_summary_path(run: &Run, model: &str, seed: u64) -> PathBuf {
    run.model_path(model, seed).with_extension("json")
}

pub fn train_stage(run: &Run) -> anyhow::Result<StageSummary> {
    for split in ["train", "val", "test"] {
        run.require(&run.data_path(split), "generate")?;
    }
    let train_set = load_split(run.data_path("train"))?;
    let val_set = load_split(run.data_path("val"))?;
    let test_set = load_split(run.data_path("test"))?;
    let eval_set = run.eval_samples()?;
    let examples = |s: &[WaferSample]| -> Vec<(Tensor, usize)> {
        s.iter().map(|x| (x.image.clone(), x.label.index())).collect()
    };
    let (tr, va) = (examples(&train_set), examples(&val_set));
    let tr: Vec<(&Tensor, usize)> = tr.iter().map(|(x, y)| (x, *y)).collect();
    let va: Vec<(&Tensor, usize)> = va.iter().map(|(x, y)| (x, *y)).collect();

    let mut out = StageSummary::default();
    for entry in run.config.models.iter().filter(|m| m.trained()) {
        let arch = entry.resolved_arch(run.config.dataset.image_size).unwrap();
        for &seed in &run.config.seeds {
            let mut model = Model::new(&arch, seed)?;
            let cfg = run.config.train_config(entry, seed);
            let report = train(&mut model, &tr, &va, &cfg, run.exec)
                .with_context(|| format!("training `{}` seed {seed}", entry.name))?;
            let path = run.model_path(&entry.name, seed);
            fs::create_dir_all(path.parent().unwrap())?;
            model.save(&path)?;
            let summary = TrainSummary {
                model: entry.name.clone(),
                seed,
                training: report,
                test: evaluate(&model, &test_set, run.exec)?,
                eval: evaluate(&model, &eval_set, run.exec)?,
            };
            out.lines.push(format!(
                "{} seed {seed}: best val balanced accuracy {:.3} (epoch {}), test {:.3}",
                entry.name,
                summary.training.best_val_balanced_accuracy,
                summary.training.best_epoch,
                summary.test.balanced_accuracy
            ));
            write_json(&train_summary_path(run, &entry.name, seed), &summary)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StabilityEntry {
    value: f64,
    zero_norm_terms: usize,
}

type Explained = Result<(Heatmap, Option<StabilityResult>), String>;

pub fn explain_stage(run: &Run) -> anyhow::Result<StageSummary> {
    let samples = run.eval_samples()?;
    let cfg = &run.config;
    let inner = run.inner_exec();
    let mut out = StageSummary::default();
    for entry in &cfg.models {
        for &seed in &cfg.seeds {
            let model = run.load_model(entry, seed)?;
            for explainer in &entry.explainers {
                let with_stability = cfg.stability.applies_to(explainer);
                let results: Vec<Explained> = run.exec.map(samples.len(), |i| {
                    let s = &samples[i];
                    let heat = explain(&model, explainer, &s.image, seed, s.sample_id, &cfg.rise, inner)
                        .map_err(|e| e.to_string())?;
                    let stab = if with_stability {
                        let f = |x: &Tensor| explain(&model, explainer, x, seed, s.sample_id, &cfg.rise, inner);
                        let st = stability(&f, &s.image, &cfg.stability.config, mix_seed(0xA06, seed, s.sample_id))
                            .map_err(|e| format!("stability: {e}"))?;
                        Some(st)
                    } else {
                        None
                    };
                    Ok((heat, stab))
                });
                let dir = run.heatmap_dir(&entry.name, seed, explainer);
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                fs::create_dir_all(&dir)?;
                let mut stab_out = BTreeMap::new();
                let mut errors = BTreeMap::new();
                for (s, r) in samples.iter().zip(results) {
                    match r {
                        Ok((heat, st)) => {
                            heat.write_bin(dir.join(format!("{}.bin", s.sample_id)))?;
                            if let Some(st) = st {
                                stab_out.insert(
                                    s.sample_id,
                                    StabilityEntry {
                                        value: st.value,
                                        zero_norm_terms: st.zero_norm_terms,
                                    },
                                );
                            }
                        }
                        Err(e) => {
                            errors.insert(s.sample_id, e);
                        }
                    }
                }
                write_json(&dir.join("stability.json"), &stab_out)?;
                if !errors.is_empty() {
                    write_json(&dir.join("errors.json"), &errors)?;
                }
                out.failures += errors.len();
                out.lines.push(format!(
                    "{} seed {seed} {explainer}: {} heatmaps, {} failures",
                    entry.name,
                    samples.len() - errors.len(),
                    errors.len()
                ));
            }
        }
    }
    Ok(out)
}

/// One (model, seed, explainer) cell of the audit, in config order.
pub struct AuditCell {
    pub records: Vec<AuditRecord>,
    pub curve_rows: Vec<[String; 8]>,
}

fn audit_cell(run: &Run, entry: &ModelEntry, seed: u64, explainer: &str, samples: &[WaferSample]) -> anyhow::Result<AuditCell> {
    let dir = run.heatmap_dir(&entry.name, seed, explainer);
    run.require(&dir.join("stability.json"), "explain")?;
    let stab: BTreeMap<u64, StabilityEntry> = read_json(&dir.join("stability.json"))?;
    let errors: BTreeMap<u64, String> = if dir.join("errors.json").exists() {
        read_json(&dir.join("errors.json"))?
    } else {
        BTreeMap::new()
    };
    let model = run.load_model(entry, seed)?;
    let meta = RecordMeta {
        seed,
        model: entry.name.clone(),
        explainer: explainer.to_string(),
    };
    let settings = &run.config.audit;
    let per_sample = run.exec.map(samples.len(), |i| {
        let s = &samples[i];
        let mask = s.mask.clone();
        let input = SampleInput {
            sample_id: s.sample_id,
            image: &s.image,
            mask: Some(&mask),
            true_class: s.label.index(),
        };
        let attempt = || -> faudit_core::Result<_> {
            if let Some(e) = errors.get(&s.sample_id) {
                return Err(faudit_core::Error::InvalidArgument(format!("explanation failed: {e}")));
            }
            let heat = Heatmap::read_bin(dir.join(format!("{}.bin", s.sample_id)))?;
            let st = stab.get(&s.sample_id).map(|e| StabilityResult {
                value: e.value,
                zero_norm_terms: e.zero_norm_terms,
            });
            audit_sample(model.predictor(), &input, &heat, st.as_ref(), &meta, settings)
        };
        match attempt() {
            Ok(a) => (a.records, a.curves),
            Err(e) => (
                settings
                    .fills
                    .iter()
                    .map(|f| AuditRecord::failed(&meta, &input, f.name(), &e))
                    .collect(),
                Vec::new(),
            ),
        }
    });
    let mut cell = AuditCell {
        records: Vec::new(),
        curve_rows: Vec::new(),
    };
    for (s, (records, curves)) in samples.iter().zip(per_sample) {
        cell.records.extend(records);
        for (fill, curve) in curves {
            for (x, p) in curve.fractions.iter().zip(&curve.probabilities) {
                cell.curve_rows.push([
                    entry.name.clone(),
                    seed.to_string(),
                    explainer.to_string(),
                    fill.clone(),
                    curve.direction.name().to_string(),
                    s.sample_id.to_string(),
                    x.to_string(),
                    p.to_string(),
                ]);
            }
        }
    }
    Ok(cell)
}

pub const CURVE_HEADER: [&str; 8] = [
    "model",
    "seed",
    "explainer",
    "fill",
    "direction",
    "sample_id",
    "fraction",
    "probability",
];

pub fn audit_stage(run: &Run) -> anyhow::Result<StageSummary> {
    let samples = run.eval_samples()?;
    let dir = run.records_dir();
    fs::create_dir_all(&dir)?;
    let mut jsonl = String::new();
    let mut csv_out = csv::Writer::from_path(dir.join("records.csv"))?;
    let mut curves_out = csv::Writer::from_path(dir.join("curves.csv"))?;
    csv_out.write_record(AuditRecord::CSV_HEADER)?;
    curves_out.write_record(CURVE_HEADER)?;
    let mut out = StageSummary::default();
    for entry in &run.config.models {
        for &seed in &run.config.seeds {
            for explainer in &entry.explainers {
                let cell = audit_cell(run, entry, seed, explainer, &samples)?;
                let failed = cell.records.iter().filter(|r| r.error.is_some()).count();
                out.failures += failed;
                out.lines.push(format!(
                    "{} seed {seed} {explainer}: {} records, {failed} error rows",
                    entry.name,
                    cell.records.len()
                ));
                for r in &cell.records {
                    jsonl.push_str(&serde_json::to_string(r)?);
                    jsonl.push('\n');
                    csv_out.write_record(r.csv_row())?;
                }
                for row in &cell.curve_rows {
                    curves_out.write_record(row)?;
                }
            }
        }
    }
    csv_out.flush()?;
    curves_out.flush()?;
    fs::write(dir.join("records.jsonl"), jsonl)?;
    Ok(out)
}

pub fn load_records(run: &Run) -> anyhow::Result<Vec<AuditRecord>> {
    let path = run.records_dir().join("records.jsonl");
    run.require(&path, "audit")?;
    let text = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    if out.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(out)
}
