//! Summary tables computed from the audit record files alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use faudit_core::explainers::ids;
use faudit_core::faithfulness::AuditRecord;
use faudit_core::stats::{
    by_group, classification_metrics, cohens_d, commonly_correct_filter, exclude_class, mean, per_class_table,
    restrict_to, ClassTable, FamilySummary, METRICS,
};
use faudit_core::synthwafer::WaferClass;
use serde::{Deserialize, Serialize};

use crate::config::ReportConfig;
use crate::svg::{line_chart, Series};

const INTERVAL_NOTE: &str = "Intervals resample the audited samples only; they do not \
cover variation from retraining or from drawing a new dataset.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub records: usize,
    pub error_rows: usize,
    pub bootstrap_method: String,
    pub bootstrap_resamples: usize,
    pub bootstrap_level: f64,
    pub effect_size: String,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub model: String,
    pub seed: u64,
    pub n: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub fill: String,
    pub metric: String,
    pub group_a: String,
    pub group_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `None` when undefined (too few samples or zero pooled spread).
    pub d: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub group: String,
    pub seed: u64,
    pub n: usize,
    pub del_auc: f64,
    pub ins_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkRow {
    pub group: String,
    pub k_percent: u32,
    pub n: usize,
    pub mean_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub description: String,
    pub samples: usize,
    pub records: usize,
    pub family_means: Vec<FamilySummary>,
    pub effect_sizes: Vec<EffectSize>,
    pub error: Option<String>,
}

/// Mean deletion AUC of the attention-model explainers, per model, seed and
/// fill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub model: String,
    pub seed: u64,
    pub fill: String,
    pub rollout: Option<f64>,
    pub cls_attention: Option<f64>,
    pub gradcam: Option<f64>,
    /// Final-layer attention lies strictly between rollout and Grad-CAM.
    pub cls_between: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablations {
    /// Grad-CAM applied to models that also expose attention.
    pub gradcam_on_attention_models: Vec<FamilySummary>,
    pub final_layer_attention: Vec<AttentionRow>,
    pub commonly_correct: Subset,
    pub topk: Vec<TopkRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: Meta,
    pub classification: Vec<ClassificationRow>,
    pub family_means: Vec<FamilySummary>,
    pub per_class_del_auc: ClassTable,
    pub effect_sizes: Vec<EffectSize>,
    pub seed_level: Vec<SeedRow>,
    pub excluding_class: Option<Subset>,
    pub ablations: Ablations,
}

fn family_means(records: &[AuditRecord], cfg: &ReportConfig) -> Vec<FamilySummary> {
    by_group(records)
        .into_iter()
        .map(|(g, rs)| FamilySummary::from_records(&g, &rs, cfg.bootstrap, cfg.bootstrap_seed))
        .collect()
}

/// `model/explainer` pairs compared within each fill.
fn effect_sizes(records: &[AuditRecord]) -> Vec<EffectSize> {
    let mut cells: BTreeMap<(String, String), Vec<&AuditRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        cells
            .entry((r.fill.clone(), format!("{}/{}", r.model, r.explainer)))
            .or_default()
            .push(r);
    }
    let fills: BTreeSet<&String> = cells.keys().map(|(f, _)| f).collect();
    let mut out = Vec::new();
    for fill in fills {
        let groups: Vec<(&String, &Vec<&AuditRecord>)> =
            cells.iter().filter(|((f, _), _)| f == fill).map(|((_, g), v)| (g, v)).collect();
        for (i, (ga, ra)) in groups.iter().enumerate() {
            for (gb, rb) in &groups[i + 1..] {
                let metrics: [(&str, fn(&AuditRecord) -> f64); 2] =
                    [("del_auc", |r| r.del_auc), ("ins_auc", |r| r.ins_auc)];
                for (metric, get) in metrics {
                    let a: Vec<f64> = ra.iter().map(|r| get(r)).collect();
                    let b: Vec<f64> = rb.iter().map(|r| get(r)).collect();
                    out.push(EffectSize {
                        fill: fill.clone(),
                        metric: metric.to_string(),
                        group_a: (*ga).clone(),
                        group_b: (*gb).clone(),
                        n_a: a.len(),
                        n_b: b.len(),
                        mean_a: mean(&a).unwrap_or(f64::NAN),
                        mean_b: mean(&b).unwrap_or(f64::NAN),
                        d: cohens_d(&a, &b).ok(),
                    });
                }
            }
        }
    }
    out
}

fn classification(records: &[AuditRecord]) -> Vec<ClassificationRow> {
    let mut seen: BTreeMap<(String, u64), BTreeMap<u64, (usize, usize)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        seen.entry((r.model.clone(), r.seed))
            .or_default()
            .entry(r.sample_id)
            .or_insert((r.true_class, r.predicted_class));
    }
    seen.into_iter()
        .filter_map(|((model, seed), samples)| {
            let (truth, pred): (Vec<usize>, Vec<usize>) = samples.values().copied().unzip();
            let n_classes = truth.iter().chain(&pred).max()? + 1;
            let m = classification_metrics(&truth, &pred, n_classes.max(WaferClass::ALL.len())).ok()?;
            Some(ClassificationRow {
                model,
                seed,
                n: truth.len(),
                accuracy: m.accuracy,
                balanced_accuracy: m.balanced_accuracy,
                macro_f1: m.macro_f1,
            })
        })
        .collect()
}

fn seed_level(records: &[AuditRecord]) -> Vec<SeedRow> {
    let mut cells: BTreeMap<(String, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        let e = cells.entry((r.group(), r.seed)).or_default();
        e.0.push(r.del_auc);
        e.1.push(r.ins_auc);
    }
    cells
        .into_iter()
        .map(|((group, seed), (d, i))| SeedRow {
            group,
            seed,
            n: d.len(),
            del_auc: mean(&d).unwrap_or(f64::NAN),
            ins_auc: mean(&i).unwrap_or(f64::NAN),
        })
        .collect()
}

fn topk(records: &[AuditRecord]) -> Vec<TopkRow> {
    let mut cells: BTreeMap<(String, u32), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        for (&k, &v) in &r.topk_drops {
            cells.entry((r.group(), k)).or_default().push(v);
        }
    }
    cells
        .into_iter()
        .map(|((group, k_percent), v)| TopkRow {
            group,
            k_percent,
            n: v.len(),
            mean_drop: mean(&v).unwrap_or(f64::NAN),
        })
        .collect()
}

fn subset(description: String, records: Vec<AuditRecord>, samples: usize, cfg: &ReportConfig) -> Subset {
    Subset {
        description,
        samples,
        records: records.len(),
        family_means: family_means(&records, cfg),
        effect_sizes: effect_sizes(&records),
        error: None,
    }
}

fn commonly_correct(records: &[AuditRecord], cfg: &ReportConfig) -> Subset {
    let description = "samples every model classifies correctly (per seed)".to_string();
    match commonly_correct_filter(records) {
        Ok(keys) => subset(description, restrict_to(records, &keys), keys.len(), cfg),
        Err(e) => Subset {
            description,
            samples: 0,
            records: 0,
            family_means: Vec::new(),
            effect_sizes: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

fn attention_rows(records: &[AuditRecord]) -> Vec<AttentionRow> {
    let mut cells: BTreeMap<(String, u64, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        cells
            .entry((r.model.clone(), r.seed, r.fill.clone()))
            .or_default()
            .entry(r.explainer.clone())
            .or_default()
            .push(r.del_auc);
    }
    cells
        .into_iter()
        .filter(|(_, by)| by.contains_key(ids::ROLLOUT) || by.contains_key(ids::CLS_ATTENTION))
        .map(|((model, seed, fill), by)| {
            let get = |e: &str| by.get(e).and_then(|v| mean(v));
            let (rollout, cls, gradcam) = (get(ids::ROLLOUT), get(ids::CLS_ATTENTION), get(ids::GRADCAM));
            let cls_between = match (rollout, cls, gradcam) {
                (Some(r), Some(c), Some(g)) => Some((r < c && c < g) || (g < c && c < r)),
                _ => None,
            };
            AttentionRow {
                model,
                seed,
                fill,
                rollout,
                cls_attention: cls,
                gradcam,
                cls_between,
            }
        })
        .collect()
}

pub fn build(records: &[AuditRecord], cfg: &ReportConfig) -> Report {
    let usable: Vec<AuditRecord> = records.iter().filter(|r| r.error.is_none()).cloned().collect();
    let attention_models: BTreeSet<&str> = usable
        .iter()
        .filter(|r| r.explainer == ids::ROLLOUT || r.explainer == ids::CLS_ATTENTION)
        .map(|r| r.model.as_str())
        .collect();
    let gradcam_attention: Vec<AuditRecord> = usable
        .iter()
        .filter(|r| r.explainer == ids::GRADCAM && attention_models.contains(r.model.as_str()))
        .cloned()
        .collect();
    let excluding_class = cfg.exclude_class.map(|c| {
        let kept = exclude_class(&usable, c.index());
        let samples = kept.iter().map(|r| (r.seed, r.sample_id)).collect::<BTreeSet<_>>().len();
        subset(format!("all samples except class `{}`", c.name()), kept, samples, cfg)
    });
    Report {
        meta: Meta {
            records: records.len(),
            error_rows: records.len() - usable.len(),
            bootstrap_method: "percentile".into(),
            bootstrap_resamples: cfg.bootstrap.n_resamples,
            bootstrap_level: cfg.bootstrap.level,
            effect_size: "cohen's d, pooled sample standard deviation, over the pooled sample set".into(),
            note: INTERVAL_NOTE.into(),
        },
        classification: classification(&usable),
        family_means: family_means(&usable, cfg),
        per_class_del_auc: per_class_table(&usable, |r| Some(r.del_auc)),
        effect_sizes: effect_sizes(&usable),
        seed_level: seed_level(&usable),
        excluding_class,
        ablations: Ablations {
            gradcam_on_attention_models: family_means(&gradcam_attention, cfg),
            final_layer_attention: attention_rows(&usable),
            commonly_correct: commonly_correct(&usable, cfg),
            topk: topk(&usable),
        },
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_family_means(path: &Path, rows: &[FamilySummary]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["group".to_string(), "n".to_string()];
    for (name, _) in METRICS {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
        header.push(format!("{name}_n"));
    }
    header.extend(["del_auc_ci_low".to_string(), "del_auc_ci_high".to_string()]);
    w.write_record(&header)?;
    for f in rows {
        let mut row = vec![f.group.clone(), f.n.to_string()];
        for (name, _) in METRICS {
            match f.metrics.get(name) {
                Some(m) => row.extend([num(m.mean), num(m.std), m.n.to_string()]),
                None => row.extend([String::new(), String::new(), "0".to_string()]),
            }
        }
        row.push(opt(f.del_auc_ci.map(|c| c.0)));
        row.push(opt(f.del_auc_ci.map(|c| c.1)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_effect_sizes(path: &Path, rows: &[EffectSize]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fill", "metric", "group_a", "group_b", "n_a", "n_b", "mean_a", "mean_b", "cohens_d"])?;
    for e in rows {
        w.write_record([
            e.fill.clone(),
            e.metric.clone(),
            e.group_a.clone(),
            e.group_b.clone(),
            e.n_a.to_string(),
            e.n_b.to_string(),
            num(e.mean_a),
            num(e.mean_b),
            opt(e.d),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn class_name(c: usize) -> String {
    WaferClass::from_index(c).map(|w| w.name().to_string()).unwrap_or_else(|| c.to_string())
}

/// Mean curve per `(group, fill, direction)` from the long curve file.
fn mean_curves(path: &Path) -> anyhow::Result<BTreeMap<(String, String, String), Vec<(f64, f64)>>> {
    let mut sums: BTreeMap<(String, String, String), BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    let mut r = csv::Reader::from_path(path)?;
    for row in r.records() {
        let row = row?;
        let group = format!("{}/{}", &row[0], &row[2]);
        let x: f64 = row[6].parse()?;
        let p: f64 = row[7].parse()?;
        sums.entry((group, row[3].to_string(), row[4].to_string()))
            .or_default()
            .entry(x.to_bits())
            .or_insert((x, Vec::new()))
            .1
            .push(p);
    }
    Ok(sums
        .into_iter()
        .map(|(k, pts)| {
            let mut curve: Vec<(f64, f64)> = pts.into_values().map(|(x, ps)| (x, mean(&ps).unwrap_or(f64::NAN))).collect();
            curve.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, curve)
        })
        .collect())
}

fn summary_text(report: &Report) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "records: {} ({} error rows)\n\nclassification on audited samples\n",
        report.meta.records, report.meta.error_rows
    ));
    for c in &report.classification {
        s.push_str(&format!(
            "  {:<12} seed {:<4} n={:<4} acc {:.3}  balanced {:.3}  macro-F1 {:.3}\n",
            c.model, c.seed, c.n, c.accuracy, c.balanced_accuracy, c.macro_f1
        ));
    }
    s.push_str("\nmean deletion / insertion AUC (95% interval on deletion)\n");
    for f in &report.family_means {
        let get = |k: &str| f.metrics.get(k).map(|m| format!("{:.3}", m.mean)).unwrap_or_else(|| "-".into());
        let ci = f
            .del_auc_ci
            .map(|(a, b)| format!("[{a:.3}, {b:.3}]"))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "  {:<36} n={:<5} del {}  {}  ins {}\n",
            f.group,
            f.n,
            get("del_auc"),
            ci,
            get("ins_auc")
        ));
    }
    s.push_str("\nfinal-layer attention between rollout and grad-cam\n");
    for a in &report.ablations.final_layer_attention {
        s.push_str(&format!(
            "  {:<12} seed {:<4} {:<5} rollout {}  cls {}  gradcam {}  between {}\n",
            a.model,
            a.seed,
            a.fill,
            a.rollout.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            a.cls_attention.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            a.gradcam.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            a.cls_between.map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
        ));
    }
    s.push_str(&format!("\n{}\n", report.meta.note));
    s
}

/// Writes every report artifact into `dir`.
pub fn write(report: &Report, curves: Option<&Path>, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("summary.txt"), summary_text(report))?;
    write_family_means(&dir.join("family_means.csv"), &report.family_means)?;
    write_effect_sizes(&dir.join("cohens_d.csv"), &report.effect_sizes)?;

    let mut w = csv::Writer::from_path(dir.join("per_class_del_auc.csv"))?;
    w.write_record(["class", "group", "del_auc_mean"])?;
    for (c, cells) in &report.per_class_del_auc.cells {
        for (g, v) in cells {
            w.write_record([class_name(*c), g.clone(), num(*v)])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("classification.csv"))?;
    w.write_record(["model", "seed", "n", "accuracy", "balanced_accuracy", "macro_f1"])?;
    for c in &report.classification {
        w.write_record([
            c.model.clone(),
            c.seed.to_string(),
            c.n.to_string(),
            num(c.accuracy),
            num(c.balanced_accuracy),
            num(c.macro_f1),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("seed_level.csv"))?;
    w.write_record(["group", "seed", "n", "del_auc_mean", "ins_auc_mean"])?;
    for s in &report.seed_level {
        w.write_record([s.group.clone(), s.seed.to_string(), s.n.to_string(), num(s.del_auc), num(s.ins_auc)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("topk.csv"))?;
    w.write_record(["group", "k_percent", "n", "mean_drop"])?;
    for t in &report.ablations.topk {
        w.write_record([t.group.clone(), t.k_percent.to_string(), t.n.to_string(), num(t.mean_drop)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("final_layer_attention.csv"))?;
    w.write_record(["model", "seed", "fill", "rollout", "cls_attention", "gradcam", "cls_between"])?;
    for a in &report.ablations.final_layer_attention {
        w.write_record([
            a.model.clone(),
            a.seed.to_string(),
            a.fill.clone(),
            opt(a.rollout),
            opt(a.cls_attention),
            opt(a.gradcam),
            a.cls_between.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    write_family_means(
        &dir.join("gradcam_on_attention_models.csv"),
        &report.ablations.gradcam_on_attention_models,
    )?;
    let cc = &report.ablations.commonly_correct;
    write_family_means(&dir.join("commonly_correct_family_means.csv"), &cc.family_means)?;
    write_effect_sizes(&dir.join("commonly_correct_cohens_d.csv"), &cc.effect_sizes)?;
    if let Some(ex) = &report.excluding_class {
        write_family_means(&dir.join("excluding_class_family_means.csv"), &ex.family_means)?;
    }

    if let Some(path) = curves.filter(|p| p.exists()) {
        let curves = mean_curves(path)?;
        let mut w = csv::Writer::from_path(dir.join("curves_mean.csv"))?;
        w.write_record(["group", "fill", "direction", "fraction", "mean_probability"])?;
        let mut charts: BTreeMap<(String, String), Vec<Series>> = BTreeMap::new();
        for ((group, fill, direction), pts) in &curves {
            for (x, y) in pts {
                w.write_record([group.clone(), fill.clone(), direction.clone(), num(*x), num(*y)])?;
            }
            charts.entry((fill.clone(), direction.clone())).or_default().push(Series {
                label: group.clone(),
                points: pts.clone(),
            });
        }
        w.flush()?;
        for ((fill, direction), series) in charts {
            let title = format!("{direction} curves, {fill} fill");
            fs::write(dir.join(format!("curves_{fill}_{direction}.svg")), line_chart(&title, &series))?;
        }
    }
    Ok(())
}
