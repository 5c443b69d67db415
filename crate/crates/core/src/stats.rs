//! Summary statistics over audit records: effect sizes, bootstrap
//! intervals, grouped tables, subset filters and classification metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faithfulness::AuditRecord;

/// Ascending copy; summing in this order makes every aggregate independent
/// of record order, bit for bit.
fn ascending(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(ascending(values).iter().sum::<f64>() / values.len() as f64)
    }
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = ascending(values).iter().map(|v| (v - m).powi(2)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Standardised mean difference with the pooled sample standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "cohen's d needs two values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (sample_std(a).unwrap_or(0.0), sample_std(b).unwrap_or(0.0));
    let pooled = (((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(Error::Undefined("pooled standard deviation is zero".into()));
    }
    Ok((mean(a).unwrap_or(0.0) - mean(b).unwrap_or(0.0)) / pooled)
}

/// Linear-interpolation quantile of sorted data (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: 2000,
            level: 0.95,
        }
    }
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(values: &[f64], cfg: BootstrapConfig, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "bootstrap needs at least two values, got {}",
            values.len()
        )));
    }
    if cfg.n_resamples == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::invalid(format!("invalid bootstrap config {cfg:?}")));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..cfg.n_resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok((quantile_sorted(&means, tail), quantile_sorted(&means, 1.0 - tail)))
}

/// Ranks starting at 1, ties sharing the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a)?, mean(b)?);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman correlation with average ranks; `None` when either input is
/// constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub per_class_recall: Vec<Option<f64>>,
}

/// Accuracy, mean recall over classes present in `truth`, and macro F1 over
/// classes present in either vector.
pub fn classification_metrics(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::invalid(format!(
            "need equal, non-empty label vectors, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("class {bad} out of range for {n_classes}")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let accuracy = tp.iter().sum::<usize>() as f64 / truth.len() as f64;
    let per_class_recall: Vec<Option<f64>> = (0..n_classes)
        .map(|c| (support[c] > 0).then(|| tp[c] as f64 / support[c] as f64))
        .collect();
    let recalls: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let f1s: Vec<f64> = (0..n_classes)
        .filter(|&c| support[c] + predicted[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (support[c] + predicted[c]) as f64)
        .collect();
    Ok(ClassificationMetrics {
        accuracy,
        balanced_accuracy: mean(&recalls).unwrap_or(0.0),
        macro_f1: mean(&f1s).unwrap_or(0.0),
        per_class_recall,
    })
}

pub fn balanced_accuracy(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<f64> {
    Ok(classification_metrics(truth, pred, n_classes)?.balanced_accuracy)
}

fn usable(records: &[AuditRecord]) -> impl Iterator<Item = &AuditRecord> {
    records.iter().filter(|r| r.error.is_none())
}

/// Named scalar extracted from a record.
pub type MetricFn = fn(&AuditRecord) -> Option<f64>;

pub const METRICS: [(&str, MetricFn); 8] = [
    ("del_auc", |r| Some(r.del_auc)),
    ("ins_auc", |r| Some(r.ins_auc)),
    ("stability", |r| r.stability),
    ("iou", |r| r.iou),
    ("spearman_defect", |r| r.spearman_defect),
    ("topk5", |r| r.topk_drop(5)),
    ("topk10", |r| r.topk_drop(10)),
    ("topk20", |r| r.topk_drop(20)),
];

/// Mean of `metric` per (true class, group) cell. Cells with no data are
/// absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<usize>,
    pub groups: Vec<String>,
    pub cells: BTreeMap<usize, BTreeMap<String, f64>>,
}

impl ClassTable {
    pub fn get(&self, class: usize, group: &str) -> Option<f64> {
        self.cells.get(&class)?.get(group).copied()
    }
}

pub fn per_class_table(records: &[AuditRecord], metric: MetricFn) -> ClassTable {
    let mut values: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for r in usable(records) {
        if let Some(v) = metric(r) {
            values.entry((r.true_class, r.group())).or_default().push(v);
        }
    }
    let mut cells: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    for ((c, g), v) in values {
        cells.entry(c).or_default().insert(g, mean(&v).unwrap_or(0.0));
    }
    let classes = cells.keys().copied().collect();
    let groups: BTreeSet<String> = cells.values().flat_map(|m| m.keys().cloned()).collect();
    ClassTable {
        classes,
        groups: groups.into_iter().collect(),
        cells,
    }
}

/// `(seed, sample_id)` pairs that every model classifies correctly.
pub fn commonly_correct_filter(records: &[AuditRecord]) -> Result<BTreeSet<(u64, u64)>> {
    let mut per_model: BTreeMap<&str, BTreeMap<(u64, u64), bool>> = BTreeMap::new();
    for r in records {
        let slot = per_model
            .entry(r.model.as_str())
            .or_default()
            .entry((r.seed, r.sample_id))
            .or_insert(true);
        *slot &= r.correct;
    }
    let mut models = per_model.iter();
    let Some((first_name, first)) = models.next() else {
        return Ok(BTreeSet::new());
    };
    let keys: BTreeSet<(u64, u64)> = first.keys().copied().collect();
    for (name, m) in models {
        let other: BTreeSet<(u64, u64)> = m.keys().copied().collect();
        if other != keys {
            return Err(Error::invalid(format!(
                "models `{first_name}` and `{name}` cover different samples"
            )));
        }
    }
    Ok(keys
        .into_iter()
        .filter(|k| per_model.values().all(|m| m[k]))
        .collect())
}

pub fn restrict_to(records: &[AuditRecord], keys: &BTreeSet<(u64, u64)>) -> Vec<AuditRecord> {
    records
        .iter()
        .filter(|r| keys.contains(&(r.seed, r.sample_id)))
        .cloned()
        .collect()
}

pub fn exclude_class(records: &[AuditRecord], class: usize) -> Vec<AuditRecord> {
    records.iter().filter(|r| r.true_class != class).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self {
            n: values.len(),
            mean: mean(values)?,
            std: sample_std(values).unwrap_or(0.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub group: String,
    pub n: usize,
    pub metrics: BTreeMap<String, MeanStd>,
    pub per_class_del_auc: BTreeMap<usize, f64>,
    pub del_auc_ci: Option<(f64, f64)>,
}

impl FamilySummary {
    /// Summary of all usable records; `group` is only a label.
    pub fn from_records(group: &str, records: &[AuditRecord], boot: BootstrapConfig, seed: u64) -> Self {
        let rows: Vec<&AuditRecord> = usable(records).collect();
        let mut metrics = BTreeMap::new();
        for (name, f) in METRICS {
            let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
            if let Some(ms) = MeanStd::of(&vals) {
                metrics.insert(name.to_string(), ms);
            }
        }
        let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            by_class.entry(r.true_class).or_default().push(r.del_auc);
        }
        let del = ascending(&rows.iter().map(|r| r.del_auc).collect::<Vec<_>>());
        Self {
            group: group.to_string(),
            n: rows.len(),
            metrics,
            per_class_del_auc: by_class
                .into_iter()
                .map(|(c, v)| (c, mean(&v).unwrap_or(0.0)))
                .collect(),
            del_auc_ci: bootstrap_ci(&del, boot, seed).ok(),
        }
    }
}

/// Splits usable records by [`AuditRecord::group`].
pub fn by_group(records: &[AuditRecord]) -> BTreeMap<String, Vec<AuditRecord>> {
    let mut out: BTreeMap<String, Vec<AuditRecord>> = BTreeMap::new();
    for r in usable(records) {
        out.entry(r.group()).or_default().push(r.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohens_d_analytic_case() {
        let d = cohens_d(&[0.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((d + 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(cohens_d(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap(), 0.0);
        assert!(matches!(cohens_d(&[1.0, 1.0], &[1.0, 1.0]), Err(Error::Undefined(_))));
        assert!(cohens_d(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn quantile_type7() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert!((quantile_sorted(&s, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_sorted(&s, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        assert_eq!(bootstrap_ci(&[5.0; 4], BootstrapConfig::default(), 1).unwrap(), (5.0, 5.0));
        let v: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let a = bootstrap_ci(&v, BootstrapConfig::default(), 9).unwrap();
        assert_eq!(a, bootstrap_ci(&v, BootstrapConfig::default(), 9).unwrap());
        assert!(a.0 < a.1);
        assert!(bootstrap_ci(&[], BootstrapConfig::default(), 9).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_monotone_cases() {
        let a = [0.1, 0.5, 0.3, 0.9];
        let up: Vec<f64> = a.iter().map(|v: &f64| v.exp()).collect();
        let down: Vec<f64> = a.iter().map(|v| -v * v * v).collect();
        assert_eq!(spearman(&a, &up), Some(1.0));
        assert_eq!(spearman(&a, &down), Some(-1.0));
        assert_eq!(spearman(&a, &[1.0; 4]), None);
    }

    #[test]
    fn classification_metrics_hand_case() {
        let truth = [0, 0, 0, 1, 1, 2];
        let pred = [0, 0, 1, 1, 1, 0];
        let m = classification_metrics(&truth, &pred, 3).unwrap();
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.balanced_accuracy - (2.0 / 3.0 + 1.0 + 0.0) / 3.0).abs() < 1e-15);
        // F1: class0 2*2/(3+3)=2/3, class1 2*2/(2+3)=0.8, class2 0.
        assert!((m.macro_f1 - (2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-15);
        assert!(classification_metrics(&[0], &[3], 3).is_err());
    }
}
