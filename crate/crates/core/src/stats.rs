//! Significance tests, resampling, and aggregation of metric reports.
//!
//! Resampling uses ChaCha8 (`rand_chacha`) seeded with `seed_from_u64(seed)`
//! and one stream per resample (`set_stream(i)`), so results do not depend
//! on evaluation order or thread count. Each index in `0..n` is drawn by
//! masking `next_u64()` to the next power of two above `n - 1` and
//! rejecting values `>= n`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::feature_store::{HashId, Manifest, ManifestEntry};
use crate::metrics::{self, MetricReport};
use crate::probe::seeded_rng;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 23;
pub const DEFAULT_CLUSTER_RESAMPLES: usize = 10_000;
/// Largest zero-free sample size evaluated with the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;
/// Datasets smaller than this are left out of equal-weight averages.
pub const MIN_DATASET_SIZE: usize = 100;

/// Uniform index in `0..n` by masked rejection sampling.
pub fn draw_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as u64;
    let mask = u64::MAX >> (n - 1).leading_zeros().min(63);
    let mask = if n == 1 { 0 } else { mask };
    loop {
        let v = rng.next_u64() & mask;
        if v < n {
            return v as usize;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of nonzero differences.
    pub n_effective: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1 by convention.
    pub all_zero: bool,
}

/// Midranks (1-based) of `values`, returned doubled so they are integers.
fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean; doubled that is i + j + 2
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank test. Zero differences are
/// dropped; the null distribution is exact up to 25 nonzero differences
/// (midranks for ties) and a tie-corrected normal approximation with
/// continuity correction above that.
pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Result<WilcoxonResult> {
    if deltas.is_empty() {
        return Err(Error::Empty("Wilcoxon test needs at least one difference".into()));
    }
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Validation("differences must be finite".into()));
    }
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n_effective: 0,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
            all_zero: true,
        });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = doubled_midranks(&abs);
    let w2: u64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&r, _)| r)
        .sum();

    let p_value = if n <= WILCOXON_EXACT_MAX_N {
        // counts[s] = number of sign assignments with doubled W+ == s
        let total: u64 = ranks.iter().sum();
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let le: u64 = counts[..=w2 as usize].iter().sum();
        let ge: u64 = counts[w2 as usize..].iter().sum();
        (2.0 * (le.min(ge) as f64) / all).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let w = w2 as f64 / 2.0;
        let dev = ((w - mean).abs() - 0.5).max(0.0);
        if var <= 0.0 {
            1.0
        } else {
            erfc(dev / var.sqrt() / std::f64::consts::SQRT_2).min(1.0)
        }
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w_plus: w2 as f64 / 2.0,
        p_value,
        exact: n <= WILCOXON_EXACT_MAX_N,
        all_zero: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    pub seed: u64,
}

/// Nearest-rank percentile of sorted values, `q` in (0, 1].
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let k = (q * sorted.len() as f64).ceil() as usize;
    sorted[k.clamp(1, sorted.len()) - 1]
}

fn resample_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let n = values.len();
    (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded_rng(seed, i as u64);
            let mut sum = 0.0;
            for _ in 0..n {
                sum += values[draw_index(&mut rng, n)];
            }
            sum / n as f64
        })
        .collect()
}

/// Paired bootstrap of `BS(a) - BS(b)` with per-sample squared errors.
pub fn paired_bootstrap_bs_delta(
    conf_a: &[f64],
    conf_b: &[f64],
    labels: &[bool],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if conf_a.is_empty() {
        return Err(Error::Empty("bootstrap needs at least one sample".into()));
    }
    if conf_a.len() != conf_b.len() || conf_a.len() != labels.len() {
        return Err(Error::Dimension {
            expected: conf_a.len(),
            got: conf_b.len().min(labels.len()),
        });
    }
    if resamples == 0 {
        return Err(Error::Validation("resample count must be positive".into()));
    }
    let deltas: Vec<f64> = conf_a
        .iter()
        .zip(conf_b)
        .zip(labels)
        .map(|((&a, &b), &y)| {
            let t = y as u8 as f64;
            (a - t) * (a - t) - (b - t) * (b - t)
        })
        .collect();
    let mut means = resample_means(&deltas, resamples, seed);
    let mean_delta = means.iter().sum::<f64>() / resamples as f64;
    means.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        mean_delta,
        ci_low: nearest_rank(&means, 0.025),
        ci_high: nearest_rank(&means, 0.975),
        resamples,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBootstrapResult {
    pub observed_mean: f64,
    pub p_value: f64,
    pub resamples: usize,
    pub seed: u64,
}

/// Two-sided bootstrap p-value for a zero mean, resampling whole clusters
/// (one seed-mean delta per cluster), floored at `1 / (R + 1)`.
pub fn cluster_bootstrap(cluster_deltas: &[f64], resamples: usize, seed: u64) -> Result<ClusterBootstrapResult> {
    if cluster_deltas.len() < 2 {
        return Err(Error::Validation("cluster bootstrap needs at least two clusters".into()));
    }
    if resamples == 0 {
        return Err(Error::Validation("resample count must be positive".into()));
    }
    let means = resample_means(cluster_deltas, resamples, seed);
    let le = means.iter().filter(|&&m| m <= 0.0).count() as f64;
    let ge = means.iter().filter(|&&m| m >= 0.0).count() as f64;
    let r = resamples as f64;
    let p = (2.0 * (le / r).min(ge / r)).clamp(1.0 / (r + 1.0), 1.0);
    Ok(ClusterBootstrapResult {
        observed_mean: cluster_deltas.iter().sum::<f64>() / cluster_deltas.len() as f64,
        p_value: p,
        resamples,
        seed,
    })
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_bonferroni(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("p-value {p} outside [0,1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (i, &k) in order.iter().enumerate() {
        running = running.max(p_values[k] * (m - i) as f64);
        adjusted[k] = running.min(1.0);
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
struct Clause {
    field: String,
    op: CmpOp,
    value: String,
}

/// Conjunction of `field op value` clauses over manifest fields
/// (`flip_swap`, `dp_swap`, `top1_prob`, `dataset`, `category`) and the
/// sample's `label`. Written as e.g. `flip_swap=0,label=0,top1_prob>0.8`.
/// A clause on a field the manifest does not record is false.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPredicate {
    text: String,
    clauses: Vec<Clause>,
}

const NUMERIC_FIELDS: [&str; 4] = ["flip_swap", "dp_swap", "top1_prob", "label"];
const TEXT_FIELDS: [&str; 2] = ["dataset", "category"];

impl SubsetPredicate {
    /// Selects every sample.
    pub fn all() -> Self {
        SubsetPredicate {
            text: String::new(),
            clauses: Vec::new(),
        }
    }

    pub fn image_invariant() -> Self {
        "flip_swap=0".parse().unwrap()
    }

    pub fn matches(&self, entry: &ManifestEntry, label: bool) -> bool {
        self.clauses.iter().all(|c| {
            let numeric = match c.field.as_str() {
                "flip_swap" => entry.flip_swap.map(f64::from),
                "dp_swap" => entry.dp_swap,
                "top1_prob" => entry.top1_prob,
                "label" => Some(label as u8 as f64),
                "dataset" => return text_cmp(&entry.dataset, c.op, &c.value),
                "category" => return text_cmp(&entry.category, c.op, &c.value),
                _ => unreachable!("fields are checked at parse time"),
            };
            let Some(lhs) = numeric else {
                return false;
            };
            let rhs: f64 = c.value.parse().expect("numeric values are checked at parse time");
            match c.op {
                CmpOp::Eq => lhs == rhs,
                CmpOp::Ne => lhs != rhs,
                CmpOp::Lt => lhs < rhs,
                CmpOp::Le => lhs <= rhs,
                CmpOp::Gt => lhs > rhs,
                CmpOp::Ge => lhs >= rhs,
            }
        })
    }
}

fn text_cmp(lhs: &str, op: CmpOp, rhs: &str) -> bool {
    match op {
        CmpOp::Eq => lhs == rhs,
        CmpOp::Ne => lhs != rhs,
        _ => false,
    }
}

impl FromStr for SubsetPredicate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut clauses = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (pos, op, len) = ["!=", ">=", "<=", "=", ">", "<"]
                .iter()
                .find_map(|tok| part.find(tok).map(|p| (p, *tok, tok.len())))
                .ok_or_else(|| Error::Validation(format!("predicate clause {part:?} has no operator")))?;
            let op = match op {
                "!=" => CmpOp::Ne,
                ">=" => CmpOp::Ge,
                "<=" => CmpOp::Le,
                "=" => CmpOp::Eq,
                ">" => CmpOp::Gt,
                _ => CmpOp::Lt,
            };
            let field = part[..pos].trim().to_string();
            let value = part[pos + len..].trim().to_string();
            if NUMERIC_FIELDS.contains(&field.as_str()) {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Validation(format!("{field} needs a numeric value, got {value:?}")))?;
            } else if TEXT_FIELDS.contains(&field.as_str()) {
                if !matches!(op, CmpOp::Eq | CmpOp::Ne) {
                    return Err(Error::Validation(format!("{field} supports only = and !=")));
                }
            } else {
                return Err(Error::Validation(format!("unknown predicate field {field:?}")));
            }
            clauses.push(Clause { field, op, value });
        }
        Ok(SubsetPredicate {
            text: s.trim().to_string(),
            clauses,
        })
    }
}

impl fmt::Display for SubsetPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.text.is_empty() {
            f.write_str("<all>")
        } else {
            f.write_str(&self.text)
        }
    }
}

/// Indices of samples whose manifest entry satisfies the predicate.
pub fn subset_indices(
    hash_ids: &[HashId],
    labels: &[bool],
    manifest: &Manifest,
    predicate: &SubsetPredicate,
) -> Result<Vec<usize>> {
    if hash_ids.len() != labels.len() {
        return Err(Error::Dimension {
            expected: hash_ids.len(),
            got: labels.len(),
        });
    }
    let mut keep = Vec::new();
    for (i, (id, &y)) in hash_ids.iter().zip(labels).enumerate() {
        let entry = manifest
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no manifest entry for {id}")))?;
        if predicate.matches(entry, y) {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Metric report restricted to the samples selected by `predicate`.
pub fn subset_metrics(
    confidences: &[f64],
    labels: &[bool],
    hash_ids: &[HashId],
    manifest: &Manifest,
    predicate: &SubsetPredicate,
) -> Result<MetricReport> {
    if confidences.len() != labels.len() {
        return Err(Error::Dimension {
            expected: confidences.len(),
            got: labels.len(),
        });
    }
    let keep = subset_indices(hash_ids, labels, manifest, predicate)?;
    if keep.is_empty() {
        return Err(Error::Empty(format!("subset {predicate} selects no samples")));
    }
    let conf: Vec<f64> = keep.iter().map(|&i| confidences[i]).collect();
    let y: Vec<bool> = keep.iter().map(|&i| labels[i]).collect();
    MetricReport::compute(&conf, &y)
}

/// Scores and labels of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScores {
    pub dataset: String,
    pub confidences: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Groups parallel score/label/dataset columns, in order of first appearance.
pub fn group_by_dataset(confidences: &[f64], labels: &[bool], datasets: &[String]) -> Vec<DatasetScores> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, DatasetScores> = BTreeMap::new();
    for ((&c, &y), d) in confidences.iter().zip(labels).zip(datasets) {
        let g = groups.entry(d.clone()).or_insert_with(|| {
            order.push(d.clone());
            DatasetScores {
                dataset: d.clone(),
                confidences: Vec::new(),
                labels: Vec::new(),
            }
        });
        g.confidences.push(c);
        g.labels.push(y);
    }
    order.into_iter().map(|d| groups.remove(&d).unwrap()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Metrics over all samples concatenated.
    Pooled,
    /// Unweighted mean of per-dataset metrics, datasets below 100 samples dropped.
    EqualWeight,
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(AggregationMode::Pooled),
            "equal-weight" | "equal_weight" => Ok(AggregationMode::EqualWeight),
            other => Err(Error::Validation(format!("unknown aggregation mode {other:?}"))),
        }
    }
}

pub fn aggregate(datasets: &[DatasetScores], mode: AggregationMode) -> Result<MetricReport> {
    match mode {
        AggregationMode::Pooled => {
            let conf: Vec<f64> = datasets.iter().flat_map(|d| d.confidences.iter().copied()).collect();
            let labels: Vec<bool> = datasets.iter().flat_map(|d| d.labels.iter().copied()).collect();
            MetricReport::compute(&conf, &labels)
        }
        AggregationMode::EqualWeight => {
            let reports = datasets
                .iter()
                .filter(|d| d.confidences.len() >= MIN_DATASET_SIZE)
                .map(|d| MetricReport::compute(&d.confidences, &d.labels))
                .collect::<Result<Vec<_>>>()?;
            if reports.is_empty() {
                return Err(Error::Empty(format!(
                    "no dataset has at least {MIN_DATASET_SIZE} samples"
                )));
            }
            let k = reports.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
            let n: usize = reports.iter().map(|r| r.n).sum();
            let positives: f64 = reports.iter().map(|r| r.prevalence * r.n as f64).sum();
            let ece = mean(|r| r.ece);
            let auroc = mean(|r| r.auroc);
            Ok(MetricReport {
                n,
                prevalence: positives / n as f64,
                ece,
                brier: mean(|r| r.brier),
                accuracy: mean(|r| r.accuracy),
                f1: mean(|r| r.f1),
                aucpr: mean(|r| r.aucpr),
                auroc,
                composite: metrics::composite(auroc, ece),
            })
        }
    }
}

/// Sample mean and sample standard deviation (n - 1 denominator; 0 for a
/// single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// One row of a significance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub comparison: String,
    pub metric: String,
    pub mean_delta: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_raw: f64,
    pub p_holm: Option<f64>,
    pub n: usize,
    pub mode: String,
}
