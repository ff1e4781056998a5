//! Loss-component ablations (full, no Brier, no rank, BCE only) and the
//! behavioral summaries used to compare them.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpo::{search_and_test, summarize_reports, ProtocolData, SearchSpace};
use crate::metrics::{self, MetricReport, ReliabilityBins};
use crate::probe::{predict, train, ProbeConfig, TrainHistory};
use crate::stats::{
    cluster_bootstrap, holm_bonferroni, wilcoxon_signed_rank, StatsReport, DEFAULT_BOOTSTRAP_SEED,
    DEFAULT_CLUSTER_RESAMPLES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoBrier,
    NoRank,
    BceOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoBrier, Variant::NoRank, Variant::BceOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBrier => "no_brier",
            Variant::NoRank => "no_rank",
            Variant::BceOnly => "bce_only",
        }
    }

    fn drops_brier(self) -> bool {
        matches!(self, Variant::NoBrier | Variant::BceOnly)
    }

    fn drops_rank(self) -> bool {
        matches!(self, Variant::NoRank | Variant::BceOnly)
    }

    /// Zeroes the removed loss terms.
    pub fn apply(self, config: &ProbeConfig) -> ProbeConfig {
        let mut c = config.clone();
        if self.drops_brier() {
            c.beta = 0.0;
        }
        if self.drops_rank() {
            c.lambda = 0.0;
        }
        c
    }

    /// Collapses the removed coefficients' ranges to zero. The sampler
    /// still makes the same draws, so trial `i` of a given seed has the
    /// same architecture and optimizer settings in every variant.
    pub fn restrict(self, space: &SearchSpace) -> SearchSpace {
        let mut s = space.clone();
        if self.drops_brier() {
            s.beta_range = (0.0, 0.0);
        }
        if self.drops_rank() {
            s.lambda_range = (0.0, 0.0);
        }
        s
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown variant {s:?}")))
    }
}

/// How each (variant, seed) configuration is chosen.
#[derive(Debug, Clone)]
pub enum AblationMode {
    /// One configuration for every run; each run overrides the seed and
    /// zeroes its removed terms.
    Fixed(ProbeConfig),
    /// Search once per seed with the full loss, then retrain the winning
    /// configuration with terms zeroed for the other variants.
    ReuseFull {
        space: SearchSpace,
        trials: usize,
        budget: u64,
    },
    /// Independent search per (variant, seed).
    Search {
        space: SearchSpace,
        trials: usize,
        budget: u64,
    },
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub config: ProbeConfig,
    pub history: TrainHistory,
    pub test_confidences: Vec<f64>,
    pub report: MetricReport,
}

/// Change of a variant's across-seed mean relative to the full variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub ece: f64,
    pub brier: f64,
    pub aucpr: f64,
    pub auroc: f64,
}

impl MetricDelta {
    pub fn between(from: &MetricReport, to: &MetricReport) -> Self {
        MetricDelta {
            ece: to.ece - from.ece,
            brier: to.brier - from.brier,
            aucpr: to.aucpr - from.aucpr,
            auroc: to.auroc - from.auroc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean: MetricReport,
    pub std: MetricReport,
    pub delta: MetricDelta,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub test_labels: Vec<bool>,
    pub runs: Vec<VariantRun>,
    pub summaries: Vec<VariantSummary>,
    pub significance: Vec<StatsReport>,
}

const DELTA_METRICS: [&str; 4] = ["ece", "brier", "aucpr", "auroc"];

fn metric_of(report: &MetricReport, name: &str) -> f64 {
    match name {
        "ece" => report.ece,
        "brier" => report.brier,
        "aucpr" => report.aucpr,
        _ => report.auroc,
    }
}

impl AblationReport {
    pub fn run(&self, variant: Variant, seed: u64) -> Option<&VariantRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn runs_of(&self, variant: Variant) -> Vec<&VariantRun> {
        self.seeds.iter().filter_map(|&s| self.run(variant, s)).collect()
    }

    /// Per-seed `variant - baseline` differences of one metric.
    pub fn paired_deltas(&self, baseline: Variant, variant: Variant, metric: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|&s| Some((self.run(baseline, s)?, self.run(variant, s)?)))
            .map(|(b, v)| metric_of(&v.report, metric) - metric_of(&b.report, metric))
            .collect()
    }

    /// Reliability bins of one variant's test confidences pooled over seeds.
    pub fn pooled_reliability(&self, variant: Variant, bins: usize) -> Result<ReliabilityBins> {
        let runs = self.runs_of(variant);
        let conf: Vec<f64> = runs.iter().flat_map(|r| r.test_confidences.iter().copied()).collect();
        let labels: Vec<bool> = runs.iter().flat_map(|_| self.test_labels.iter().copied()).collect();
        metrics::reliability_bins(&conf, &labels, bins)
    }

    /// Variant-delta table: variant, ece, delta_ece, bs, delta_bs, aucpr,
    /// delta_aucpr, auroc, delta_auroc.
    pub fn write_delta_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "variant",
            "ece",
            "delta_ece",
            "bs",
            "delta_bs",
            "aucpr",
            "delta_aucpr",
            "auroc",
            "delta_auroc",
        ])?;
        for s in &self.summaries {
            out.write_record([
                s.variant.name().to_string(),
                s.mean.ece.to_string(),
                s.delta.ece.to_string(),
                s.mean.brier.to_string(),
                s.delta.brier.to_string(),
                s.mean.aucpr.to_string(),
                s.delta.aucpr.to_string(),
                s.mean.auroc.to_string(),
                s.delta.auroc.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<delta csv>", e))?;
        Ok(())
    }
}

fn train_and_test(data: ProtocolData<'_>, variant: Variant, config: ProbeConfig) -> Result<VariantRun> {
    let (probe, history) = train(data.train, data.val, &config)?;
    let features: Vec<Vec<f64>> = data.test.iter().map(|s| s.h_base.clone()).collect();
    let labels: Vec<bool> = data.test.iter().map(|s| s.y).collect();
    let test_confidences = predict(&probe, &features)?;
    let report = MetricReport::compute(&test_confidences, &labels)?;
    Ok(VariantRun {
        variant,
        seed: config.seed,
        config,
        history,
        test_confidences,
        report,
    })
}

fn search_run(
    data: ProtocolData<'_>,
    variant: Variant,
    space: &SearchSpace,
    trials: usize,
    budget: u64,
    seed: u64,
) -> Result<VariantRun> {
    let run = search_and_test(data, &variant.restrict(space), trials, seed, budget)?;
    let config = run.search.best().config.clone();
    Ok(VariantRun {
        variant,
        seed,
        config,
        history: run.history,
        test_confidences: run.test_confidences,
        report: run.test_report,
    })
}

/// Trains every (variant, seed) pair, concurrently, then summarizes
/// against the full variant. `variants` must include `Full`.
pub fn run_ablation(
    data: ProtocolData<'_>,
    mode: &AblationMode,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationReport> {
    if !variants.contains(&Variant::Full) {
        return Err(Error::Validation("ablation needs the full variant as its reference".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("ablation needs at least one seed".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let mut variants = variants.to_vec();
    variants.sort();
    variants.dedup();

    let runs: Vec<VariantRun> = match mode {
        AblationMode::Fixed(base) => {
            let jobs: Vec<(Variant, u64)> = variants
                .iter()
                .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
                .collect();
            jobs.par_iter()
                .map(|&(v, seed)| {
                    let config = ProbeConfig {
                        seed,
                        ..v.apply(base)
                    };
                    train_and_test(data, v, config)
                })
                .collect::<Result<_>>()?
        }
        AblationMode::Search { space, trials, budget } => {
            let jobs: Vec<(Variant, u64)> = variants
                .iter()
                .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
                .collect();
            jobs.par_iter()
                .map(|&(v, seed)| search_run(data, v, space, *trials, *budget, seed))
                .collect::<Result<_>>()?
        }
        AblationMode::ReuseFull { space, trials, budget } => {
            let full: Vec<VariantRun> = seeds
                .par_iter()
                .map(|&seed| search_run(data, Variant::Full, space, *trials, *budget, seed))
                .collect::<Result<_>>()?;
            let jobs: Vec<(Variant, &VariantRun)> = variants
                .iter()
                .filter(|&&v| v != Variant::Full)
                .flat_map(|&v| full.iter().map(move |r| (v, r)))
                .collect();
            let others: Vec<VariantRun> = jobs
                .par_iter()
                .map(|&(v, r)| train_and_test(data, v, v.apply(&r.config)))
                .collect::<Result<_>>()?;
            full.into_iter().chain(others).collect()
        }
    };

    let mut report = AblationReport {
        seeds: seeds.to_vec(),
        test_labels: data.test.iter().map(|s| s.y).collect(),
        runs,
        summaries: Vec::new(),
        significance: Vec::new(),
    };
    report.runs.sort_by_key(|r| (r.variant, seeds.iter().position(|&s| s == r.seed)));

    let mut full_mean = None;
    for &v in &variants {
        let reports: Vec<MetricReport> = report.runs_of(v).iter().map(|r| r.report.clone()).collect();
        let (mean, std) = summarize_reports(&reports)?;
        let reference = full_mean.get_or_insert_with(|| mean.clone()).clone();
        report.summaries.push(VariantSummary {
            variant: v,
            delta: MetricDelta::between(&reference, &mean),
            mean,
            std,
        });
    }
    report.significance = significance(&report, &variants)?;
    Ok(report)
}

/// Paired Wilcoxon and seed-cluster bootstrap tests of each variant
/// against full, Holm-adjusted across the four metrics of one
/// comparison and test.
fn significance(report: &AblationReport, variants: &[Variant]) -> Result<Vec<StatsReport>> {
    let mut rows = Vec::new();
    for &v in variants.iter().filter(|&&v| v != Variant::Full) {
        let comparison = format!("{v}-full");
        let deltas: Vec<Vec<f64>> = DELTA_METRICS
            .iter()
            .map(|m| report.paired_deltas(Variant::Full, v, m))
            .collect();
        let wilcoxon: Vec<f64> = deltas
            .iter()
            .map(|d| wilcoxon_signed_rank(d).map(|r| r.p_value))
            .collect::<Result<_>>()?;
        let mut families = vec![("wilcoxon", wilcoxon)];
        if report.seeds.len() >= 2 {
            let cluster: Vec<f64> = deltas
                .iter()
                .map(|d| cluster_bootstrap(d, DEFAULT_CLUSTER_RESAMPLES, DEFAULT_BOOTSTRAP_SEED).map(|r| r.p_value))
                .collect::<Result<_>>()?;
            families.push(("cluster_bootstrap", cluster));
        }
        for (mode, p_raw) in families {
            let p_holm = holm_bonferroni(&p_raw)?;
            for (i, metric) in DELTA_METRICS.iter().enumerate() {
                let d = &deltas[i];
                rows.push(StatsReport {
                    comparison: comparison.clone(),
                    metric: metric.to_string(),
                    mean_delta: d.iter().sum::<f64>() / d.len() as f64,
                    ci_low: None,
                    ci_high: None,
                    p_raw: p_raw[i],
                    p_holm: Some(p_holm[i]),
                    n: d.len(),
                    mode: mode.to_string(),
                });
            }
        }
    }
    Ok(rows)
}

/// Summary of how confidence mass splits between correct and incorrect
/// predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDistribution {
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub separation: f64,
    pub frac_above_half: f64,
    pub frac_below_tenth: f64,
}

pub fn confidence_distribution(confidences: &[f64], labels: &[bool]) -> Result<ConfidenceDistribution> {
    if confidences.len() != labels.len() {
        return Err(Error::Dimension {
            expected: confidences.len(),
            got: labels.len(),
        });
    }
    let (mut sum, mut count) = ([0.0f64; 2], [0usize; 2]);
    for (&c, &y) in confidences.iter().zip(labels) {
        sum[y as usize] += c;
        count[y as usize] += 1;
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(Error::UndefinedMetric(
            "conditional confidence means need both classes".into(),
        ));
    }
    let n = confidences.len() as f64;
    let mean_correct = sum[1] / count[1] as f64;
    let mean_incorrect = sum[0] / count[0] as f64;
    Ok(ConfidenceDistribution {
        mean_correct,
        mean_incorrect,
        separation: mean_correct - mean_incorrect,
        frac_above_half: confidences.iter().filter(|&&c| c > 0.5).count() as f64 / n,
        frac_below_tenth: confidences.iter().filter(|&&c| c < 0.1).count() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn variant_coefficients() {
        let base = ProbeConfig {
            beta: 0.3,
            lambda: 0.2,
            ..ProbeConfig::default()
        };
        let pick = |v: Variant| {
            let c = v.apply(&base);
            (c.beta, c.lambda)
        };
        assert_eq!(pick(Variant::Full), (0.3, 0.2));
        assert_eq!(pick(Variant::NoBrier), (0.0, 0.2));
        assert_eq!(pick(Variant::NoRank), (0.3, 0.0));
        assert_eq!(pick(Variant::BceOnly), (0.0, 0.0));
        let s = Variant::BceOnly.restrict(&SearchSpace::default());
        assert_eq!((s.beta_range, s.lambda_range), ((0.0, 0.0), (0.0, 0.0)));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("rank_only".parse::<Variant>().is_err());
    }

    #[test]
    fn distribution_hand_case() {
        let d = confidence_distribution(&[0.9, 0.1], &[true, false]).unwrap();
        assert_abs_diff_eq!(d.separation, 0.8, epsilon = 1e-12);
        assert_eq!(d.frac_above_half, 0.5);
        assert_eq!(d.frac_below_tenth, 0.0);
    }

    #[test]
    fn distribution_limits() {
        let d = confidence_distribution(&[0.5; 4], &[true, false, true, false]).unwrap();
        assert_eq!(d.separation, 0.0);
        let d = confidence_distribution(&[1.0, 0.0, 1.0], &[true, false, true]).unwrap();
        assert_eq!(d.separation, 1.0);
        assert!(matches!(
            confidence_distribution(&[0.4, 0.6], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn delta_antisymmetry() {
        let a = MetricReport {
            n: 4,
            prevalence: 0.5,
            ece: 0.1,
            brier: 0.2,
            accuracy: 0.7,
            f1: 0.6,
            aucpr: 0.75,
            auroc: 0.8,
            composite: 0.84,
        };
        let b = MetricReport {
            ece: 0.07,
            brier: 0.25,
            aucpr: 0.7,
            auroc: 0.83,
            ..a.clone()
        };
        let ab = MetricDelta::between(&a, &b);
        let ba = MetricDelta::between(&b, &a);
        assert_eq!(ab.ece, -ba.ece);
        assert_eq!(ab.brier, -ba.brier);
        assert_eq!(ab.aucpr, -ba.aucpr);
        assert_eq!(ab.auroc, -ba.auroc);
    }
}
