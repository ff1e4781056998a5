//! Random hyperparameter search with a parameter budget and median pruning.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::PairedSample;
use crate::metrics::MetricReport;
use crate::probe::{
    param_count, predict, seeded_rng, train_with, DatasetValidator, EpochControl, Probe, ProbeConfig,
    TrainHistory,
};
use crate::stats::mean_std;

pub const DEFAULT_TRIALS: usize = 50;
pub const DEFAULT_PARAM_BUDGET: u64 = 5_000_000;
pub const PROTOCOL_SEEDS: [u64; 5] = [23, 42, 137, 2024, 3407];

const SAMPLER_STREAM: u64 = 7;

/// Distributions each trial draws from. Fields not being searched
/// (batch size, epoch cap, patience) are copied into every trial config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub layer_choices: Vec<Vec<usize>>,
    pub dropout_choices: Vec<f64>,
    pub lr_range: (f64, f64),
    pub wd_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub lambda_range: (f64, f64),
    pub gamma_range: (f64, f64),
    /// Off for the BCE-only baseline: beta and lambda are pinned to zero.
    pub include_loss_coeffs: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            layer_choices: vec![
                vec![],
                vec![256],
                vec![512],
                vec![128, 64],
                vec![256, 128],
                vec![512, 256],
                vec![1024, 512],
                vec![1024, 512, 256],
            ],
            dropout_choices: vec![0.0, 0.1, 0.3, 0.5],
            lr_range: (1e-5, 1e-3),
            wd_range: (1e-6, 1e-3),
            beta_range: (0.0, 0.5),
            lambda_range: (0.01, 0.3),
            gamma_range: (0.05, 0.25),
            include_loss_coeffs: true,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
        }
    }
}

impl SearchSpace {
    pub fn bce_only() -> Self {
        SearchSpace {
            include_loss_coeffs: false,
            ..SearchSpace::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Validation(format!("search space: {msg}")));
        if self.layer_choices.is_empty() || self.dropout_choices.is_empty() {
            return bad("layer and dropout choices must be nonempty");
        }
        if self.dropout_choices.iter().any(|p| !(0.0..1.0).contains(p)) {
            return bad("dropout choices must lie in [0,1)");
        }
        for (name, (lo, hi), positive) in [
            ("lr_range", self.lr_range, true),
            ("wd_range", self.wd_range, true),
            ("beta_range", self.beta_range, false),
            ("lambda_range", self.lambda_range, false),
            ("gamma_range", self.gamma_range, true),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) || lo < 0.0 || (positive && lo <= 0.0) {
                return bad(&format!("{name} ({lo}, {hi}) is invalid"));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch size, max epochs, and patience must be at least 1");
        }
        Ok(())
    }
}

/// A drawn configuration, or a rejection because it exceeds the budget.
#[derive(Debug, Clone, PartialEq)]
pub enum TrialSample {
    Accepted { config: ProbeConfig, params: u64 },
    Rejected { config: ProbeConfig, params: u64 },
}

impl TrialSample {
    pub fn config(&self) -> &ProbeConfig {
        match self {
            TrialSample::Accepted { config, .. } | TrialSample::Rejected { config, .. } => config,
        }
    }

    pub fn params(&self) -> u64 {
        match self {
            TrialSample::Accepted { params, .. } | TrialSample::Rejected { params, .. } => *params,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    uniform(rng, (lo.ln(), hi.ln())).exp()
}

/// Draws layers, dropout, lr, weight decay, then (if enabled) beta,
/// lambda, gamma. The draw sequence is identical whether or not the
/// config is accepted, so the rng stays in lockstep across budgets.
pub fn sample_trial(space: &SearchSpace, rng: &mut ChaCha8Rng, d_h: usize, budget: u64, seed: u64) -> TrialSample {
    let hidden_widths = space.layer_choices[rng.random_range(0..space.layer_choices.len())].clone();
    let dropout = space.dropout_choices[rng.random_range(0..space.dropout_choices.len())];
    let learning_rate = log_uniform(rng, space.lr_range);
    let weight_decay = log_uniform(rng, space.wd_range);
    let (beta, lambda, gamma) = if space.include_loss_coeffs {
        let beta = uniform(rng, space.beta_range);
        let lambda = uniform(rng, space.lambda_range);
        let gamma = uniform(rng, space.gamma_range);
        (beta, lambda, gamma)
    } else {
        (0.0, 0.0, ProbeConfig::default().gamma)
    };
    let params = param_count(&hidden_widths, d_h);
    let config = ProbeConfig {
        hidden_widths,
        dropout,
        learning_rate,
        weight_decay,
        beta,
        lambda,
        gamma,
        seed,
        batch_size: space.batch_size,
        max_epochs: space.max_epochs,
        patience: space.patience,
    };
    if params > budget {
        TrialSample::Rejected { config, params }
    } else {
        TrialSample::Accepted { config, params }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneDecision {
    Continue,
    Prune,
}

/// Median pruner over completed trials' intermediate values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MedianPruner {
    pub startup_trials: usize,
    pub warmup_steps: usize,
    pub interval: usize,
}

impl Default for MedianPruner {
    fn default() -> Self {
        MedianPruner {
            startup_trials: 5,
            warmup_steps: 10,
            interval: 5,
        }
    }
}

impl MedianPruner {
    /// `step` is 1-based; `completed` holds each completed trial's full
    /// intermediate sequence. Completed trials that stopped before `step`
    /// do not contribute to the median.
    pub fn decide(&self, step: usize, value: f64, completed: &[Vec<f64>]) -> PruneDecision {
        if completed.len() < self.startup_trials || step < self.warmup_steps {
            return PruneDecision::Continue;
        }
        if (step - self.warmup_steps) % self.interval != 0 {
            return PruneDecision::Continue;
        }
        let mut at_step: Vec<f64> = completed
            .iter()
            .filter_map(|seq| seq.get(step - 1).copied())
            .filter(|v| !v.is_nan())
            .collect();
        if at_step.is_empty() {
            return PruneDecision::Continue;
        }
        at_step.sort_by(f64::total_cmp);
        let m = at_step.len();
        let median = if m % 2 == 1 {
            at_step[m / 2]
        } else {
            0.5 * (at_step[m / 2 - 1] + at_step[m / 2])
        };
        if value < median {
            PruneDecision::Prune
        } else {
            PruneDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Pruned,
    RejectedBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub config: ProbeConfig,
    pub param_count: u64,
    pub status: TrialStatus,
    /// Best intermediate composite; absent for rejected trials.
    pub objective: Option<f64>,
    pub intermediate: Vec<f64>,
}

/// Something that trains one configuration while reporting per-epoch
/// composites. Returning `EpochControl::Stop` from `report` means the
/// trial was pruned and the runner should stop.
pub trait TrialRunner {
    fn run(
        &mut self,
        trial_index: usize,
        config: &ProbeConfig,
        report: &mut dyn FnMut(usize, f64) -> EpochControl,
    ) -> Result<()>;
}

/// Trains real probes and keeps the best completed one.
pub struct ProbeTrialRunner<'a> {
    train: &'a [PairedSample],
    validator: DatasetValidator,
    best: Option<BestProbe>,
}

#[derive(Debug, Clone)]
pub struct BestProbe {
    pub trial_index: usize,
    pub objective: f64,
    pub probe: Probe,
    pub history: TrainHistory,
}

impl<'a> ProbeTrialRunner<'a> {
    pub fn new(train: &'a [PairedSample], val: &[PairedSample]) -> Result<Self> {
        Ok(ProbeTrialRunner {
            train,
            validator: DatasetValidator::new(val)?,
            best: None,
        })
    }

    pub fn into_best(self) -> Option<BestProbe> {
        self.best
    }
}

impl TrialRunner for ProbeTrialRunner<'_> {
    fn run(
        &mut self,
        trial_index: usize,
        config: &ProbeConfig,
        report: &mut dyn FnMut(usize, f64) -> EpochControl,
    ) -> Result<()> {
        let out = train_with(self.train, config, &mut self.validator, report)?;
        if out.interrupted {
            return Ok(());
        }
        let objective = out.history.best_composite();
        if self.best.as_ref().is_none_or(|b| objective > b.objective) {
            self.best = Some(BestProbe {
                trial_index,
                objective,
                probe: out.probe,
                history: out.history,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub trials: Vec<TrialRecord>,
}

impl SearchOutcome {
    pub fn best(&self) -> &TrialRecord {
        &self.trials[self.best_index]
    }
}

/// Runs `trials` sequential trials; the sampler is seeded from `seed` and
/// every trial config carries `seed` as its training seed.
pub fn run_search(
    runner: &mut dyn TrialRunner,
    space: &SearchSpace,
    d_h: usize,
    trials: usize,
    seed: u64,
    budget: u64,
    pruner: &MedianPruner,
) -> Result<SearchOutcome> {
    space.validate()?;
    let mut rng = seeded_rng(seed, SAMPLER_STREAM);
    let mut records = Vec::with_capacity(trials);
    let mut completed: Vec<Vec<f64>> = Vec::new();

    for trial_index in 0..trials {
        let (config, params) = match sample_trial(space, &mut rng, d_h, budget, seed) {
            TrialSample::Rejected { config, params } => {
                records.push(TrialRecord {
                    trial_index,
                    config,
                    param_count: params,
                    status: TrialStatus::RejectedBudget,
                    objective: None,
                    intermediate: Vec::new(),
                });
                continue;
            }
            TrialSample::Accepted { config, params } => (config, params),
        };
        let mut intermediate = Vec::new();
        let mut pruned = false;
        runner.run(trial_index, &config, &mut |step, value| {
            intermediate.push(value);
            if pruner.decide(step, value, &completed) == PruneDecision::Prune {
                pruned = true;
                EpochControl::Stop
            } else {
                EpochControl::Continue
            }
        })?;
        let objective = intermediate.iter().copied().filter(|v| !v.is_nan()).fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        });
        let status = if pruned {
            TrialStatus::Pruned
        } else {
            completed.push(intermediate.clone());
            TrialStatus::Completed
        };
        records.push(TrialRecord {
            trial_index,
            config,
            param_count: params,
            status,
            objective,
            intermediate,
        });
    }

    let best_index = records
        .iter()
        .filter(|r| r.status == TrialStatus::Completed)
        .filter_map(|r| r.objective.map(|o| (r.trial_index, o)))
        .fold(None, |acc: Option<(usize, f64)>, (i, o)| match acc {
            Some((_, best)) if o <= best => acc,
            _ => Some((i, o)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Search(format!("none of {trials} trials completed")))?;
    Ok(SearchOutcome {
        best_index,
        trials: records,
    })
}

pub fn write_trials_jsonl<W: Write>(trials: &[TrialRecord], mut w: W) -> Result<()> {
    for t in trials {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io("<trials>", e))?;
    }
    Ok(())
}

/// Splits the data needed by the multi-seed protocol.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolData<'a> {
    pub train: &'a [PairedSample],
    pub val: &'a [PairedSample],
    pub test: &'a [PairedSample],
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub search: SearchOutcome,
    pub probe: Probe,
    pub history: TrainHistory,
    pub test_confidences: Vec<f64>,
    pub test_report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub runs: Vec<SeedRun>,
    pub mean: MetricReport,
    pub std: MetricReport,
}

/// One full search for a single seed, followed by test-set scoring of
/// the winning probe.
pub fn search_and_test(
    data: ProtocolData<'_>,
    space: &SearchSpace,
    trials: usize,
    seed: u64,
    budget: u64,
) -> Result<SeedRun> {
    let d_h = data
        .train
        .first()
        .map(|s| s.h_base.len())
        .ok_or_else(|| Error::Empty("training set is empty".into()))?;
    let mut runner = ProbeTrialRunner::new(data.train, data.val)?;
    let search = run_search(&mut runner, space, d_h, trials, seed, budget, &MedianPruner::default())?;
    let best = runner
        .into_best()
        .ok_or_else(|| Error::Search("no completed trial retained a probe".into()))?;
    let features: Vec<Vec<f64>> = data.test.iter().map(|s| s.h_base.clone()).collect();
    let labels: Vec<bool> = data.test.iter().map(|s| s.y).collect();
    let test_confidences = predict(&best.probe, &features)?;
    let test_report = MetricReport::compute(&test_confidences, &labels)?;
    Ok(SeedRun {
        seed,
        search,
        probe: best.probe,
        history: best.history,
        test_confidences,
        test_report,
    })
}

/// Independent searches per seed (run concurrently), summarized as the
/// across-seed mean and sample standard deviation of test metrics.
pub fn multi_seed_protocol(
    data: ProtocolData<'_>,
    space: &SearchSpace,
    seeds: &[u64],
    trials: usize,
    budget: u64,
) -> Result<ProtocolResult> {
    let runs = seeds
        .par_iter()
        .map(|&seed| search_and_test(data, space, trials, seed, budget))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.test_report.clone()).collect();
    let (mean, std) = summarize_reports(&reports)?;
    Ok(ProtocolResult { runs, mean, std })
}

/// Field-wise mean and sample standard deviation of metric reports.
/// `n` is carried over from the first report in both outputs.
pub fn summarize_reports(reports: &[MetricReport]) -> Result<(MetricReport, MetricReport)> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Empty("no reports to summarize".into()))?;
    let field = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let cols = [
        field(|r| r.prevalence),
        field(|r| r.ece),
        field(|r| r.brier),
        field(|r| r.accuracy),
        field(|r| r.f1),
        field(|r| r.aucpr),
        field(|r| r.auroc),
        field(|r| r.composite),
    ];
    let build = |pick: fn((f64, f64)) -> f64| MetricReport {
        n: first.n,
        prevalence: pick(cols[0]),
        ece: pick(cols[1]),
        brier: pick(cols[2]),
        accuracy: pick(cols[3]),
        f1: pick(cols[4]),
        aucpr: pick(cols[5]),
        auroc: pick(cols[6]),
        composite: pick(cols[7]),
    };
    Ok((build(|(m, _)| m), build(|(_, s)| s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Replays fixed composite sequences per trial index.
    struct Scripted {
        scripts: Vec<Vec<f64>>,
        seen: Vec<usize>,
    }

    impl TrialRunner for Scripted {
        fn run(
            &mut self,
            trial_index: usize,
            _config: &ProbeConfig,
            report: &mut dyn FnMut(usize, f64) -> EpochControl,
        ) -> Result<()> {
            self.seen.push(trial_index);
            let script = &self.scripts[trial_index % self.scripts.len()];
            for (i, &v) in script.iter().enumerate() {
                if report(i + 1, v) == EpochControl::Stop {
                    break;
                }
            }
            Ok(())
        }
    }

    fn small_space() -> SearchSpace {
        SearchSpace {
            layer_choices: vec![vec![4]],
            ..SearchSpace::default()
        }
    }

    #[test]
    fn budget_rejection_examples() {
        let space = SearchSpace {
            layer_choices: vec![vec![1024, 512, 256]],
            ..SearchSpace::default()
        };
        let mut rng = seeded_rng(1, 0);
        let s = sample_trial(&space, &mut rng, 5376, DEFAULT_PARAM_BUDGET, 1);
        assert_eq!(s.params(), 6_162_433);
        assert!(matches!(s, TrialSample::Rejected { .. }));

        let space = SearchSpace {
            layer_choices: vec![vec![128, 64]],
            ..SearchSpace::default()
        };
        let s = sample_trial(&space, &mut rng, 2560, DEFAULT_PARAM_BUDGET, 1);
        assert_eq!(s.params(), 336_129);
        assert!(matches!(s, TrialSample::Accepted { .. }));
    }

    #[test]
    fn bce_only_space_pins_coefficients() {
        let mut rng = seeded_rng(3, 0);
        for _ in 0..20 {
            let c = sample_trial(&SearchSpace::bce_only(), &mut rng, 64, DEFAULT_PARAM_BUDGET, 3)
                .config()
                .clone();
            assert_eq!((c.beta, c.lambda), (0.0, 0.0));
        }
    }

    #[test]
    fn samples_stay_in_ranges() {
        let space = SearchSpace::default();
        let mut rng = seeded_rng(9, 0);
        let mut lambdas = Vec::new();
        for _ in 0..200 {
            let c = sample_trial(&space, &mut rng, 4096, DEFAULT_PARAM_BUDGET, 9).config().clone();
            assert!(space.layer_choices.contains(&c.hidden_widths));
            assert!(space.dropout_choices.contains(&c.dropout));
            assert!((1e-5..=1e-3).contains(&c.learning_rate));
            assert!((1e-6..=1e-3).contains(&c.weight_decay));
            assert!((0.0..=0.5).contains(&c.beta));
            assert!((0.05..=0.25).contains(&c.gamma));
            lambdas.push(c.lambda);
        }
        let lo = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= 0.02 && hi >= 0.28, "lambda span [{lo}, {hi}]");
    }

    #[test]
    fn pruner_guards_and_median() {
        let p = MedianPruner::default();
        let four = vec![vec![0.9; 20]; 4];
        assert_eq!(p.decide(10, 0.0, &four), PruneDecision::Continue);
        let five: Vec<Vec<f64>> = [0.6, 0.7, 0.8, 0.9, 0.95].iter().map(|&v| vec![v; 20]).collect();
        assert_eq!(p.decide(9, 0.0, &five), PruneDecision::Continue);
        assert_eq!(p.decide(10, 0.5, &five), PruneDecision::Prune);
        assert_eq!(p.decide(10, 0.8, &five), PruneDecision::Continue);
        assert_eq!(p.decide(12, 0.0, &five), PruneDecision::Continue);
        assert_eq!(p.decide(15, 0.79, &five), PruneDecision::Prune);
    }

    #[test]
    fn pruner_even_median_and_short_histories() {
        let p = MedianPruner::default();
        let mut hist: Vec<Vec<f64>> = [0.6, 0.7, 0.8, 0.9].iter().map(|&v| vec![v; 20]).collect();
        hist.push(vec![0.1; 5]);
        // Only four completed trials reached step 10: median (0.7 + 0.8) / 2.
        assert_eq!(p.decide(10, 0.74, &hist), PruneDecision::Prune);
        assert_eq!(p.decide(10, 0.75, &hist), PruneDecision::Continue);
    }

    #[test]
    fn scripted_landscape_picks_dominant_trial() {
        let scripts = (0..6)
            .map(|i| if i == 3 { vec![0.5, 0.9, 0.95] } else { vec![0.5, 0.6, 0.7] })
            .collect();
        let mut runner = Scripted { scripts, seen: vec![] };
        let out = run_search(&mut runner, &small_space(), 8, 6, 23, DEFAULT_PARAM_BUDGET, &MedianPruner::default())
            .unwrap();
        assert_eq!(out.best_index, 3);
        assert_eq!(out.best().objective, Some(0.95));
        assert_eq!(out.trials.len(), 6);
    }

    #[test]
    fn scripted_landscape_prunes_weak_trial() {
        let good = vec![0.8; 15];
        let weak = vec![0.3; 15];
        let scripts = vec![good.clone(), good.clone(), good.clone(), good.clone(), good, weak];
        let mut runner = Scripted { scripts, seen: vec![] };
        let out = run_search(&mut runner, &small_space(), 8, 6, 23, DEFAULT_PARAM_BUDGET, &MedianPruner::default())
            .unwrap();
        let last = &out.trials[5];
        assert_eq!(last.status, TrialStatus::Pruned);
        assert_eq!(last.intermediate.len(), 10);
        assert!(out.trials[..5].iter().all(|t| t.status == TrialStatus::Completed));
    }

    #[test]
    fn all_rejected_is_an_error() {
        let space = SearchSpace {
            layer_choices: vec![vec![1024, 512, 256]],
            ..SearchSpace::default()
        };
        let mut runner = Scripted { scripts: vec![vec![0.5]], seen: vec![] };
        let err = run_search(&mut runner, &space, 5376, 3, 23, DEFAULT_PARAM_BUDGET, &MedianPruner::default());
        assert!(matches!(err, Err(Error::Search(_))));
        assert!(runner.seen.is_empty());
    }

    #[test]
    fn search_is_deterministic() {
        let run = || {
            let mut runner = Scripted { scripts: vec![vec![0.5, 0.6]], seen: vec![] };
            run_search(&mut runner, &SearchSpace::default(), 4096, 10, 42, DEFAULT_PARAM_BUDGET, &MedianPruner::default())
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn summary_mean_and_sample_std() {
        let base = MetricReport {
            n: 10,
            prevalence: 0.5,
            ece: 0.1,
            brier: 0.2,
            accuracy: 0.7,
            f1: 0.7,
            aucpr: 0.8,
            auroc: 0.8,
            composite: 0.84,
        };
        let other = MetricReport { auroc: 0.9, ..base.clone() };
        let (mean, std) = summarize_reports(&[base.clone(), other]).unwrap();
        assert_abs_diff_eq!(mean.auroc, 0.85, epsilon = 1e-12);
        assert_abs_diff_eq!(std.auroc, (0.005f64).sqrt(), epsilon = 1e-12);
        assert_eq!(std.ece, 0.0);
        let (_, std) = summarize_reports(&[base.clone(), base]).unwrap();
        assert_eq!(std.composite, 0.0);
    }
}
