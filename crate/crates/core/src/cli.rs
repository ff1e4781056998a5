//! Command-line front end. Every command writes its artifacts plus one
//! `run_manifest.json` describing the run into its output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{confidence_distribution, run_ablation, AblationMode, Variant};
use crate::error::{Error, Result};
use crate::feature_store::{
    attach_datasets, decode_header, join_views, read_feature_file, read_manifest, write_feature_file,
    write_manifest, FeatureFile, HashId, Label, Manifest, PairedSample, Split,
};
use crate::hpo::{
    multi_seed_protocol, run_search, write_trials_jsonl, MedianPruner, ProbeTrialRunner, ProtocolData,
    SearchSpace, DEFAULT_PARAM_BUDGET, DEFAULT_TRIALS,
};
use crate::metrics::{reliability_bins, MetricReport, DEFAULT_BINS, REPORT_COLUMNS};
use crate::probe::{predict, train, Probe, ProbeConfig};
use crate::stats::{
    aggregate, cluster_bootstrap, group_by_dataset, holm_bonferroni, paired_bootstrap_bs_delta,
    subset_metrics, wilcoxon_signed_rank, AggregationMode, SubsetPredicate, DEFAULT_BOOTSTRAP_RESAMPLES,
    DEFAULT_BOOTSTRAP_SEED, DEFAULT_CLUSTER_RESAMPLES,
};
use crate::synthgen::{generate, generate_with_splits, SplitPlan, SynthConfig};

pub const DEFAULT_SEED: u64 = 23;
pub const THREADS_ENV: &str = "GROUNDPROBE_THREADS";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "groundprobe", version, about = "Confidence probes over cached hidden states")]
pub struct Cli {
    /// Worker threads for independent seeds/variants (also capped by GROUNDPROBE_THREADS).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic paired feature files and a manifest.
    Synth(SynthArgs),
    /// Train one probe.
    Train(TrainArgs),
    /// Score a probe on a labeled split.
    Eval(EvalArgs),
    /// Run loss-component ablations.
    Ablate(AblateArgs),
    /// Hyperparameter search.
    Hpo(HpoArgs),
    /// Significance tests on CSV inputs.
    Stats(StatsArgs),
    /// Reliability-bin table of a probe on a labeled split.
    Reliability(ReliabilityArgs),
    /// Print feature-file headers and record counts.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synth config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dh: Option<usize>,
    #[arg(long)]
    pub rho_grounded: Option<f64>,
    #[arg(long)]
    pub q_grounded: Option<f64>,
    #[arg(long)]
    pub q_prior: Option<f64>,
    #[arg(long)]
    pub signal_strength: Option<f64>,
    #[arg(long)]
    pub grounding_strength: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Explicit split sizes; must sum to n (default 4:1:2).
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"])]
    pub splits: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Probe hyperparameters, each overriding the config file.
#[derive(Debug, Args, Clone, Default)]
pub struct ProbeFlags {
    /// JSON probe config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated hidden widths; empty for a linear probe.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PairedInputs {
    /// Base-view feature file.
    #[arg(long)]
    pub base: PathBuf,
    /// Blank-view feature file.
    #[arg(long)]
    pub blank: Option<PathBuf>,
    /// JSON-lines manifest (dataset names for aggregation).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub inputs: PairedInputs,
    #[command(flatten)]
    pub probe: ProbeFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub probe: PathBuf,
    /// Base-view feature file.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "pooled")]
    pub mode: AggregationMode,
    /// Manifest predicate, e.g. `flip_swap=0,label=1`.
    #[arg(long)]
    pub subset: Option<SubsetPredicate>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationStrategy {
    /// One configuration for all runs (from the probe flags).
    Fixed,
    /// Search with the full loss per seed, reuse the winner for every variant.
    Reuse,
    /// Independent search per variant and seed.
    Search,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub inputs: PairedInputs,
    #[command(flatten)]
    pub probe: ProbeFlags,
    /// Comma-separated variants (full is always included).
    #[arg(long, default_value = "full,no_brier,no_rank,bce_only")]
    pub variants: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "23,42,137,2024,3407")]
    pub seeds: String,
    #[arg(long, value_enum, default_value_t = AblationStrategy::Search)]
    pub strategy: AblationStrategy,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = DEFAULT_PARAM_BUDGET)]
    pub budget: u64,
    /// JSON search-space override.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HpoArgs {
    #[command(flatten)]
    pub inputs: PairedInputs,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Comma-separated seeds: run the multi-seed protocol instead of one search.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, default_value_t = DEFAULT_PARAM_BUDGET)]
    pub budget: u64,
    /// JSON search-space override.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Search without the Brier and rank coefficients.
    #[arg(long)]
    pub bce_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(subcommand)]
    pub test: StatsTest,
}

#[derive(Debug, Subcommand)]
pub enum StatsTest {
    /// Paired Wilcoxon signed-rank test on a `delta` column.
    Wilcoxon(StatsInput),
    /// Paired bootstrap of the Brier difference (columns conf_a, conf_b, label).
    Bootstrap {
        #[command(flatten)]
        input: StatsInput,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_SEED)]
        seed: u64,
    },
    /// Cluster bootstrap on per-cluster deltas (`delta` column).
    Cluster {
        #[command(flatten)]
        input: StatsInput,
        #[arg(long, default_value_t = DEFAULT_CLUSTER_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_SEED)]
        seed: u64,
    },
    /// Holm-Bonferroni adjustment of a `p` column.
    Holm(StatsInput),
}

#[derive(Debug, Args)]
pub struct StatsInput {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Directory for the result JSON and run manifest; stdout only if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReliabilityArgs {
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Feature files to describe.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written once per command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seeds: Vec<u64>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Accumulates a run's inputs and outputs.
struct Run {
    command: &'static str,
    started: f64,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str) -> Self {
        Run {
            command,
            started: now_unix(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish<C: Serialize>(self, out_dir: &Path, config: &C, seeds: Vec<u64>) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config)?,
            inputs: self.inputs,
            seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: now_unix(),
            outputs: self.outputs,
        };
        let path = out_dir.join(RUN_MANIFEST);
        let json = serde_json::to_vec_pretty(&manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Validation(format!("bad {what} value {x:?}")))
        })
        .collect()
}

impl ProbeFlags {
    /// Default, then config file, then flags.
    pub fn resolve(&self) -> Result<ProbeConfig> {
        let mut c = match &self.config {
            Some(p) => read_json::<ProbeConfig>(p)?,
            None => ProbeConfig::default(),
        };
        if let Some(h) = &self.hidden {
            c.hidden_widths = parse_list(h, "hidden width")?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(dropout => dropout, lr => learning_rate, weight_decay => weight_decay, beta => beta,
             lambda => lambda, gamma => gamma, seed => seed, batch_size => batch_size,
             max_epochs => max_epochs, patience => patience);
        for w in c.validate()? {
            eprintln!("warning: {w}");
        }
        Ok(c)
    }
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<SynthConfig> {
        let mut c = match &self.config {
            Some(p) => read_json::<SynthConfig>(p)?,
            None => SynthConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(n => n, dh => d_h, rho_grounded => rho_grounded, q_grounded => q_grounded, q_prior => q_prior,
             signal_strength => signal_strength, grounding_strength => grounding_strength,
             noise_sigma => noise_sigma, seed => seed);
        c.validate()?;
        Ok(c)
    }
}

/// Labeled base-view rows of one split, in file order.
struct Scored {
    hash_ids: Vec<HashId>,
    features: Vec<Vec<f64>>,
    labels: Vec<bool>,
}

fn labeled_split(file: &FeatureFile, split: Split) -> Result<Scored> {
    let mut out = Scored {
        hash_ids: Vec::new(),
        features: Vec::new(),
        labels: Vec::new(),
    };
    for r in file.records.iter().filter(|r| r.split == split) {
        let y = r
            .label
            .as_bool()
            .ok_or_else(|| Error::Validation(format!("{}: unlabeled record in a scored split", r.hash_id)))?;
        out.hash_ids.push(r.hash_id);
        out.features.push(r.vector.iter().map(|&v| v as f64).collect());
        out.labels.push(y);
    }
    if out.labels.is_empty() {
        return Err(Error::Empty(format!("no records in split {split:?}")));
    }
    Ok(out)
}

/// Paired samples per split. Without a blank file the base vectors stand
/// in for the blank view, which only a zero rank weight can accept.
struct PairedSplits {
    train: Vec<PairedSample>,
    val: Vec<PairedSample>,
    test: Vec<PairedSample>,
}

impl PairedSplits {
    fn data(&self) -> ProtocolData<'_> {
        ProtocolData {
            train: &self.train,
            val: &self.val,
            test: &self.test,
        }
    }
}

fn load_pairs(inputs: &PairedInputs, run: &mut Run, need_blank: bool) -> Result<PairedSplits> {
    if need_blank && inputs.blank.is_none() {
        return Err(Error::Validation(
            "the rank loss needs paired input: pass --blank or set --lambda 0".into(),
        ));
    }
    run.input(&inputs.base)?;
    let base = read_feature_file(&inputs.base)?;
    let blank = match &inputs.blank {
        Some(p) => {
            run.input(p)?;
            read_feature_file(p)?
        }
        None => base.clone(),
    };
    if blank.d_h != base.d_h {
        return Err(Error::Dimension {
            expected: base.d_h,
            got: blank.d_h,
        });
    }
    let manifest = match &inputs.manifest {
        Some(p) => {
            run.input(p)?;
            Some(read_manifest(p)?)
        }
        None => None,
    };
    let pair = |split: Split| -> Result<Vec<PairedSample>> {
        let joined = join_views(&base.split(split), &blank.split(split))?;
        if !joined.unmatched_base.is_empty() {
            eprintln!(
                "warning: {} {split:?} base records have no blank counterpart",
                joined.unmatched_base.len()
            );
        }
        let mut pairs = joined.pairs;
        if let Some(m) = &manifest {
            attach_datasets(&mut pairs, m);
        }
        Ok(pairs)
    };
    Ok(PairedSplits {
        train: pair(Split::Train)?,
        val: pair(Split::Val)?,
        test: pair(Split::Test)?,
    })
}

fn load_space(path: &Option<PathBuf>, bce_only: bool) -> Result<SearchSpace> {
    let mut space = match path {
        Some(p) => read_json::<SearchSpace>(p)?,
        None => SearchSpace::default(),
    };
    if bce_only {
        space.include_loss_coeffs = false;
    }
    space.validate()?;
    Ok(space)
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let config = args.resolve()?;
    let data = match &args.splits {
        Some(s) => generate_with_splits(
            &config,
            SplitPlan {
                train: s[0],
                val: s[1],
                test: s[2],
            },
        )?,
        None => generate(&config)?,
    };
    ensure_dir(&args.out)?;
    let mut run = Run::start("synth");
    let (base, blank) = data.to_records();
    for (name, records) in [("base.feat", &base), ("blank.feat", &blank)] {
        let path = args.out.join(name);
        write_feature_file(&path, data.d_h, records)?;
        run.outputs.push(path);
    }
    let manifest_path = args.out.join("manifest.jsonl");
    write_manifest(&manifest_path, &data.manifest)?;
    run.outputs.push(manifest_path);
    run.finish(&args.out, &config, vec![config.seed])
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.probe.resolve()?;
    let mut run = Run::start("train");
    let data = load_pairs(&args.inputs, &mut run, config.lambda > 0.0)?;
    let (probe, history) = train(&data.train, &data.val, &config)?;
    ensure_dir(&args.out)?;
    run.write(args.out.join("probe.bin"), &probe.to_bytes())?;
    run.write(args.out.join("history.json"), &serde_json::to_vec_pretty(&history)?)?;
    run.finish(&args.out, &config, vec![config.seed])
}

#[derive(Debug, Serialize)]
struct EvalSettings<'a> {
    split: Split,
    mode: String,
    subset: Option<String>,
    bins: usize,
    probe: &'a Path,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut run = Run::start("eval");
    run.input(&args.probe)?;
    run.input(&args.features)?;
    let probe = Probe::load(&args.probe)?;
    let scored = labeled_split(&read_feature_file(&args.features)?, args.split)?;
    let manifest: Option<Manifest> = match &args.manifest {
        Some(p) => {
            run.input(p)?;
            Some(read_manifest(p)?)
        }
        None => None,
    };
    let conf = predict(&probe, &scored.features)?;

    let report = match (&args.subset, &manifest) {
        (Some(pred), Some(m)) => subset_metrics(&conf, &scored.labels, &scored.hash_ids, m, pred)?,
        (Some(_), None) => return Err(Error::Validation("--subset needs --manifest".into())),
        (None, _) => match args.mode {
            AggregationMode::Pooled => MetricReport::compute_with_bins(&conf, &scored.labels, args.bins)?,
            AggregationMode::EqualWeight => {
                let m = manifest
                    .as_ref()
                    .ok_or_else(|| Error::Validation("equal-weight aggregation needs --manifest".into()))?;
                let datasets: Vec<String> = scored
                    .hash_ids
                    .iter()
                    .map(|h| m.get(h).map(|e| e.dataset.clone()).unwrap_or_default())
                    .collect();
                aggregate(&group_by_dataset(&conf, &scored.labels, &datasets), AggregationMode::EqualWeight)?
            }
        },
    };
    let bins = reliability_bins(&conf, &scored.labels, args.bins)?;

    ensure_dir(&args.out)?;
    let metrics_csv = csv_bytes(|b| MetricReport::write_csv(std::slice::from_ref(&report), b))?;
    run.write(args.out.join("metrics.csv"), &metrics_csv)?;
    run.write(args.out.join("reliability.csv"), &csv_bytes(|b| bins.write_csv(b))?)?;
    let mut conf_csv = String::from("hash_id,label,confidence\n");
    for ((h, y), c) in scored.hash_ids.iter().zip(&scored.labels).zip(&conf) {
        conf_csv.push_str(&format!("{h},{},{c}\n", *y as u8));
    }
    run.write(args.out.join("confidences.csv"), conf_csv.as_bytes())?;
    let settings = EvalSettings {
        split: args.split,
        mode: match args.mode {
            AggregationMode::Pooled => "pooled".into(),
            AggregationMode::EqualWeight => "equal-weight".into(),
        },
        subset: args.subset.as_ref().map(|s| s.to_string()),
        bins: args.bins,
        probe: &args.probe,
    };
    run.finish(&args.out, &settings, Vec::new())
}

#[derive(Debug, Serialize)]
struct AblateSettings {
    variants: Vec<Variant>,
    seeds: Vec<u64>,
    strategy: String,
    probe: Option<ProbeConfig>,
    space: Option<SearchSpace>,
    trials: usize,
    budget: u64,
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut variants: Vec<Variant> = parse_list(&args.variants, "variant")?;
    if !variants.contains(&Variant::Full) {
        variants.push(Variant::Full);
    }
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    let (mode, settings) = match args.strategy {
        AblationStrategy::Fixed => {
            let c = args.probe.resolve()?;
            (
                AblationMode::Fixed(c.clone()),
                (Some(c), None, "fixed"),
            )
        }
        AblationStrategy::Reuse | AblationStrategy::Search => {
            let space = load_space(&args.space, false)?;
            let (trials, budget) = (args.trials, args.budget);
            let mode = if args.strategy == AblationStrategy::Reuse {
                AblationMode::ReuseFull { space: space.clone(), trials, budget }
            } else {
                AblationMode::Search { space: space.clone(), trials, budget }
            };
            let name = if args.strategy == AblationStrategy::Reuse { "reuse" } else { "search" };
            (mode, (None, Some(space), name))
        }
    };
    let mut run = Run::start("ablate");
    let data = load_pairs(&args.inputs, &mut run, true)?;
    let report = run_ablation(data.data(), &mode, &variants, &seeds)?;

    ensure_dir(&args.out)?;
    run.write(args.out.join("deltas.csv"), &csv_bytes(|b| report.write_delta_csv(b))?)?;

    let mut runs = String::from("variant,seed,n,prevalence,ece,brier,acc,f1,aucpr,auroc,composite\n");
    for r in &report.runs {
        let m = &r.report;
        runs.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant, r.seed, m.n, m.prevalence, m.ece, m.brier, m.accuracy, m.f1, m.aucpr, m.auroc, m.composite
        ));
    }
    run.write(args.out.join("runs.csv"), runs.as_bytes())?;

    let mut sig = csv::Writer::from_writer(Vec::new());
    for row in &report.significance {
        sig.serialize(row)?;
    }
    let sig = sig.into_inner().map_err(|e| Error::io("<significance csv>", e.into_error()))?;
    run.write(args.out.join("significance.csv"), &sig)?;

    let mut dist = String::from("variant,mean_correct,mean_incorrect,separation,frac_above_half,frac_below_tenth\n");
    for s in &report.summaries {
        let v = s.variant;
        let runs = report.runs_of(v);
        let conf: Vec<f64> = runs.iter().flat_map(|r| r.test_confidences.iter().copied()).collect();
        let labels: Vec<bool> = runs.iter().flat_map(|_| report.test_labels.iter().copied()).collect();
        let d = confidence_distribution(&conf, &labels)?;
        dist.push_str(&format!(
            "{v},{},{},{},{},{}\n",
            d.mean_correct, d.mean_incorrect, d.separation, d.frac_above_half, d.frac_below_tenth
        ));
        let bins = report.pooled_reliability(v, args.bins)?;
        run.write(args.out.join(format!("reliability_{v}.csv")), &csv_bytes(|b| bins.write_csv(b))?)?;
    }
    run.write(args.out.join("confidence_distribution.csv"), dist.as_bytes())?;

    let (probe, space, strategy) = settings;
    let settings = AblateSettings {
        variants,
        seeds: seeds.clone(),
        strategy: strategy.into(),
        probe,
        space,
        trials: args.trials,
        budget: args.budget,
    };
    run.finish(&args.out, &settings, seeds)
}

#[derive(Debug, Serialize)]
struct HpoSettings {
    space: SearchSpace,
    trials: usize,
    budget: u64,
}

fn cmd_hpo(args: &HpoArgs) -> Result<()> {
    let space = load_space(&args.space, args.bce_only)?;
    let mut run = Run::start("hpo");
    let data = load_pairs(&args.inputs, &mut run, space.include_loss_coeffs)?;
    let d_h = data
        .train
        .first()
        .map(|s| s.h_base.len())
        .ok_or_else(|| Error::Empty("training split is empty".into()))?;
    ensure_dir(&args.out)?;
    let settings = HpoSettings {
        space: space.clone(),
        trials: args.trials,
        budget: args.budget,
    };

    if let Some(list) = &args.seeds {
        let seeds: Vec<u64> = parse_list(list, "seed")?;
        let result = multi_seed_protocol(data.data(), &space, &seeds, args.trials, args.budget)?;
        for r in &result.runs {
            let trials = csv_bytes(|b| write_trials_jsonl(&r.search.trials, b))?;
            run.write(args.out.join(format!("trials_{}.jsonl", r.seed)), &trials)?;
            run.write(args.out.join(format!("probe_{}.bin", r.seed)), &r.probe.to_bytes())?;
        }
        let mut summary = format!("stat,{}\n", REPORT_COLUMNS.join(","));
        for (stat, m) in [("mean", &result.mean), ("std", &result.std)] {
            summary.push_str(&format!(
                "{stat},{},{},{},{},{},{},{},{},{}\n",
                m.n, m.prevalence, m.ece, m.brier, m.accuracy, m.f1, m.aucpr, m.auroc, m.composite
            ));
        }
        run.write(args.out.join("summary.csv"), summary.as_bytes())?;
        return run.finish(&args.out, &settings, seeds);
    }

    let mut runner = ProbeTrialRunner::new(&data.train, &data.val)?;
    let outcome = run_search(
        &mut runner,
        &space,
        d_h,
        args.trials,
        args.seed,
        args.budget,
        &MedianPruner::default(),
    )?;
    run.write(
        args.out.join("trials.jsonl"),
        &csv_bytes(|b| write_trials_jsonl(&outcome.trials, b))?,
    )?;
    run.write(args.out.join("best.json"), &serde_json::to_vec_pretty(outcome.best())?)?;
    if let Some(best) = runner.into_best() {
        run.write(args.out.join("probe.bin"), &best.probe.to_bytes())?;
    }
    run.finish(&args.out, &settings, vec![args.seed])
}

fn read_csv_column(path: &Path, names: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h.trim() == *n)
                .ok_or_else(|| Error::Format(format!("{}: missing column {n:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in reader.records() {
        let rec = rec?;
        for (c, &i) in cols.iter_mut().zip(&idx) {
            c.push(rec.get(i).unwrap_or("").trim().to_string());
        }
    }
    Ok(cols)
}

fn parse_f64s(values: &[String], column: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Format(format!("column {column}: {v:?} is not a number")))
        })
        .collect()
}

fn parse_labels(values: &[String]) -> Result<Vec<bool>> {
    values
        .iter()
        .map(|v| match v.as_str() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            _ => Err(Error::Format(format!("label {v:?} is not 0/1"))),
        })
        .collect()
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let (name, input, result, seeds): (&str, &StatsInput, serde_json::Value, Vec<u64>) = match &args.test {
        StatsTest::Wilcoxon(input) => {
            let d = parse_f64s(&read_csv_column(&input.input, &["delta"])?[0], "delta")?;
            ("wilcoxon", input, serde_json::to_value(wilcoxon_signed_rank(&d)?)?, Vec::new())
        }
        StatsTest::Bootstrap { input, resamples, seed } => {
            let cols = read_csv_column(&input.input, &["conf_a", "conf_b", "label"])?;
            let a = parse_f64s(&cols[0], "conf_a")?;
            let b = parse_f64s(&cols[1], "conf_b")?;
            let y = parse_labels(&cols[2])?;
            let r = paired_bootstrap_bs_delta(&a, &b, &y, *resamples, *seed)?;
            ("bootstrap", input, serde_json::to_value(r)?, vec![*seed])
        }
        StatsTest::Cluster { input, resamples, seed } => {
            let d = parse_f64s(&read_csv_column(&input.input, &["delta"])?[0], "delta")?;
            let r = cluster_bootstrap(&d, *resamples, *seed)?;
            ("cluster", input, serde_json::to_value(r)?, vec![*seed])
        }
        StatsTest::Holm(input) => {
            let p = parse_f64s(&read_csv_column(&input.input, &["p"])?[0], "p")?;
            ("holm", input, serde_json::to_value(holm_bonferroni(&p)?)?, Vec::new())
        }
    };
    let text = serde_json::to_string_pretty(&result)?;
    println!("{text}");
    if let Some(out) = &input.out {
        ensure_dir(out)?;
        let mut run = Run::start("stats");
        run.input(&input.input)?;
        run.write(out.join(format!("{name}.json")), text.as_bytes())?;
        run.finish(out, &serde_json::json!({ "test": name }), seeds)?;
    }
    Ok(())
}

fn cmd_reliability(args: &ReliabilityArgs) -> Result<()> {
    let mut run = Run::start("reliability");
    run.input(&args.probe)?;
    run.input(&args.features)?;
    let probe = Probe::load(&args.probe)?;
    let scored = labeled_split(&read_feature_file(&args.features)?, args.split)?;
    let conf = predict(&probe, &scored.features)?;
    let bins = reliability_bins(&conf, &scored.labels, args.bins)?;
    ensure_dir(&args.out)?;
    run.write(args.out.join("reliability.csv"), &csv_bytes(|b| bins.write_csv(b))?)?;
    run.finish(&args.out, &serde_json::json!({ "split": args.split, "bins": args.bins }), Vec::new())
}

fn cmd_inspect<W: Write>(args: &InspectArgs, mut w: W) -> Result<()> {
    for path in &args.files {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let header = decode_header(&bytes)?;
        let file = crate::feature_store::decode_features(&bytes)?;
        let mut counts = [[0usize; 3]; 3];
        for r in &file.records {
            let split = r.split as usize;
            let label = match r.label {
                Label::Incorrect => 0,
                Label::Correct => 1,
                Label::Unlabeled => 2,
            };
            counts[split][label] += 1;
        }
        let io = |e| Error::io("<stdout>", e);
        writeln!(
            w,
            "{}: version {} d_h {} count {}",
            path.display(),
            header.version,
            header.d_h,
            header.count
        )
        .map_err(io)?;
        for (name, c) in ["train", "val", "test"].iter().zip(counts) {
            writeln!(w, "  {name}: correct {} incorrect {} unlabeled {}", c[1], c[0], c[2]).map_err(io)?;
        }
    }
    Ok(())
}

fn configure_threads(jobs: Option<usize>) {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    let threads = match (jobs, env) {
        (Some(j), Some(e)) => Some(j.min(e)),
        (j, e) => j.or(e),
    };
    if let Some(n) = threads.filter(|&n| n > 0) {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.jobs);
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Hpo(a) => cmd_hpo(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Reliability(a) => cmd_reliability(a),
        Command::Inspect(a) => cmd_inspect(a, std::io::stdout().lock()),
    }
}
