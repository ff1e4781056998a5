mod common;

use groundprobe::metrics::{aucpr, auroc, ece, reliability_bins, MetricReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{aucpr_sweep, auroc_pairwise, ece_direct, random_scores};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..120, any::<u64>(), prop_oneof![Just(None), (1u32..12).prop_map(Some)]).prop_map(|(n, seed, ties)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_scores(&mut rng, n, ties)
    })
}

proptest! {
    #[test]
    fn auroc_matches_pairwise_oracle((conf, labels) in scored()) {
        let got = auroc(&conf, &labels).unwrap();
        prop_assert!((got - auroc_pairwise(&conf, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn aucpr_matches_threshold_sweep((conf, labels) in scored()) {
        let got = aucpr(&conf, &labels).unwrap();
        prop_assert!((got - aucpr_sweep(&conf, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn ece_matches_direct_binning((conf, labels) in scored(), bins in 1usize..20) {
        let got = ece(&conf, &labels, bins).unwrap();
        prop_assert!((got - ece_direct(&conf, &labels, bins)).abs() <= 1e-12);
        let table = reliability_bins(&conf, &labels, bins).unwrap();
        prop_assert!((table.weighted_gap() - got).abs() <= 1e-12);
        prop_assert_eq!(table.bins.iter().map(|b| b.count).sum::<usize>(), conf.len());
    }

    #[test]
    fn ranking_metrics_invariant_under_monotone_maps((conf, labels) in scored()) {
        let squashed: Vec<f64> = conf.iter().map(|&c| c * c * 0.5 + 0.1).collect();
        prop_assert_eq!(auroc(&conf, &labels).unwrap(), auroc(&squashed, &labels).unwrap());
        prop_assert_eq!(aucpr(&conf, &labels).unwrap(), aucpr(&squashed, &labels).unwrap());
    }

    #[test]
    fn metrics_in_unit_interval((conf, labels) in scored()) {
        let r = MetricReport::compute(&conf, &labels).unwrap();
        for v in [r.ece, r.brier, r.accuracy, r.f1, r.aucpr, r.auroc, r.composite] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn ece_four_sample_hand_case() {
    let e = ece(&[0.95, 0.95, 0.05, 0.55], &[true, false, false, true], 10).unwrap();
    assert!((e - 0.35).abs() < 1e-15, "{e}");
}

#[test]
fn random_scores_give_prevalence_average_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 10_000;
    let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
    let conf: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let prevalence = labels.iter().filter(|&&y| y).count() as f64 / n as f64;
    let ap = aucpr(&conf, &labels).unwrap();
    assert!((ap - prevalence).abs() < 0.03, "AP {ap} vs prevalence {prevalence}");
    let a = auroc(&conf, &labels).unwrap();
    assert!((a - 0.5).abs() < 0.03, "AUROC {a}");
}
