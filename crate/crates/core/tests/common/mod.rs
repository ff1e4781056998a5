//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use groundprobe::probe::{gradients, loss_with_masks, DropoutMasks, LossParams, PairedBatch, Probe, ProbeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact parameter counts from the published table: (hidden widths, d_h, count).
pub const PARAM_TABLE: &[(&[usize], usize, u64)] = &[
    (&[128, 64], 4096, 532_737),
    (&[256, 128, 64], 4096, 1_090_049),
    (&[512, 256], 5120, 2_753_537),
    (&[1024, 512], 4096, 4_720_641),
    (&[512], 5120, 2_622_465),
    (&[512], 2560, 1_311_745),
    (&[256, 128], 4096, 1_081_857),
    (&[512, 256], 4096, 2_229_249),
    (&[512], 4096, 2_098_177),
    (&[1024, 512, 256], 4096, 4_851_713),
    (&[256], 5120, 1_311_233),
    (&[256], 5376, 1_376_769),
    (&[256, 128], 5376, 1_409_537),
    (&[512, 256], 2560, 1_442_817),
    (&[1024, 512, 256], 2560, 3_278_849),
    (&[256, 128], 5120, 1_344_001),
    (&[128, 64], 5120, 663_809),
    (&[128, 64], 5376, 696_577),
    (&[512, 256], 5376, 2_884_609),
    (&[256, 128, 64], 2560, 696_833),
    (&[256, 128, 64], 5120, 1_352_193),
    (&[256, 128, 64], 5376, 1_417_729),
];

/// Direct layer-by-layer count, written out independently of the library.
pub fn count_by_hand(widths: &[usize], d_h: usize) -> u64 {
    let mut dims = vec![d_h as u64];
    dims.extend(widths.iter().map(|&w| w as u64));
    dims.push(1);
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

pub fn auroc_pairwise(conf: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj {
                continue;
            }
            pairs += 1.0;
            if conf[i] > conf[j] {
                wins += 1.0;
            } else if conf[i] == conf[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Average precision by sweeping every distinct score as a `>=` threshold.
pub fn aucpr_sweep(conf: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&y| y).count() as f64;
    let mut thresholds: Vec<f64> = conf.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = conf.iter().zip(labels).filter(|(&c, &y)| c >= t && y).count() as f64;
        let fp = conf.iter().zip(labels).filter(|(&c, &y)| c >= t && !y).count() as f64;
        let recall = tp / total_pos;
        if tp + fp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

/// Equal-width binned calibration gap; bin k holds [k/B, (k+1)/B), the
/// last bin also holds 1.
pub fn ece_direct(conf: &[f64], labels: &[bool], bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for k in 0..bins {
        let lo = k as f64 / bins as f64;
        let hi = (k + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| conf[i] >= lo && (conf[i] < hi || (k == bins - 1 && conf[i] <= hi)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| labels[i]).count() as f64 / m;
        let mc = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / n * (acc - mc).abs();
    }
    total
}

/// Two-sided exact Wilcoxon p-value by enumerating all sign patterns.
pub fn wilcoxon_enumerated(deltas: &[f64]) -> f64 {
    let nz: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return 1.0;
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let tied = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = ranks.iter().zip(&nz).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

pub struct GradCheck {
    pub worst_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Activation pattern that decides which branch of each kink the loss is
/// on: ReLU signs of both views plus which rank hinges are active.
fn kink_pattern(probe: &Probe, batch: &PairedBatch, masks: (&DropoutMasks, &DropoutMasks), gamma: f64) -> Vec<bool> {
    let rows = batch.rows();
    let base = probe.forward_batch(&batch.base, rows, Some(masks.0)).unwrap();
    let blank = probe.forward_batch(&batch.blank, rows, Some(masks.1)).unwrap();
    let mut pattern: Vec<bool> = base.pre.iter().chain(&blank.pre).flatten().map(|&z| z > 0.0).collect();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    for i in 0..rows {
        pattern.push(batch.y[i] && gamma - (sig(base.logits[i]) - sig(blank.logits[i])) > 0.0);
    }
    pattern
}

/// Central differences with step `h` against the analytic gradient.
/// Relative error uses `max(|analytic|, |numeric|, abs_floor)` as the
/// denominator. Parameters whose perturbation crosses a kink (including a
/// ReLU sitting exactly at zero) are skipped.
pub fn check_gradients(
    probe: &Probe,
    batch: &PairedBatch,
    params: &LossParams,
    masks: (&DropoutMasks, &DropoutMasks),
    h: f64,
    abs_floor: f64,
) -> GradCheck {
    let (_, analytic) = gradients(batch, probe, params, Some(masks)).unwrap();
    let mut out = GradCheck {
        worst_rel: 0.0,
        checked: 0,
        skipped: 0,
    };
    for l in 0..probe.layers.len() {
        let n_w = probe.layers[l].weights.len();
        for idx in 0..n_w + probe.layers[l].bias.len() {
            let perturbed = |delta: f64| {
                let mut p = probe.clone();
                if idx < n_w {
                    p.layers[l].weights[idx] += delta;
                } else {
                    p.layers[l].bias[idx - n_w] += delta;
                }
                p
            };
            let (plus, minus) = (perturbed(h), perturbed(-h));
            if kink_pattern(&plus, batch, masks, params.gamma) != kink_pattern(&minus, batch, masks, params.gamma) {
                out.skipped += 1;
                continue;
            }
            let f = |p: &Probe| loss_with_masks(batch, p, params, Some(masks)).unwrap().total;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = if idx < n_w {
                analytic[l].weights[idx]
            } else {
                analytic[l].bias[idx - n_w]
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(abs_floor);
            out.worst_rel = out.worst_rel.max(rel);
            out.checked += 1;
        }
    }
    out
}

/// A small random probe with a mixed-label paired batch and fixed masks.
pub fn random_case(seed: u64) -> (Probe, PairedBatch, DropoutMasks, DropoutMasks) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_h = rng.random_range(2..=32);
    let depth = rng.random_range(0..=2);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=8)).collect();
    let config = ProbeConfig {
        hidden_widths: widths,
        dropout: [0.0, 0.2][rng.random_range(0..2)],
        seed,
        ..ProbeConfig::default()
    };
    let mut probe = Probe::init(&config, d_h).unwrap();
    // Nonzero biases keep pre-activations off the ReLU kink at exactly 0.
    for layer in &mut probe.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    }
    let rows = rng.random_range(4..=10);
    let mut y: Vec<bool> = (0..rows).map(|_| rng.random::<bool>()).collect();
    y[0] = true;
    y[1] = false;
    let draw = |rng: &mut ChaCha8Rng| (0..rows * d_h).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    let base = draw(&mut rng);
    let blank = draw(&mut rng);
    let batch = PairedBatch { d_h, base, blank, y };
    let mb = probe.sample_masks(rows, &mut rng);
    let mk = probe.sample_masks(rows, &mut rng);
    (probe, batch, mb, mk)
}

pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, tie_levels: Option<u32>) -> (Vec<f64>, Vec<bool>) {
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
    labels[0] = true;
    labels[n - 1] = false;
    let conf = (0..n)
        .map(|_| match tie_levels {
            Some(k) => rng.random_range(0..=k) as f64 / k as f64,
            None => rng.random::<f64>(),
        })
        .collect();
    (conf, labels)
}
