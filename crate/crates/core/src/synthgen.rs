//! Seeded generator of paired base/blank hidden states with a controllable
//! mix of grounded and ungrounded samples.
//!
//! For each sample a shared context `z ~ N(0, sigma^2 I)` is drawn and
//! used as the blank view. Grounded samples get
//! `h_base = z + c v + (2y - 1) s u`, where `u` (correctness) and `v`
//! (grounding marker) are fixed orthonormal directions. Ungrounded samples
//! get `h_base = z + eta` with `eta ~ N(0, (0.01 sigma)^2 I)`, so their two
//! views differ only by a negligible perturbation. Labels follow
//! `Bernoulli(q_grounded)` or `Bernoulli(q_prior)` by stratum.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureRecord, HashId, Label, ManifestEntry, PairedSample, Split, View};
use crate::probe::seeded_rng;

/// Scale of the ungrounded base-view perturbation relative to `noise_sigma`.
pub const UNGROUNDED_PERTURBATION: f64 = 0.01;
pub const SYNTH_DATASET: &str = "synth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub d_h: usize,
    pub rho_grounded: f64,
    pub q_grounded: f64,
    pub q_prior: f64,
    pub signal_strength: f64,
    pub grounding_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 35_000,
            d_h: 64,
            rho_grounded: 0.7,
            q_grounded: 0.85,
            q_prior: 0.6,
            signal_strength: 2.0,
            grounding_strength: 2.0,
            noise_sigma: 1.0,
            seed: 23,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h < 2 {
            return Err(Error::Validation(format!(
                "d_h = {} cannot hold two orthogonal directions",
                self.d_h
            )));
        }
        if self.n == 0 {
            return Err(Error::Validation("n must be at least 1".into()));
        }
        for (name, v) in [
            ("rho_grounded", self.rho_grounded),
            ("q_grounded", self.q_grounded),
            ("q_prior", self.q_prior),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} = {v} outside [0,1]")));
            }
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("grounding_strength", self.grounding_strength),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Number of samples assigned to each split, in train, val, test order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitPlan {
    /// 4 : 1 : 2 proportions (20k / 5k / 10k at 35k samples).
    pub fn proportional(n: usize) -> Self {
        let train = n * 4 / 7;
        let val = n / 7;
        SplitPlan {
            train,
            val,
            test: n - train - val,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub d_h: usize,
    pub pairs: Vec<PairedSample>,
    pub grounded: Vec<bool>,
    pub splits: Vec<Split>,
    pub manifest: Vec<ManifestEntry>,
    /// Unit correctness direction.
    pub u: Vec<f64>,
    /// Unit grounding direction, orthogonal to `u`.
    pub v: Vec<f64>,
}

/// Paired samples of one split with their grounded flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub pairs: Vec<PairedSample>,
    pub grounded: Vec<bool>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> SplitData {
        let mut out = SplitData {
            pairs: Vec::new(),
            grounded: Vec::new(),
        };
        for i in (0..self.pairs.len()).filter(|&i| self.splits[i] == split) {
            out.pairs.push(self.pairs[i].clone());
            out.grounded.push(self.grounded[i]);
        }
        out
    }

    /// Base and blank feature records, in sample order.
    pub fn to_records(&self) -> (Vec<FeatureRecord>, Vec<FeatureRecord>) {
        let make = |p: &PairedSample, split: Split, view: View| FeatureRecord {
            hash_id: p.hash_id,
            view,
            split,
            label: Label::from_bool(p.y),
            vector: match view {
                View::Base => p.h_base.iter().map(|&x| x as f32).collect(),
                View::Blank => p.h_blank.iter().map(|&x| x as f32).collect(),
            },
        };
        self.pairs
            .iter()
            .zip(&self.splits)
            .map(|(p, &s)| (make(p, s, View::Base), make(p, s, View::Blank)))
            .unzip()
    }
}

fn synth_hash_id(seed: u64, index: u64) -> HashId {
    let mut h = Sha256::new();
    h.update(b"groundprobe-synth");
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut id = [0u8; 16];
    id.copy_from_slice(&digest[..16]);
    HashId(id)
}

fn gaussian<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(a: &mut [f64]) {
    let norm = dot(a, a).sqrt();
    a.iter_mut().for_each(|x| *x /= norm);
}

/// Orthonormal (u, v) by Gram–Schmidt on two seeded Gaussian draws.
fn directions(seed: u64, d_h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seeded_rng(seed, 0);
    let mut u = gaussian(&mut rng, d_h);
    normalize(&mut u);
    let mut v = gaussian(&mut rng, d_h);
    let proj = dot(&v, &u);
    v.iter_mut().zip(&u).for_each(|(x, ui)| *x -= proj * ui);
    normalize(&mut v);
    (u, v)
}

/// Values are rounded through f32 so in-memory data equals what a feature
/// file round trip yields.
fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    generate_with_splits(config, SplitPlan::proportional(config.n))
}

pub fn generate_with_splits(config: &SynthConfig, plan: SplitPlan) -> Result<SynthDataset> {
    config.validate()?;
    if plan.total() != config.n {
        return Err(Error::Validation(format!(
            "split plan covers {} samples, config has {}",
            plan.total(),
            config.n
        )));
    }
    let d = config.d_h;
    let (u, v) = directions(config.seed, d);
    let mut rng = seeded_rng(config.seed, 1);
    let sigma = config.noise_sigma;
    let eta_scale = UNGROUNDED_PERTURBATION * sigma;

    let mut out = SynthDataset {
        d_h: d,
        pairs: Vec::with_capacity(config.n),
        grounded: Vec::with_capacity(config.n),
        splits: Vec::with_capacity(config.n),
        manifest: Vec::with_capacity(config.n),
        u,
        v,
    };
    for i in 0..config.n {
        let grounded = rng.random::<f64>() < config.rho_grounded;
        let q = if grounded { config.q_grounded } else { config.q_prior };
        let y = rng.random::<f64>() < q;
        let z: Vec<f64> = gaussian(&mut rng, d).into_iter().map(|x| sigma * x).collect();
        let h_base: Vec<f64> = if grounded {
            let sign = if y { 1.0 } else { -1.0 };
            (0..d)
                .map(|k| {
                    z[k] + config.grounding_strength * out.v[k] + sign * config.signal_strength * out.u[k]
                })
                .collect()
        } else {
            let eta = gaussian(&mut rng, d);
            z.iter().zip(eta).map(|(zk, e)| zk + eta_scale * e).collect()
        };
        let hash_id = synth_hash_id(config.seed, i as u64);
        out.pairs.push(PairedSample {
            hash_id,
            h_base: h_base.into_iter().map(round_f32).collect(),
            h_blank: z.into_iter().map(round_f32).collect(),
            y,
            dataset: SYNTH_DATASET.into(),
        });
        out.grounded.push(grounded);
        out.splits.push(plan.split_of(i));
        out.manifest.push(ManifestEntry {
            hash_id: hash_id.to_hex(),
            dataset: SYNTH_DATASET.into(),
            category: if grounded { "grounded" } else { "ungrounded" }.into(),
            flip_swap: Some(grounded as u8),
            dp_swap: None,
            top1_prob: None,
        });
    }
    Ok(out)
}
