//! The confidence probe: a ReLU MLP mapping one hidden state to a logit.
//!
//! Weights of each layer are stored as an `inputs x outputs` row-major
//! matrix, so a layer computes `z = a W + b`. Parameters and all training
//! arithmetic are f64.

mod adam;
mod loss;
mod train;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use loss::{
    gradients, loss_bce, loss_brier, loss_rank, loss_total, loss_with_masks, LossBreakdown, LossParams, PairedBatch,
    RANK_EPSILON,
};
pub use train::{
    train, train_with, DatasetValidator, EarlyStopping, EpochControl, EpochRecord, EpochValidator,
    TrainHistory, TrainOutcome, ValidationScore,
};

pub const PROBE_MAGIC: &[u8; 8] = b"BICRPB01";

/// Architecture, optimizer, and loss-coefficient hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden_widths: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Brier penalty weight.
    pub beta: f64,
    /// Rank loss weight.
    pub lambda: f64,
    /// Rank loss margin, in probability units.
    pub gamma: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_widths: vec![128, 64],
            dropout: 0.1,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            beta: 0.2,
            lambda: 0.1,
            gamma: 0.1,
            seed: 23,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
        }
    }
}

impl ProbeConfig {
    /// Checks hard constraints and returns warnings for values outside the
    /// tuned search ranges (allowed, e.g. for ablations).
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return bad(format!("hidden widths must be positive: {:?}", self.hidden_widths));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be nonnegative", self.weight_decay));
        }
        if !(self.beta >= 0.0 && self.lambda >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("margin {} must be positive", self.gamma));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch size, patience, and max epochs must be at least 1".into());
        }
        let mut warnings = Vec::new();
        if ![0.0, 0.1, 0.3, 0.5].contains(&self.dropout) {
            warnings.push(format!("dropout {} outside {{0, 0.1, 0.3, 0.5}}", self.dropout));
        }
        if self.beta > 0.5 {
            warnings.push(format!("beta {} outside [0, 0.5]", self.beta));
        }
        if self.lambda != 0.0 && !(0.01..=0.3).contains(&self.lambda) {
            warnings.push(format!("lambda {} outside [0.01, 0.3]", self.lambda));
        }
        if !(0.05..=0.25).contains(&self.gamma) {
            warnings.push(format!("gamma {} outside [0.05, 0.25]", self.gamma));
        }
        Ok(warnings)
    }
}

/// Exact trainable-parameter count (weights and biases) of the MLP
/// `d_h -> H_1 -> ... -> H_k -> 1`.
pub fn param_count(hidden_widths: &[usize], d_h: usize) -> u64 {
    let mut fan_in = d_h as u64;
    let mut total = 0u64;
    for &w in hidden_widths.iter().chain(std::iter::once(&1)) {
        total += fan_in * w as u64 + w as u64;
        fan_in = w as u64;
    }
    total
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn zeros_like(&self) -> Self {
        Dense::zeros(self.inputs, self.outputs)
    }

    /// `out[r] = x[r] W + b` for each of `rows` rows.
    fn apply(&self, x: &[f64], rows: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(rows * self.outputs);
        for r in 0..rows {
            out.extend_from_slice(&self.bias);
            let row_out = &mut out[r * self.outputs..];
            let xr = &x[r * self.inputs..(r + 1) * self.inputs];
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &self.weights[i * self.outputs..(i + 1) * self.outputs];
                for (o, &w) in row_out[..self.outputs].iter_mut().zip(wrow) {
                    *o += xi * w;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trained (or freshly initialized) probe weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub d_h: usize,
    pub dropout: f64,
    pub layers: Vec<Dense>,
}

/// Per-hidden-layer inverted-dropout scale factors for a batch
/// (0 for dropped units, `1/(1-p)` for kept ones).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub layers: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from a batch forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub rows: usize,
    /// Input of each layer (after ReLU and dropout for hidden layers).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pub pre: Vec<Vec<f64>>,
    pub masks: Option<DropoutMasks>,
    pub logits: Vec<f64>,
}

/// Logistic function that stays strictly inside (0, 1) for any finite input.
pub fn stable_sigmoid(x: f64) -> f64 {
    const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, UPPER)
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids carved out of one probe seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
}

impl Probe {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, drawn
    /// layer by layer in row-major order from the seed's init stream.
    pub fn init(config: &ProbeConfig, d_h: usize) -> Result<Self> {
        if d_h == 0 {
            return Err(Error::Validation("d_h must be at least 1".into()));
        }
        config.validate()?;
        let mut rng = seeded_rng(config.seed, streams::INIT);
        let mut layers = Vec::with_capacity(config.hidden_widths.len() + 1);
        let mut fan_in = d_h;
        for &w in config.hidden_widths.iter().chain(std::iter::once(&1)) {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut layer = Dense::zeros(fan_in, w);
            for v in layer.weights.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            layers.push(layer);
            fan_in = w;
        }
        Ok(Probe {
            d_h,
            dropout: config.dropout,
            layers,
        })
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.outputs).collect()
    }

    pub fn num_params(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.weights.len() + l.bias.len()) as u64)
            .sum()
    }

    pub fn zeros_like(&self) -> Vec<Dense> {
        self.layers.iter().map(Dense::zeros_like).collect()
    }

    pub fn sample_masks<R: Rng>(&self, rows: usize, rng: &mut R) -> DropoutMasks {
        let p = self.dropout;
        let keep_scale = 1.0 / (1.0 - p);
        let layers = self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| {
                if p == 0.0 {
                    vec![1.0; rows * l.outputs]
                } else {
                    (0..rows * l.outputs)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
                        .collect()
                }
            })
            .collect();
        DropoutMasks { layers }
    }

    /// Batch forward pass over `rows` row-major inputs of width `d_h`.
    pub fn forward_batch(&self, x: &[f64], rows: usize, masks: Option<&DropoutMasks>) -> Result<ActivationCache> {
        if x.len() != rows * self.d_h {
            return Err(Error::Dimension {
                expected: rows * self.d_h,
                got: x.len(),
            });
        }
        let hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(hidden);
        inputs.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.apply(&inputs[l], rows, &mut z);
            if l == hidden {
                return Ok(ActivationCache {
                    rows,
                    inputs,
                    pre,
                    masks: masks.cloned(),
                    logits: z,
                });
            }
            let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            if let Some(m) = masks {
                for (ai, &s) in a.iter_mut().zip(&m.layers[l]) {
                    *ai *= s;
                }
            }
            pre.push(z);
            inputs.push(a);
        }
        unreachable!("probe has at least one layer")
    }

    /// Forward pass for one hidden state. Train mode draws dropout masks
    /// from `rng`; eval mode is deterministic and dropout-free.
    pub fn forward<R: Rng>(&self, h: &[f64], mode: Mode, rng: &mut R) -> Result<(f64, ActivationCache)> {
        if h.len() != self.d_h {
            return Err(Error::Dimension {
                expected: self.d_h,
                got: h.len(),
            });
        }
        let masks = match mode {
            Mode::Train => Some(self.sample_masks(1, rng)),
            Mode::Eval => None,
        };
        let cache = self.forward_batch(h, 1, masks.as_ref())?;
        Ok((cache.logits[0], cache))
    }

    /// Accumulates parameter gradients given d(loss)/d(logit) per row.
    pub fn backward(&self, cache: &ActivationCache, dlogits: &[f64], grads: &mut [Dense]) {
        let rows = cache.rows;
        debug_assert_eq!(dlogits.len(), rows);
        let mut delta = dlogits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads[l];
            let input = &cache.inputs[l];
            let (n_in, n_out) = (layer.inputs, layer.outputs);
            for r in 0..rows {
                let d = &delta[r * n_out..(r + 1) * n_out];
                for (gb, &dv) in g.bias.iter_mut().zip(d) {
                    *gb += dv;
                }
                let a = &input[r * n_in..(r + 1) * n_in];
                for (i, &ai) in a.iter().enumerate() {
                    if ai == 0.0 {
                        continue;
                    }
                    for (gw, &dv) in g.weights[i * n_out..(i + 1) * n_out].iter_mut().zip(d) {
                        *gw += ai * dv;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // back through W, dropout, and ReLU of the previous hidden layer
            let pre = &cache.pre[l - 1];
            let mut next = vec![0.0; rows * n_in];
            for r in 0..rows {
                let d = &delta[r * n_out..(r + 1) * n_out];
                let out = &mut next[r * n_in..(r + 1) * n_in];
                for (i, o) in out.iter_mut().enumerate() {
                    let wrow = &layer.weights[i * n_out..(i + 1) * n_out];
                    *o = wrow.iter().zip(d).map(|(w, dv)| w * dv).sum();
                }
            }
            for (k, v) in next.iter_mut().enumerate() {
                if pre[k] <= 0.0 {
                    *v = 0.0;
                } else if let Some(m) = &cache.masks {
                    *v *= m.layers[l - 1][k];
                }
            }
            delta = next;
        }
    }

    /// Eval-mode confidences `sigmoid(f(h))` for row-major inputs.
    pub fn predict_rows(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        const CHUNK: usize = 512;
        if x.len() != rows * self.d_h {
            return Err(Error::Dimension {
                expected: rows * self.d_h,
                got: x.len(),
            });
        }
        let mut out = Vec::with_capacity(rows);
        for chunk in x.chunks(CHUNK * self.d_h) {
            let n = chunk.len() / self.d_h;
            let cache = self.forward_batch(chunk, n, None)?;
            out.extend(cache.logits.iter().map(|&z| stable_sigmoid(z)));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let widths = self.hidden_widths();
        let mut buf = Vec::new();
        buf.extend_from_slice(PROBE_MAGIC);
        buf.extend_from_slice(&(self.d_h as u32).to_le_bytes());
        buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for w in &widths {
            buf.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.dropout.to_le_bytes());
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Truncated("probe file ends early".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != PROBE_MAGIC {
            return Err(Error::Format("bad magic, expected BICRPB01".into()));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let d_h = read_u32(take(4)?);
        let k = read_u32(take(4)?);
        let mut widths = Vec::with_capacity(k);
        for _ in 0..k {
            widths.push(read_u32(take(4)?));
        }
        let dropout = f64::from_le_bytes(take(8)?.try_into().unwrap());
        if d_h == 0 || widths.contains(&0) {
            return Err(Error::Format("probe has a zero dimension".into()));
        }
        let mut layers = Vec::with_capacity(k + 1);
        let mut fan_in = d_h;
        for &w in widths.iter().chain(std::iter::once(&1)) {
            let mut layer = Dense::zeros(fan_in, w);
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Validation("probe contains a non-finite parameter".into()));
                }
            }
            layers.push(layer);
            fan_in = w;
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in probe file", cur.len())));
        }
        Ok(Probe { d_h, dropout, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Confidences for a set of base-view hidden states. The blank view is
/// never consulted.
pub fn predict(probe: &Probe, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut flat = Vec::with_capacity(features.len() * probe.d_h);
    for h in features {
        if h.len() != probe.d_h {
            return Err(Error::Dimension {
                expected: probe.d_h,
                got: h.len(),
            });
        }
        flat.extend_from_slice(h);
    }
    probe.predict_rows(&flat, features.len())
}
