use rand::Rng;

use super::{stable_sigmoid, Dense, DropoutMasks, Mode, Probe};
use crate::error::{Error, Result};

/// Guard in the rank-loss denominator.
pub const RANK_EPSILON: f64 = 1e-8;

/// `max(x, 0) + ln(1 + e^{-|x|})`, i.e. `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_batch(n: usize, m: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("loss needs a nonempty batch".into()));
    }
    if n != m {
        return Err(Error::Dimension { expected: n, got: m });
    }
    Ok(())
}

/// Mean class-weighted binary cross-entropy on logits; positive terms are
/// scaled by `w_plus`.
pub fn loss_bce(logits: &[f64], y: &[bool], w_plus: f64) -> Result<f64> {
    check_batch(logits.len(), y.len())?;
    if !(w_plus > 0.0) {
        return Err(Error::Validation(format!("positive-class weight {w_plus} must be positive")));
    }
    let sum: f64 = logits
        .iter()
        .zip(y)
        .map(|(&z, &t)| if t { w_plus * softplus(-z) } else { softplus(z) })
        .sum();
    Ok(sum / logits.len() as f64)
}

pub fn loss_brier(probs: &[f64], y: &[bool]) -> Result<f64> {
    check_batch(probs.len(), y.len())?;
    let sum: f64 = probs
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let d = p - t as u8 as f64;
            d * d
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Margin penalty `ReLU(gamma - (p_base - p_blank))` averaged over the
/// correct samples only.
pub fn loss_rank(probs_base: &[f64], probs_blank: &[f64], y: &[bool], gamma: f64) -> Result<f64> {
    if probs_base.len() != probs_blank.len() || probs_base.len() != y.len() {
        return Err(Error::Dimension {
            expected: probs_base.len(),
            got: probs_blank.len().min(y.len()),
        });
    }
    let mut num = 0.0;
    let mut positives = 0.0;
    for ((&pb, &pk), &t) in probs_base.iter().zip(probs_blank).zip(y) {
        if t {
            num += (gamma - (pb - pk)).max(0.0);
            positives += 1.0;
        }
    }
    Ok(num / (positives + RANK_EPSILON))
}

/// Coefficients of the three-term objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub w_plus: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub bce: f64,
    pub brier: f64,
    pub rank: f64,
    pub total: f64,
}

/// Row-major base and blank hidden states for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub d_h: usize,
    pub base: Vec<f64>,
    pub blank: Vec<f64>,
    pub y: Vec<bool>,
}

impl PairedBatch {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn from_samples<'a, I>(d_h: usize, samples: I) -> Self
    where
        I: IntoIterator<Item = &'a crate::feature_store::PairedSample>,
    {
        let mut batch = PairedBatch {
            d_h,
            base: Vec::new(),
            blank: Vec::new(),
            y: Vec::new(),
        };
        for s in samples {
            batch.base.extend_from_slice(&s.h_base);
            batch.blank.extend_from_slice(&s.h_blank);
            batch.y.push(s.y);
        }
        batch
    }

    fn check(&self, probe: &Probe) -> Result<()> {
        if self.y.is_empty() {
            return Err(Error::Empty("loss needs a nonempty batch".into()));
        }
        if self.d_h != probe.d_h {
            return Err(Error::Dimension {
                expected: probe.d_h,
                got: self.d_h,
            });
        }
        let want = self.rows() * self.d_h;
        if self.base.len() != want || self.blank.len() != want {
            return Err(Error::Dimension {
                expected: want,
                got: self.base.len().min(self.blank.len()),
            });
        }
        Ok(())
    }
}

fn evaluate(
    batch: &PairedBatch,
    probe: &Probe,
    params: &LossParams,
    masks: Option<(&DropoutMasks, &DropoutMasks)>,
    grads: Option<&mut Vec<Dense>>,
) -> Result<LossBreakdown> {
    batch.check(probe)?;
    let rows = batch.rows();
    // Both views always go through the probe so the dropout stream does not
    // depend on whether the rank term is active.
    let base = probe.forward_batch(&batch.base, rows, masks.map(|m| m.0))?;
    let blank = probe.forward_batch(&batch.blank, rows, masks.map(|m| m.1))?;
    let p_base: Vec<f64> = base.logits.iter().map(|&z| stable_sigmoid(z)).collect();
    let p_blank: Vec<f64> = blank.logits.iter().map(|&z| stable_sigmoid(z)).collect();

    let bce = loss_bce(&base.logits, &batch.y, params.w_plus)?;
    let brier = loss_brier(&p_base, &batch.y)?;
    let rank = loss_rank(&p_base, &p_blank, &batch.y, params.gamma)?;
    let out = LossBreakdown {
        bce,
        brier,
        rank,
        total: bce + params.beta * brier + params.lambda * rank,
    };

    let Some(grads) = grads else {
        return Ok(out);
    };
    let n = rows as f64;
    let positives = batch.y.iter().filter(|&&t| t).count() as f64;
    let rank_scale = params.lambda / (positives + RANK_EPSILON);
    let mut d_base = Vec::with_capacity(rows);
    let mut d_blank = vec![0.0; rows];
    for i in 0..rows {
        let (z, p, t) = (base.logits[i], p_base[i], batch.y[i]);
        // d(bce)/dz: w+ (sigma(z) - 1) for positives, sigma(z) for negatives
        let mut d = if t {
            -params.w_plus * stable_sigmoid(-z)
        } else {
            stable_sigmoid(z)
        } / n;
        let dp_dz = p * (1.0 - p);
        d += params.beta * 2.0 * (p - t as u8 as f64) / n * dp_dz;
        if params.lambda != 0.0 && t && params.gamma - (p - p_blank[i]) > 0.0 {
            d -= rank_scale * dp_dz;
            d_blank[i] = rank_scale * p_blank[i] * (1.0 - p_blank[i]);
        }
        d_base.push(d);
    }
    probe.backward(&base, &d_base, grads);
    if params.lambda != 0.0 {
        probe.backward(&blank, &d_blank, grads);
    }
    Ok(out)
}

/// `bce + beta * brier + lambda * rank` from one shared forward pass per
/// view. Train mode draws base masks, then blank masks, from `rng`.
pub fn loss_total<R: Rng>(
    batch: &PairedBatch,
    probe: &Probe,
    params: &LossParams,
    mode: Mode,
    rng: &mut R,
) -> Result<LossBreakdown> {
    match mode {
        Mode::Eval => evaluate(batch, probe, params, None, None),
        Mode::Train => {
            let mb = probe.sample_masks(batch.rows(), rng);
            let mk = probe.sample_masks(batch.rows(), rng);
            evaluate(batch, probe, params, Some((&mb, &mk)), None)
        }
    }
}

/// Loss and its exact gradient with respect to every probe parameter,
/// under fixed dropout masks (`None` means eval mode).
pub fn gradients(
    batch: &PairedBatch,
    probe: &Probe,
    params: &LossParams,
    masks: Option<(&DropoutMasks, &DropoutMasks)>,
) -> Result<(LossBreakdown, Vec<Dense>)> {
    let mut grads = probe.zeros_like();
    let loss = evaluate(batch, probe, params, masks, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Loss under fixed dropout masks.
pub fn loss_with_masks(
    batch: &PairedBatch,
    probe: &Probe,
    params: &LossParams,
    masks: Option<(&DropoutMasks, &DropoutMasks)>,
) -> Result<LossBreakdown> {
    evaluate(batch, probe, params, masks, None)
}
