use super::{Dense, Probe};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Classic Adam with weight decay folded into the gradient as an L2 term.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Dense>,
    pub v: Vec<Dense>,
    pub t: u64,
}

fn update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, wd: f64, c1: f64, c2: f64) {
    for i in 0..theta.len() {
        let gi = g[i] + wd * theta[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
}

impl AdamState {
    pub fn new(probe: &Probe) -> Self {
        AdamState {
            m: probe.zeros_like(),
            v: probe.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, probe: &mut Probe, grads: &[Dense], lr: f64, weight_decay: f64) {
        assert_eq!(grads.len(), probe.layers.len(), "gradient shape does not match probe");
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (l, layer) in probe.layers.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[l], &mut self.v[l], &grads[l]);
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights, lr, weight_decay, c1, c2);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias, lr, weight_decay, c1, c2);
        }
    }
}
