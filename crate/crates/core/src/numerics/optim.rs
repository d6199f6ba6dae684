//! Adam family optimizer with decoupled weight decay, plus the learning
//! rate schedule used by the training loops.

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn new(lr: f32, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        AdamConfig { lr, beta1, beta2, eps: 1e-8, weight_decay }
    }
}

/// Adam with per-parameter first/second moment buffers, allocated on
/// first touch. With `weight_decay > 0` the decay is decoupled from the
/// adaptive step (AdamW); callers flag which parameters decay.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Advance the shared timestep; call once per optimization step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Update one parameter in place. `lr` is the fully scheduled rate for
    /// this parameter (base rate times any layer multiplier); `decay`
    /// selects whether weight decay applies.
    pub fn update(&mut self, index: usize, param: &mut [f32], grad: &[f32], lr: f32, decay: bool) {
        assert_eq!(param.len(), grad.len(), "parameter/gradient length mismatch");
        assert!(self.t > 0, "begin_step must run before update");
        if self.m.len() <= index {
            self.m.resize_with(index + 1, Vec::new);
            self.v.resize_with(index + 1, Vec::new);
        }
        if self.m[index].is_empty() {
            self.m[index] = vec![0.0; param.len()];
            self.v[index] = vec![0.0; param.len()];
        }
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let wd = if decay { self.cfg.weight_decay } else { 0.0 };
        let m = &mut self.m[index];
        let v = &mut self.v[index];
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            param[i] -= lr * (mh / (vh.sqrt() + self.cfg.eps) + wd * param[i]);
        }
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, then cosine decay to
/// `min_lr` at `total` steps. `step` is zero-based.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, base_lr: f32, min_lr: f32) -> f32 {
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f32 / warmup as f32;
    }
    if total <= warmup {
        return base_lr;
    }
    let t = (step - warmup) as f32 / (total - warmup) as f32;
    let t = t.clamp(0.0, 1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f32::consts::PI * t).cos())
}
