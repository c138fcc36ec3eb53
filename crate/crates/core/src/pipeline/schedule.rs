//! Step-decay learning rate.

/// `max(lr_end, lr_start * gamma^floor(t / step))` with `gamma` chosen so the
/// last of `total` steps lands on `lr_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub lr_start: f64,
    pub lr_end: f64,
    pub step: usize,
    pub gamma: f64,
}

impl StepDecay {
    pub fn new(lr_start: f64, lr_end: f64, step: usize, total: usize) -> Self {
        let step = step.max(1);
        let n = (total.saturating_sub(1) / step).max(1);
        let gamma = if lr_start > 0.0 { (lr_end / lr_start).powf(1.0 / n as f64) } else { 1.0 };
        Self { lr_start, lr_end, step, gamma }
    }

    pub fn lr(&self, t: usize) -> f64 {
        (self.lr_start * self.gamma.powi((t / self.step) as i32)).max(self.lr_end)
    }
}
