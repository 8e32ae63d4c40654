/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_fraction: warmup_fraction.clamp(0.0, 1.0),
            total_steps,
        }
    }

    /// Step at which the schedule peaks (may be fractional).
    pub fn warmup_end(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// Learning rate at `step`. Steps past `total_steps` clamp to 0 and log a
    /// warning.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step > self.total_steps {
            log::warn!(
                "lr schedule queried at step {step} beyond total {}; clamping to 0",
                self.total_steps
            );
            return 0.0;
        }
        let t = step as f64;
        let w = self.warmup_end();
        let total = self.total_steps as f64;
        if t < w {
            self.base_lr * t / w
        } else if total > w {
            self.base_lr * (total - t) / (total - w)
        } else {
            self.base_lr
        }
    }

    pub fn is_past_end(&self, step: u64) -> bool {
        step > self.total_steps
    }
}
