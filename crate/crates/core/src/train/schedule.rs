//! Learning-rate schedule: linear warmup then cosine decay to zero.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = LrSchedule { base_lr: 5e-4, warmup_steps: 10, total_steps: 100 };
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(10), 5e-4);
        assert!(s.at(100).abs() < 1e-20);
        assert!((s.at(5) - 2.5e-4).abs() < 1e-18);
        assert!((s.at(55) - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn monotone_after_warmup() {
        let s = LrSchedule { base_lr: 1.0, warmup_steps: 3, total_steps: 40 };
        for t in 3..40 {
            assert!(s.at(t + 1) <= s.at(t));
        }
    }
}
