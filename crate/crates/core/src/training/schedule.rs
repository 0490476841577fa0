//! Linear warmup followed by cosine decay.

use std::f64::consts::PI;

/// Learning rate at `step` of `total` optimizer steps.
pub fn lr_schedule(step: u64, total: u64, peak_lr: f64, final_lr: f64, warmup_fraction: f64) -> f64 {
    let total = total.max(1);
    let step = step.min(total);
    let warm = ((warmup_fraction * total as f64).round() as u64).min(total);
    if step < warm {
        return peak_lr * step as f64 / warm as f64;
    }
    if total == warm {
        return peak_lr;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    final_lr + (peak_lr - final_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let f = |s| lr_schedule(s, 1000, 5e-5, 1e-6, 0.05);
        assert_eq!(f(0), 0.0);
        assert_eq!(f(25), 2.5e-5);
        assert_eq!(f(50), 5e-5);
        assert!((f(1000) - 1e-6).abs() < 1e-20);
        assert!((f(525) - (1e-6 + 0.5 * (5e-5 - 1e-6))).abs() < 1e-18);
        assert_eq!(lr_schedule(0, 10, 1e-3, 1e-6, 0.0), 1e-3);
    }

    #[test]
    fn monotone_after_warmup() {
        let lrs: Vec<f64> = (50..=1000).map(|s| lr_schedule(s, 1000, 5e-5, 1e-6, 0.05)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
