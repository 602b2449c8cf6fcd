//! Adam over flat parameter vectors and the exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Exponential decay from `lr_start` to `lr_end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: usize) -> Result<Self> {
        if !(lr_start > 0.0 && lr_end > 0.0 && lr_start.is_finite() && lr_end.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rates must be positive, got {lr_start} and {lr_end}"
            )));
        }
        Ok(Self {
            lr_start,
            lr_end,
            total_steps,
        })
    }
}

/// `lr_start · (lr_end / lr_start)^(step / total)`. Steps at or past the end
/// return `lr_end` exactly.
pub fn lr_at(schedule: &Schedule, step: usize) -> f64 {
    if step == 0 {
        return schedule.lr_start;
    }
    if step >= schedule.total_steps {
        return schedule.lr_end;
    }
    let t = step as f64 / schedule.total_steps as f64;
    schedule.lr_start * (schedule.lr_end / schedule.lr_start).powf(t)
}

/// First and second moments for one flat parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::mismatch(
                "adam parameter group",
                self.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }

    /// Zeroes the moments of `count` consecutive entries starting at `start`.
    pub fn reset_range(&mut self, start: usize, count: usize) {
        self.m[start..start + count].fill(0.0);
        self.v[start..start + count].fill(0.0);
    }

    /// Grows (with zero moments) or truncates to `len` entries.
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_are_exact() {
        let s = Schedule::new(1e-1, 1e-2, 1000).unwrap();
        assert_eq!(lr_at(&s, 0), 1e-1);
        assert_eq!(lr_at(&s, 1000), 1e-2);
        assert_eq!(lr_at(&s, 5000), 1e-2);
        assert!((lr_at(&s, 500) - (1e-1f64 * 1e-2).sqrt()).abs() < 1e-15);
        let s = Schedule::new(1e-2, 5e-3, 7).unwrap();
        assert_eq!((lr_at(&s, 0), lr_at(&s, 7)), (1e-2, 5e-3));
        assert!(Schedule::new(0.0, 1.0, 3).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(3);
        let mut p = vec![0.1, 0.2, 0.3];
        st.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + ε)
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0], 0.05).unwrap();
        assert_eq!(p[0], -0.05 * 1.0 / (1.0 + EPSILON));
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        st.step(&mut p, &[-3.0], 0.05).unwrap();
        assert!(p[0] > 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut st = AdamState::new(2);
        assert!(st.step(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
        assert!(st.step(&mut [0.0; 2], &[0.0; 1], 0.1).is_err());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut st = AdamState::new(4);
            let mut p = vec![0.3, -0.1, 0.7, 0.0];
            for k in 0..50 {
                let g: Vec<f64> = p.iter().enumerate().map(|(i, x)| (x - 0.1 * i as f64) * (1.0 + k as f64 * 0.01)).collect();
                st.step(&mut p, &g, 0.01).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(start in 1e-4..1.0f64, ratio in 0.01..0.99f64, total in 1usize..500) {
            let s = Schedule::new(start, start * ratio, total).unwrap();
            let lrs: Vec<f64> = (0..=total).map(|k| lr_at(&s, k)).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(lrs[0], s.lr_start);
            prop_assert_eq!(lrs[total], s.lr_end);
        }
    }
}
