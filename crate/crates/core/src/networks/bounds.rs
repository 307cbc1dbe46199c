use serde::{Deserialize, Serialize};

/// Per-dimension observation bounds used to clip forecast states.
///
/// A dimension uses the environment-declared bound when it is finite and
/// otherwise the running min/max of every state observed so far. A dimension
/// with neither is left unclipped on that side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsBounds {
    declared_low: Vec<f64>,
    declared_high: Vec<f64>,
    seen_low: Vec<f64>,
    seen_high: Vec<f64>,
}

impl ObsBounds {
    pub fn declared(low: Vec<f64>, high: Vec<f64>) -> Self {
        assert_eq!(low.len(), high.len());
        let n = low.len();
        Self {
            declared_low: low,
            declared_high: high,
            seen_low: vec![f64::INFINITY; n],
            seen_high: vec![f64::NEG_INFINITY; n],
        }
    }

    /// Bounds tracked purely from observed states.
    pub fn running(dim: usize) -> Self {
        Self::declared(vec![f64::NEG_INFINITY; dim], vec![f64::INFINITY; dim])
    }

    pub fn from_spec(low: Option<&[f64]>, high: Option<&[f64]>, dim: usize) -> Self {
        match (low, high) {
            (Some(l), Some(h)) => Self::declared(l.to_vec(), h.to_vec()),
            _ => Self::running(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.declared_low.len()
    }

    pub fn observe(&mut self, state: &[f64]) {
        for (i, v) in state.iter().enumerate() {
            self.seen_low[i] = self.seen_low[i].min(*v);
            self.seen_high[i] = self.seen_high[i].max(*v);
        }
    }

    /// Effective `(low, high)` for dimension `i`.
    pub fn limits(&self, i: usize) -> (f64, f64) {
        let low = if self.declared_low[i].is_finite() {
            self.declared_low[i]
        } else if self.seen_low[i].is_finite() {
            self.seen_low[i]
        } else {
            f64::NEG_INFINITY
        };
        let high = if self.declared_high[i].is_finite() {
            self.declared_high[i]
        } else if self.seen_high[i].is_finite() {
            self.seen_high[i]
        } else {
            f64::INFINITY
        };
        (low, high)
    }

    pub fn clip(&self, state: &mut [f64]) {
        for (i, v) in state.iter_mut().enumerate() {
            let (lo, hi) = self.limits(i);
            if *v < lo {
                *v = lo;
            } else if *v > hi {
                *v = hi;
            }
        }
    }
}
