use crate::error::{argument, Result};
use crate::vol::VolStructure;

/// Strictly increasing simulation times starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMesh {
    times: Vec<f64>,
    max_step: f64,
}

/// Default distance kept from a singular horizon, as a fraction of it.
pub const DEFAULT_EPS_FRACTION: f64 = 1e-3;

impl TimeMesh {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return argument("time mesh needs at least two points");
        }
        if times[0] != 0.0 {
            return argument(format!("time mesh must start at 0, starts at {}", times[0]));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return argument("time mesh must be finite and strictly increasing");
        }
        let max_step = times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        Ok(Self { times, max_step })
    }

    /// `steps` equal steps on `[0, end]`.
    pub fn uniform(end: f64, steps: usize) -> Result<Self> {
        if !(end > 0.0) || steps == 0 {
            return argument(format!(
                "uniform mesh needs end > 0 and steps >= 1, got ({end}, {steps})"
            ));
        }
        let dt = end / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        times[steps] = end;
        Self::new(times)
    }

    /// Uniform mesh with step `dt`, last point exactly at `end`.
    pub fn with_step(end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return argument("time step must be positive");
        }
        Self::uniform(end, (end / dt).round().max(1.0) as usize)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn max_step(&self) -> f64 {
        self.max_step
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Index of the mesh time closest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        let i = self.times.partition_point(|&s| s < t);
        if i == 0 {
            return 0;
        }
        if i >= self.times.len() {
            return self.times.len() - 1;
        }
        if (self.times[i] - t).abs() < (t - self.times[i - 1]).abs() {
            i
        } else {
            i - 1
        }
    }

    /// Every mesh time must lie in the volatility domain and, for horizons
    /// that are singular, no later than `T - eps`.
    pub fn check_against(&self, v: &VolStructure, eps: f64) -> Result<()> {
        let limit = v.horizon() - eps;
        if self.end() > limit + 1e-12 * v.horizon() {
            return argument(format!(
                "mesh ends at {} but must stay <= T - eps_T = {}",
                self.end(),
                limit
            ));
        }
        v.check_time(self.end())
    }

    /// Keep every `factor`-th point; `steps` must be divisible by `factor`.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return argument(format!("cannot coarsen {} steps by {factor}", self.steps()));
        }
        Self::new(self.times.iter().step_by(factor).copied().collect())
    }
}
