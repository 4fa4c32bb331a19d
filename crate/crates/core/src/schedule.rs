//! Variance schedules and their derived coefficient tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// `beta`, `alpha`, `alpha_bar` and reverse-noise `sigma` tables for `t = 1..=T`.
///
/// Timesteps are 1-based. `alpha_bar(0)` is defined as 1 (clean data).
/// Respaced schedules remember the original timestep each entry came from, so
/// an external network can still be queried with its native timestep index.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    source_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::validation("T", "schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::validation("beta", format!("{b} not in (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let source_steps = (1..=beta.len()).collect();
        Ok(Self::assemble(beta, alpha, alpha_bar, source_steps))
    }

    fn assemble(beta: Vec<f64>, alpha: Vec<f64>, alpha_bar: Vec<f64>, source_steps: Vec<usize>) -> Self {
        let sigma = (0..alpha.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    ((1.0 - alpha[i]) * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i])).sqrt()
                }
            })
            .collect();
        NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            sigma,
            source_steps,
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::TimestepOutOfRange { t, max: self.len() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Timestep of the originating full-length schedule.
    pub fn source_step(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            self.source_steps[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn source_steps(&self) -> &[usize] {
        &self.source_steps
    }

    /// Respaces onto `steps` (strictly increasing, ending at `T`).
    ///
    /// The kept `alpha_bar` values are copied; `alpha` is recomputed as the ratio
    /// of consecutive kept `alpha_bar`s, except across runs of adjacent original
    /// steps where the original factor is reused verbatim.
    pub fn sub_schedule(&self, steps: &[usize]) -> Result<NoiseSchedule> {
        if steps.is_empty() {
            return Err(Error::validation("steps", "empty step selection"));
        }
        for w in steps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation("steps", "must be strictly increasing"));
            }
        }
        if steps[0] == 0 || *steps.last().unwrap() != self.len() {
            return Err(Error::validation(
                "steps",
                format!("must lie in 1..={} and end at {}", self.len(), self.len()),
            ));
        }
        let mut beta = Vec::with_capacity(steps.len());
        let mut alpha = Vec::with_capacity(steps.len());
        let mut alpha_bar = Vec::with_capacity(steps.len());
        let mut source_steps = Vec::with_capacity(steps.len());
        let mut prev = 0usize;
        for &s in steps {
            let ab = self.alpha_bar(s);
            let (a, b) = if s == prev + 1 {
                (self.alpha(s), self.beta(s))
            } else {
                let a = ab / self.alpha_bar(prev);
                (a, 1.0 - a)
            };
            alpha.push(a);
            beta.push(b);
            alpha_bar.push(ab);
            source_steps.push(self.source_step(s));
            prev = s;
        }
        Ok(Self::assemble(beta, alpha, alpha_bar, source_steps))
    }

    /// CSV dump: `t,beta,alpha,alpha_bar,sigma` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("#schema=dig2dig.schedule.v1\nt,beta,alpha,alpha_bar,sigma\n");
        for t in 1..=self.len() {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.source_step(t),
                self.beta(t),
                self.alpha(t),
                self.alpha_bar(t),
                self.sigma(t)
            );
        }
        out
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

/// Linear beta ramp from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::validation("T", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::validation("beta_start", format!("{beta_start} not in (0, 1)")));
    }
    if !(beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::validation("beta_end", format!("{beta_end} not in (0, 1)")));
    }
    if beta_start > beta_end {
        return Err(Error::validation("beta_start", "must not exceed beta_end"));
    }
    let betas = (0..t)
        .map(|i| {
            if t == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}
