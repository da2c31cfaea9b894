//! Adaptive feature-decoupled loss: task weights driven by how fast each
//! task's loss is falling, plus a cosine penalty between shared and
//! task-specific features.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Per-task history of window-averaged losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistory {
    pub num_tasks: usize,
    pub temperature: f64,
    pub lambda: Vec<f64>,
    /// Completed windows, oldest first.
    windows: Vec<Vec<f64>>,
    sums: Vec<f64>,
    count: usize,
}

impl LossHistory {
    pub fn new(num_tasks: usize, temperature: f64, lambda: Vec<f64>) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::EmptyList);
        }
        if lambda.len() != num_tasks {
            return Err(Error::LengthMismatch {
                left: lambda.len(),
                right: num_tasks,
            });
        }
        if !(temperature > 0.0) || lambda.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "temperature {temperature} and lambda {lambda:?} must be positive"
            )));
        }
        Ok(Self {
            num_tasks,
            temperature,
            lambda,
            windows: Vec::new(),
            sums: vec![0.0; num_tasks],
            count: 0,
        })
    }

    /// Uniform `lambda = 1`.
    pub fn uniform(num_tasks: usize, temperature: f64) -> Result<Self> {
        Self::new(num_tasks, temperature, vec![1.0; num_tasks])
    }

    /// Adds one step's per-task losses to the open window.
    pub fn record(&mut self, losses: &[f64]) -> Result<()> {
        self.check_len(losses.len())?;
        for (s, l) in self.sums.iter_mut().zip(losses) {
            *s += l;
        }
        self.count += 1;
        Ok(())
    }

    /// Closes the open window, storing its mean. No-op if nothing was recorded.
    pub fn close_window(&mut self) {
        if self.count == 0 {
            return;
        }
        let n = self.count as f64;
        self.windows.push(self.sums.iter().map(|s| s / n).collect());
        self.sums.iter_mut().for_each(|s| *s = 0.0);
        self.count = 0;
    }

    /// Appends an already-averaged window.
    pub fn push_window(&mut self, losses: &[f64]) -> Result<()> {
        self.check_len(losses.len())?;
        self.windows.push(losses.to_vec());
        Ok(())
    }

    pub fn windows(&self) -> &[Vec<f64>] {
        &self.windows
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.num_tasks {
            return Err(Error::LengthMismatch {
                left: n,
                right: self.num_tasks,
            });
        }
        Ok(())
    }

    /// `L_j(t-1) / L_j(t-2)` where `t` is the upcoming window; 1 on cold start
    /// or non-positive losses.
    pub fn change_rate(&self, j: usize) -> f64 {
        self.rate_at(self.windows.len(), j)
    }

    /// Change rate as seen from window `t`: uses completed windows `t-1`, `t-2`.
    fn rate_at(&self, t: usize, j: usize) -> f64 {
        if t < 2 || t > self.windows.len() {
            return 1.0;
        }
        let (prev, older) = (self.windows[t - 1][j], self.windows[t - 2][j]);
        if prev > 0.0 && older > 0.0 {
            prev / older
        } else {
            1.0
        }
    }

    pub fn change_rates(&self) -> Vec<f64> {
        (0..self.num_tasks).map(|j| self.change_rate(j)).collect()
    }

    /// Weights for the upcoming window, from the ratios one window earlier.
    pub fn task_weights(&self) -> Vec<f64> {
        let t = self.windows.len();
        let prev: Vec<f64> = (0..self.num_tasks)
            .map(|j| if t == 0 { 1.0 } else { self.rate_at(t - 1, j) })
            .collect();
        weights_from_rates(&prev, self.temperature)
    }

    /// `L(t) / L(t-1)` for every pair of consecutive completed windows.
    pub fn change_rate_trace(&self) -> Vec<Vec<f64>> {
        (2..=self.windows.len())
            .map(|t| (0..self.num_tasks).map(|j| self.rate_at(t, j)).collect())
            .collect()
    }

    /// One row per completed window: index, losses, ratio against the
    /// previous window (1 for the first), and the weights that window's
    /// ratios produce for the window after next.
    pub fn trace_csv(&self) -> String {
        let n = self.num_tasks;
        let mut out = String::from("window");
        for prefix in ["loss", "ratio", "weight"] {
            for j in 1..=n {
                let _ = write!(out, ",{prefix}_{j}");
            }
        }
        out.push('\n');
        for (i, w) in self.windows.iter().enumerate() {
            let rates: Vec<f64> = (0..n).map(|j| self.rate_at(i + 1, j)).collect();
            let weights = weights_from_rates(&rates, self.temperature);
            let _ = write!(out, "{i}");
            for v in w.iter().chain(&rates).chain(&weights) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// `N softmax(r / T)`.
pub fn weights_from_rates(rates: &[f64], temperature: f64) -> Vec<f64> {
    let n = rates.len() as f64;
    let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rates.iter().map(|r| ((r - max) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| n * x / total).collect()
}

/// `sum_j c_j L_j` with constant coefficients `c_j = w_j lambda_j`.
pub fn d_task_loss(g: &mut Graph, losses: &[Var], w: &[f64], lambda: &[f64]) -> Result<Var> {
    if losses.len() != w.len() || w.len() != lambda.len() {
        return Err(crate::error::shape_err(
            "d_task_loss",
            format!("{} losses, {} weights, {} lambdas", losses.len(), w.len(), lambda.len()),
        ));
    }
    let (first, rest) = losses.split_first().ok_or(Error::EmptyList)?;
    let mut acc = g.scale(*first, w[0] * lambda[0]);
    for (j, l) in rest.iter().enumerate() {
        let term = g.scale(*l, w[j + 1] * lambda[j + 1]);
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecoupleMode {
    #[default]
    AbsCos,
    Cos,
    CosSquared,
}

impl std::str::FromStr for DecoupleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs-cos" => Ok(DecoupleMode::AbsCos),
            "cos" => Ok(DecoupleMode::Cos),
            "cos2" | "cos-squared" => Ok(DecoupleMode::CosSquared),
            _ => Err(Error::InvalidConfig(format!("unknown decouple mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for DecoupleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoupleMode::AbsCos => "abs-cos",
            DecoupleMode::Cos => "cos",
            DecoupleMode::CosSquared => "cos2",
        })
    }
}

/// `sum_j m(cos(f_sh, f_sp_j))`.
pub fn decouple_loss(g: &mut Graph, f_sh: Var, f_sp: &[Var], mode: DecoupleMode) -> Result<Var> {
    let mut terms = Vec::with_capacity(f_sp.len());
    for &f in f_sp {
        let c = g.cosine(f_sh, f, COSINE_EPS)?;
        terms.push(match mode {
            DecoupleMode::AbsCos => g.abs(c),
            DecoupleMode::Cos => c,
            DecoupleMode::CosSquared => g.mul(c, c)?,
        });
    }
    let (first, rest) = terms.split_first().ok_or(Error::EmptyList)?;
    let mut acc = *first;
    for t in rest {
        acc = g.add(acc, *t)?;
    }
    Ok(acc)
}

/// `L_D + mu L_dec`.
pub fn afd_total(g: &mut Graph, d_task: Var, decouple: Var, mu: f64) -> Result<Var> {
    let d = g.scale(decouple, mu);
    g.add(d_task, d)
}

/// Linear ramp of the decoupling coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoupleConfig {
    pub mu0: f64,
    pub mu_max: f64,
    /// Fraction of training over which `mu` rises from `mu0` to `mu_max`.
    pub ramp: f64,
    pub mode: DecoupleMode,
}

impl Default for DecoupleConfig {
    fn default() -> Self {
        Self {
            mu0: 0.01,
            mu_max: 0.1,
            ramp: 1.0,
            mode: DecoupleMode::AbsCos,
        }
    }
}

impl DecoupleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu0 >= 0.0 && self.mu0 <= self.mu_max && self.mu_max.is_finite()) || !(self.ramp >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= mu0 <= mu_max and ramp >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `mu` at `step` of `total` steps.
    pub fn mu(&self, step: usize, total: usize) -> f64 {
        let span = self.ramp * total as f64;
        if span <= 0.0 {
            return self.mu_max;
        }
        let frac = (step as f64 / span).min(1.0);
        self.mu0 + (self.mu_max - self.mu0) * frac
    }
}
