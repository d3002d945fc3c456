use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdaterKind {
    Sgd,
    Adagrad,
}

/// Learning-rate schedule over the update count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// `rate · gamma^⌊iteration / every⌋`.
    Step { gamma: f64, every: u64 },
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdaterConfig {
    pub kind: UpdaterKind,
    pub learning_rate: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl UpdaterConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        UpdaterConfig {
            kind: UpdaterKind::Sgd,
            learning_rate,
            schedule: Schedule::Constant,
            epsilon: default_epsilon(),
            weight_decay: 0.0,
        }
    }

    pub fn adagrad(learning_rate: f64) -> Self {
        UpdaterConfig {
            kind: UpdaterKind::Adagrad,
            ..UpdaterConfig::sgd(learning_rate)
        }
    }

    /// A zero rate is accepted so that frozen-parameter runs can be expressed.
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::validation(format!("{path}.{field}"), why));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a finite non-negative number");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if let Schedule::Step { gamma, every } = self.schedule {
            if every == 0 || !(gamma > 0.0) {
                return bad("schedule", "step schedule needs gamma > 0 and every >= 1");
            }
        }
        Ok(())
    }

    pub fn rate_at(&self, iteration: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Step { gamma, every } => {
                let steps = (iteration / every.max(1)).min(i32::MAX as u64) as i32;
                self.learning_rate * gamma.powi(steps)
            }
        }
    }

    /// Applies one update in place. `iteration` is the number of updates
    /// already applied to this value.
    pub fn apply(&self, value: &mut [f64], state: &mut UpdaterState, grad: &[f64], iteration: u64) -> Result<()> {
        if value.len() != grad.len() {
            return Err(Error::protocol(format!(
                "gradient of {} elements for a value of {}",
                grad.len(),
                value.len()
            )));
        }
        let rate = self.rate_at(iteration);
        match self.kind {
            UpdaterKind::Sgd => {
                for (v, &g) in value.iter_mut().zip(grad) {
                    *v -= rate * (g + self.weight_decay * *v);
                }
            }
            UpdaterKind::Adagrad => {
                let acc = state.accum.get_or_insert_with(|| vec![0.0; value.len()]);
                if acc.len() != value.len() {
                    return Err(Error::protocol("adagrad accumulator has the wrong length"));
                }
                for ((v, a), &g) in value.iter_mut().zip(acc.iter_mut()).zip(grad) {
                    let g = g + self.weight_decay * *v;
                    *a += g * g;
                    if g != 0.0 {
                        *v -= rate * g / (a.sqrt() + self.epsilon);
                    }
                }
            }
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("updater"));
        }
        Ok(())
    }
}

/// Per-value updater memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdaterState {
    /// AdaGrad's running sum of squared gradients.
    pub accum: Option<Vec<f64>>,
}
