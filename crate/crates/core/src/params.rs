//! Named parameter collections and the optimizers that update them.

use std::collections::BTreeMap;

use coevo_autodiff::{Array, Gradients, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoevoError, Result};

/// An ordered map from parameter name to array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamBundle {
    arrays: BTreeMap<String, Array>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| CoevoError::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| CoevoError::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(Array::is_finite)
    }

    pub fn zeros_like(&self) -> Self {
        let arrays = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
            .collect();
        ParamBundle { arrays }
    }

    /// True when every array matches `other` bit for bit.
    pub fn bitwise_eq(&self, other: &ParamBundle) -> bool {
        self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn check_same_layout(&self, other: &ParamBundle) -> Result<()> {
        if self.arrays.len() != other.arrays.len() {
            return Err(CoevoError::invalid("parameter bundles have different entries"));
        }
        for ((ka, a), (kb, b)) in self.arrays.iter().zip(&other.arrays) {
            if ka != kb || a.shape() != b.shape() {
                return Err(CoevoError::invalid(format!(
                    "parameter layout mismatch: `{ka}` {:?} vs `{kb}` {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// shadow ← decay·shadow + (1−decay)·live, element-wise.
    pub fn ema_update(&mut self, live: &ParamBundle, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(CoevoError::invalid(format!("EMA decay {decay} outside [0, 1)")));
        }
        self.check_same_layout(live)?;
        for (shadow, value) in self.arrays.values_mut().zip(live.arrays.values()) {
            for (s, v) in shadow.data_mut().iter_mut().zip(value.data()) {
                *s = decay * *s + (1.0 - decay) * v;
            }
        }
        Ok(())
    }

    /// Registers every array on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .arrays
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

impl FromIterator<(String, Array)> for ParamBundle {
    fn from_iter<I: IntoIterator<Item = (String, Array)>>(iter: I) -> Self {
        ParamBundle {
            arrays: iter.into_iter().collect(),
        }
    }
}

/// Tape handles for a bound [`ParamBundle`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wraps existing tape variables, e.g. leaves bound for a gradient check.
    pub fn from_vars<'a>(vars: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CoevoError::invalid(format!("missing parameter `{name}`")))
    }

    /// Collects gradients in bundle layout; unreached parameters get zeros.
    pub fn gradients(&self, grads: &Gradients) -> ParamBundle {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// θ ← θ − lr·g
    #[default]
    Sgd,
    /// Decoupled weight decay with first/second moment accumulation.
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer with its moment state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub(crate) first: Option<ParamBundle>,
    pub(crate) second: Option<ParamBundle>,
    pub(crate) steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            first: None,
            second: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moment state for checkpointing, if any has accumulated.
    pub fn moments(&self) -> Option<(&ParamBundle, &ParamBundle)> {
        self.first.as_ref().zip(self.second.as_ref())
    }

    pub fn restore(&mut self, steps: u64, moments: Option<(ParamBundle, ParamBundle)>) {
        self.steps = steps;
        (self.first, self.second) = match moments {
            Some((m, v)) => (Some(m), Some(v)),
            None => (None, None),
        };
    }

    pub fn step(&mut self, params: &mut ParamBundle, grads: &ParamBundle) -> Result<()> {
        params.check_same_layout(grads)?;
        if !grads.is_finite() {
            let bad: Vec<&str> = grads
                .iter()
                .filter(|(_, g)| !g.is_finite())
                .map(|(k, _)| k)
                .collect();
            return Err(CoevoError::NonFinite {
                what: format!("gradient of {}", bad.join(", ")),
                step: self.steps,
            });
        }
        self.steps += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.arrays.values_mut().zip(grads.arrays.values()) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= c.lr * d;
                    }
                }
            }
            OptimizerKind::Adamw => {
                let m = self.first.get_or_insert_with(|| params.zeros_like());
                let v = self.second.get_or_insert_with(|| params.zeros_like());
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in params
                    .arrays
                    .values_mut()
                    .zip(grads.arrays.values())
                    .zip(m.arrays.values_mut())
                    .zip(v.arrays.values_mut())
                {
                    let iter = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                    for ((x, d), (mi, vi)) in iter {
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * d;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * d * d;
                        let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                        *x -= c.lr * (update + c.weight_decay * *x);
                    }
                }
            }
        }
        Ok(())
    }
}
