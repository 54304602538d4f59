//! Named parameter collections and SGD with momentum.

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named, shaped parameter. Frozen parameters are recorded on tapes as
/// constants and are never touched by [`Sgd::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered parameter collection of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`, trainable ones as differentiable
    /// leaves and frozen ones as constants.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }
}

/// Gradient sums aligned with a [`ParamSet`], accumulated over several tapes.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(params: &ParamSet) -> Self {
        GradBuffer {
            grads: vec![None; params.len()],
        }
    }

    /// Adds `scale · ∂loss/∂p` for every bound parameter that received a gradient.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &[Var], scale: f64) {
        for (slot, &v) in self.grads.iter_mut().zip(bound) {
            let Some(g) = grads.get(v) else { continue };
            match slot {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b),
                None => *slot = Some(g.data().iter().map(|b| scale * b).collect()),
            }
        }
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.grads.get(index).and_then(|g| g.as_deref())
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v − η·g; p ← p + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradBuffer) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::invalid("optimizer state does not match parameter set"));
        }
        // Validate before mutating so a failed step leaves everything untouched.
        for (i, p) in params.iter().enumerate() {
            if p.trainable && grads.get(i).is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        let SgdConfig {
            learning_rate: lr,
            momentum: mu,
            ..
        } = self.cfg;
        for (i, (p, v)) in params.iter_mut().zip(&mut self.velocity).enumerate() {
            if !p.trainable {
                continue;
            }
            let g = grads.get(i).expect("checked above");
            for ((pv, vv), gv) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = mu * *vv - lr * gv;
                if *vv != 0.0 {
                    *pv += *vv;
                }
            }
        }
        Ok(())
    }
}
