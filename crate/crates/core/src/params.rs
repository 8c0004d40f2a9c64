//! Named parameter registry, running statistics, and the forward context
//! that binds them onto a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{BnMode, BnUpdate, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

/// Initializer recorded alongside each parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He/Kaiming uniform, bound `sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, used for conv biases.
    FanInUniform { fan_in: usize },
    Constant(f32),
}

impl Init {
    pub fn sample(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match *self {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f32).sqrt();
                Tensor::uniform(shape, -bound, bound, rng)
            }
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                Tensor::uniform(shape, -bound, bound, rng)
            }
            Init::Constant(v) => Tensor::full(shape, v),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct RunningStats {
    pub name: String,
    pub mean: Tensor,
    pub var: Tensor,
}

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<RunningStats>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            init,
            frozen: false,
        });
        Ok(id)
    }

    pub fn add_init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let value = init.sample(shape, rng);
        self.add(name, value, init)
    }

    pub fn add_running_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn all_stats(&self) -> impl Iterator<Item = &RunningStats> {
        self.stats.iter()
    }

    pub fn all_stats_mut(&mut self) -> impl Iterator<Item = &mut RunningStats> {
        self.stats.iter_mut()
    }

    /// Total number of trainable scalars (running statistics excluded).
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Freezes (or thaws) every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds every parameter to `tape` as a leaf; frozen ones do not require grad.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), !p.frozen))
            .collect()
    }

    /// Adds tape gradients of `bound` leaves into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = tape.grad(v) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Exponential running-statistics update with momentum [`BN_MOMENTUM`].
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let s = &mut self.stats[u.key];
            for (r, &b) in s.mean.data_mut().iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in s.var.data_mut().iter_mut().zip(&u.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Every stored tensor in registration order, running statistics last as
    /// `<name>.running_mean` / `<name>.running_var`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
        for s in &self.stats {
            out.push((format!("{}.running_mean", s.name), &s.mean));
            out.push((format!("{}.running_var", s.name), &s.var));
        }
        out
    }

    /// Replaces the tensor called `name` (see [`ParamStore::named_tensors`]).
    pub fn set_named(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot: &mut Tensor = if let Some(id) = self.find(name) {
            &mut self.params[id.0].value
        } else {
            let found = self.stats.iter_mut().find_map(|s| {
                if name.strip_suffix(".running_mean") == Some(s.name.as_str()) {
                    Some(&mut s.mean)
                } else if name.strip_suffix(".running_var") == Some(s.name.as_str()) {
                    Some(&mut s.var)
                } else {
                    None
                }
            });
            found.ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?
        };
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during a forward pass: the tape, the parameter
/// store, the tape handles of the bound parameters, and the mode.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    vars: &'a [Var],
    mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, vars: &'a [Var], mode: Mode) -> Self {
        debug_assert_eq!(store.len(), vars.len());
        Ctx {
            tape,
            store,
            vars,
            mode,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn bn_mode(&self, id: StatsId) -> BnMode<'a> {
        let store: &'a ParamStore = self.store;
        match self.mode {
            Mode::Train => BnMode::Train { key: Some(id.0) },
            Mode::Eval => BnMode::Eval {
                mean: store.stats[id.0].mean.data(),
                var: store.stats[id.0].var.data(),
            },
        }
    }
}
