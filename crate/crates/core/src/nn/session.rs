use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::ops::{BatchNormMode, BatchStats};
use crate::tape::{Gradients, Tape, Var};

/// Train mode uses batch statistics and active dropout; eval mode uses
/// running statistics and identity dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics recorded by one BN layer during a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_index: usize,
    pub var_index: usize,
    pub stats: BatchStats,
}

/// State of one forward pass: maps parameters onto tape leaves, collects BN
/// statistics and owns the dropout stream.
pub struct Session<'a> {
    store: &'a ParamStore,
    mode: Mode,
    track_params: bool,
    overrides: Option<&'a [Var]>,
    vars: HashMap<usize, Var>,
    bn_updates: Vec<BnUpdate>,
    pub rng: ChaCha8Rng,
    pub bn_eps: f64,
    /// Test hook: multiplies the CSFEM multi-scale gate by this factor.
    pub msa_gain: f64,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            store,
            mode,
            track_params: mode == Mode::Train,
            overrides: None,
            vars: HashMap::new(),
            bn_updates: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_eps: 1e-5,
            msa_gain: 1.0,
        }
    }

    /// Records parameters as gradient-tracked leaves even in eval mode.
    pub fn tracking_params(mut self, flag: bool) -> Self {
        self.track_params = flag;
        self
    }

    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Uses `vars[i]` for store entry `i` instead of creating leaves.
    pub fn with_param_vars(mut self, vars: &'a [Var]) -> Result<Self> {
        if vars.len() != self.store.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameter vars for {} parameters",
                vars.len(),
                self.store.len()
            )));
        }
        self.overrides = Some(vars);
        Ok(self)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.vars.get(&i) {
            return Ok(v);
        }
        let v = match self.overrides {
            Some(vars) => vars[i],
            None => {
                let t = self.store.tensor(i).clone();
                if self.track_params && self.store.kind(i) == ParamKind::Weight {
                    tape.variable(t)
                } else {
                    tape.constant(t)
                }
            }
        };
        self.vars.insert(i, v);
        Ok(v)
    }

    /// Batch norm with parameters `{prefix}.gamma`, `{prefix}.beta` and
    /// buffers `{prefix}.running_mean`, `{prefix}.running_var`.
    pub fn batch_norm(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(tape, &format!("{prefix}.gamma"))?;
        let beta = self.param(tape, &format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mean_index = self
            .store
            .position(&mean_name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown buffer {mean_name}")))?;
        let var_index = self
            .store
            .position(&var_name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown buffer {var_name}")))?;
        let eps = self.bn_eps;
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, BatchNormMode::Train { eps })?;
                if let Some(stats) = stats {
                    self.bn_updates.push(BnUpdate {
                        mean_index,
                        var_index,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.tensor(mean_index).values();
                let var = self.store.tensor(var_index).values();
                let (y, _) = tape.batch_norm(x, gamma, beta, BatchNormMode::Eval { mean, var, eps })?;
                Ok(y)
            }
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Store indices of the parameters this forward pass touched.
    pub fn used_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().map(|(&i, &v)| (i, v))
    }

    /// Gradients of every touched weight, keyed by store index (ascending).
    pub fn weight_grads(&self, grads: &Gradients) -> Vec<(usize, Vec<f64>)> {
        let mut used: Vec<(usize, Var)> = self
            .used_params()
            .filter(|&(i, _)| self.store.kind(i) == ParamKind::Weight)
            .collect();
        used.sort_unstable_by_key(|(i, _)| *i);
        used.into_iter()
            .map(|(i, v)| (i, grads.get_or_zeros(v, self.store.tensor(i).len())))
            .collect()
    }

    /// Accumulates gradients of every touched weight into `store`, which
    /// must have the same layout as the session's store.
    pub fn write_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, g) in self.weight_grads(grads) {
            store.tensor_mut(i).accumulate_grad(&g)?;
        }
        Ok(())
    }
}

/// Folds recorded batch statistics into the running buffers:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) -> Result<()> {
    for u in updates {
        for (index, batch) in [(u.mean_index, &u.stats.mean), (u.var_index, &u.stats.var)] {
            let cur = store.tensor(index).values();
            let next: Vec<f64> = cur
                .iter()
                .zip(batch.iter())
                .map(|(r, b)| momentum * r + (1.0 - momentum) * b)
                .collect();
            store.set_values(index, next)?;
        }
    }
    Ok(())
}
