//! Ordered, named parameter storage shared by the encoder, the decoder, the
//! optimizer and the checkpoint format.

use ndtensor::{Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::{DarnError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

/// How a freshly declared parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`, fan-in = product of trailing extents.
    HeNormal,
    Zeros,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.push(NamedTensor {
            name: name.into(),
            value,
            trainable,
        });
    }

    /// Declares and initializes a parameter. Each tensor draws from its own
    /// stream keyed by `(seed, name)`, so adding or removing unrelated
    /// parameters never changes its initial value.
    pub fn declare(&mut self, seed: u64, name: &str, shape: Vec<usize>, init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::HeNormal => {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                let mut r = rng::stream(seed, name);
                (0..n).map(|_| normal.sample(&mut r)).collect()
            }
        };
        self.push(name, Tensor::from_vec(shape, data), true);
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.entries.iter_mut()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.value)
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    /// Sub-set of parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|e| e.name.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// Combined checksum over names and values, in order.
    pub fn checksum(&self) -> u64 {
        self.entries.iter().fold(0u64, |acc, e| {
            rng::mix(acc ^ rng::label_hash(&e.name), e.value.checksum())
        })
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records every parameter on `tape`; trainable ones become gradient leaves
    /// unless `all_constant` is set.
    pub fn bind(&self, tape: &mut Tape, all_constant: bool) -> Bound {
        self.bind_where(tape, all_constant, |_| true)
    }

    /// Like [`ParamSet::bind`] but records only the entries selected by `keep`;
    /// the others stay unbound and are reported missing by [`Bound::get`].
    pub fn bind_where(&self, tape: &mut Tape, all_constant: bool, keep: impl Fn(&NamedTensor) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| keep(e).then(|| tape.leaf(e.value.clone(), e.trainable && !all_constant)))
            .collect();
        Bound {
            names: self.entries.iter().map(|e| e.name.clone()).collect(),
            vars,
        }
    }
}

/// Tape handles for a bound [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Pairs externally recorded handles with parameter names.
    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Bound {
        Bound {
            names,
            vars: vars.into_iter().map(Some).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .and_then(|i| self.vars[i])
            .ok_or_else(|| DarnError::config(format!("missing parameter `{name}`")))
    }

    /// Handle of every entry, `None` where it was not bound.
    pub fn vars(&self) -> &[Option<Var>] {
        &self.vars
    }
}

/// Parameter totals grouped by the first dotted segment of each name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub by_module: Vec<(String, usize)>,
}

pub fn param_count(params: &ParamSet) -> ParamCount {
    let mut by_module: Vec<(String, usize)> = Vec::new();
    for e in params.iter() {
        let module = e.name.split('.').next().unwrap_or("").to_string();
        match by_module.iter_mut().find(|(m, _)| *m == module) {
            Some((_, n)) => *n += e.value.numel(),
            None => by_module.push((module, e.value.numel())),
        }
    }
    ParamCount {
        total: params.numel(),
        by_module,
    }
}
