//! Named parameter storage shared by models, optimizers, EMA and checkpoints.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks names and shapes against another set, element by element.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {na}{:?} vs {nb}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copies every tensor whose name also exists in `src` (shapes must match).
    pub fn load_matching(&mut self, src: &ParamSet) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in src.iter() {
            if let Some(id) = self.find(name) {
                if self.get(id).shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: shape {:?} vs {:?}",
                        self.get(id).shape(),
                        t.shape()
                    )));
                }
                *self.get_mut(id) = t.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

/// Lazily places parameters on a tape, either as trainable leaves or as
/// constants.
pub struct Binder<'a> {
    source: Option<&'a ParamSet>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// Parameters become gradient-receiving leaves, routed by slot = id.
    pub fn trainable(set: &'a ParamSet) -> Self {
        Binder {
            source: Some(set),
            vars: vec![None; set.len()],
            trainable: true,
        }
    }

    /// Parameters become constants (no gradient).
    pub fn frozen(set: &'a ParamSet) -> Self {
        Binder {
            source: Some(set),
            vars: vec![None; set.len()],
            trainable: false,
        }
    }

    /// Uses vars already placed on the tape, indexed by parameter id.
    pub fn preset(vars: &[Var]) -> Binder<'static> {
        Binder {
            source: None,
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let set = self.source.expect("preset binder covers every id");
        let value = set.get(id).clone();
        let v = if self.trainable {
            tape.param(value, id.0)
        } else {
            tape.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }
}
