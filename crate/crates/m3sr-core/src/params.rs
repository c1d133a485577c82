//! Flat parameter registry. Model structures hold `ParamId` handles; the
//! tensors themselves live here under stable dotted names (the checkpoint
//! key space). A `Ctx` binds parameters to tape leaves on demand during a
//! forward pass.

use rand::Rng;

use crate::tape::{Tape, VarId};
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    tensors: Vec<TensorF>,
    names: Vec<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, tensor: TensorF) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    /// Weight tensor with entries uniform in ±1/sqrt(fan_in).
    pub fn alloc_fan_in<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.alloc(name, TensorF::uniform(shape, -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &TensorF {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut TensorF {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// One forward pass: lazily inserts parameter leaves into the tape and
/// memoizes the binding. Bindings can be pre-seeded to route a joint
/// gradient-check variable into the model.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamSet,
    bound: Vec<Option<VarId>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamSet) -> Self {
        let bound = vec![None; params.len()];
        Ctx { tape, params, bound }
    }

    /// Tape variable for a parameter, inserting the leaf on first use.
    pub fn p(&mut self, id: ParamId) -> VarId {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Routes a parameter to an existing tape variable (joint checks,
    /// weight surgery in tests).
    pub fn bind(&mut self, id: ParamId, var: VarId) {
        self.bound[id.0] = Some(var);
    }

    pub fn binding(&self, id: ParamId) -> Option<VarId> {
        self.bound[id.0]
    }

    /// All parameters touched by the pass, in registry order.
    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, VarId)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
    }
}
