use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique; re-registering is a bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Trainability mask selecting parameters whose name satisfies `pred`.
    pub fn mask(&self, pred: impl Fn(&str) -> bool) -> Vec<bool> {
        self.names.iter().map(|n| pred(n)).collect()
    }

    /// Replaces every value with the same-named entry of `entries`.
    /// The name sets must agree and shapes must match.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.values.len()
            )));
        }
        let mut staged = self.values.clone();
        for (name, t) in entries {
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor `{name}` is not a model parameter")))?;
            if t.shape() != staged[i].shape() {
                return Err(Error::Config(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    staged[i].shape()
                )));
            }
            staged[i] = t.clone();
        }
        self.values = staged;
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Copy of the store with every value replaced, in id order.
    pub fn with_values(&self, values: &[Tensor]) -> Result<ParamStore> {
        let named: Vec<(String, Tensor)> = self.names.iter().cloned().zip(values.iter().cloned()).collect();
        if named.len() != self.len() {
            return Err(Error::Config(format!("{} values for {} parameters", values.len(), self.len())));
        }
        let mut out = self.clone();
        out.load(&named)?;
        Ok(out)
    }

    /// Adds independent Gaussian noise to every entry.
    pub fn perturb<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for v in &mut self.values {
            let noise = Tensor::randn(v.shape(), std, rng);
            v.add_assign(&noise).expect("same shape");
        }
    }
}

/// Per-parameter gradient sums aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g).expect("gradient shape"),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// A tape bound to a parameter store for one forward/backward pass.
///
/// Each parameter enters the tape at most once, as a leaf that requires a
/// gradient only when `trainable` marks it so.
pub struct Ctx<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    bound: Vec<Option<Var>>,
}

impl<'p> Ctx<'p> {
    pub fn new(store: &'p ParamStore, trainable: Option<&'p [bool]>) -> Self {
        if let Some(m) = trainable {
            assert_eq!(m.len(), store.len(), "trainability mask length");
        }
        Self { tape: Tape::new(), store, trainable, bound: vec![None; store.len()] }
    }

    /// Context in which nothing requires a gradient.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::new(store, None)
    }

    /// Runs `f` against an existing tape, binding parameters as constants.
    /// Used to differentiate with respect to non-parameter inputs.
    pub fn scoped<T>(store: &'p ParamStore, tape: &mut Tape, f: impl FnOnce(&mut Ctx<'p>) -> T) -> T {
        let mut cx = Ctx::inference(store);
        std::mem::swap(&mut cx.tape, tape);
        let out = f(&mut cx);
        std::mem::swap(&mut cx.tape, tape);
        out
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.trainable.is_some_and(|m| m[id.0]);
        let v = self.tape.leaf(self.store.get(id).clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Adds the gradients of every bound parameter into `buf`.
    pub fn collect_grads(&self, grads: &Gradients, buf: &mut GradBuffer) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = grads.get(*v) {
                    buf.add(ParamId(i), g);
                }
            }
        }
    }
}
