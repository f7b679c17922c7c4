use super::{Array, Gradients, Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
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

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.id_of(name).map(|id| &self.values[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.id_of(name).map(move |id| &mut self.values[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn total_size(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

}

/// A tape plus lazily bound parameters from one [`ParamStore`].
///
/// Parameters are pushed as leaves the first time they are used, as
/// gradient leaves when the graph is trainable and as constants otherwise.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradient of every store parameter, zeros for those not on the tape.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Array> {
        self.vars
            .iter()
            .zip(self.store.values())
            .map(|(v, value)| match v {
                Some(v) => grads.wrt(*v),
                None => Array::zeros(value.shape()),
            })
            .collect()
    }
}
